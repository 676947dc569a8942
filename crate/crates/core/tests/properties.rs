use proptest::prelude::*;

use rwre_core::cgf::{EmpiricalCgf, TiltPoint};
use rwre_core::convex::{legendre, LegendreOptions, LogCosh, SmoothConvexFn};
use rwre_core::dataset::{merge_atoms, Atom, SampleSet};
use rwre_core::env::{classify_environment, Direction, EnvironmentModel, MAX_DIM};
use rwre_core::stats::wilson_interval;
use rwre_core::verify::exact_point_law;
use rwre_core::walk::{detect_regenerations, increments, Trajectory};

fn trajectory_1d(steps: &[bool]) -> Trajectory {
    let mut positions = vec![[0; MAX_DIM]];
    let mut x = 0;
    for &up in steps {
        x += if up { 1 } else { -1 };
        let mut p = [0; MAX_DIM];
        p[0] = x;
        positions.push(p);
    }
    Trajectory { dim: 1, positions, seed: 0, stream: 0 }
}

fn transition(raw: &[f64]) -> Vec<f64> {
    let total: f64 = raw.iter().sum();
    raw.iter().map(|r| r / total).collect()
}

fn atoms_strategy() -> impl Strategy<Value = Vec<Atom>> {
    prop::collection::vec((-3i32..=3, -3i32..=3, 0u64..6, 1u64..50), 1..12).prop_map(|raw| {
        raw.into_iter()
            .map(|(a, b, extra, count)| {
                let mut dx = [0; MAX_DIM];
                dx[0] = a;
                dx[1] = b;
                let dtau = (a.unsigned_abs() + b.unsigned_abs()) as u64 + extra + 1;
                Atom { dx, dtau, count }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn regeneration_times_are_running_maxima_never_undercut(steps in prop::collection::vec(prop::bool::weighted(0.7), 1..300)) {
        let traj = trajectory_1d(&steps);
        let dir = Direction::axis(1, 0).unwrap();
        let rec = detect_regenerations(&traj, &dir, 0).unwrap();
        let level = |t: usize| traj.position(t)[0];
        for w in rec.times.windows(2) {
            prop_assert!(w[0] < w[1]);
        }
        for &t in &rec.times {
            prop_assert!((0..t).all(|s| level(s) < level(t)));
            prop_assert!((t..=traj.horizon()).all(|s| level(s) >= level(t)));
        }
    }

    #[test]
    fn longer_lookahead_confirms_a_prefix(steps in prop::collection::vec(prop::bool::weighted(0.7), 1..300), a in 0usize..100, b in 0usize..100) {
        let traj = trajectory_1d(&steps);
        let dir = Direction::axis(1, 0).unwrap();
        let (short, long) = (a.min(b), a.max(b));
        let rs = detect_regenerations(&traj, &dir, short).unwrap();
        let rl = detect_regenerations(&traj, &dir, long).unwrap();
        prop_assert_eq!(&rs.times, &rl.times);
        prop_assert!(rl.confirmed_upto <= rs.confirmed_upto);
    }

    #[test]
    fn increments_telescope(steps in prop::collection::vec(prop::bool::weighted(0.7), 1..300)) {
        let traj = trajectory_1d(&steps);
        let dir = Direction::axis(1, 0).unwrap();
        let rec = detect_regenerations(&traj, &dir, 0).unwrap();
        let incs = increments(&traj, &rec);
        let c = rec.confirmed();
        prop_assert_eq!(incs.len(), c.len().saturating_sub(1));
        if c.len() >= 2 {
            let dx: i32 = incs.iter().map(|r| r.dx[0]).sum();
            let dt: u64 = incs.iter().map(|r| r.dtau).sum();
            prop_assert_eq!(dx, traj.position(c[c.len() - 1])[0] - traj.position(c[0])[0]);
            prop_assert_eq!(dt as usize, c[c.len() - 1] - c[0]);
            for r in &incs {
                prop_assert!(r.dx[0] >= 1);
                prop_assert!(r.dtau >= r.dx[0] as u64);
            }
        }
    }

    #[test]
    fn merge_atoms_ignores_order_and_keeps_mass(atoms in atoms_strategy(), split in 0usize..12) {
        let split = split.min(atoms.len());
        let (a, b) = atoms.split_at(split);
        let ab = merge_atoms(&[a.to_vec(), b.to_vec()]);
        let ba = merge_atoms(&[b.to_vec(), a.to_vec()]);
        prop_assert_eq!(&ab, &ba);
        let mass = |xs: &[Atom]| xs.iter().map(|x| x.count).sum::<u64>();
        prop_assert_eq!(mass(&ab), mass(&atoms));
    }

    #[test]
    fn empirical_cgf_is_midpoint_convex(
        atoms in atoms_strategy(),
        p in prop::array::uniform3(-0.3f64..0.3),
        q in prop::array::uniform3(-0.3f64..0.3),
    ) {
        let cgf = EmpiricalCgf::from_atoms(2, &atoms, false).unwrap().with_ess_floor(0.0);
        let tilt = |x: [f64; 3]| TiltPoint::new(vec![x[0], x[1]], x[2]);
        let mid = [(p[0] + q[0]) / 2.0, (p[1] + q[1]) / 2.0, (p[2] + q[2]) / 2.0];
        let (fp, fq, fm) = (cgf.eval(&tilt(p)).unwrap(), cgf.eval(&tilt(q)).unwrap(), cgf.eval(&tilt(mid)).unwrap());
        prop_assert!(fm.value <= 0.5 * (fp.value + fq.value) + 1e-12);
        prop_assert!(cgf.eval(&tilt([0.0; 3])).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn legendre_satisfies_young_fenchel(
        x in prop::array::uniform2(-0.9f64..0.9),
        y in prop::array::uniform2(-4.0f64..4.0),
    ) {
        let f = LogCosh { dim: 2 };
        let star = legendre(&f, &x, &LegendreOptions::default()).unwrap();
        prop_assert!(star.converged);
        let fy = f.evaluate(&y).unwrap().value;
        prop_assert!(star.value >= x[0] * y[0] + x[1] * y[1] - fy - 1e-10);
        let fa = f.evaluate(&star.argmax).unwrap().value;
        let dot = x[0] * star.argmax[0] + x[1] * star.argmax[1];
        prop_assert!((star.value - (dot - fa)).abs() < 1e-9);
    }

    #[test]
    fn classification_is_invariant_under_axis_swap_and_reflection(
        raw in prop::collection::vec(prop::array::uniform4(0.05f64..1.0), 1..4),
    ) {
        let comps: Vec<Vec<f64>> = raw.iter().map(|r| transition(r)).collect();
        let weight = 1.0 / comps.len() as f64;
        let build = |f: &dyn Fn(&[f64]) -> Vec<f64>| {
            EnvironmentModel::mixture(comps.iter().map(|p| (weight, f(p))).collect()).unwrap()
        };
        let base = classify_environment(&build(&|p| p.to_vec()), None).unwrap().label;
        let swapped = classify_environment(&build(&|p| vec![p[2], p[3], p[0], p[1]]), None).unwrap().label;
        let mirrored = classify_environment(&build(&|p| vec![p[1], p[0], p[2], p[3]]), None).unwrap().label;
        prop_assert_eq!(&base, &swapped);
        prop_assert_eq!(&base, &mirrored);
    }

    #[test]
    fn exact_point_law_is_a_distribution_on_reachable_sites(p in 0.05f64..0.95, q in 0.05f64..0.95, n in 1usize..12) {
        let model = EnvironmentModel::mixture(vec![(0.5, vec![p, 1.0 - p]), (0.5, vec![q, 1.0 - q])]).unwrap();
        let law = exact_point_law(&model, n).unwrap();
        let total: f64 = law.values().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        for y in law.keys() {
            prop_assert!(y[0].unsigned_abs() as usize <= n);
            prop_assert_eq!((y[0] + n as i32).rem_euclid(2), 0);
        }
    }

    #[test]
    fn wilson_interval_brackets_the_frequency(trials in 1u64..100_000, frac in 0.0f64..=1.0) {
        let hits = (frac * trials as f64).floor() as u64;
        let (lo, hi) = wilson_interval(hits, trials, 1.96);
        let p = hits as f64 / trials as f64;
        prop_assert!(0.0 <= lo && lo <= p + 1e-12 && p <= hi + 1e-12 && hi <= 1.0);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn dataset_survives_a_binary_round_trip(seed in any::<u64>(), count in 1usize..200) {
        let model = EnvironmentModel::non_nestling_default();
        let dir = Direction::new(vec![1, 0]).unwrap();
        let set = SampleSet::harvest(&model, &dir, count, None, seed, None).unwrap();
        prop_assert_eq!(set.len(), count);
        let mut buf = Vec::new();
        set.write_to(&mut buf).unwrap();
        let back = SampleSet::read_from(buf.as_slice()).unwrap();
        prop_assert_eq!(back, set);
    }
}
