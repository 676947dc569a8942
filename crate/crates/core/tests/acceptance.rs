//! Acceptance suite: twelve numerical criteria, one PASS/FAIL line each.
//! Exits nonzero when any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use rwre_core::convex::{verify_duality, LogCosh, Quadratic};
use rwre_core::dataset::{harvest_pooled, velocity};
use rwre_core::ratefn::{
    gamma_map, grad_j_fd, perspective_value, rate_i, rate_i1, rate_j, region_constants, zero_along_ray,
};
use rwre_core::verify::{
    chebyshev_check, compare_directions, convolve_law, exact_increment_law, exact_point_law, exact_point_prob,
    joint_frequencies, ldp_sandwich, mc_point_law, DirectionOptions, JointCase, SandwichOptions,
};
use rwre_core::{Direction, EmpiricalCgf, EnvironmentModel, RegionConstants, SampleSet};

const K_SMALL: usize = 100_000;

struct Fixture {
    cgf: EmpiricalCgf,
    dir: Direction,
    vhat: Vec<f64>,
    consts: RegionConstants,
}

fn fixture(model: EnvironmentModel, seed: u64) -> Fixture {
    let dir = Direction::axis(2, 0).unwrap();
    let set = SampleSet::harvest(&model, &dir, K_SMALL, None, seed, None).unwrap();
    let cgf = EmpiricalCgf::new(&set).unwrap();
    let vhat = velocity(&set).unwrap().v;
    let consts = region_constants(&set).unwrap();
    Fixture { cgf, dir, vhat, consts }
}

fn non_nestling() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| fixture(EnvironmentModel::non_nestling_default(), 2024))
}

fn nestling() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| fixture(EnvironmentModel::nestling_triangle(), 2025))
}

/// One-dimensional p = 0.9 walk with 10^8 pooled increments.
fn ballistic() -> &'static (EnvironmentModel, Direction, EmpiricalCgf) {
    static F: OnceLock<(EnvironmentModel, Direction, EmpiricalCgf)> = OnceLock::new();
    F.get_or_init(|| {
        let model = EnvironmentModel::ballistic_1d(0.9).unwrap();
        let dir = Direction::axis(1, 0).unwrap();
        let (atoms, nestling) = harvest_pooled(&model, &dir, 100, 1_000_000, 2026).unwrap();
        let cgf = EmpiricalCgf::from_atoms(1, &atoms, nestling).unwrap();
        (model, dir, cgf)
    })
}

type Outcome = (bool, String);

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|c| c * c).sum::<f64>().sqrt()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn tilts() -> Vec<Vec<f64>> {
    vec![vec![0.02, 0.0], vec![-0.02, 0.0], vec![0.0, 0.02], vec![0.0, -0.02]]
}

// 1. Exact small-n laws sum to one and Monte Carlo frequencies agree.
fn normalization() -> Outcome {
    let d1 = EnvironmentModel::mixture(vec![(0.5, vec![0.7, 0.3]), (0.5, vec![0.4, 0.6])]).unwrap();
    let d2 = EnvironmentModel::non_nestling_default();
    let mut worst: f64 = 0.0;
    for n in 0..=12usize {
        let s: f64 = (-(n as i32)..=n as i32).map(|y| exact_point_prob(&d1, n, &[y]).unwrap()).sum();
        worst = worst.max((s - 1.0).abs());
    }
    for n in 0..=8usize {
        let m = n as i32;
        let sites: Vec<[i32; 2]> = (-m..=m)
            .flat_map(|a| (-m..=m).map(move |b| [a, b]))
            .filter(|y| y[0].abs() + y[1].abs() <= m)
            .collect();
        let s: f64 = sites.par_iter().map(|y| exact_point_prob(&d2, n, y).unwrap()).sum();
        worst = worst.max((s - 1.0).abs());
    }
    let mut z_max: f64 = 0.0;
    let mut stray = 0u64;
    for (model, n) in [(&d1, 12usize), (&d2, 8usize)] {
        let trials = 1_000_000u64;
        let exact = exact_point_law(model, n).unwrap();
        let freq = mc_point_law(model, n, trials, 77).unwrap();
        for (y, &c) in &freq {
            if exact.get(y).copied().unwrap_or(0.0) == 0.0 {
                stray += c;
            }
        }
        for (y, &p) in &exact {
            if p <= 0.0 {
                continue;
            }
            let f = freq.get(y).copied().unwrap_or(0) as f64 / trials as f64;
            z_max = z_max.max((f - p).abs() / (p * (1.0 - p) / trials as f64).sqrt());
        }
    }
    (
        worst <= 1e-10 && z_max <= 4.0 && stray == 0,
        format!("max |sum - 1| = {worst:.1e} (tol 1e-10), MC max z = {z_max:.2} (tol 4), stray hits {stray}"),
    )
}

// 2. J vanishes at the estimated velocity.
fn zero_at_velocity() -> Outcome {
    let f = non_nestling();
    let r = rate_j(&f.cgf, &f.dir, &f.vhat, &f.consts).unwrap();
    (r.j <= 1e-3, format!("J(v_hat) = {:.2e} at v_hat = {:?} (tol 1e-3)", r.j, f.vhat))
}

// 3. grad J(gamma(eta0)) = eta0, by the dual route and by finite differences.
fn gradient_identity() -> Outcome {
    let f = non_nestling();
    let mut dual_err: f64 = 0.0;
    let mut fd_ok = true;
    let mut fd_err: f64 = 0.0;
    for eta0 in tilts() {
        let g = gamma_map(&f.cgf, &eta0).unwrap();
        let r = rate_j(&f.cgf, &f.dir, &g.v, &f.consts).unwrap();
        dual_err = dual_err.max(max_abs_diff(&r.eta_star, &eta0));
        let h = 1e-4 * norm(&g.v);
        let fd1 = grad_j_fd(&f.cgf, &f.dir, &g.v, h).unwrap();
        let fd2 = grad_j_fd(&f.cgf, &f.dir, &g.v, 2.0 * h).unwrap();
        for i in 0..2 {
            let noise = (fd1[i] - fd2[i]).abs();
            let e = (fd1[i] - eta0[i]).abs();
            fd_err = fd_err.max(e);
            fd_ok &= e <= f64::max(1e-4, 3.0 * noise);
        }
    }
    (
        dual_err <= 1e-3 && fd_ok,
        format!("dual max err {dual_err:.2e} (tol 1e-3), finite-difference max err {fd_err:.2e} (tol max(1e-4, 3 noise))"),
    )
}

// 4. The minimising s at gamma(eta0) is s0(eta0), and it is a strict minimum.
fn minimizer_identity() -> Outcome {
    let f = non_nestling();
    let mut rel: f64 = 0.0;
    let mut strict = true;
    for eta0 in tilts() {
        let g = gamma_map(&f.cgf, &eta0).unwrap();
        let r = rate_j(&f.cgf, &f.dir, &g.v, &f.consts).unwrap();
        rel = rel.max((r.s_star - g.s0).abs() / g.s0);
        let at = perspective_value(&f.cgf, &g.v, g.s0).unwrap();
        for k in [0.99, 1.01] {
            strict &= perspective_value(&f.cgf, &g.v, g.s0 * k).unwrap() > at;
        }
    }
    (rel <= 1e-4 && strict, format!("max |s* - s0|/s0 = {rel:.2e} (tol 1e-4), strict minimum at s0(1 +- 0.01): {strict}"))
}

// 5. In the nestling case J vanishes on the segment from 0 to v_hat.
fn nestling_zero_ray() -> Outcome {
    let f = nestling();
    let mut worst: f64 = 0.0;
    for theta in [0.25, 0.5, 0.75, 1.0] {
        let v: Vec<f64> = f.vhat.iter().map(|c| theta * c).collect();
        worst = worst.max(rate_j(&f.cgf, &f.dir, &v, &f.consts).unwrap().j);
    }
    (worst <= 1e-3, format!("max J(theta v_hat) = {worst:.2e} for theta in {{0.25,0.5,0.75,1}} (tol 1e-3)"))
}

// 6. J is positively homogeneous on A-: J(theta v0) = theta J(v0).
fn homogeneity() -> Outcome {
    let f = nestling();
    let c1 = f.consts.c1.unwrap_or(f64::INFINITY);
    // Roots of the spatial marginal on rays through the origin: their images
    // lie on the A0 boundary.
    let roots: Vec<[f64; 2]> = (0..90)
        .filter_map(|i| {
            let a = (4.0 * i as f64).to_radians();
            let u = [a.cos(), a.sin()];
            zero_along_ray(&f.cgf, &u, c1).map(|r| [r * u[0], r * u[1]])
        })
        .collect();
    let stride = (roots.len() / 5).max(1);
    let mut used = 0;
    let mut ok = true;
    let mut worst_excess = f64::NEG_INFINITY;
    for eta0 in roots.iter().step_by(stride) {
        let Ok(g) = gamma_map(&f.cgf, eta0) else { continue };
        let p0 = rate_j(&f.cgf, &f.dir, &g.v, &f.consts).unwrap();
        if !p0.reliable() {
            continue;
        }
        used += 1;
        for theta in [0.3, 0.6, 0.9] {
            let v: Vec<f64> = g.v.iter().map(|x| theta * x).collect();
            let p = rate_j(&f.cgf, &f.dir, &v, &f.consts).unwrap();
            let stat = 3.0 * (p.se.powi(2) + (theta * p0.se).powi(2)).sqrt();
            let tol = 5e-3 * p0.j + stat;
            let err = (p.j - theta * p0.j).abs();
            worst_excess = worst_excess.max(err - tol);
            ok &= err <= tol;
        }
    }
    (
        ok && used >= 3,
        format!("{used} boundary tilts, worst |J(theta v0) - theta J(v0)| - tol = {worst_excess:.2e} (tol 5e-3 J(v0) + 3 se)"),
    )
}

// 7. I1(x) <= min_t I(x, t), with equality (flatness) for t >= h(eta).
fn marginal_inequalities() -> Outcome {
    let f = nestling();
    let tmax = f.cgf.max_dtau() as f64;
    let tgrid: Vec<f64> = (0..40).map(|i| (tmax.ln() * i as f64 / 39.0).exp()).collect();
    let etas: Vec<Vec<f64>> = (0..4)
        .flat_map(|i| (0..5).map(move |j| vec![-0.02 + 0.015 * i as f64, -0.02 + 0.01 * j as f64]))
        .collect();
    let gaps: Vec<f64> = etas
        .par_iter()
        .map(|eta| {
            let (m, _) = f.cgf.marginal(eta).unwrap();
            let i1 = rate_i1(&f.cgf, &m.grad).unwrap().value;
            let min_t = tgrid
                .iter()
                .filter_map(|&t| rate_i(&f.cgf, &m.grad, t).ok().map(|r| r.value))
                .fold(f64::INFINITY, f64::min);
            i1 - min_t
        })
        .collect();
    let worst_ineq = gaps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut worst_flat: f64 = 0.0;
    for eta in [[0.0, 0.0], [-0.02, 0.0], [-0.01, 0.01], [0.01, -0.01], [-0.015, -0.005]] {
        let (m, h) = f.cgf.marginal(&eta).unwrap();
        let i1 = rate_i1(&f.cgf, &m.grad).unwrap().value;
        for k in [1.0, 1.25, 1.5, 2.0, 3.0] {
            let it = rate_i(&f.cgf, &m.grad, k * h).unwrap().value;
            worst_flat = worst_flat.max((it - i1).abs());
        }
    }
    (
        worst_ineq <= 1e-8 && worst_flat <= 1e-8,
        format!("max I1 - min_t I = {worst_ineq:.2e}, max flatness error {worst_flat:.2e} (tol 1e-8)"),
    )
}

// 8. P(X_{tau_k} = x, tau_k = t) <= exp(-t J(x/t)).
fn chebyshev() -> Outcome {
    let (model, dir, cgf) = ballistic();
    let law = exact_increment_law(model, 40).unwrap();
    let mut cases = Vec::new();
    for k in 1..=2 {
        for ((x, t), p) in convolve_law(&law, k, 12) {
            cases.push(JointCase { k, x: vec![x], t, prob: p, se: 0.0 });
        }
    }
    let r1 = chebyshev_check(cgf, dir, &cases).unwrap();

    // d = 2: frequencies of k-blocks from 10^6 nestling increments, against
    // the rate estimated from the same increments; cases with at least 1000
    // hits.
    let dir2 = Direction::axis(2, 0).unwrap();
    let set = SampleSet::harvest(&EnvironmentModel::nestling_triangle(), &dir2, 1_000_000, None, 4048, None).unwrap();
    let cgf2 = EmpiricalCgf::new(&set).unwrap();
    let mut cases2 = Vec::new();
    for k in 1..=3 {
        let blocks = (set.len() / k) as f64;
        cases2.extend(joint_frequencies(&set, k, u64::MAX).into_iter().filter(|c| c.prob * blocks >= 1000.0));
    }
    let r2 = chebyshev_check(&cgf2, &dir2, &cases2).unwrap();
    (
        r1.holds(3.0) && r2.holds(3.0),
        format!(
            "d=1 exact: {} cases, worst z {:.2}; d=2 nestling MC: {} cases ({} on the unit-speed face skipped), worst z {:.2} (tol -3)",
            r1.rows.len(),
            r1.worst_z,
            r2.rows.len(),
            r2.on_face,
            r2.worst_z
        ),
    )
}

// 9. Extrapolated point-probability decay rates match J.
fn sandwich() -> Outcome {
    let (model, dir, cgf) = ballistic();
    let vs = vec![vec![0.3], vec![0.5], vec![0.7]];
    let opts = SandwichOptions { n_schedule: (1..=20).map(|i| 20 * i).collect(), delta: 0.0, trials: 1_000_000, seed: 9 };
    let rep = ldp_sandwich(model, dir, cgf, &vs, &opts).unwrap();
    let gaps: Vec<String> = rep.rows.iter().map(|r| format!("{:.3}", r.relative_gap)).collect();
    let ok = rep.rows.len() == 3 && rep.rows.iter().all(|r| r.relative_gap <= 0.10);
    (ok, format!("relative gaps at v = 0.3, 0.5, 0.7: [{}] (tol 0.10)", gaps.join(", ")))
}

// 10. Legendre duality on two closed-form functions and the empirical cumulant.
fn duality() -> Outcome {
    let q = Quadratic {
        a: DMatrix::from_row_slice(3, 3, &[2.0, 0.3, 0.1, 0.3, 1.5, -0.2, 0.1, -0.2, 1.0]),
        b: DVector::from_column_slice(&[0.1, -0.2, 0.3]),
    };
    let lc = LogCosh { dim: 2 };
    let f = non_nestling();
    let mut fails = Vec::new();
    let mut checks = 0;
    for y in [vec![0.3, -0.1, 0.2], vec![-0.5, 0.4, 0.0]] {
        checks += 1;
        if !verify_duality(&q, &y).map(|r| r.pass).unwrap_or(false) {
            fails.push(format!("quadratic {y:?}"));
        }
    }
    for y in [vec![0.3, -0.7], vec![1.0, 0.2]] {
        checks += 1;
        if !verify_duality(&lc, &y).map(|r| r.pass).unwrap_or(false) {
            fails.push(format!("logcosh {y:?}"));
        }
    }
    for y in [vec![0.01, 0.0, -0.01], vec![-0.02, 0.01, -0.02]] {
        checks += 1;
        if !verify_duality(&f.cgf, &y).map(|r| r.pass).unwrap_or(false) {
            fails.push(format!("empirical {y:?}"));
        }
    }
    (fails.is_empty(), format!("{}/{checks} duality checks pass {}", checks - fails.len(), fails.join(" ")))
}

// 11. J does not depend on the regeneration direction.
fn direction_independence() -> Outcome {
    let f = non_nestling();
    let grid: Vec<Vec<f64>> = [-0.02, 0.0, 0.02]
        .iter()
        .flat_map(|a| [-0.02, 0.0, 0.02].iter().map(move |b| vec![f.vhat[0] + a, f.vhat[1] + b]))
        .collect();
    let a = Direction::axis(2, 0).unwrap();
    let b = Direction::new(vec![1, 1]).unwrap();
    let opts = DirectionOptions { count: K_SMALL, bootstrap: 40, seed: 11 };
    let rep = compare_directions(&EnvironmentModel::non_nestling_default(), &a, &b, &grid, &opts).unwrap();
    (
        rep.max_z <= 3.0 && !rep.rows.is_empty(),
        format!("{} grid points, max |J_e1 - J_(1,1)| = {:.2e}, max z = {:.2} (tol 3)", rep.rows.len(), rep.max_abs_diff, rep.max_z),
    )
}

// 12. J is convex on the scanned region.
fn convexity() -> Outcome {
    let f = non_nestling();
    let radius = f.consts.c2.unwrap() / 2.0;
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut pairs = Vec::new();
    while pairs.len() < 100 {
        let mut draw = || loop {
            let e = [rng.random_range(-radius..radius), rng.random_range(-radius..radius)];
            if norm(&e) < radius {
                break e;
            }
        };
        let (e1, e2) = (draw(), draw());
        if let (Ok(g1), Ok(g2)) = (gamma_map(&f.cgf, &e1), gamma_map(&f.cgf, &e2)) {
            pairs.push((g1.v, g2.v));
        }
    }
    let excess: Vec<f64> = pairs
        .par_iter()
        .map(|(a, b)| {
            let mid: Vec<f64> = a.iter().zip(b).map(|(x, y)| 0.5 * (x + y)).collect();
            let ja = rate_j(&f.cgf, &f.dir, a, &f.consts).unwrap().j;
            let jb = rate_j(&f.cgf, &f.dir, b, &f.consts).unwrap().j;
            let jm = rate_j(&f.cgf, &f.dir, &mid, &f.consts).unwrap().j;
            jm - 0.5 * (ja + jb)
        })
        .collect();
    let worst = excess.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (worst <= 1e-8, format!("100 pairs, max J(mid) - mean J = {worst:.2e} (tol 1e-8)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("normalization", normalization),
        ("zero at velocity", zero_at_velocity),
        ("gradient identity", gradient_identity),
        ("minimizer identity", minimizer_identity),
        ("nestling zero ray", nestling_zero_ray),
        ("homogeneity on A-", homogeneity),
        ("marginal inequalities", marginal_inequalities),
        ("chebyshev bound", chebyshev),
        ("ldp sandwich", sandwich),
        ("legendre duality", duality),
        ("direction independence", direction_independence),
        ("convexity", convexity),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (ok, detail) = match catch_unwind(AssertUnwindSafe(run)) {
            Ok(r) => r,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!ok);
        println!(
            "{} {:>2} {:<24} {} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            name,
            detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
