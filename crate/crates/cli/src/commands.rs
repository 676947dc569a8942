use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use rwre_core::convex::verify_duality;
use rwre_core::dataset::{tail_exponent, velocity, TailField};
use rwre_core::ratefn::{
    gamma_map, rate_i, rate_i1, rate_j, region_constants, region_scan, write_rate_csv, write_region_csv, RegionMap,
};
use rwre_core::rng::{derive_seed, stream_rng};
use rwre_core::verify::{ldp_sandwich, Claim, Report, SandwichOptions};
use rwre_core::{Direction, EmpiricalCgf, EnvironmentModel, RegionConstants, SampleSet, TiltLabel};

use crate::config::RunConfig;

const DATASET: &str = "samples.rwre";

fn out_file(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out.join(name)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_model(cfg: &RunConfig) -> Result<(EnvironmentModel, Direction)> {
    let model = EnvironmentModel::load(&cfg.model).with_context(|| format!("loading model {}", cfg.model.display()))?;
    let dir = Direction::new(cfg.direction.clone())?;
    Ok((model, dir))
}

fn harvest(cfg: &RunConfig) -> Result<SampleSet> {
    let (model, dir) = load_model(cfg)?;
    Ok(SampleSet::harvest(&model, &dir, cfg.samples, cfg.lookahead, cfg.seed, None)?)
}

/// The dataset in the output directory when it matches the config, otherwise
/// a fresh harvest (which is then saved).
fn dataset(cfg: &RunConfig) -> Result<SampleSet> {
    let path = out_file(cfg, DATASET);
    let (model, dir) = load_model(cfg)?;
    if let Ok(set) = SampleSet::load(&path) {
        let h = &set.header;
        if h.model_hash == model.content_hash()
            && h.direction == dir
            && h.count == cfg.samples
            && h.seed_base == cfg.seed
            && cfg.lookahead.map_or(true, |l| l == h.lookahead)
        {
            return Ok(set);
        }
    }
    let set = harvest(cfg)?;
    set.save(&path)?;
    Ok(set)
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.6}")).collect();
    format!("({})", parts.join(", "))
}

pub fn sample(cfg: &RunConfig) -> Result<()> {
    let set = harvest(cfg)?;
    let path = out_file(cfg, DATASET);
    set.save(&path)?;
    let vel = velocity(&set)?;
    println!("dataset      {} ({} increments, {:?})", path.display(), set.len(), set.header.label);
    println!("velocity     {} +- {}", fmt_vec(&vel.v), fmt_vec(&vel.se()));
    for (name, field) in [("dtau", TailField::Dtau), ("sup_disp", TailField::SupDisp)] {
        match tail_exponent(&set, field) {
            Ok(f) => println!(
                "tail {name:<8} c = {:.4} [{:.4}, {:.4}]{}",
                f.c_hat,
                f.ci.0,
                f.ci.1,
                if f.sub_exponential { "  sub-exponential" } else { "" }
            ),
            Err(e) => println!("tail {name:<8} {e}"),
        }
    }
    let c = region_constants(&set)?;
    println!("constants    C1 = {:?}, C2 = {:?}", c.c1, c.c2);
    for w in &set.header.warnings {
        println!("warning      {w}");
    }
    Ok(())
}

pub fn rate(cfg: &RunConfig) -> Result<()> {
    let set = dataset(cfg)?;
    let cgf = EmpiricalCgf::new(&set)?;
    let consts = region_constants(&set)?;
    let dir = &set.header.direction;
    let mut vs = cfg.rate_velocities();
    if vs.is_empty() {
        vs.push(velocity(&set)?.v);
    }
    let mut points = Vec::with_capacity(vs.len());
    for v in &vs {
        let p = rate_j(&cgf, dir, v, &consts).with_context(|| format!("J at {v:?}"))?;
        println!("v = {}  J = {:.6e}  region {}  {}", fmt_vec(v), p.j, p.region.as_str(), p.flags());
        points.push(p);
    }
    let path = out_file(cfg, "rate.csv");
    write_rate_csv(&points, set.dim(), create(&path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn write_boundary_csv(map: &RegionMap, w: impl Write) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let d = map.dim;
    let mut head: Vec<String> = (1..=d).map(|i| format!("eta{i}")).collect();
    head.extend((1..=d).map(|i| format!("v{i}")));
    head.extend(["s0".to_string(), "normal_dot_v".to_string()]);
    out.write_record(&head)?;
    for b in &map.boundary {
        let mut row: Vec<String> = b.eta.iter().map(ToString::to_string).collect();
        row.extend(b.v.iter().map(ToString::to_string));
        row.push(b.s0.to_string());
        row.push(b.normal_dot_v.map_or(String::new(), |x| x.to_string()));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

pub fn region(cfg: &RunConfig) -> Result<()> {
    let set = dataset(cfg)?;
    let cgf = EmpiricalCgf::new(&set)?;
    let consts = region_constants(&set)?;
    let map = region_scan(&cgf, &consts, cfg.region.resolution)?;
    let vhat = velocity(&set)?.v;
    let mapped = map.nodes.iter().filter(|n| n.gamma.is_some()).count();
    println!("scan radius  {:.5} ({} nodes, {} mapped)", map.radius, map.nodes.len(), mapped);
    println!("contains v_hat {}: {}", fmt_vec(&vhat), map.contains(&vhat));
    println!("injectivity violations: {}", map.injectivity_violations(1e-9));
    if map.nestling {
        println!("A0 boundary  {} points, outward normals ok: {}", map.boundary.len(), map.zero_set_normals_ok());
    }
    let path = out_file(cfg, "region.csv");
    write_region_csv(&map, create(&path)?)?;
    let bpath = out_file(cfg, "boundary.csv");
    write_boundary_csv(&map, create(&bpath)?)?;
    println!("wrote {} and {}", path.display(), bpath.display());
    Ok(())
}

pub fn export(cfg: &RunConfig) -> Result<()> {
    let set = dataset(cfg)?;
    let path = out_file(cfg, "samples.csv");
    set.write_csv(create(&path)?)?;
    println!("wrote {} ({} records)", path.display(), set.len());
    Ok(())
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Tilts where the gradient identity is expected: any admissible tilt for
/// non-nestling sets, tilts with a negative root (`C+`) for nestling sets.
fn identity_tilts(cfg: &RunConfig, cgf: &EmpiricalCgf) -> Vec<rwre_core::GammaPoint> {
    cfg.verify
        .tilts
        .iter()
        .filter(|t| t.len() == cgf.spatial_dim())
        .filter_map(|t| gamma_map(cgf, t).ok())
        .filter(|g| !cgf.guarded() || g.label == TiltLabel::CPlus)
        .collect()
}

fn scan_images(cgf: &EmpiricalCgf, consts: &RegionConstants, count: usize, seed: u64) -> Vec<Vec<f64>> {
    use rand::Rng;
    let d = cgf.spatial_dim();
    let radius = if cgf.guarded() { consts.c1 } else { consts.c2.map(|c| c / 2.0) };
    let Some(radius) = radius else { return Vec::new() };
    let mut rng = stream_rng(seed, 0);
    let mut out = Vec::new();
    let mut tries = 0;
    while out.len() < count && tries < 100 * count {
        tries += 1;
        let eta: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..radius)).collect();
        if eta.iter().map(|x| x * x).sum::<f64>().sqrt() >= radius {
            continue;
        }
        if let Ok(g) = gamma_map(cgf, &eta) {
            if !cgf.guarded() || g.label == TiltLabel::CPlus {
                out.push(g.v);
            }
        }
    }
    out
}

/// Runs the checks that apply to the configured model. Returns whether every
/// claim passed.
pub fn verify(cfg: &RunConfig) -> Result<bool> {
    let set = dataset(cfg)?;
    let cgf = EmpiricalCgf::new(&set)?;
    let consts = region_constants(&set)?;
    let dir = set.header.direction.clone();
    let vhat = velocity(&set)?.v;
    let mut report = Report::default();
    let mut claim = |name: &str, margin: f64, default_tol: f64| {
        let c = Claim::check(name, margin, cfg.tolerance(name, default_tol));
        println!(
            "{:<4} {name:<22} margin {:.3e}  tolerance {:.3e}",
            if c.passed() { "ok" } else { "FAIL" },
            c.margin,
            c.tolerance
        );
        report.push(c);
    };

    claim("zero_at_velocity", rate_j(&cgf, &dir, &vhat, &consts)?.j, 1e-3);

    let tilts = identity_tilts(cfg, &cgf);
    if !tilts.is_empty() {
        let mut grad_err: f64 = 0.0;
        let mut s_err: f64 = 0.0;
        for g in &tilts {
            let r = rate_j(&cgf, &dir, &g.v, &consts)?;
            grad_err = grad_err.max(max_abs_diff(&r.eta_star, &g.eta));
            s_err = s_err.max((r.s_star - g.s0).abs() / g.s0);
        }
        claim("gradient_identity", grad_err, 1e-3);
        claim("minimizer_identity", s_err, 1e-4);
    }

    if cgf.guarded() {
        let mut worst: f64 = 0.0;
        for theta in &cfg.verify.thetas {
            let v: Vec<f64> = vhat.iter().map(|c| theta * c).collect();
            worst = worst.max(rate_j(&cgf, &dir, &v, &consts)?.j);
        }
        claim("nestling_zero_ray", worst, 1e-3);
    }

    let images = scan_images(&cgf, &consts, 2 * cfg.verify.convexity_pairs, derive_seed(cfg.seed, "verify/convexity"));
    if images.len() >= 2 {
        let mut worst = f64::NEG_INFINITY;
        for pair in images.chunks_exact(2) {
            let mid: Vec<f64> = pair[0].iter().zip(&pair[1]).map(|(a, b)| 0.5 * (a + b)).collect();
            let ja = rate_j(&cgf, &dir, &pair[0], &consts)?.j;
            let jb = rate_j(&cgf, &dir, &pair[1], &consts)?.j;
            let jm = rate_j(&cgf, &dir, &mid, &consts)?.j;
            worst = worst.max(jm - 0.5 * (ja + jb));
        }
        claim("convexity", worst, 1e-8);
    }

    let tmax = cgf.max_dtau() as f64;
    let tgrid: Vec<f64> = (0..20).map(|i| (tmax.ln() * i as f64 / 19.0).exp()).collect();
    let mut worst = f64::NEG_INFINITY;
    let dim = cgf.spatial_dim();
    for eta in cfg.verify.tilts.iter().filter(|t| t.len() == dim).take(cfg.verify.marginal_points) {
        let Ok((m, _)) = cgf.marginal(eta) else { continue };
        let i1 = rate_i1(&cgf, &m.grad)?.value;
        let min_t = tgrid
            .iter()
            .filter_map(|&t| rate_i(&cgf, &m.grad, t).ok().map(|r| r.value))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(i1 - min_t);
    }
    if worst.is_finite() {
        claim("marginal_inequality", worst, 1e-8);
    }

    let mut grad_inv: f64 = 0.0;
    let mut biconj: f64 = 0.0;
    for g in tilts.iter().take(2) {
        let mut y = g.eta.clone();
        y.push(g.lambda.min(0.0));
        let r = verify_duality(&cgf, &y)?;
        grad_inv = grad_inv.max(r.gradient_inverse);
        biconj = biconj.max(r.biconjugate);
    }
    if !tilts.is_empty() {
        claim("duality_gradient", grad_inv, 1e-6);
        claim("duality_biconjugate", biconj, 1e-6);
    }

    if let Some(s) = &cfg.verify.sandwich {
        let (model, _) = load_model(cfg)?;
        let opts = SandwichOptions {
            n_schedule: s.n_schedule.clone(),
            delta: s.delta,
            trials: s.trials,
            seed: derive_seed(cfg.seed, "verify/sandwich"),
        };
        let rep = ldp_sandwich(&model, &dir, &cgf, &s.velocities, &opts)?;
        let gap = rep.rows.iter().map(|r| r.relative_gap).fold(0.0, f64::max);
        let mut f = create(&out_file(cfg, "sandwich.json"))?;
        serde_json::to_writer_pretty(&mut f, &rep)?;
        f.flush()?;
        claim("ldp_sandwich", if rep.rows.is_empty() { f64::INFINITY } else { gap }, 0.10);
    }

    let json = out_file(cfg, "report.json");
    let mut f = create(&json)?;
    f.write_all(report.to_json()?.as_bytes())?;
    f.flush()?;
    report.write_csv(create(&out_file(cfg, "report.csv"))?)?;
    let failing = report.failing();
    if failing.is_empty() {
        println!("all {} claims pass; report in {}", report.claims.len(), json.display());
    } else {
        let names: Vec<&str> = failing.iter().map(|c| c.name.as_str()).collect();
        println!("failing claims: {}", names.join(", "));
    }
    Ok(report.all_pass())
}
