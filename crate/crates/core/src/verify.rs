//! Numerical verification: exact small-`n` oracles, Monte Carlo point
//! probabilities, the Chebyshev bound on joint regeneration laws, the large
//! deviation sandwich and the direction comparison.

use std::collections::BTreeMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgf::EmpiricalCgf;
use crate::dataset::{Atom, SampleSet};
use crate::env::{log_site_exit_moment, unit_step, Direction, EnvironmentModel, ModelKind, MAX_DIM};
use crate::error::{Error, Result};
use crate::ratefn::{rate_j, RegionConstants};
use crate::rng::{derive_seed, stream_rng};
use crate::stats::{multinomial_resample, weighted_least_squares, wilson_interval};
use crate::walk::{apply_step, LazyEnvironment};

/// Largest number of nearest-neighbour paths enumerated for random
/// environments.
pub const PATH_BUDGET: u128 = 65_536;
/// Trials simulated sequentially on one random stream.
const TRIAL_BATCH: u64 = 4096;
/// 95% two-sided normal quantile used for Wilson intervals.
const Z95: f64 = 1.959_963_984_540_054;

/// Probability estimate of `|X_n - n v| < n delta` (or of `X_n = y` for the
/// lattice point `y` nearest `n v` when `delta = 0`).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProbEstimate {
    pub n: usize,
    pub v: Vec<f64>,
    pub delta: f64,
    /// Target site for point events.
    pub target: Option<Vec<i32>>,
    pub trials: u64,
    pub hits: u64,
    pub p_hat: f64,
    pub wilson_ci: (f64, f64),
    /// `-(1/n) log p_hat`, absent when there are no hits.
    pub log_rate: Option<f64>,
    /// Whether `p_hat` is exact rather than simulated.
    pub exact: bool,
}

impl ProbEstimate {
    pub fn se(&self) -> f64 {
        if self.exact {
            0.0
        } else {
            (self.p_hat * (1.0 - self.p_hat) / self.trials as f64).sqrt()
        }
    }

    fn exact_value(n: usize, v: &[f64], delta: f64, target: Option<Vec<i32>>, p: f64) -> Self {
        Self {
            n,
            v: v.to_vec(),
            delta,
            target,
            trials: 0,
            hits: 0,
            p_hat: p,
            wilson_ci: (p, p),
            log_rate: (p > 0.0).then(|| -p.ln() / n as f64),
            exact: true,
        }
    }
}

/// Lattice point closest to `n v` whose coordinate sum has the parity of `n`
/// (the only sites reachable in exactly `n` steps).
pub fn target_site(n: usize, v: &[f64]) -> Vec<i32> {
    let want: Vec<f64> = v.iter().map(|c| c * n as f64).collect();
    let mut y: Vec<i32> = want.iter().map(|c| c.round() as i32).collect();
    let sum: i64 = y.iter().map(|&c| i64::from(c)).sum();
    if (sum - n as i64).rem_euclid(2) != 0 {
        // Move the coordinate with the largest rounding error towards n v.
        let (i, _) = want
            .iter()
            .zip(&y)
            .map(|(w, &c)| (w - f64::from(c)).abs())
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .expect("nonempty");
        y[i] += if want[i] >= f64::from(y[i]) { 1 } else { -1 };
    }
    y
}

fn in_window(pos: &[i32], n: usize, v: &[f64], delta: f64) -> bool {
    let r2: f64 = pos.iter().zip(v).map(|(&x, c)| (f64::from(x) - c * n as f64).powi(2)).sum();
    r2.sqrt() < n as f64 * delta
}

/// Runs `trials` annealed walks of `n` steps (a fresh environment per trial)
/// and folds their endpoints with `visit`. Batches of trials share one random
/// stream; the merge order is fixed, so results do not depend on the number
/// of worker threads.
fn fold_endpoints<T, F, M>(model: &EnvironmentModel, n: usize, trials: u64, seed: u64, init: T, visit: F, merge: M) -> T
where
    T: Clone + Send + Sync,
    F: Fn(&mut T, &[i32]) + Sync,
    M: Fn(T, T) -> T,
{
    let d = model.dimension;
    let batches = trials.div_ceil(TRIAL_BATCH);
    let parts: Vec<T> = (0..batches)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b);
            let mut envt = LazyEnvironment::new(model);
            let mut acc = init.clone();
            let count = TRIAL_BATCH.min(trials - b * TRIAL_BATCH);
            for _ in 0..count {
                envt.clear();
                let mut pos = [0i32; MAX_DIM];
                for _ in 0..n {
                    let e = envt.step(&pos, &mut rng);
                    apply_step(&mut pos, e);
                }
                visit(&mut acc, &pos[..d]);
            }
            acc
        })
        .collect();
    parts.into_iter().fold(init, merge)
}

/// Monte Carlo estimate of `P(|X_n - n v| < n delta)`, or of `P(X_n = y)` with
/// `y = target_site(n, v)` when `delta = 0`.
pub fn mc_point_prob(
    model: &EnvironmentModel,
    dir: &Direction,
    n: usize,
    v: &[f64],
    delta: f64,
    trials: u64,
    seed: u64,
) -> Result<ProbEstimate> {
    model.validate()?;
    if v.len() != model.dimension || dir.dim() != model.dimension {
        return Err(Error::DimensionMismatch { expected: model.dimension, got: v.len() });
    }
    if n == 0 || trials < 1000 || delta < 0.0 || (delta > 0.0 && n as f64 * delta < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "need n > 0, trials >= 1000 and n delta >= 1 (n = {n}, delta = {delta}, trials = {trials})"
        )));
    }
    let target = (delta == 0.0).then(|| target_site(n, v));
    // Faster than one step per site is impossible: the event is empty.
    let l = dir.unit();
    let reachable = match &target {
        Some(y) => y.iter().map(|c| c.unsigned_abs() as usize).sum::<usize>() <= n,
        None => dir.project(v) - delta * l.iter().map(|c| c * c).sum::<f64>().sqrt() < 1.0,
    };
    let hits = if reachable {
        let t = target.clone();
        fold_endpoints(
            model,
            n,
            trials,
            seed,
            0u64,
            |acc, pos| {
                let hit = match &t {
                    Some(y) => pos == y.as_slice(),
                    None => in_window(pos, n, v, delta),
                };
                *acc += u64::from(hit);
            },
            |a, b| a + b,
        )
    } else {
        0
    };
    let p_hat = hits as f64 / trials as f64;
    Ok(ProbEstimate {
        n,
        v: v.to_vec(),
        delta,
        target,
        trials,
        hits,
        p_hat,
        wilson_ci: wilson_interval(hits, trials, Z95),
        log_rate: (hits > 0).then(|| -p_hat.ln() / n as f64),
        exact: false,
    })
}

/// Empirical law of `X_n` from `trials` simulated walks.
pub fn mc_point_law(model: &EnvironmentModel, n: usize, trials: u64, seed: u64) -> Result<BTreeMap<Vec<i32>, u64>> {
    model.validate()?;
    Ok(fold_endpoints(
        model,
        n,
        trials,
        seed,
        BTreeMap::new(),
        |acc: &mut BTreeMap<Vec<i32>, u64>, pos| *acc.entry(pos.to_vec()).or_insert(0) += 1,
        |mut a, b| {
            for (k, c) in b {
                *a.entry(k).or_insert(0) += c;
            }
            a
        },
    ))
}

/// Exact annealed law of `X_n`. Deterministic environments are a Markov chain
/// and use dynamic programming at any `n`; random environments enumerate all
/// `(2d)^n` paths, limited by [`PATH_BUDGET`].
pub fn exact_point_law(model: &EnvironmentModel, n: usize) -> Result<BTreeMap<Vec<i32>, f64>> {
    model.validate()?;
    let d = model.dimension;
    if let ModelKind::Deterministic { p } = &model.kind {
        let mut law: BTreeMap<Vec<i32>, f64> = BTreeMap::from([(vec![0; d], 1.0)]);
        for _ in 0..n {
            let mut next = BTreeMap::new();
            for (x, w) in &law {
                for (e, &pe) in p.iter().enumerate() {
                    if pe == 0.0 {
                        continue;
                    }
                    let u = unit_step(e, d);
                    let y: Vec<i32> = x.iter().zip(&u).map(|(a, b)| a + b).collect();
                    *next.entry(y).or_insert(0.0) += w * pe;
                }
            }
            law = next;
        }
        return Ok(law);
    }
    let mut law = BTreeMap::new();
    enumerate_paths(model, n, None, |end, prob| *law.entry(end.to_vec()).or_insert(0.0) += prob)?;
    Ok(law)
}

/// Depth-first enumeration of all paths of length `n` (optionally only those
/// that can still reach `target`), calling `leaf` with each endpoint and its
/// annealed probability.
fn enumerate_paths(
    model: &EnvironmentModel,
    n: usize,
    target: Option<&[i32]>,
    mut leaf: impl FnMut(&[i32], f64),
) -> Result<()> {
    let d = model.dimension;
    let paths = (2 * d as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if paths > PATH_BUDGET {
        return Err(Error::PathBudget { paths, budget: PATH_BUDGET });
    }
    let mut counts: BTreeMap<[i32; MAX_DIM], Vec<u32>> = BTreeMap::new();
    let mut pos = [0i32; MAX_DIM];
    fn rec(
        model: &EnvironmentModel,
        left: usize,
        target: Option<&[i32]>,
        pos: &mut [i32; MAX_DIM],
        counts: &mut BTreeMap<[i32; MAX_DIM], Vec<u32>>,
        leaf: &mut dyn FnMut(&[i32], f64),
    ) -> Result<()> {
        let d = model.dimension;
        if let Some(t) = target {
            let dist: usize = t.iter().zip(pos.iter()).map(|(a, b)| (a - b).unsigned_abs() as usize).sum();
            if dist > left {
                return Ok(());
            }
        }
        if left == 0 {
            let mut lp = 0.0;
            for c in counts.values() {
                lp += log_site_exit_moment(model, c)?;
            }
            leaf(&pos[..d], lp.exp());
            return Ok(());
        }
        for e in 0..2 * d {
            let here = *pos;
            counts.entry(here).or_insert_with(|| vec![0; 2 * d])[e] += 1;
            apply_step(pos, e);
            rec(model, left - 1, target, pos, counts, leaf)?;
            *pos = here;
            let c = counts.get_mut(&here).expect("present");
            c[e] -= 1;
            if c.iter().all(|&k| k == 0) {
                counts.remove(&here);
            }
        }
        Ok(())
    }
    rec(model, n, target, &mut pos, &mut counts, &mut leaf)
}

/// Exact annealed `P(X_n = y)`.
pub fn exact_point_prob(model: &EnvironmentModel, n: usize, y: &[i32]) -> Result<f64> {
    model.validate()?;
    if y.len() != model.dimension {
        return Err(Error::DimensionMismatch { expected: model.dimension, got: y.len() });
    }
    if matches!(model.kind, ModelKind::Deterministic { .. }) {
        return Ok(exact_point_law(model, n)?.get(y).copied().unwrap_or(0.0));
    }
    let mut total = 0.0;
    enumerate_paths(model, n, Some(y), |end, p| {
        if end == y {
            total += p;
        }
    })?;
    Ok(total)
}

/// Exact `P(|X_n - n v| < n delta)` (point event when `delta = 0`).
pub fn exact_window_prob(model: &EnvironmentModel, n: usize, v: &[f64], delta: f64) -> Result<f64> {
    if delta == 0.0 {
        return exact_point_prob(model, n, &target_site(n, v));
    }
    Ok(exact_point_law(model, n)?
        .iter()
        .filter(|(y, _)| in_window(y, n, v, delta))
        .map(|(_, p)| p)
        .sum())
}

/// Exact law of one regeneration increment `(X_tau, tau)` in one dimension,
/// direction `+e1`, for a deterministic environment, truncated at `depth`
/// steps. Keys are `(dx, dtau)`; the missing mass is the truncation error.
///
/// Under the conditioned law the increment has weight equal to the sum over
/// paths from 0 of length `t` that stay at or above 0, first reach `x` at `t`,
/// and leave every earlier fresh maximum by stepping below it before `t`.
pub fn exact_increment_law(model: &EnvironmentModel, depth: usize) -> Result<BTreeMap<(i32, u64), f64>> {
    model.validate()?;
    let p = match (&model.kind, model.dimension) {
        (ModelKind::Deterministic { p }, 1) => p.clone(),
        _ => return Err(Error::InvalidArgument("exact increment law needs a deterministic model in one dimension".into())),
    };
    let (right, left) = (p[0], p[1]);
    // State: (position, running maximum, lowest unbroken fresh maximum or 0 for none).
    let mut states: BTreeMap<(i32, i32, i32), f64> = BTreeMap::from([((0, 0, 0), 1.0)]);
    let mut law = BTreeMap::new();
    for t in 1..=depth as u64 {
        let mut next = BTreeMap::new();
        for (&(x, m, u), &w) in &states {
            // Step right.
            let y = x + 1;
            if y > m {
                if u == 0 {
                    *law.entry((y, t)).or_insert(0.0) += w * right;
                }
                let nu = if u == 0 { y } else { u };
                *next.entry((y, y, nu)).or_insert(0.0) += w * right;
            } else {
                *next.entry((y, m, u)).or_insert(0.0) += w * right;
            }
            // Step left, staying at or above 0.
            let y = x - 1;
            if y >= 0 {
                let nu = if u != 0 && y < u { 0 } else { u };
                *next.entry((y, m, nu)).or_insert(0.0) += w * left;
            }
        }
        states = next;
    }
    Ok(law)
}

/// `k`-fold convolution of an increment law, truncated at `max_t`.
pub fn convolve_law(law: &BTreeMap<(i32, u64), f64>, k: usize, max_t: u64) -> BTreeMap<(i32, u64), f64> {
    let mut acc: BTreeMap<(i32, u64), f64> = BTreeMap::from([((0, 0), 1.0)]);
    for _ in 0..k {
        let mut next = BTreeMap::new();
        for (&(x, t), &w) in &acc {
            for (&(dx, dt), &q) in law {
                if t + dt <= max_t {
                    *next.entry((x + dx, t + dt)).or_insert(0.0) += w * q;
                }
            }
        }
        acc = next;
    }
    acc
}

/// One point of a joint law of `(X_{tau_k}, tau_k)` with its uncertainty.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointCase {
    pub k: usize,
    pub x: Vec<i32>,
    pub t: u64,
    pub prob: f64,
    /// Standard error of `prob` (0 for exact values).
    pub se: f64,
}

/// Empirical joint law of `(X_{tau_k}, tau_k)` from disjoint blocks of `k`
/// consecutive increments.
pub fn joint_frequencies(set: &SampleSet, k: usize, max_t: u64) -> Vec<JointCase> {
    let d = set.dim();
    let blocks = set.records.len() / k.max(1);
    let mut counts: BTreeMap<(Vec<i32>, u64), u64> = BTreeMap::new();
    for b in set.records.chunks_exact(k.max(1)).take(blocks) {
        let t: u64 = b.iter().map(|r| r.dtau).sum();
        if t > max_t {
            continue;
        }
        let mut x = vec![0i32; d];
        for r in b {
            for (xi, di) in x.iter_mut().zip(&r.dx[..d]) {
                *xi += di;
            }
        }
        *counts.entry((x, t)).or_insert(0) += 1;
    }
    let n = blocks as f64;
    counts
        .into_iter()
        .map(|((x, t), c)| {
            let p = c as f64 / n;
            JointCase { k, x, t, prob: p, se: (p * (1.0 - p) / n).sqrt() }
        })
        .collect()
}

/// Result of the bound `P(X_{tau_k} = x, tau_k = t) <= exp(-t J(x/t))` at one
/// point.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChebyshevRow {
    pub case: JointCase,
    pub j: f64,
    pub bound: f64,
    /// `bound - prob`.
    pub margin: f64,
    /// Combined standard error of `prob` and of the bound.
    pub se: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChebyshevReport {
    pub rows: Vec<ChebyshevRow>,
    /// Smallest `margin / se` (or `margin` sign when `se = 0`).
    pub worst_z: f64,
    /// Points skipped because `x/t` is not in the open half-space.
    pub skipped: usize,
    /// Points with `|x|_1 = t` in two or more dimensions, skipped: there every
    /// `(x/(ts), 1/s)` lies on a face of the support hull and the rate needs
    /// the transform restricted to that face.
    pub on_face: usize,
}

impl ChebyshevReport {
    /// Whether every margin is at least `-z` standard errors.
    pub fn holds(&self, z: f64) -> bool {
        self.rows.iter().all(|r| r.margin >= -z * r.se)
    }
}

/// Evaluates the Chebyshev bound at every case. Points such as `(e1, 1)` sit
/// on the support boundary where the maximising tilt runs off to infinity and
/// the effective sample size collapses; the bound needs the limiting value
/// there, so the effective sample size floor is lowered to 1 and the loss of
/// precision is carried by the standard error instead.
pub fn chebyshev_check(cgf: &EmpiricalCgf, dir: &Direction, cases: &[JointCase]) -> Result<ChebyshevReport> {
    let consts = RegionConstants::default();
    let relaxed = cgf.clone().with_ess_floor(1.0);
    let cgf = &relaxed;
    // Inner `Err(face)` marks a skipped case.
    let rows: Vec<Result<std::result::Result<ChebyshevRow, bool>>> = cases
        .par_iter()
        .map(|c| {
            let v: Vec<f64> = c.x.iter().map(|&x| f64::from(x) / c.t as f64).collect();
            if !(dir.project(&v) > 0.0) {
                return Ok(Err(false));
            }
            if c.x.len() > 1 && c.x.iter().map(|x| u64::from(x.unsigned_abs())).sum::<u64>() == c.t {
                return Ok(Err(true));
            }
            let r = rate_j(cgf, dir, &v, &consts)?;
            let t = c.t as f64;
            let bound = (-t * r.j).exp();
            let se_bound = if r.se.is_finite() { bound * t * r.se } else { 0.0 };
            Ok(Ok(ChebyshevRow {
                case: c.clone(),
                j: r.j,
                bound,
                margin: bound - c.prob,
                se: (c.se.powi(2) + se_bound.powi(2)).sqrt(),
            }))
        })
        .collect();
    let mut out = Vec::new();
    let (mut skipped, mut on_face) = (0, 0);
    for r in rows {
        match r? {
            Ok(row) => out.push(row),
            Err(true) => on_face += 1,
            Err(false) => skipped += 1,
        }
    }
    let worst_z = out
        .iter()
        .map(|r| if r.se > 0.0 { r.margin / r.se } else if r.margin >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY })
        .fold(f64::INFINITY, f64::min);
    Ok(ChebyshevReport { rows: out, worst_z, skipped, on_face })
}

/// Extrapolation of finite-`n` decay rates at one velocity.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SandwichRow {
    pub v: Vec<f64>,
    pub estimates: Vec<ProbEstimate>,
    /// Rate from the fit `rate + a log(n)/n + b/n`.
    pub extrapolated: f64,
    /// Rate from the affine fit `rate + c/n`.
    pub affine: f64,
    /// Largest affine-fit residual relative to the affine rate.
    pub affine_residual: f64,
    pub j: f64,
    pub j_se: f64,
    /// `|extrapolated - J| / J` (0 when both vanish).
    pub relative_gap: f64,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SandwichReport {
    pub delta: f64,
    pub rows: Vec<SandwichRow>,
}

/// Settings for [`ldp_sandwich`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SandwichOptions {
    pub n_schedule: Vec<usize>,
    /// Window half-width relative to `n`; 0 selects point events.
    pub delta: f64,
    pub trials: u64,
    pub seed: u64,
}

fn fit_rate(ns: &[f64], y: &[f64], w: &[f64], with_log: bool) -> Option<f64> {
    let rows: Vec<Vec<f64>> = ns
        .iter()
        .map(|&n| if with_log { vec![1.0, n.ln() / n, 1.0 / n] } else { vec![1.0, 1.0 / n] })
        .collect();
    let p = rows.first()?.len();
    if ns.len() < p {
        return None;
    }
    if ns.len() == p {
        // Exactly determined: solve directly.
        let a = nalgebra::DMatrix::from_fn(p, p, |i, j| rows[i][j]);
        let b = nalgebra::DVector::from_column_slice(y);
        return a.lu().solve(&b).map(|c| c[0]);
    }
    weighted_least_squares(&rows, y, w).ok().map(|m| m.coef[0])
}

/// Decay rate of point or window probabilities along an `n` schedule,
/// extrapolated to `n -> infinity` and compared to `J(v)`. Probabilities are
/// exact when the model allows it and simulated otherwise.
pub fn ldp_sandwich(
    model: &EnvironmentModel,
    dir: &Direction,
    cgf: &EmpiricalCgf,
    velocities: &[Vec<f64>],
    opts: &SandwichOptions,
) -> Result<SandwichReport> {
    let consts = RegionConstants::default();
    let mut rows = Vec::new();
    for v in velocities {
        let mut warnings = Vec::new();
        let mut estimates = Vec::new();
        for &n in &opts.n_schedule {
            if opts.delta == 0.0 {
                let y = target_site(n, v);
                let off: f64 = y.iter().zip(v).map(|(&a, c)| (f64::from(a) - c * n as f64).abs()).sum();
                if off > 1e-9 {
                    warnings.push(format!("n = {n}: n v is not a reachable site, skipped"));
                    continue;
                }
            }
            let seed = derive_seed(opts.seed, &format!("sandwich/{n}/{v:?}"));
            let est = match exact_window_prob(model, n, v, opts.delta) {
                Ok(p) => {
                    let target = (opts.delta == 0.0).then(|| target_site(n, v));
                    ProbEstimate::exact_value(n, v, opts.delta, target, p)
                }
                Err(Error::PathBudget { .. }) => mc_point_prob(model, dir, n, v, opts.delta, opts.trials, seed)?,
                Err(e) => return Err(e),
            };
            if est.log_rate.is_none() {
                warnings.push(format!("n = {n}: no hits, excluded from the fit"));
            }
            estimates.push(est);
        }
        let used: Vec<&ProbEstimate> = estimates.iter().filter(|e| e.log_rate.is_some()).collect();
        let ns: Vec<f64> = used.iter().map(|e| e.n as f64).collect();
        let y: Vec<f64> = used.iter().map(|e| e.log_rate.expect("filtered")).collect();
        // Inverse variance of -(1/n) log p; exact rows get a tiny floor.
        let w: Vec<f64> = used
            .iter()
            .map(|e| {
                let rel = if e.exact { 1e-12 } else { (1.0 - e.p_hat) / (e.trials as f64 * e.p_hat) };
                1.0 / (rel / (e.n as f64).powi(2)).max(1e-24)
            })
            .collect();
        let unreachable = dir.project(v) >= 1.0;
        let (extrapolated, affine) = if unreachable && used.is_empty() {
            (f64::INFINITY, f64::INFINITY)
        } else {
            let ex = fit_rate(&ns, &y, &w, true).or_else(|| fit_rate(&ns, &y, &w, false)).unwrap_or(f64::NAN);
            (ex, fit_rate(&ns, &y, &w, false).unwrap_or(f64::NAN))
        };
        let affine_residual = if affine.is_finite() && affine != 0.0 {
            let c = fit_affine_slope(&ns, &y, affine);
            ns.iter()
                .zip(&y)
                .map(|(n, yi)| (yi - affine - c / n).abs() / affine.abs())
                .fold(0.0, f64::max)
        } else {
            f64::NAN
        };
        let (j, j_se) = if dir.project(v) > 0.0 {
            let r = rate_j(cgf, dir, v, &consts)?;
            (r.j, r.se)
        } else {
            (f64::NAN, f64::NAN)
        };
        let relative_gap = if extrapolated.is_infinite() && j.is_infinite() {
            0.0
        } else if j == 0.0 {
            extrapolated.abs()
        } else {
            (extrapolated - j).abs() / j
        };
        rows.push(SandwichRow { v: v.clone(), estimates, extrapolated, affine, affine_residual, j, j_se, relative_gap, warnings });
    }
    Ok(SandwichReport { delta: opts.delta, rows })
}

fn fit_affine_slope(ns: &[f64], y: &[f64], rate: f64) -> f64 {
    let num: f64 = ns.iter().zip(y).map(|(n, yi)| (yi - rate) / n).sum();
    let den: f64 = ns.iter().map(|n| 1.0 / (n * n)).sum();
    if den > 0.0 {
        num / den
    } else {
        0.0
    }
}

/// One grid point of a direction comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionRow {
    pub v: Vec<f64>,
    pub j_a: f64,
    pub j_b: f64,
    pub sd_a: f64,
    pub sd_b: f64,
    pub diff: f64,
    /// `|diff| / sqrt(sd_a^2 + sd_b^2)`.
    pub z: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionReport {
    pub rows: Vec<DirectionRow>,
    pub excluded: Vec<Vec<f64>>,
    pub max_abs_diff: f64,
    pub mean_abs_diff: f64,
    pub max_z: f64,
    pub notes: Vec<String>,
}

/// Settings for [`compare_directions`].
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DirectionOptions {
    pub count: usize,
    pub bootstrap: usize,
    pub seed: u64,
}

fn bootstrap_sd(cgf: &EmpiricalCgf, atoms: &[Atom], dir: &Direction, grid: &[Vec<f64>], reps: usize, seed: u64) -> Result<Vec<f64>> {
    let counts: Vec<u64> = atoms.iter().map(|a| a.count).collect();
    let d = cgf.spatial_dim();
    let consts = RegionConstants::default();
    let draws: Vec<Result<Vec<f64>>> = (0..reps as u64)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b);
            let resampled: Vec<Atom> = atoms
                .iter()
                .zip(multinomial_resample(&counts, &mut rng))
                .filter(|(_, c)| *c > 0)
                .map(|(a, c)| Atom { count: c, ..*a })
                .collect();
            let boot = EmpiricalCgf::from_atoms(d, &resampled, cgf.guarded())?;
            grid.iter().map(|v| Ok(rate_j(&boot, dir, v, &consts)?.j)).collect()
        })
        .collect();
    let draws: Vec<Vec<f64>> = draws.into_iter().collect::<Result<_>>()?;
    Ok((0..grid.len())
        .map(|i| {
            let xs: Vec<f64> = draws.iter().map(|r| r[i]).filter(|x| x.is_finite()).collect();
            let m = xs.iter().sum::<f64>() / xs.len().max(1) as f64;
            (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len().max(2) - 1) as f64).sqrt()
        })
        .collect())
}

/// Estimates `J` for two directions from independent sample sets and
/// compares them on a velocity grid, with bootstrap standard deviations.
pub fn compare_directions(
    model: &EnvironmentModel,
    dir_a: &Direction,
    dir_b: &Direction,
    grid: &[Vec<f64>],
    opts: &DirectionOptions,
) -> Result<DirectionReport> {
    let mut notes = Vec::new();
    let (inside, excluded): (Vec<Vec<f64>>, Vec<Vec<f64>>) =
        grid.iter().cloned().partition(|v| dir_a.project(v) > 0.0 && dir_b.project(v) > 0.0);
    if !excluded.is_empty() {
        notes.push(format!("{} grid points outside one of the half-spaces were excluded", excluded.len()));
    }
    let consts = RegionConstants::default();
    let mut side = |dir: &Direction, label: &str| -> Result<(Vec<f64>, Vec<f64>)> {
        let seed = derive_seed(opts.seed, label);
        let set = SampleSet::harvest(model, dir, opts.count, None, seed, None)?;
        notes.extend(set.header.warnings.iter().cloned());
        let cgf = EmpiricalCgf::new(&set)?;
        let j = inside.iter().map(|v| Ok(rate_j(&cgf, dir, v, &consts)?.j)).collect::<Result<Vec<f64>>>()?;
        let sd = bootstrap_sd(&cgf, &set.atoms(), dir, &inside, opts.bootstrap, derive_seed(seed, "bootstrap"))?;
        Ok((j, sd))
    };
    let (ja, sa) = side(dir_a, "direction/a")?;
    let (jb, sb) = side(dir_b, "direction/b")?;
    let rows: Vec<DirectionRow> = inside
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let diff = ja[i] - jb[i];
            let sd = (sa[i].powi(2) + sb[i].powi(2)).sqrt();
            DirectionRow {
                v: v.clone(),
                j_a: ja[i],
                j_b: jb[i],
                sd_a: sa[i],
                sd_b: sb[i],
                diff,
                z: if sd > 0.0 { diff.abs() / sd } else if diff == 0.0 { 0.0 } else { f64::INFINITY },
            }
        })
        .collect();
    let max_abs_diff = rows.iter().map(|r| r.diff.abs()).fold(0.0, f64::max);
    let mean_abs_diff = rows.iter().map(|r| r.diff.abs()).sum::<f64>() / rows.len().max(1) as f64;
    let max_z = rows.iter().map(|r| r.z).fold(0.0, f64::max);
    Ok(DirectionReport { rows, excluded, max_abs_diff, mean_abs_diff, max_z, notes })
}

/// Outcome of a numerical claim.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimStatus {
    Pass,
    Fail,
}

/// A checked quantity: passes iff `margin < tolerance`, where `margin` is the
/// observed discrepancy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub status: ClaimStatus,
    pub margin: f64,
    pub tolerance: f64,
}

impl Claim {
    pub fn check(name: impl Into<String>, margin: f64, tolerance: f64) -> Self {
        let status = if margin < tolerance { ClaimStatus::Pass } else { ClaimStatus::Fail };
        Self { name: name.into(), status, margin, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.status == ClaimStatus::Pass
    }
}

/// A list of claims with JSON and CSV output.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Report {
    pub claims: Vec<Claim>,
}

impl Report {
    pub fn push(&mut self, claim: Claim) {
        self.claims.push(claim);
    }

    pub fn all_pass(&self) -> bool {
        self.claims.iter().all(Claim::passed)
    }

    pub fn failing(&self) -> Vec<&Claim> {
        self.claims.iter().filter(|c| !c.passed()).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["name", "status", "margin", "tolerance"])?;
        for c in &self.claims {
            let status = if c.passed() { "pass" } else { "fail" };
            out.write_record([c.name.as_str(), status, &c.margin.to_string(), &c.tolerance.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Draws a uniform site on the simplex of a Dirichlet model (used by tests
/// that need an arbitrary environment law sample).
#[doc(hidden)]
pub fn sample_probability<R: Rng>(model: &EnvironmentModel, rng: &mut R) -> Vec<f64> {
    model.sample_site(rng)[..2 * model.dimension].to_vec()
}
