//! Annealed simulation, regeneration detection and increment harvesting.

use rand::Rng;
use rayon::prelude::*;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::env::{self, classify_environment, Direction, EnvironmentModel, ModelKind, NestlingClass, MAX_DIM, MAX_STEPS};
use crate::error::{Error, Result};
use crate::rng::stream_rng;

/// Default lookahead for non-nestling models.
pub const LOOKAHEAD_NON_NESTLING: usize = 200;
/// Default lookahead for nestling models, whose backtracks run deeper.
pub const LOOKAHEAD_NESTLING: usize = 2000;

/// A simulated path `X_0 = 0, X_1, ..., X_N`.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub dim: usize,
    pub positions: Vec<[i32; MAX_DIM]>,
    pub seed: u64,
    pub stream: u64,
}

impl Trajectory {
    /// Number of steps `N`.
    pub fn horizon(&self) -> usize {
        self.positions.len() - 1
    }

    pub fn position(&self, n: usize) -> &[i32] {
        &self.positions[n][..self.dim]
    }
}

/// Regeneration times found on a finite trajectory.
#[derive(Clone, Debug, PartialEq)]
pub struct RegenRecord {
    /// All candidate times `tau_1 < tau_2 < ...` visible on the trajectory.
    pub times: Vec<usize>,
    /// `times[..confirmed_upto]` survived the lookahead rule.
    pub confirmed_upto: usize,
    /// `sup ||X_n - X_{tau_i}||` over `tau_i < n <= tau_{i+1}` for consecutive
    /// confirmed times.
    pub sup_excursions: Vec<f64>,
}

impl RegenRecord {
    pub fn confirmed(&self) -> &[usize] {
        &self.times[..self.confirmed_upto]
    }
}

/// One regeneration increment `(X_{tau_{i+1}} - X_{tau_i}, tau_{i+1} - tau_i)`
/// with the largest displacement reached in between.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegenSample {
    pub dx: [i32; MAX_DIM],
    pub dtau: u64,
    pub sup_disp: f64,
}

impl RegenSample {
    pub fn dx(&self, dim: usize) -> &[i32] {
        &self.dx[..dim]
    }
}

/// Limits for [`simulate_annealed`].
#[derive(Clone, Copy, Debug)]
pub struct SimOptions {
    /// Maximum number of distinct sites a single trajectory may cache.
    pub site_budget: usize,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self { site_budget: 20_000_000 }
    }
}

fn cumulative(p: &[f64]) -> [f64; MAX_STEPS] {
    let mut c = [f64::INFINITY; MAX_STEPS];
    let mut acc = 0.0;
    for (ci, pi) in c.iter_mut().zip(p) {
        acc += pi;
        *ci = acc;
    }
    // Guard against rounding in the last bucket.
    c[p.len() - 1] = f64::INFINITY;
    c
}

#[inline]
fn pick(cum: &[f64; MAX_STEPS], u: f64) -> usize {
    let mut i = 0;
    while u >= cum[i] {
        i += 1;
    }
    i
}

/// Environment revealed lazily at first visit of each site.
pub(crate) struct LazyEnvironment<'m> {
    model: &'m EnvironmentModel,
    fixed: [f64; MAX_STEPS],
    component_tables: Vec<[f64; MAX_STEPS]>,
    sites: FxHashMap<[i32; MAX_DIM], u32>,
    slab: Vec<[f64; MAX_STEPS]>,
}

impl<'m> LazyEnvironment<'m> {
    pub(crate) fn new(model: &'m EnvironmentModel) -> Self {
        let (fixed, component_tables) = match &model.kind {
            ModelKind::Deterministic { p } => (cumulative(p), Vec::new()),
            ModelKind::FiniteMixture { components } => {
                ([0.0; MAX_STEPS], components.iter().map(|c| cumulative(&c.p)).collect())
            }
            ModelKind::Dirichlet { .. } => ([0.0; MAX_STEPS], Vec::new()),
        };
        Self { model, fixed, component_tables, sites: FxHashMap::default(), slab: Vec::new() }
    }

    pub(crate) fn clear(&mut self) {
        self.sites.clear();
        self.slab.clear();
    }

    /// Draws the next step index from `site`, sampling the site first if new.
    #[inline]
    pub(crate) fn step<R: Rng>(&mut self, site: &[i32; MAX_DIM], rng: &mut R) -> usize {
        match &self.model.kind {
            ModelKind::Deterministic { .. } => pick(&self.fixed, rng.random::<f64>()),
            ModelKind::FiniteMixture { .. } => {
                let model = self.model;
                let k = *self
                    .sites
                    .entry(*site)
                    .or_insert_with(|| model.pick_component(rng.random::<f64>()) as u32);
                pick(&self.component_tables[k as usize], rng.random::<f64>())
            }
            ModelKind::Dirichlet { .. } => {
                let idx = match self.sites.get(site) {
                    Some(&i) => i as usize,
                    None => {
                        let law = self.model.sample_site(rng);
                        self.slab.push(cumulative(&law[..2 * self.model.dimension]));
                        let i = self.slab.len() - 1;
                        self.sites.insert(*site, i as u32);
                        i
                    }
                };
                pick(&self.slab[idx], rng.random::<f64>())
            }
        }
    }
}

#[inline]
pub(crate) fn apply_step(pos: &mut [i32; MAX_DIM], step: usize) {
    pos[step / 2] += if step % 2 == 0 { 1 } else { -1 };
}

/// Simulates `horizon` steps of the annealed walk on stream 0 of `seed`.
pub fn simulate_annealed(model: &EnvironmentModel, horizon: usize, seed: u64) -> Result<Trajectory> {
    simulate_stream(model, horizon, seed, 0, &SimOptions::default())
}

/// Simulates `horizon` steps of the annealed walk on stream `stream` of `seed`.
pub fn simulate_stream(
    model: &EnvironmentModel,
    horizon: usize,
    seed: u64,
    stream: u64,
    opts: &SimOptions,
) -> Result<Trajectory> {
    model.validate()?;
    if horizon >= opts.site_budget && !matches!(model.kind, ModelKind::Deterministic { .. }) {
        return Err(Error::CacheBudget { horizon, budget: opts.site_budget });
    }
    let mut rng = stream_rng(seed, stream);
    let mut envt = LazyEnvironment::new(model);
    let mut positions = Vec::with_capacity(horizon + 1);
    let mut pos = [0i32; MAX_DIM];
    positions.push(pos);
    for _ in 0..horizon {
        let e = envt.step(&pos, &mut rng);
        apply_step(&mut pos, e);
        positions.push(pos);
    }
    Ok(Trajectory { dim: model.dimension, positions, seed, stream })
}

/// Finds regeneration times in direction `dir`: times `n > 0` at which the
/// level `<X_n, l>` is a strict running maximum and is never undercut later on
/// the trajectory. A time is confirmed when at least `lookahead` further steps
/// were observed.
pub fn detect_regenerations(traj: &Trajectory, dir: &Direction, lookahead: usize) -> Result<RegenRecord> {
    if dir.dim() != traj.dim {
        return Err(Error::DimensionMismatch { expected: traj.dim, got: dir.dim() });
    }
    let n = traj.horizon();
    let levels: Vec<i64> = traj.positions.iter().map(|p| dir.level(&p[..traj.dim])).collect();
    let mut suffix_min = levels.clone();
    for i in (0..n).rev() {
        suffix_min[i] = suffix_min[i].min(suffix_min[i + 1]);
    }
    let mut times = Vec::new();
    let mut running_max = levels[0];
    for t in 1..=n {
        if levels[t] > running_max {
            running_max = levels[t];
            if suffix_min[t] >= levels[t] {
                times.push(t);
            }
        }
    }
    let confirmed_upto = times.iter().take_while(|&&t| t + lookahead <= n).count();
    let mut sup_excursions = Vec::with_capacity(confirmed_upto.saturating_sub(1));
    for w in times[..confirmed_upto].windows(2) {
        let base = traj.positions[w[0]];
        let mut best = 0i64;
        for p in &traj.positions[w[0] + 1..=w[1]] {
            let r2: i64 = (0..traj.dim).map(|i| i64::from(p[i] - base[i]).pow(2)).sum();
            best = best.max(r2);
        }
        sup_excursions.push((best as f64).sqrt());
    }
    Ok(RegenRecord { times, confirmed_upto, sup_excursions })
}

/// Increments between consecutive confirmed regeneration times.
pub fn increments(traj: &Trajectory, record: &RegenRecord) -> Vec<RegenSample> {
    record
        .confirmed()
        .windows(2)
        .zip(&record.sup_excursions)
        .map(|(w, &sup_disp)| {
            let mut dx = [0; MAX_DIM];
            for (i, d) in dx.iter_mut().enumerate().take(traj.dim) {
                *d = traj.positions[w[1]][i] - traj.positions[w[0]][i];
            }
            RegenSample { dx, dtau: (w[1] - w[0]) as u64, sup_disp }
        })
        .collect()
}

/// Settings for [`harvest_increments`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HarvestOptions {
    /// Steps per independent trajectory segment.
    pub segment_horizon: usize,
    /// Total step budget before giving up.
    pub step_budget: u64,
    /// Segments simulated per parallel batch. Fixed so the output does not
    /// depend on the number of worker threads.
    pub batch: usize,
    pub site_budget: usize,
}

impl HarvestOptions {
    pub fn for_request(count: usize, lookahead: usize) -> Self {
        let segment_horizon = (25 * lookahead).max(50_000);
        Self {
            segment_horizon,
            step_budget: 5_000 * count as u64 + 20 * segment_horizon as u64,
            batch: 8,
            site_budget: SimOptions::default().site_budget,
        }
    }
}

/// Output of [`harvest_increments`].
#[derive(Clone, Debug)]
pub struct Harvest {
    pub samples: Vec<RegenSample>,
    pub class: NestlingClass,
    pub trajectories: u64,
    pub total_steps: u64,
    pub regenerations: u64,
    pub warnings: Vec<String>,
}

/// Default lookahead for a classified model.
pub fn default_lookahead(class: &NestlingClass) -> usize {
    if class.is_non_nestling() {
        LOOKAHEAD_NON_NESTLING
    } else {
        LOOKAHEAD_NESTLING
    }
}

/// Regime warnings for a model and direction. Empty when the model is
/// uniformly elliptic and either nestling with `d >= 2` or non-nestling in the
/// direction.
pub fn regime_warnings(model: &EnvironmentModel, class: &NestlingClass) -> Vec<String> {
    let mut w = Vec::new();
    if model.assumptions_violated() {
        w.push("environment is not uniformly elliptic; results are exploratory".to_string());
    }
    let ok = matches!(class.label, env::NestlingLabel::NonNestlingInDirection(_))
        || (class.is_nestling() && model.dimension >= 2);
    if !ok {
        w.push(format!("model outside the supported regime: {:?}", class.label));
    }
    w
}

/// Collects exactly `count` i.i.d. increments (those after the first
/// regeneration of each segment) from independent annealed segments.
pub fn harvest_increments(
    model: &EnvironmentModel,
    dir: &Direction,
    count: usize,
    lookahead: usize,
    seed: u64,
    opts: &HarvestOptions,
) -> Result<Harvest> {
    let class = classify_environment(model, Some(dir))?;
    let warnings = regime_warnings(model, &class);
    if opts.batch == 0 || opts.segment_horizon <= lookahead {
        return Err(Error::InvalidArgument("segment horizon must exceed the lookahead and batch must be positive".into()));
    }
    let sim = SimOptions { site_budget: opts.site_budget };
    let mut samples = Vec::with_capacity(count);
    let (mut trajectories, mut total_steps, mut regenerations) = (0u64, 0u64, 0u64);
    let mut next_stream = 0u64;
    while samples.len() < count {
        if total_steps >= opts.step_budget {
            return Err(Error::HarvestBudget {
                got: samples.len(),
                wanted: count,
                steps: total_steps,
                trajectories,
                regenerations,
            });
        }
        let streams: Vec<u64> = (next_stream..next_stream + opts.batch as u64).collect();
        next_stream += opts.batch as u64;
        let outputs: Vec<Result<(Vec<RegenSample>, usize)>> = streams
            .par_iter()
            .map(|&s| {
                let traj = simulate_stream(model, opts.segment_horizon, seed, s, &sim)?;
                let rec = detect_regenerations(&traj, dir, lookahead)?;
                Ok((increments(&traj, &rec), rec.confirmed_upto))
            })
            .collect();
        for out in outputs {
            let (inc, confirmed) = out?;
            trajectories += 1;
            total_steps += opts.segment_horizon as u64;
            regenerations += confirmed as u64;
            samples.extend(inc);
        }
    }
    samples.truncate(count);
    Ok(Harvest { samples, class, trajectories, total_steps, regenerations, warnings })
}

/// Fraction of regeneration times confirmed on `horizon` steps that stop being
/// regeneration times once the same trajectories are extended to twice the
/// horizon.
pub fn lookahead_violation_rate(
    model: &EnvironmentModel,
    dir: &Direction,
    horizon: usize,
    lookahead: usize,
    trajectories: u64,
    seed: u64,
) -> Result<f64> {
    let sim = SimOptions::default();
    let counts: Vec<Result<(usize, usize)>> = (0..trajectories)
        .into_par_iter()
        .map(|s| {
            let long = simulate_stream(model, 2 * horizon, seed, s, &sim)?;
            let short = Trajectory {
                dim: long.dim,
                positions: long.positions[..=horizon].to_vec(),
                seed,
                stream: s,
            };
            let confirmed = detect_regenerations(&short, dir, lookahead)?;
            let full = detect_regenerations(&long, dir, 0)?;
            let violated = confirmed.confirmed().iter().filter(|t| full.times.binary_search(t).is_err()).count();
            Ok((violated, confirmed.confirmed_upto))
        })
        .collect();
    let (mut bad, mut total) = (0usize, 0usize);
    for c in counts {
        let (b, t) = c?;
        bad += b;
        total += t;
    }
    Ok(if total == 0 { 0.0 } else { bad as f64 / total as f64 })
}
