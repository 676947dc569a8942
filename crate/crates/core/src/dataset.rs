//! Sample sets of regeneration increments: storage, velocity and tail
//! estimates.
//!
//! Binary layout: the magic bytes `RWRE01`, a little-endian `u64` header
//! length, the JSON header, then `count` packed records of `d` little-endian
//! `i32` displacements, a `u64` duration and an `f64` excursion radius.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{Direction, EnvironmentModel, NestlingLabel, MAX_DIM};
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::stats::{chi_square_quantile, multinomial_resample, quantile_sorted, weighted_least_squares};
use crate::walk::{default_lookahead, harvest_increments, HarvestOptions, RegenSample};

pub const MAGIC: &[u8; 6] = b"RWRE01";
const FORMAT_VERSION: u32 = 1;

/// Provenance of a sample set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleHeader {
    pub format_version: u32,
    pub model: EnvironmentModel,
    pub model_hash: String,
    pub direction: Direction,
    pub label: NestlingLabel,
    pub seed_base: u64,
    pub lookahead: usize,
    pub count: usize,
    pub harvest: HarvestOptions,
    pub trajectories: u64,
    pub total_steps: u64,
    pub regenerations: u64,
    pub warnings: Vec<String>,
}

/// Exceedance counts at thresholds `1, 2, 4, ...`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailStats {
    pub thresholds: Vec<f64>,
    pub dtau_exceedances: Vec<u64>,
    pub sup_disp_exceedances: Vec<u64>,
}

impl TailStats {
    pub fn from_records(records: &[RegenSample]) -> Self {
        let max = records
            .iter()
            .map(|r| (r.dtau as f64).max(r.sup_disp))
            .fold(1.0, f64::max);
        let mut thresholds = Vec::new();
        let mut t = 1.0;
        while t <= max {
            thresholds.push(t);
            t *= 2.0;
        }
        let count = |f: &dyn Fn(&RegenSample) -> f64| -> Vec<u64> {
            thresholds
                .iter()
                .map(|&t| records.iter().filter(|r| f(r) > t).count() as u64)
                .collect()
        };
        Self {
            dtau_exceedances: count(&|r| r.dtau as f64),
            sup_disp_exceedances: count(&|r| r.sup_disp),
            thresholds,
        }
    }
}

/// Distinct `(dx, dtau)` value with its multiplicity.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Atom {
    pub dx: [i32; MAX_DIM],
    pub dtau: u64,
    pub count: u64,
}

/// Regeneration increments harvested under one model, direction and seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub header: SampleHeader,
    pub records: Vec<RegenSample>,
    pub tail_stats: TailStats,
}

impl SampleSet {
    /// Harvests `count` increments. `lookahead` defaults by nestling class.
    pub fn harvest(
        model: &EnvironmentModel,
        direction: &Direction,
        count: usize,
        lookahead: Option<usize>,
        seed: u64,
        options: Option<HarvestOptions>,
    ) -> Result<Self> {
        let class = crate::env::classify_environment(model, Some(direction))?;
        let lookahead = lookahead.unwrap_or_else(|| default_lookahead(&class));
        let opts = options.unwrap_or_else(|| HarvestOptions::for_request(count, lookahead));
        let h = harvest_increments(model, direction, count, lookahead, seed, &opts)?;
        let header = SampleHeader {
            format_version: FORMAT_VERSION,
            model: model.clone(),
            model_hash: model.content_hash(),
            direction: direction.clone(),
            label: h.class.label.clone(),
            seed_base: seed,
            lookahead,
            count,
            harvest: opts,
            trajectories: h.trajectories,
            total_steps: h.total_steps,
            regenerations: h.regenerations,
            warnings: h.warnings,
        };
        Ok(Self::from_parts(header, h.samples))
    }

    pub fn from_parts(header: SampleHeader, records: Vec<RegenSample>) -> Self {
        let tail_stats = TailStats::from_records(&records);
        Self { header, records, tail_stats }
    }

    pub fn dim(&self) -> usize {
        self.header.model.dimension
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_nestling(&self) -> bool {
        matches!(self.header.label, NestlingLabel::Nestling)
    }

    /// SHA-256 of the serialized header.
    pub fn header_hash(&self) -> String {
        let json = serde_json::to_vec(&self.header).expect("header serialises");
        hex::encode(Sha256::digest(json))
    }

    /// Distinct `(dx, dtau)` values with counts, in lexicographic order.
    pub fn atoms(&self) -> Vec<Atom> {
        atoms_of(&self.records)
    }

    pub fn write_to<W: Write>(&self, w: W) -> Result<()> {
        let mut w = BufWriter::new(w);
        let header = serde_json::to_vec(&self.header)?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let d = self.dim();
        for r in &self.records {
            for &x in &r.dx[..d] {
                w.write_all(&x.to_le_bytes())?;
            }
            w.write_all(&r.dtau.to_le_bytes())?;
            w.write_all(&r.sup_disp.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len);
        if len > 1 << 26 {
            return Err(Error::Format(format!("header length {len} is implausible")));
        }
        let mut header = vec![0u8; len as usize];
        r.read_exact(&mut header)?;
        let header: SampleHeader = serde_json::from_slice(&header)?;
        header.model.validate()?;
        let d = header.model.dimension;
        let mut records = Vec::with_capacity(header.count);
        let mut buf = vec![0u8; 4 * d + 16];
        for _ in 0..header.count {
            r.read_exact(&mut buf)?;
            let mut dx = [0; MAX_DIM];
            for (i, x) in dx.iter_mut().enumerate().take(d) {
                *x = i32::from_le_bytes(buf[4 * i..4 * i + 4].try_into().expect("4 bytes"));
            }
            let dtau = u64::from_le_bytes(buf[4 * d..4 * d + 8].try_into().expect("8 bytes"));
            let sup_disp = f64::from_le_bytes(buf[4 * d + 8..4 * d + 16].try_into().expect("8 bytes"));
            records.push(RegenSample { dx, dtau, sup_disp });
        }
        let mut extra = [0u8; 1];
        if r.read(&mut extra)? != 0 {
            return Err(Error::Format("trailing bytes after records".into()));
        }
        Ok(Self::from_parts(header, records))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(std::fs::File::open(path)?)
    }

    /// CSV with columns `dx1..dxd, dtau, sup_disp`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let d = self.dim();
        let mut head: Vec<String> = (1..=d).map(|i| format!("dx{i}")).collect();
        head.push("dtau".into());
        head.push("sup_disp".into());
        out.write_record(&head)?;
        for r in &self.records {
            let mut row: Vec<String> = r.dx[..d].iter().map(ToString::to_string).collect();
            row.push(r.dtau.to_string());
            row.push(r.sup_disp.to_string());
            out.write_record(&row)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub(crate) fn atoms_of(records: &[RegenSample]) -> Vec<Atom> {
    let mut map: BTreeMap<([i32; MAX_DIM], u64), u64> = BTreeMap::new();
    for r in records {
        *map.entry((r.dx, r.dtau)).or_insert(0) += 1;
    }
    map.into_iter().map(|((dx, dtau), count)| Atom { dx, dtau, count }).collect()
}

/// Sums the counts of equal atoms across several atom lists.
pub fn merge_atoms(lists: &[Vec<Atom>]) -> Vec<Atom> {
    let mut map: BTreeMap<([i32; MAX_DIM], u64), u64> = BTreeMap::new();
    for a in lists.iter().flatten() {
        *map.entry((a.dx, a.dtau)).or_insert(0) += a.count;
    }
    map.into_iter().map(|((dx, dtau), count)| Atom { dx, dtau, count }).collect()
}

/// Harvests `chunks` independent sample sets of `per_chunk` increments each
/// (seeds derived from `seed`) and keeps only their pooled atoms, so large
/// totals fit in memory. Returns the atoms and whether the model is nestling.
pub fn harvest_pooled(
    model: &EnvironmentModel,
    dir: &Direction,
    chunks: usize,
    per_chunk: usize,
    seed: u64,
) -> Result<(Vec<Atom>, bool)> {
    let mut lists = Vec::with_capacity(chunks);
    let mut nestling = false;
    for i in 0..chunks {
        let set = SampleSet::harvest(model, dir, per_chunk, None, crate::rng::derive_seed(seed, &format!("chunk/{i}")), None)?;
        nestling = set.is_nestling();
        lists.push(set.atoms());
    }
    Ok((merge_atoms(&lists), nestling))
}

/// Velocity estimate with a bootstrap confidence ellipsoid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub v: Vec<f64>,
    /// Bootstrap covariance of the estimate.
    pub cov: Vec<Vec<f64>>,
    /// Squared Mahalanobis radius of the ellipsoid.
    pub radius_sq: f64,
    pub level: f64,
}

impl Velocity {
    /// Whether `x` lies in the confidence ellipsoid.
    pub fn contains(&self, x: &[f64]) -> bool {
        let d = self.v.len();
        let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| self.cov[i][j]);
        let diff = nalgebra::DVector::from_fn(d, |i, _| x[i] - self.v[i]);
        match cov.try_inverse() {
            Some(inv) => (diff.transpose() * inv * &diff)[(0, 0)] <= self.radius_sq,
            None => diff.norm() == 0.0,
        }
    }

    /// Bootstrap standard error of each coordinate.
    pub fn se(&self) -> Vec<f64> {
        (0..self.v.len()).map(|i| self.cov[i][i].max(0.0).sqrt()).collect()
    }
}

fn ratio_velocity(atoms: &[Atom], counts: &[u64], dim: usize) -> Vec<f64> {
    let mut sx = [0i128; MAX_DIM];
    let mut st = 0i128;
    for (a, &c) in atoms.iter().zip(counts) {
        for i in 0..dim {
            sx[i] += i128::from(a.dx[i]) * i128::from(c);
        }
        st += i128::from(a.dtau) * i128::from(c);
    }
    (0..dim).map(|i| sx[i] as f64 / st as f64).collect()
}

/// `sum dx / sum dtau` with a 95% bootstrap ellipsoid from 400 resamples.
pub fn velocity(set: &SampleSet) -> Result<Velocity> {
    velocity_with(set, 400, 0.95)
}

pub fn velocity_with(set: &SampleSet, reps: usize, level: f64) -> Result<Velocity> {
    if set.is_empty() {
        return Err(Error::TooFewSamples { got: 0, need: 1 });
    }
    let d = set.dim();
    let atoms = set.atoms();
    let counts: Vec<u64> = atoms.iter().map(|a| a.count).collect();
    let v = ratio_velocity(&atoms, &counts, d);
    let mut rng = stream_rng(crate::rng::derive_seed(set.header.seed_base, "velocity-bootstrap"), 0);
    let mut cov = vec![vec![0.0; d]; d];
    for _ in 0..reps {
        let c = multinomial_resample(&counts, &mut rng);
        let vb = ratio_velocity(&atoms, &c, d);
        for i in 0..d {
            for j in 0..d {
                cov[i][j] += (vb[i] - v[i]) * (vb[j] - v[j]) / reps as f64;
            }
        }
    }
    Ok(Velocity { v, cov, radius_sq: chi_square_quantile(level, d), level })
}

/// Which increment field a tail fit uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TailField {
    Dtau,
    SupDisp,
}

/// Exponential tail fit `log P(field > t) ~ a - c t`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailFit {
    pub c_hat: f64,
    pub ci: (f64, f64),
    pub intercept: f64,
    pub thresholds: Vec<f64>,
    /// Quadratic coefficient of a weighted quadratic fit to the log tail and
    /// its standard error; a significantly positive value means the hazard
    /// decreases, i.e. a heavier than exponential tail.
    pub curvature: f64,
    pub curvature_se: f64,
    /// Slope over the upper half of the thresholds divided by the slope over
    /// the lower half, with its bootstrap interval.
    pub hazard_ratio: f64,
    pub hazard_ratio_ci: (f64, f64),
    pub sub_exponential: bool,
}

const MIN_EXCEEDANCES: usize = 30;
/// Upper bound on the hazard ratio for a tail to count as sub-exponential.
pub const SUB_EXPONENTIAL_RATIO: f64 = 0.95;
const MAX_THRESHOLDS: usize = 60;

fn tail_points(sorted: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = sorted.len();
    let q90 = quantile_sorted(sorted, 0.9);
    let exceed = |t: f64| n - sorted.partition_point(|&x| x <= t);
    // Distinct observed values from the upper decile up to the last one that
    // still leaves enough exceedances.
    let mut cands: Vec<f64> = sorted[sorted.partition_point(|&x| x < q90)..].to_vec();
    cands.dedup();
    cands.retain(|&t| exceed(t) >= MIN_EXCEEDANCES);
    if cands.len() > MAX_THRESHOLDS {
        let step = (cands.len() - 1) as f64 / (MAX_THRESHOLDS - 1) as f64;
        cands = (0..MAX_THRESHOLDS).map(|i| cands[(i as f64 * step).round() as usize]).collect();
        cands.dedup();
    }
    if cands.len() < 3 {
        return Err(Error::InsufficientTail(format!(
            "{} usable thresholds in the upper decile (need 3 with at least {MIN_EXCEEDANCES} exceedances)",
            cands.len()
        )));
    }
    let logs = cands.iter().map(|&t| (exceed(t) as f64 / n as f64).ln()).collect();
    let weights = cands.iter().map(|&t| exceed(t) as f64).collect();
    Ok((cands, logs, weights))
}

fn hazard_ratio(t: &[f64], logs: &[f64], w: &[f64]) -> f64 {
    let m = t.len() / 2;
    if m < 2 || t.len() - m < 2 {
        return f64::NAN;
    }
    match (fit_line(&t[..m], &logs[..m], &w[..m]), fit_line(&t[m..], &logs[m..], &w[m..])) {
        (Some((lo, _)), Some((hi, _))) if lo > 0.0 => hi / lo,
        _ => f64::NAN,
    }
}

/// Plain weighted line fit, exact for two points.
fn fit_line(t: &[f64], logs: &[f64], w: &[f64]) -> Option<(f64, f64)> {
    let sw: f64 = w.iter().sum();
    let mt = t.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ml = logs.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = t.iter().zip(w).map(|(a, b)| b * (a - mt).powi(2)).sum();
    let sxy: f64 = t.iter().zip(logs).zip(w).map(|((a, l), b)| b * (a - mt) * (l - ml)).sum();
    (sxx > 0.0).then(|| (-sxy / sxx, ml + sxy / sxx * mt))
}

fn fit_slope(t: &[f64], logs: &[f64], w: &[f64]) -> Result<(f64, f64)> {
    let rows: Vec<Vec<f64>> = t.iter().map(|&x| vec![1.0, x]).collect();
    let fit = weighted_least_squares(&rows, logs, w)?;
    Ok((-fit.coef[1], fit.coef[0]))
}

fn field_values(set: &SampleSet, field: TailField) -> Vec<f64> {
    set.records
        .iter()
        .map(|r| match field {
            TailField::Dtau => r.dtau as f64,
            TailField::SupDisp => r.sup_disp,
        })
        .collect()
}

/// Least-squares exponential tail rate over the upper decile, with a
/// bootstrap interval and a curvature test for sub-exponential tails.
pub fn tail_exponent(set: &SampleSet, field: TailField) -> Result<TailFit> {
    let mut values = field_values(set, field);
    values.sort_by(f64::total_cmp);
    let (thresholds, logs, w) = tail_points(&values)?;
    let (c_hat, intercept) = fit_slope(&thresholds, &logs, &w)?;

    let scale = thresholds.last().copied().unwrap_or(1.0).max(1.0);
    let rows: Vec<Vec<f64>> = thresholds.iter().map(|&x| vec![1.0, x / scale, (x / scale).powi(2)]).collect();
    let (curvature, curvature_se) = match weighted_least_squares(&rows, &logs, &w) {
        Ok(q) => (q.coef[2] / (scale * scale), q.se(2) / (scale * scale)),
        Err(_) => (0.0, f64::INFINITY),
    };
    let ratio = hazard_ratio(&thresholds, &logs, &w);

    // Bootstrap over distinct values.
    let mut distinct: Vec<(f64, u64)> = Vec::new();
    for &x in &values {
        match distinct.last_mut() {
            Some((v, c)) if *v == x => *c += 1,
            _ => distinct.push((x, 1)),
        }
    }
    let counts: Vec<u64> = distinct.iter().map(|p| p.1).collect();
    let mut rng = stream_rng(crate::rng::derive_seed(set.header.seed_base, "tail-bootstrap"), field as u64);
    let mut boots = Vec::new();
    let mut ratios = Vec::new();
    for _ in 0..200 {
        let c = multinomial_resample(&counts, &mut rng);
        let mut resampled = Vec::with_capacity(values.len());
        for ((x, _), &k) in distinct.iter().zip(&c) {
            resampled.extend(std::iter::repeat(*x).take(k as usize));
        }
        if let Ok((t, l, w)) = tail_points(&resampled) {
            if let Ok((c, _)) = fit_slope(&t, &l, &w) {
                boots.push(c);
            }
            let r = hazard_ratio(&t, &l, &w);
            if r.is_finite() {
                ratios.push(r);
            }
        }
    }
    boots.sort_by(f64::total_cmp);
    let ci = if boots.len() >= 20 {
        (quantile_sorted(&boots, 0.025), quantile_sorted(&boots, 0.975))
    } else {
        (f64::NAN, f64::NAN)
    };
    ratios.sort_by(f64::total_cmp);
    let hazard_ratio_ci = if ratios.len() >= 20 {
        (quantile_sorted(&ratios, 0.025), quantile_sorted(&ratios, 0.975))
    } else {
        (f64::NAN, f64::NAN)
    };
    let sub_exponential = curvature > 4.0 * curvature_se && hazard_ratio_ci.1 < SUB_EXPONENTIAL_RATIO;
    Ok(TailFit {
        c_hat,
        ci,
        intercept,
        thresholds,
        curvature,
        curvature_se,
        hazard_ratio: ratio,
        hazard_ratio_ci,
        sub_exponential,
    })
}
