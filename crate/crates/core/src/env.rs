//! Environment models, nestling classification and exact annealed path
//! probabilities.
//!
//! Unit steps are ordered `+e1, -e1, +e2, -e2, ...`, so in two dimensions a
//! transition vector reads `(right, left, up, down)`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::exact_hull::{self, OriginPosition, Q};

/// Largest supported lattice dimension.
pub const MAX_DIM: usize = 3;
/// Largest number of unit steps, `2 * MAX_DIM`.
pub const MAX_STEPS: usize = 2 * MAX_DIM;

const SUM_TOL: f64 = 1e-9;

/// Unit step `index` as a lattice vector in dimension `dim`.
pub fn unit_step(index: usize, dim: usize) -> [i32; MAX_DIM] {
    debug_assert!(index < 2 * dim);
    let mut e = [0; MAX_DIM];
    e[index / 2] = if index % 2 == 0 { 1 } else { -1 };
    e
}

/// Index of the unit step `diff`, if it is one.
pub fn step_index(diff: &[i32]) -> Option<usize> {
    let mut found = None;
    for (axis, &c) in diff.iter().enumerate() {
        match c {
            0 => {}
            1 | -1 if found.is_none() => found = Some(2 * axis + usize::from(c == -1)),
            _ => return None,
        }
    }
    found
}

/// Mean displacement `sum_e e * p(e)` of a transition vector.
pub fn drift(p: &[f64]) -> Vec<f64> {
    (0..p.len() / 2).map(|i| p[2 * i] - p[2 * i + 1]).collect()
}

/// Regeneration direction, kept as an integer lattice vector so level
/// comparisons `<X_n, l>` are exact.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<i64>", into = "Vec<i64>")]
pub struct Direction {
    lattice_vector: Vec<i64>,
}

impl Direction {
    pub fn new(lattice_vector: Vec<i64>) -> Result<Self> {
        if lattice_vector.is_empty() || lattice_vector.len() > MAX_DIM {
            return Err(Error::InvalidDirection(format!(
                "dimension {} not in 1..={MAX_DIM}",
                lattice_vector.len()
            )));
        }
        if lattice_vector.iter().all(|&c| c == 0) {
            return Err(Error::InvalidDirection("zero vector".into()));
        }
        if lattice_vector.iter().any(|c| c.unsigned_abs() > 1 << 20) {
            return Err(Error::InvalidDirection("entries too large".into()));
        }
        Ok(Self { lattice_vector })
    }

    /// Coordinate axis `axis` in dimension `dim`.
    pub fn axis(dim: usize, axis: usize) -> Result<Self> {
        let mut v = vec![0; dim];
        if axis >= dim {
            return Err(Error::InvalidDirection(format!("axis {axis} out of range")));
        }
        v[axis] = 1;
        Self::new(v)
    }

    pub fn dim(&self) -> usize {
        self.lattice_vector.len()
    }

    pub fn lattice_vector(&self) -> &[i64] {
        &self.lattice_vector
    }

    pub fn norm(&self) -> f64 {
        self.lattice_vector.iter().map(|&c| (c * c) as f64).sum::<f64>().sqrt()
    }

    /// The unit vector `l`.
    pub fn unit(&self) -> Vec<f64> {
        let n = self.norm();
        self.lattice_vector.iter().map(|&c| c as f64 / n).collect()
    }

    /// Integer level `<x, c>` of a lattice point, where `c` is the lattice vector.
    #[inline]
    pub fn level(&self, x: &[i32]) -> i64 {
        self.lattice_vector.iter().zip(x).map(|(&c, &xi)| c * i64::from(xi)).sum()
    }

    /// `<v, l>` for a real vector.
    pub fn project(&self, v: &[f64]) -> f64 {
        self.unit().iter().zip(v).map(|(a, b)| a * b).sum()
    }
}

impl TryFrom<Vec<i64>> for Direction {
    type Error = Error;
    fn try_from(v: Vec<i64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Direction> for Vec<i64> {
    fn from(d: Direction) -> Self {
        d.lattice_vector
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub p: Vec<f64>,
}

/// Law of the transition vector at a single site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "parameters", rename_all = "snake_case")]
pub enum ModelKind {
    /// The same transition vector at every site.
    Deterministic { p: Vec<f64> },
    /// Each site independently picks component `k` with probability `weight`.
    FiniteMixture { components: Vec<MixtureComponent> },
    /// Dirichlet site laws. Not uniformly elliptic.
    Dirichlet { alpha: Vec<f64> },
}

/// An i.i.d. environment: the site law, the lattice dimension and the
/// ellipticity constant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentModel {
    pub dimension: usize,
    #[serde(flatten)]
    pub kind: ModelKind,
    pub epsilon: f64,
}

impl EnvironmentModel {
    /// Two-dimensional mixture whose drifts `(0.5, 0)` and `(0.3, 0)` both
    /// point along `+e1`: non-nestling in every direction with positive first
    /// coordinate.
    pub fn non_nestling_default() -> Self {
        Self::mixture(vec![(0.5, vec![0.6, 0.1, 0.15, 0.15]), (0.5, vec![0.45, 0.15, 0.2, 0.2])])
            .expect("valid preset")
    }

    /// Two-dimensional mixture of drifts `(0.2, 0)`, `(-0.1, 0.1)` and
    /// `(-0.1, -0.1)` with weights 0.6, 0.2, 0.2. The origin is interior to
    /// the drift triangle and the mean drift is `(0.08, 0)`.
    pub fn nestling_triangle() -> Self {
        Self::mixture(vec![
            (0.6, vec![0.35, 0.15, 0.25, 0.25]),
            (0.2, vec![0.2, 0.3, 0.3, 0.2]),
            (0.2, vec![0.2, 0.3, 0.2, 0.3]),
        ])
        .expect("valid preset")
    }

    /// Simple walk on `Z` stepping right with probability `p`.
    pub fn ballistic_1d(p: f64) -> Result<Self> {
        Self::deterministic(vec![p, 1.0 - p])
    }

    pub fn deterministic(p: Vec<f64>) -> Result<Self> {
        let dimension = p.len() / 2;
        let epsilon = p.iter().copied().fold(f64::INFINITY, f64::min);
        Self::new(dimension, ModelKind::Deterministic { p }, epsilon)
    }

    pub fn mixture(components: Vec<(f64, Vec<f64>)>) -> Result<Self> {
        let dimension = components.first().map_or(0, |c| c.1.len() / 2);
        let epsilon = components
            .iter()
            .flat_map(|c| c.1.iter().copied())
            .fold(f64::INFINITY, f64::min);
        let components = components.into_iter().map(|(weight, p)| MixtureComponent { weight, p }).collect();
        Self::new(dimension, ModelKind::FiniteMixture { components }, epsilon)
    }

    pub fn dirichlet(alpha: Vec<f64>) -> Result<Self> {
        let dimension = alpha.len() / 2;
        Self::new(dimension, ModelKind::Dirichlet { alpha }, 0.0)
    }

    pub fn new(dimension: usize, kind: ModelKind, epsilon: f64) -> Result<Self> {
        let m = Self { dimension, kind, epsilon };
        m.validate()?;
        Ok(m)
    }

    /// Checks dimensions, normalisation and ellipticity.
    pub fn validate(&self) -> Result<()> {
        let d = self.dimension;
        if d == 0 || d > MAX_DIM {
            return Err(Error::InvalidModel(format!("dimension {d} not in 1..={MAX_DIM}")));
        }
        let check_p = |p: &[f64], what: &str| -> Result<()> {
            if p.len() != 2 * d {
                return Err(Error::InvalidModel(format!("{what} has length {}, expected {}", p.len(), 2 * d)));
            }
            if p.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidModel(format!("{what} has a non-finite entry")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidModel(format!("{what} sums to {s}")));
            }
            if p.iter().any(|&x| x < self.epsilon) {
                return Err(Error::InvalidModel(format!("{what} has an entry below epsilon = {}", self.epsilon)));
            }
            Ok(())
        };
        match &self.kind {
            ModelKind::Deterministic { p } => {
                if !(self.epsilon > 0.0) {
                    return Err(Error::InvalidModel("epsilon must be positive".into()));
                }
                check_p(p, "p")
            }
            ModelKind::FiniteMixture { components } => {
                if !(self.epsilon > 0.0) {
                    return Err(Error::InvalidModel("epsilon must be positive".into()));
                }
                if components.is_empty() {
                    return Err(Error::InvalidModel("mixture has no components".into()));
                }
                for (k, c) in components.iter().enumerate() {
                    if !(c.weight >= 0.0) || !c.weight.is_finite() {
                        return Err(Error::InvalidModel(format!("component {k} has weight {}", c.weight)));
                    }
                    check_p(&c.p, &format!("component {k}"))?;
                }
                let w: f64 = components.iter().map(|c| c.weight).sum();
                if (w - 1.0).abs() > SUM_TOL {
                    return Err(Error::InvalidModel(format!("mixture weights sum to {w}")));
                }
                Ok(())
            }
            ModelKind::Dirichlet { alpha } => {
                if alpha.len() != 2 * d {
                    return Err(Error::InvalidModel(format!("alpha has length {}, expected {}", alpha.len(), 2 * d)));
                }
                if alpha.iter().any(|&a| !(a > 0.0) || !a.is_finite()) {
                    return Err(Error::InvalidModel("alpha entries must be positive".into()));
                }
                if self.epsilon != 0.0 {
                    return Err(Error::InvalidModel("Dirichlet environments are not elliptic; epsilon must be 0".into()));
                }
                Ok(())
            }
        }
    }

    /// True for models outside the uniformly elliptic i.i.d. setting; results
    /// on them are exploratory.
    pub fn assumptions_violated(&self) -> bool {
        matches!(self.kind, ModelKind::Dirichlet { .. })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serialises")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// SHA-256 of the canonical (key-sorted, compact) JSON form.
    pub fn content_hash(&self) -> String {
        let value = serde_json::to_value(self).expect("model serialises");
        let canonical = serde_json::to_string(&value).expect("value serialises");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    /// Annealed one-step law: the mean transition vector.
    pub fn mean_law(&self) -> Vec<f64> {
        match &self.kind {
            ModelKind::Deterministic { p } => p.clone(),
            ModelKind::FiniteMixture { components } => {
                let mut m = vec![0.0; 2 * self.dimension];
                for c in components {
                    for (mi, pi) in m.iter_mut().zip(&c.p) {
                        *mi += c.weight * pi;
                    }
                }
                m
            }
            ModelKind::Dirichlet { alpha } => {
                let a: f64 = alpha.iter().sum();
                alpha.iter().map(|x| x / a).collect()
            }
        }
    }

    /// Points whose convex hull is the set of possible local drifts.
    fn drift_generators(&self) -> Vec<Vec<Q>> {
        let exact_drift = |p: &[f64]| -> Vec<Q> {
            (0..self.dimension)
                .map(|i| exact_hull::q_from_f64(p[2 * i]) - exact_hull::q_from_f64(p[2 * i + 1]))
                .collect()
        };
        match &self.kind {
            ModelKind::Deterministic { p } => vec![exact_drift(p)],
            ModelKind::FiniteMixture { components } => components
                .iter()
                .filter(|c| c.weight > 0.0)
                .map(|c| exact_drift(&c.p))
                .collect(),
            ModelKind::Dirichlet { .. } => (0..2 * self.dimension)
                .map(|i| {
                    unit_step(i, self.dimension)[..self.dimension]
                        .iter()
                        .map(|&c| Q::from_integer(c.into()))
                        .collect()
                })
                .collect(),
        }
    }

    /// Draws the transition vector of one fresh site.
    pub fn sample_site<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; MAX_STEPS] {
        let mut out = [0.0; MAX_STEPS];
        match &self.kind {
            ModelKind::Deterministic { p } => out[..p.len()].copy_from_slice(p),
            ModelKind::FiniteMixture { components } => {
                let k = self.pick_component(rng.random::<f64>());
                out[..components[k].p.len()].copy_from_slice(&components[k].p);
            }
            ModelKind::Dirichlet { alpha } => {
                let mut total = 0.0;
                for (o, &a) in out.iter_mut().zip(alpha) {
                    *o = Gamma::new(a, 1.0).expect("positive shape").sample(rng);
                    total += *o;
                }
                for o in out[..alpha.len()].iter_mut() {
                    *o /= total;
                }
            }
        }
        out
    }

    /// Mixture component selected by a uniform draw `u`.
    pub(crate) fn pick_component(&self, u: f64) -> usize {
        let ModelKind::FiniteMixture { components } = &self.kind else { return 0 };
        let mut acc = 0.0;
        for (k, c) in components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                return k;
            }
        }
        components.iter().rposition(|c| c.weight > 0.0).unwrap_or(0)
    }
}

/// Nestling classification label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NestlingLabel {
    /// Every possible drift has positive projection on the given direction.
    NonNestlingInDirection(Direction),
    /// The origin is outside the drift hull.
    NonNestling,
    /// The origin is on the boundary of the drift hull.
    MarginallyNestling,
    /// The origin is in the interior of the drift hull.
    Nestling,
}

/// Result of [`classify_environment`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NestlingClass {
    pub label: NestlingLabel,
    /// Extreme points of the drift hull.
    pub hull_vertices: Vec<Vec<f64>>,
}

impl NestlingClass {
    pub fn is_nestling(&self) -> bool {
        matches!(self.label, NestlingLabel::Nestling)
    }

    pub fn is_non_nestling(&self) -> bool {
        matches!(self.label, NestlingLabel::NonNestling | NestlingLabel::NonNestlingInDirection(_))
    }
}

/// Classifies the environment from the convex hull of its local drifts using
/// exact rational arithmetic. With a direction, a non-nestling model whose
/// drifts all project positively on it is labelled
/// [`NestlingLabel::NonNestlingInDirection`].
pub fn classify_environment(model: &EnvironmentModel, direction: Option<&Direction>) -> Result<NestlingClass> {
    model.validate()?;
    if let Some(dir) = direction {
        if dir.dim() != model.dimension {
            return Err(Error::DimensionMismatch { expected: model.dimension, got: dir.dim() });
        }
    }
    let gens = model.drift_generators();
    let hull_vertices = exact_hull::extreme_points(&gens)
        .iter()
        .map(|p| p.iter().map(exact_hull::q_to_f64).collect())
        .collect();
    let label = match exact_hull::origin_position(&gens, model.dimension) {
        OriginPosition::Interior => NestlingLabel::Nestling,
        OriginPosition::Boundary => NestlingLabel::MarginallyNestling,
        OriginPosition::Outside => {
            let positive = direction.filter(|dir| {
                let c: Vec<Q> = dir.lattice_vector().iter().map(|&x| Q::from_integer(x.into())).collect();
                exact_hull::min_projection(&gens, &c) > Q::from_integer(0.into())
            });
            match positive {
                Some(dir) => NestlingLabel::NonNestlingInDirection(dir.clone()),
                None => NestlingLabel::NonNestling,
            }
        }
    };
    Ok(NestlingClass { label, hull_vertices })
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn log_pow(p: f64, n: u32) -> f64 {
    if n == 0 {
        0.0
    } else {
        f64::from(n) * p.ln()
    }
}

/// `log E[prod_e omega(0, e)^{n_e}]` for exit counts `counts` at one site.
pub fn log_site_exit_moment(model: &EnvironmentModel, counts: &[u32]) -> Result<f64> {
    if counts.len() != 2 * model.dimension {
        return Err(Error::DimensionMismatch { expected: 2 * model.dimension, got: counts.len() });
    }
    let term = |p: &[f64]| -> f64 { p.iter().zip(counts).map(|(&pi, &n)| log_pow(pi, n)).sum() };
    Ok(match &model.kind {
        ModelKind::Deterministic { p } => term(p),
        ModelKind::FiniteMixture { components } => {
            let logs: Vec<f64> = components
                .iter()
                .filter(|c| c.weight > 0.0)
                .map(|c| c.weight.ln() + term(&c.p))
                .collect();
            log_sum_exp(&logs)
        }
        ModelKind::Dirichlet { alpha } => {
            let a: f64 = alpha.iter().sum();
            let n: f64 = counts.iter().map(|&c| f64::from(c)).sum();
            let mut acc = ln_gamma(a) - ln_gamma(a + n);
            for (&ai, &ni) in alpha.iter().zip(counts) {
                if ni > 0 {
                    acc += ln_gamma(ai + f64::from(ni)) - ln_gamma(ai);
                }
            }
            acc
        }
    })
}

/// `E[prod_e omega(0, e)^{n_e}]`.
pub fn site_exit_moment(model: &EnvironmentModel, counts: &[u32]) -> Result<f64> {
    log_site_exit_moment(model, counts).map(f64::exp)
}

/// Per-site exit counts of a nearest-neighbour path given by its positions.
pub fn exit_counts(dim: usize, path: &[Vec<i32>]) -> Result<BTreeMap<Vec<i32>, Vec<u32>>> {
    let mut counts: BTreeMap<Vec<i32>, Vec<u32>> = BTreeMap::new();
    for (i, w) in path.windows(2).enumerate() {
        if w[0].len() != dim || w[1].len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: w[1].len() });
        }
        let diff: Vec<i32> = w[1].iter().zip(&w[0]).map(|(a, b)| a - b).collect();
        let e = step_index(&diff).ok_or(Error::NotNearestNeighbour { index: i })?;
        counts.entry(w[0].clone()).or_insert_with(|| vec![0; 2 * dim])[e] += 1;
    }
    Ok(counts)
}

/// Log of the annealed probability of a path: the product over visited sites
/// of the site exit moments.
pub fn log_annealed_path_prob(model: &EnvironmentModel, path: &[Vec<i32>]) -> Result<f64> {
    let counts = exit_counts(model.dimension, path)?;
    counts.values().map(|c| log_site_exit_moment(model, c)).sum()
}

/// Annealed probability of a path given by its positions (starting anywhere;
/// the law is translation invariant).
pub fn annealed_path_prob(model: &EnvironmentModel, path: &[Vec<i32>]) -> Result<f64> {
    log_annealed_path_prob(model, path).map(f64::exp)
}
