//! Empirical joint cumulant generating function of regeneration increments,
//! `log mean exp(<eta, dx> + lambda dtau)`, with its gradient, Hessian and
//! importance-weight diagnostics.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::convex::{Evaluation, SmoothConvexFn};
use crate::dataset::{Atom, SampleSet};
use crate::env::MAX_DIM;
use crate::error::{Error, Result};

/// Default floor on the effective sample size of the tilted weights.
pub const ESS_FLOOR: f64 = 200.0;

/// A tilt `(eta, lambda)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TiltPoint {
    pub eta: Vec<f64>,
    pub lambda: f64,
}

impl TiltPoint {
    pub fn new(eta: Vec<f64>, lambda: f64) -> Self {
        Self { eta, lambda }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.eta.clone();
        v.push(self.lambda);
        v
    }
}

/// Value, tilted mean and tilted covariance of the empirical cumulant at a
/// tilt, with the effective sample size of the tilted weights and a delta
/// method standard error of the value.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CgfEstimate {
    pub value: f64,
    pub grad: Vec<f64>,
    pub hess: Vec<Vec<f64>>,
    pub ess: f64,
    pub se: f64,
}

/// Empirical cumulant over aggregated atoms. For nestling sample sets the
/// guard makes the function `+inf` whenever `lambda > 0`.
#[derive(Clone, Debug)]
pub struct EmpiricalCgf {
    dim: usize,
    /// Per atom: `dx` coordinates then `dtau`, shifted by `center`.
    rows: Vec<[f64; MAX_DIM + 1]>,
    counts: Vec<f64>,
    center: [f64; MAX_DIM + 1],
    total: f64,
    guard: bool,
    ess_floor: f64,
    max_dtau: u64,
    min_dtau: u64,
}

impl EmpiricalCgf {
    /// Cumulant of a sample set; the guard follows its nestling label.
    pub fn new(set: &SampleSet) -> Result<Self> {
        Self::from_atoms(set.dim(), &set.atoms(), set.is_nestling())
    }

    pub fn from_atoms(dim: usize, atoms: &[Atom], guard: bool) -> Result<Self> {
        if atoms.is_empty() {
            return Err(Error::TooFewSamples { got: 0, need: 1 });
        }
        let total: f64 = atoms.iter().map(|a| a.count as f64).sum();
        let mut center = [0.0; MAX_DIM + 1];
        for a in atoms {
            let w = a.count as f64 / total;
            for i in 0..dim {
                center[i] += w * f64::from(a.dx[i]);
            }
            center[dim] += w * a.dtau as f64;
        }
        let rows = atoms
            .iter()
            .map(|a| {
                let mut r = [0.0; MAX_DIM + 1];
                for i in 0..dim {
                    r[i] = f64::from(a.dx[i]) - center[i];
                }
                r[dim] = a.dtau as f64 - center[dim];
                r
            })
            .collect();
        Ok(Self {
            dim,
            rows,
            counts: atoms.iter().map(|a| a.count as f64).collect(),
            center,
            total,
            guard,
            ess_floor: ESS_FLOOR,
            max_dtau: atoms.iter().map(|a| a.dtau).max().unwrap_or(1),
            min_dtau: atoms.iter().map(|a| a.dtau).min().unwrap_or(1),
        })
    }

    pub fn with_ess_floor(mut self, floor: f64) -> Self {
        self.ess_floor = floor;
        self
    }

    pub fn with_guard(mut self, guard: bool) -> Self {
        self.guard = guard;
        self
    }

    /// Spatial dimension `d`; the cumulant itself has `d + 1` arguments.
    pub fn spatial_dim(&self) -> usize {
        self.dim
    }

    pub fn guarded(&self) -> bool {
        self.guard
    }

    pub fn ess_floor(&self) -> f64 {
        self.ess_floor
    }

    pub fn sample_count(&self) -> f64 {
        self.total
    }

    pub fn atom_count(&self) -> usize {
        self.rows.len()
    }

    pub fn max_dtau(&self) -> u64 {
        self.max_dtau
    }

    pub fn min_dtau(&self) -> u64 {
        self.min_dtau
    }

    /// Untilted means of `(dx, dtau)`.
    pub fn mean(&self) -> Vec<f64> {
        self.center[..=self.dim].to_vec()
    }

    /// Atoms as `(dx, dtau, count)` in real coordinates.
    pub fn atoms(&self) -> impl Iterator<Item = (Vec<f64>, f64, f64)> + '_ {
        self.rows.iter().zip(&self.counts).map(move |(r, &c)| {
            let dx = (0..self.dim).map(|i| r[i] + self.center[i]).collect();
            (dx, r[self.dim] + self.center[self.dim], c)
        })
    }

    /// Raw weighted moments at a tilt over `k` leading coordinates, without
    /// domain checks. Returns `(log mean weight, mean, covariance, ess)`.
    fn moments(&self, tilt: &[f64], k: usize) -> (f64, [f64; MAX_DIM + 1], [[f64; MAX_DIM + 1]; MAX_DIM + 1], f64) {
        let n = self.dim + 1;
        // Exponents relative to the centred rows; the shift is restored below.
        let shift: f64 = (0..k).map(|i| tilt[i] * self.center[i]).sum();
        let mut max_a = f64::NEG_INFINITY;
        for r in &self.rows {
            let a: f64 = (0..k).map(|i| tilt[i] * r[i]).sum();
            max_a = max_a.max(a);
        }
        let weight = |r: &[f64]| -> f64 { ((0..k).map(|i| tilt[i] * r[i]).sum::<f64>() - max_a).exp() };
        let mut s0 = 0.0;
        let mut s2w = 0.0;
        let mut s1 = [0.0; MAX_DIM + 1];
        for (r, &c) in self.rows.iter().zip(&self.counts) {
            let e = weight(r);
            let w = c * e;
            s0 += w;
            s2w += w * e;
            for i in 0..n {
                s1[i] += w * r[i];
            }
        }
        let value = max_a + shift + (s0 / self.total).ln();
        let mut mean = [0.0; MAX_DIM + 1];
        for i in 0..n {
            mean[i] = s1[i] / s0;
        }
        // Second pass about the tilted mean: raw second moments cancel badly
        // at strong tilts.
        let mut cov = [[0.0; MAX_DIM + 1]; MAX_DIM + 1];
        for (r, &c) in self.rows.iter().zip(&self.counts) {
            let w = c * weight(r) / s0;
            for i in 0..n {
                let di = w * (r[i] - mean[i]);
                for j in 0..=i {
                    cov[i][j] += di * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..n {
            for j in 0..i {
                cov[j][i] = cov[i][j];
            }
        }
        for i in 0..n {
            mean[i] += self.center[i];
        }
        let ess = s0 * s0 / s2w;
        (value, mean, cov, ess)
    }

    fn se_of(&self, ess: f64) -> f64 {
        (1.0 / ess - 1.0 / self.total).max(0.0).sqrt()
    }

    /// `Lambda(eta, lambda)` with gradient and Hessian. Errors when the
    /// effective sample size falls below the floor; with the guard, any
    /// `lambda > 0` gives value `+inf`.
    pub fn eval(&self, tilt: &TiltPoint) -> Result<CgfEstimate> {
        if tilt.eta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: tilt.eta.len() });
        }
        let n = self.dim + 1;
        if self.guard && tilt.lambda > 0.0 {
            return Ok(CgfEstimate {
                value: f64::INFINITY,
                grad: vec![f64::NAN; n],
                hess: vec![vec![f64::NAN; n]; n],
                ess: 0.0,
                se: f64::INFINITY,
            });
        }
        let t = tilt.to_vec();
        let (value, mean, cov, ess) = self.moments(&t, n);
        if !(ess >= self.ess_floor) {
            return Err(Error::TiltOutOfDomain { ess, floor: self.ess_floor });
        }
        Ok(CgfEstimate {
            value,
            grad: mean[..n].to_vec(),
            hess: (0..n).map(|i| cov[i][..n].to_vec()).collect(),
            ess,
            se: self.se_of(ess),
        })
    }

    /// Spatial marginal `Lambda(eta, 0)` with gradient and Hessian in `eta`,
    /// and `h(eta) = E[dtau e^{<eta, dx>}] / E[e^{<eta, dx>}]`.
    pub fn marginal(&self, eta: &[f64]) -> Result<(CgfEstimate, f64)> {
        if eta.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: eta.len() });
        }
        let d = self.dim;
        let (value, mean, cov, ess) = self.moments(eta, d);
        if !(ess >= self.ess_floor) {
            return Err(Error::TiltOutOfDomain { ess, floor: self.ess_floor });
        }
        let est = CgfEstimate {
            value,
            grad: mean[..d].to_vec(),
            hess: (0..d).map(|i| cov[i][..d].to_vec()).collect(),
            ess,
            se: self.se_of(ess),
        };
        Ok((est, mean[d]))
    }

    /// View of the spatial marginal as a convex function of `eta`.
    pub fn marginal_fn(&self) -> MarginalCgf<'_> {
        MarginalCgf { cgf: self }
    }
}

fn to_evaluation(est: &CgfEstimate) -> Evaluation {
    let n = est.grad.len();
    Evaluation {
        value: est.value,
        grad: DVector::from_column_slice(&est.grad),
        hess: DMatrix::from_fn(n, n, |i, j| est.hess[i][j]),
    }
}

impl SmoothConvexFn for EmpiricalCgf {
    fn dim(&self) -> usize {
        self.dim + 1
    }

    fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        let lambda = *x.last()?;
        if self.guard && lambda > 0.0 {
            return None;
        }
        let est = self.eval(&TiltPoint::new(x[..self.dim].to_vec(), lambda)).ok()?;
        Some(to_evaluation(&est))
    }
}

/// `eta -> Lambda(eta, 0)`.
#[derive(Clone, Copy, Debug)]
pub struct MarginalCgf<'a> {
    cgf: &'a EmpiricalCgf,
}

impl SmoothConvexFn for MarginalCgf<'_> {
    fn dim(&self) -> usize {
        self.cgf.dim
    }

    fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        let (est, _) = self.cgf.marginal(x).ok()?;
        Some(to_evaluation(&est))
    }
}

/// Convenience wrapper: `Lambda` at a tilt for a sample set.
pub fn cgf_eval(set: &SampleSet, tilt: &TiltPoint) -> Result<CgfEstimate> {
    EmpiricalCgf::new(set)?.eval(tilt)
}

/// Convenience wrapper: spatial marginal and `h(eta)` for a sample set.
pub fn cgf_marginal(set: &SampleSet, eta: &[f64]) -> Result<(CgfEstimate, f64)> {
    EmpiricalCgf::new(set)?.marginal(eta)
}
