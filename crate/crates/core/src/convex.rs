//! Legendre transforms of smooth convex functions with restricted domains,
//! implicit roots, and duality checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value, gradient and Hessian at a point.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub grad: DVector<f64>,
    pub hess: DMatrix<f64>,
}

/// A twice-differentiable convex function on an open domain. Points outside
/// the domain evaluate to `None`, which plays the role of `+inf`.
pub trait SmoothConvexFn: Sync {
    fn dim(&self) -> usize;
    fn evaluate(&self, x: &[f64]) -> Option<Evaluation>;

    fn value(&self, x: &[f64]) -> Option<f64> {
        self.evaluate(x).map(|e| e.value)
    }
}

impl<F: SmoothConvexFn + ?Sized> SmoothConvexFn for &F {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        (**self).evaluate(x)
    }
}

/// How a Legendre ascent ended when it did not reach a stationary point.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Wall {
    /// Interior stationary point found.
    None,
    /// Line search blocked by the edge of the domain; the value is a lower
    /// bound for the transform.
    Domain,
    /// The iterate ran past the norm cap with the objective still rising; the
    /// transform is `+inf`.
    Divergent,
    /// The Hessian is singular at the maximiser, which is then not unique.
    Degenerate,
}

#[derive(Clone, Debug)]
pub struct LegendreOptions {
    /// Relative gradient residual accepted as converged.
    pub tol: f64,
    /// Residual at which iteration stops early.
    pub tol_stop: f64,
    pub max_iter: usize,
    /// Backtracking halvings per step.
    pub max_halvings: usize,
    /// Norm cap on the dual variable.
    pub max_norm: f64,
    pub start: Option<Vec<f64>>,
}

impl Default for LegendreOptions {
    fn default() -> Self {
        Self { tol: 1e-8, tol_stop: 1e-13, max_iter: 200, max_halvings: 60, max_norm: 500.0, start: None }
    }
}

impl LegendreOptions {
    pub fn with_start(mut self, start: Vec<f64>) -> Self {
        self.start = Some(start);
        self
    }
}

/// `sup_y <y, x> - F(y)` and where it is attained.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LegendreResult {
    /// The transform value: exact at convergence, a lower bound at a domain
    /// wall, `+inf` on divergence.
    pub value: f64,
    /// Objective at the final iterate.
    pub lower_bound: f64,
    pub argmax: Vec<f64>,
    pub converged: bool,
    pub wall: Wall,
    pub iterations: usize,
    /// `||x - grad F(argmax)||`.
    pub residual: f64,
    /// Set by [`legendre_upper_bounded`] when the last coordinate is pinned at 0.
    pub pinned: bool,
}

const ARMIJO: f64 = 1e-4;

fn min_max_eigen(h: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(h.clone());
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    let max = eig.eigenvalues.iter().map(|v| v.abs()).fold(0.0, f64::max);
    (min, max)
}

fn newton_direction(h: &DMatrix<f64>, g: &DVector<f64>) -> Result<(DVector<f64>, bool)> {
    let (min, max) = min_max_eigen(h);
    if min < -1e-8 * max.max(1e-300) && min < -1e-12 {
        return Err(Error::NonPsdHessian { min_eigenvalue: min });
    }
    let singular = min <= 1e-12 * max.max(1.0);
    if !singular {
        if let Some(ch) = h.clone().cholesky() {
            return Ok((ch.solve(g), false));
        }
    }
    let mu = 1e-10 * max.max(1.0);
    let reg = h + DMatrix::identity(h.nrows(), h.ncols()) * mu;
    match reg.cholesky() {
        Some(ch) => Ok((ch.solve(g), true)),
        None => Ok((g.clone(), true)),
    }
}

/// Legendre transform `F*(x) = sup_y <y, x> - F(y)` by damped Newton ascent.
/// Steps that leave the domain or the norm cap are halved up to
/// `max_halvings` times.
pub fn legendre<F: SmoothConvexFn + ?Sized>(f: &F, x: &[f64], opts: &LegendreOptions) -> Result<LegendreResult> {
    let d = f.dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    let xv = DVector::from_column_slice(x);
    let scale = 1.0 + xv.norm();
    let mut y = match &opts.start {
        Some(s) if s.len() == d && f.evaluate(s).is_some() => DVector::from_column_slice(s),
        _ => DVector::zeros(d),
    };
    let mut e = f
        .evaluate(y.as_slice())
        .ok_or_else(|| Error::InvalidArgument("Legendre start point outside the domain".into()))?;
    let mut phi = y.dot(&xv) - e.value;
    let mut wall = Wall::None;
    let mut iterations = 0;
    let mut hit_cap = false;
    loop {
        let g = &xv - &e.grad;
        let res = g.norm();
        if res <= opts.tol_stop * scale || iterations >= opts.max_iter {
            break;
        }
        iterations += 1;
        let (dir, _) = newton_direction(&e.hess, &g)?;
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut accepted = None;
        hit_cap = false;
        for _ in 0..opts.max_halvings {
            let cand = &y + &dir * t;
            if cand.norm() > opts.max_norm {
                hit_cap = true;
                t *= 0.5;
                continue;
            }
            if let Some(ce) = f.evaluate(cand.as_slice()) {
                let cphi = cand.dot(&xv) - ce.value;
                // Near the optimum phi differences drown in rounding; a step
                // that shrinks the residual without losing phi is accepted.
                let rounding = 1e-12 * (1.0 + phi.abs());
                let shrinks = (&xv - &ce.grad).norm() < (1.0 - 1e-4 * t) * res && cphi >= phi - rounding;
                if cphi >= phi + ARMIJO * t * slope || shrinks {
                    accepted = Some((cand, ce, cphi));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((cand, ce, cphi)) => {
                let gain = cphi - phi;
                y = cand;
                e = ce;
                phi = cphi;
                // Creeping along a domain boundary: no usable progress left.
                if t < 1e-6 && gain <= 1e-15 * (1.0 + phi.abs()) {
                    if (&xv - &e.grad).norm() > opts.tol * scale {
                        wall = if hit_cap { Wall::Divergent } else { Wall::Domain };
                    }
                    break;
                }
            }
            None => {
                if res > opts.tol * scale {
                    wall = if hit_cap { Wall::Divergent } else { Wall::Domain };
                }
                break;
            }
        }
    }
    let residual = (&xv - &e.grad).norm();
    if wall == Wall::None && residual > opts.tol * scale {
        // Out of iterations: diverging if pressed against the cap.
        wall = if hit_cap || y.norm() > 0.5 * opts.max_norm { Wall::Divergent } else { Wall::Domain };
    }
    if wall == Wall::None {
        let (min, max) = min_max_eigen(&e.hess);
        if min <= 1e-12 * max.max(1.0) {
            wall = Wall::Degenerate;
        }
    }
    let value = if wall == Wall::Divergent { f64::INFINITY } else { phi };
    Ok(LegendreResult {
        value,
        lower_bound: phi,
        argmax: y.iter().copied().collect(),
        converged: wall == Wall::None,
        wall,
        iterations,
        residual,
        pinned: false,
    })
}

/// `F` with its last coordinate fixed at zero.
struct PinnedLast<'a, F: ?Sized> {
    f: &'a F,
}

impl<F: SmoothConvexFn + ?Sized> SmoothConvexFn for PinnedLast<'_, F> {
    fn dim(&self) -> usize {
        self.f.dim() - 1
    }
    fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        let mut full = x.to_vec();
        full.push(0.0);
        let e = self.f.evaluate(&full)?;
        let d = x.len();
        Some(Evaluation {
            value: e.value,
            grad: e.grad.rows(0, d).into_owned(),
            hess: e.hess.view((0, 0), (d, d)).into_owned(),
        })
    }
}

/// Legendre transform of `F` restricted to `{last coordinate <= 0}`, the
/// effective domain of a function that is `+inf` for positive last
/// coordinate. First solves with the last coordinate pinned at zero and keeps
/// that solution when it satisfies the KKT sign condition; otherwise ascends
/// into the negative half-space.
pub fn legendre_upper_bounded<F: SmoothConvexFn + ?Sized>(
    f: &F,
    x: &[f64],
    opts: &LegendreOptions,
) -> Result<LegendreResult> {
    let d = f.dim();
    if x.len() != d || d < 2 {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    let pinned_fn = PinnedLast { f };
    let mut popts = opts.clone();
    popts.start = opts.start.as_ref().map(|s| s[..d - 1].to_vec());
    let pinned = legendre(&pinned_fn, &x[..d - 1], &popts)?;
    let mut at = pinned.argmax.clone();
    at.push(0.0);
    if let Some(e) = f.evaluate(&at) {
        let slack = 1e-12 * (1.0 + x[d - 1].abs());
        if x[d - 1] - e.grad[d - 1] >= -slack || pinned.wall == Wall::Divergent {
            let residual = (DVector::from_column_slice(x) - &e.grad).rows(0, d - 1).norm();
            return Ok(LegendreResult { argmax: at, pinned: true, residual, ..pinned });
        }
    }
    let mut fopts = opts.clone();
    let start_ok = opts.start.as_ref().is_some_and(|s| s[d - 1] < 0.0 && f.evaluate(s).is_some());
    if !start_ok {
        fopts.start = Some(at);
    }
    let mut full = legendre(f, x, &fopts)?;
    if full.argmax[d - 1] > 0.0 {
        return Err(Error::InvalidArgument("ascent left the closed half-space".into()));
    }
    if full.lower_bound < pinned.lower_bound {
        // The half-space ascent should never do worse than the pinned face.
        full.lower_bound = pinned.lower_bound;
    }
    full.pinned = false;
    Ok(full)
}

/// Solves `F(eta, lambda) = 0` for `lambda`, with `F` increasing in its last
/// coordinate. With `upper_zero`, only `lambda <= 0` is searched and a
/// negative `F(eta, 0)` has no root.
pub fn solve_implicit_root<F: SmoothConvexFn + ?Sized>(f: &F, eta: &[f64], upper_zero: bool) -> Result<f64> {
    let d = f.dim();
    if eta.len() + 1 != d {
        return Err(Error::DimensionMismatch { expected: d - 1, got: eta.len() });
    }
    let at = |lam: f64| -> Option<(f64, f64)> {
        let mut p = eta.to_vec();
        p.push(lam);
        f.evaluate(&p).map(|e| (e.value, e.grad[d - 1]))
    };
    let (v0, _) = at(0.0).ok_or_else(|| Error::NoRoot(format!("eta = {eta:?} outside the domain")))?;
    if v0 == 0.0 {
        return Ok(0.0);
    }
    let (_, dv0) = at(0.0).expect("evaluated above");
    if upper_zero && v0 < 0.0 {
        return Err(Error::NoRoot(format!("F(eta, 0) = {v0} < 0 at eta = {eta:?}")));
    }
    // Expand away from 0 towards the root, starting from twice the Newton
    // step and shrinking whenever the probe leaves the domain.
    let sign = if v0 > 0.0 { -1.0 } else { 1.0 };
    let newton = if dv0 > 0.0 { (v0 / dv0).abs() } else { 0.125 };
    let mut step = (2.0 * newton).clamp(1e-12, 0.125);
    let mut near = 0.0;
    let far;
    let mut shrinks = 0;
    loop {
        let probe = near + sign * step;
        match at(probe) {
            Some((v, _)) if v * v0 < 0.0 || v == 0.0 => {
                far = probe;
                break;
            }
            Some(_) => {
                near = probe;
                step *= 2.0;
            }
            None => {
                shrinks += 1;
                step *= 0.25;
                if shrinks > 60 || step < 1e-14 * (1.0 + near.abs()) {
                    return Err(Error::NoRoot(format!("domain ends before the root beyond lambda = {near}")));
                }
            }
        }
        if step > 1e6 {
            return Err(Error::NoRoot("no sign change".into()));
        }
    }
    let (mut lo, mut hi) = if sign < 0.0 { (far, near) } else { (near, far) };
    // Bracketed Newton with bisection fallback.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..300 {
        let Some((v, dv)) = at(x) else {
            return Err(Error::NoRoot(format!("domain hole at lambda = {x}")));
        };
        if v.abs() <= 1e-13 {
            return Ok(x);
        }
        if v < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let newton = x - v / dv;
        x = if dv > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * (1.0 + x.abs()) {
            break;
        }
    }
    match at(x) {
        Some((v, _)) if v.abs() <= 1e-10 => Ok(x),
        Some((v, _)) => Err(Error::NoRoot(format!("root search stalled with F = {v:e}"))),
        None => Err(Error::NoRoot("root search left the domain".into())),
    }
}

/// Residuals of the duality identities at a point `y0` of the domain.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DualityReport {
    /// `||grad F*(grad F(y0)) - y0||`.
    pub gradient_inverse: f64,
    /// Relative Frobenius error of `hess F*(grad F(y0)) hess F(y0) - I`, with
    /// the Hessian of `F*` from central differences of its gradient.
    pub hessian_inverse: f64,
    /// `|F**(y0) - F(y0)|`, with the outer transform computed by Newton over `x`.
    pub biconjugate: f64,
    pub pass: bool,
}

pub const DUALITY_GRADIENT_TOL: f64 = 1e-6;
pub const DUALITY_HESSIAN_TOL: f64 = 1e-4;
pub const DUALITY_BICONJUGATE_TOL: f64 = 1e-6;

/// Checks `grad F* o grad F = id`, `hess F* = (hess F)^-1` and `F** = F` at `y0`.
pub fn verify_duality<F: SmoothConvexFn + ?Sized>(f: &F, y0: &[f64]) -> Result<DualityReport> {
    let d = f.dim();
    let e0 = f
        .evaluate(y0)
        .ok_or_else(|| Error::InvalidArgument("duality point outside the domain".into()))?;
    let x0: Vec<f64> = e0.grad.iter().copied().collect();
    let opts = LegendreOptions { tol_stop: 1e-15, ..Default::default() }.with_start(y0.to_vec());
    let conj = |x: &[f64]| legendre(f, x, &opts);
    let r0 = conj(&x0)?;
    let gradient_inverse = r0
        .argmax
        .iter()
        .zip(y0)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();

    let h = 1e-5 * (1.0 + e0.grad.norm());
    let mut hstar = DMatrix::zeros(d, d);
    for j in 0..d {
        let mut xp = x0.clone();
        let mut xm = x0.clone();
        xp[j] += h;
        xm[j] -= h;
        let (p, m) = (conj(&xp)?, conj(&xm)?);
        for i in 0..d {
            hstar[(i, j)] = (p.argmax[i] - m.argmax[i]) / (2.0 * h);
        }
    }
    let prod = &hstar * &e0.hess;
    let hessian_inverse = (prod - DMatrix::identity(d, d)).norm() / (d as f64).sqrt();

    // Outer transform: maximise <x, y0> - F*(x); the gradient is y0 - argmax(x)
    // and the Hessian of -F* is -(hess F(argmax))^-1.
    let mut x = DVector::from_column_slice(&x0) * 0.9 + {
        let z = DVector::zeros(d);
        f.evaluate(z.as_slice()).map_or(z.clone(), |e| e.grad * 0.1)
    };
    let y0v = DVector::from_column_slice(y0);
    let mut outer = f64::NAN;
    for _ in 0..50 {
        let r = conj(x.as_slice())?;
        let ya = DVector::from_column_slice(&r.argmax);
        outer = x.dot(&y0v) - r.value;
        let ea = f.evaluate(&r.argmax).ok_or_else(|| Error::InvalidArgument("argmax outside domain".into()))?;
        let step = &ea.hess * (&y0v - &ya);
        x += &step;
        if step.norm() <= 1e-14 * (1.0 + x.norm()) {
            let r = conj(x.as_slice())?;
            outer = x.dot(&y0v) - r.value;
            break;
        }
    }
    let biconjugate = (outer - e0.value).abs();
    let pass = gradient_inverse <= DUALITY_GRADIENT_TOL
        && hessian_inverse <= DUALITY_HESSIAN_TOL
        && biconjugate <= DUALITY_BICONJUGATE_TOL;
    Ok(DualityReport { gradient_inverse, hessian_inverse, biconjugate, pass })
}

/// `F(y) = 0.5 y' A y + b' y` with `A` positive semidefinite.
#[derive(Clone, Debug)]
pub struct Quadratic {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl SmoothConvexFn for Quadratic {
    fn dim(&self) -> usize {
        self.b.len()
    }
    fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        let y = DVector::from_column_slice(x);
        let ay = &self.a * &y;
        Some(Evaluation { value: 0.5 * y.dot(&ay) + self.b.dot(&y), grad: ay + &self.b, hess: self.a.clone() })
    }
}

/// `F(y) = sum_i log cosh(y_i)`.
#[derive(Clone, Debug)]
pub struct LogCosh {
    pub dim: usize,
}

fn log_cosh(t: f64) -> f64 {
    let a = t.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

impl SmoothConvexFn for LogCosh {
    fn dim(&self) -> usize {
        self.dim
    }
    fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
        let value = x.iter().map(|&t| log_cosh(t)).sum();
        let grad = DVector::from_iterator(self.dim, x.iter().map(|t| t.tanh()));
        let hess = DMatrix::from_diagonal(&DVector::from_iterator(self.dim, x.iter().map(|t| 1.0 - t.tanh().powi(2))));
        Some(Evaluation { value, grad, hess })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Affine function: its Hessian vanishes everywhere.
    struct Affine {
        a: Vec<f64>,
    }

    impl SmoothConvexFn for Affine {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
            let d = self.a.len();
            Some(Evaluation {
                value: self.a.iter().zip(x).map(|(a, b)| a * b).sum(),
                grad: DVector::from_column_slice(&self.a),
                hess: DMatrix::zeros(d, d),
            })
        }
    }

    /// `-|y|^2`: concave.
    struct Concave;

    impl SmoothConvexFn for Concave {
        fn dim(&self) -> usize {
            1
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
            Some(Evaluation {
                value: -x[0] * x[0],
                grad: DVector::from_element(1, -2.0 * x[0]),
                hess: DMatrix::from_element(1, 1, -2.0),
            })
        }
    }

    fn quad() -> Quadratic {
        Quadratic {
            a: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            b: DVector::from_column_slice(&[0.3, -0.2]),
        }
    }

    #[test]
    fn quadratic_conjugate_is_closed_form() {
        let q = quad();
        let x = [1.0, 0.5];
        let r = legendre(&q, &x, &LegendreOptions::default()).unwrap();
        let xb = DVector::from_column_slice(&x) - &q.b;
        let exact = 0.5 * xb.dot(&(q.a.clone().try_inverse().unwrap() * &xb));
        assert!(r.converged);
        assert!((r.value - exact).abs() < 1e-12);
    }

    #[test]
    fn log_cosh_conjugate_matches_grid_search() {
        let f = LogCosh { dim: 1 };
        for &x in &[-0.9, -0.3, 0.0, 0.5, 0.95] {
            let r = legendre(&f, &[x], &LegendreOptions::default()).unwrap();
            // Grid search oracle on [-8, 8].
            let mut best = f64::NEG_INFINITY;
            let n = 400_000;
            for i in 0..=n {
                let y = -8.0 + 16.0 * i as f64 / n as f64;
                best = best.max(y * x - y.cosh().ln());
            }
            assert!((r.value - best).abs() < 1e-8, "x={x} {} {best}", r.value);
            let closed = 0.5 * ((1.0 + x) * (1.0 + x).ln() + (1.0 - x) * (1.0 - x).ln());
            assert!((r.value - closed).abs() < 1e-10);
        }
    }

    #[test]
    fn log_cosh_outside_range_diverges() {
        let f = LogCosh { dim: 1 };
        let r = legendre(&f, &[1.5], &LegendreOptions::default()).unwrap();
        assert_eq!(r.wall, Wall::Divergent);
        assert!(r.value.is_infinite());
    }

    #[test]
    fn affine_function_is_degenerate() {
        let f = Affine { a: vec![0.5, -0.25] };
        let r = legendre(&f, &[0.5, -0.25], &LegendreOptions::default()).unwrap();
        assert!(!r.converged);
        assert_eq!(r.value, 0.0);
        let r = legendre(&f, &[0.6, -0.25], &LegendreOptions::default()).unwrap();
        assert!(!r.converged);
        assert!(r.value.is_infinite());
    }

    #[test]
    fn concave_input_is_rejected() {
        assert!(matches!(
            legendre(&Concave, &[1.0], &LegendreOptions::default()),
            Err(Error::NonPsdHessian { .. })
        ));
    }

    /// Quadratic restricted to `y_1 < c`.
    struct Walled {
        q: Quadratic,
        cap: f64,
    }

    impl SmoothConvexFn for Walled {
        fn dim(&self) -> usize {
            2
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
            if x[0] >= self.cap {
                None
            } else {
                self.q.evaluate(x)
            }
        }
    }

    #[test]
    fn domain_wall_gives_lower_bound() {
        let w = Walled { q: quad(), cap: 0.2 };
        let x = [3.0, 0.0];
        let r = legendre(&w, &x, &LegendreOptions::default()).unwrap();
        assert_eq!(r.wall, Wall::Domain);
        assert!(!r.converged);
        let full = legendre(&w.q, &x, &LegendreOptions::default()).unwrap();
        assert!(r.value <= full.value);
        assert!(r.argmax[0] < 0.2 && r.argmax[0] > 0.19);
    }

    /// `F(eta, lambda) = log(p e^{eta + lambda} + q e^{-eta + lambda})` for a
    /// simple walk: one-step cumulant with unit durations.
    struct OneStep {
        p: f64,
    }

    impl SmoothConvexFn for OneStep {
        fn dim(&self) -> usize {
            2
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
            let (a, b) = (self.p * x[0].exp(), (1.0 - self.p) * (-x[0]).exp());
            let m = (a - b) / (a + b);
            Some(Evaluation {
                value: (a + b).ln() + x[1],
                grad: DVector::from_column_slice(&[m, 1.0]),
                hess: DMatrix::from_row_slice(2, 2, &[1.0 - m * m, 0.0, 0.0, 0.0]),
            })
        }
    }

    #[test]
    fn implicit_root_for_one_step_cumulant() {
        let f = OneStep { p: 0.7 };
        for &eta in &[-0.5, 0.0, 0.3] {
            let lam = solve_implicit_root(&f, &[eta], false).unwrap();
            let exact = -(0.7 * f64::exp(eta) + 0.3 * f64::exp(-eta)).ln();
            assert!((lam - exact).abs() < 1e-12);
        }
        // Nestling-style search: F(eta, 0) > 0 gives a negative root, F(eta, 0) < 0 none.
        assert!(solve_implicit_root(&f, &[1.0], true).unwrap() < 0.0);
        assert!(matches!(solve_implicit_root(&f, &[-0.4], true), Err(Error::NoRoot(_))));
    }

    /// Two-atom cumulant that is `+inf` for positive lambda.
    struct Guarded;

    impl SmoothConvexFn for Guarded {
        fn dim(&self) -> usize {
            2
        }
        fn evaluate(&self, x: &[f64]) -> Option<Evaluation> {
            if x[1] > 0.0 {
                return None;
            }
            // Atoms (1, 1) and (1, 3) with equal mass.
            let a = [(1.0, 1.0), (1.0, 3.0)];
            let w: Vec<f64> = a.iter().map(|(u, t)| 0.5 * (x[0] * u + x[1] * t).exp()).collect();
            let s: f64 = w.iter().sum();
            let mean = [1.0, (w[0] * 1.0 + w[1] * 3.0) / s];
            let var_t = (w[0] * 1.0 + w[1] * 9.0) / s - mean[1] * mean[1];
            Some(Evaluation {
                value: s.ln(),
                grad: DVector::from_column_slice(&mean),
                hess: DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, var_t]),
            })
        }
    }

    #[test]
    fn upper_bounded_transform_pins_or_descends() {
        // Mean duration 2; asking for duration 2.5 > mean pushes lambda up: pinned.
        let r = legendre_upper_bounded(&Guarded, &[1.0, 2.5], &LegendreOptions::default()).unwrap();
        assert!(r.pinned);
        assert_eq!(r.argmax[1], 0.0);
        // Duration 1.5 < mean needs lambda < 0.
        let r = legendre_upper_bounded(&Guarded, &[1.0, 1.5], &LegendreOptions::default()).unwrap();
        assert!(!r.pinned);
        assert!(r.argmax[1] < 0.0);
    }

    #[test]
    fn duality_on_quadratic_and_log_cosh() {
        let rep = verify_duality(&quad(), &[0.3, -0.4]).unwrap();
        assert!(rep.pass, "{rep:?}");
        let rep = verify_duality(&LogCosh { dim: 2 }, &[0.7, -1.1]).unwrap();
        assert!(rep.pass, "{rep:?}");
    }
}
