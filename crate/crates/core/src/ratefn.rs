//! Rate functions built from the empirical cumulant: the joint rate
//! `I(x, t)`, the speed rate `J(v) = inf_{0 < s <= 1} s I(v/s, 1/s)`, its
//! spatial-marginal analogue `J1`, the gradient map `gamma`, and region maps.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cgf::{EmpiricalCgf, TiltPoint};
use crate::convex::{legendre, legendre_upper_bounded, solve_implicit_root, LegendreOptions, LegendreResult, Wall};
use crate::dataset::{tail_exponent, SampleSet, TailField};
use crate::env::Direction;
use crate::error::{Error, Result};

/// Factor applied to fitted tail rates to get conservative exponential
/// moment radii.
pub const TAIL_SAFETY: f64 = 0.8;
/// Number of `s` values scanned before polishing the minimiser.
pub const S_GRID: usize = 64;
/// Width of the `C0` band in standard errors.
pub const C0_BAND_SE: f64 = 3.0;

/// `I(x, t)` with its maximising tilt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateI {
    pub value: f64,
    pub eta: Vec<f64>,
    pub lambda: f64,
    pub pinned: bool,
    pub wall: Wall,
    pub converged: bool,
}

fn legendre_options(start: Option<&[f64]>) -> LegendreOptions {
    let opts = LegendreOptions::default();
    match start {
        Some(s) => opts.with_start(s.to_vec()),
        None => opts,
    }
}

fn joint_transform(cgf: &EmpiricalCgf, point: &[f64], start: Option<&[f64]>) -> Result<LegendreResult> {
    let opts = legendre_options(start);
    if cgf.guarded() {
        legendre_upper_bounded(cgf, point, &opts)
    } else {
        legendre(cgf, point, &opts)
    }
}

/// Joint rate `I(x, t)`: the Legendre transform of the empirical cumulant
/// (restricted to `lambda <= 0` for guarded cumulants).
pub fn rate_i(cgf: &EmpiricalCgf, x: &[f64], t: f64) -> Result<RateI> {
    let d = cgf.spatial_dim();
    if x.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: x.len() });
    }
    let mut p = x.to_vec();
    p.push(t);
    let r = joint_transform(cgf, &p, None)?;
    Ok(RateI {
        value: r.value,
        eta: r.argmax[..d].to_vec(),
        lambda: r.argmax[d],
        pinned: r.pinned,
        wall: r.wall,
        converged: r.converged,
    })
}

/// Spatial rate `I1(x)`: the Legendre transform of `eta -> Lambda(eta, 0)`.
pub fn rate_i1(cgf: &EmpiricalCgf, x: &[f64]) -> Result<LegendreResult> {
    legendre(&cgf.marginal_fn(), x, &LegendreOptions::default())
}

/// One evaluation of the perspective function along `s`.
#[derive(Clone, Debug)]
struct SPoint {
    s: f64,
    value: f64,
    /// Derivative in `s`: minus the cumulant at the dual point.
    deriv: f64,
    dual: Vec<f64>,
    pinned: bool,
    wall: Wall,
}

impl SPoint {
    fn reliable(&self) -> bool {
        matches!(self.wall, Wall::None | Wall::Degenerate) && self.value.is_finite()
    }
}

/// Minimises a convex function of `s` given by `eval` over the sorted `grid`,
/// then polishes the minimiser by a bracketed root search on the derivative.
fn minimize_over_s(
    grid: &[f64],
    guess: f64,
    mut eval: impl FnMut(f64, Option<&[f64]>) -> Result<SPoint>,
) -> Result<SPoint> {
    let pts = match local_walk(grid, guess, &mut eval)? {
        Some(p) => p,
        None => full_scan(grid, &mut eval)?,
    };
    polish(pts, eval)
}

/// Walks the grid from the point nearest `guess` in the descent direction
/// until the derivative changes sign. `None` when a wall is met.
fn local_walk(
    grid: &[f64],
    guess: f64,
    eval: &mut impl FnMut(f64, Option<&[f64]>) -> Result<SPoint>,
) -> Result<Option<Vec<SPoint>>> {
    if !(guess > 0.0) {
        return Ok(None);
    }
    let mut k = grid
        .iter()
        .enumerate()
        .min_by(|a, b| (a.1.ln() - guess.ln()).abs().total_cmp(&(b.1.ln() - guess.ln()).abs()))
        .map_or(0, |(i, _)| i);
    let first = eval(grid[k], None)?;
    if !first.reliable() {
        return Ok(None);
    }
    let up = first.deriv < 0.0;
    let mut pts = vec![first];
    loop {
        if up {
            if k + 1 == grid.len() {
                break;
            }
            k += 1;
        } else {
            if k == 0 {
                break;
            }
            k -= 1;
        }
        let warm = pts.last().map(|p| p.dual.clone());
        let p = eval(grid[k], warm.as_deref())?;
        if !p.reliable() {
            return Ok(None);
        }
        let crossed = if up { p.deriv >= 0.0 } else { p.deriv <= 0.0 };
        pts.push(p);
        if crossed {
            break;
        }
    }
    if !up {
        pts.reverse();
    }
    Ok(Some(pts))
}

fn full_scan(grid: &[f64], eval: &mut impl FnMut(f64, Option<&[f64]>) -> Result<SPoint>) -> Result<Vec<SPoint>> {
    // Scan downwards from the largest s: minimisers sit at moderate s while
    // small s presses (v/s, 1/s) against the support boundary.
    let mut pts: Vec<SPoint> = Vec::with_capacity(grid.len());
    for &s in grid.iter().rev() {
        let warm = pts.iter().rev().find(|p| p.reliable()).map(|p| p.dual.clone());
        let p = eval(s, warm.as_deref())?;
        let stop = p.reliable() && p.deriv < 0.0 && pts.last().is_some_and(|q| q.reliable() && q.value < p.value);
        pts.push(p);
        if stop {
            break;
        }
    }
    pts.reverse();
    Ok(pts)
}

/// Best grid point, refined by a bracketed root search on the derivative.
fn polish(pts: Vec<SPoint>, mut eval: impl FnMut(f64, Option<&[f64]>) -> Result<SPoint>) -> Result<SPoint> {
    // A wall leaves a lower bound on the supremum, so walled points only
    // count when nothing else is available.
    let pick = |reliable_only: bool| {
        pts.iter()
            .filter(|p| !p.value.is_nan() && (!reliable_only || p.reliable()))
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .cloned()
    };
    let best = pick(true)
        .or_else(|| pick(false))
        .ok_or_else(|| Error::InvalidArgument("no admissible s".into()))?;
    if !best.value.is_finite() {
        return Ok(best);
    }
    // Sign change of the derivative between consecutive reliable points.
    let bracket = pts
        .windows(2)
        .find(|w| w[0].reliable() && w[1].reliable() && w[0].deriv <= 0.0 && w[1].deriv >= 0.0)
        .map(|w| (w[0].clone(), w[1].clone()));
    let bracket = match bracket {
        Some(b) => Some(b),
        None => edge_bracket(&pts, &best, &mut eval)?,
    };
    let Some((mut a, mut b)) = bracket else {
        return Ok(best);
    };
    let mut candidate = if a.value <= b.value { a.clone() } else { b.clone() };
    let mut side = 0i32;
    for _ in 0..100 {
        if (b.s - a.s) <= 1e-13 * b.s {
            break;
        }
        // Illinois regula falsi on the derivative.
        let (ga, gb) = (a.deriv, b.deriv);
        let mut s = if gb - ga > 0.0 { a.s - ga * (b.s - a.s) / (gb - ga) } else { 0.5 * (a.s + b.s) };
        if !(s > a.s && s < b.s) {
            s = 0.5 * (a.s + b.s);
        }
        let p = eval(s, Some(&candidate.dual))?;
        if !p.reliable() {
            break;
        }
        if p.value < candidate.value || p.deriv.abs() < candidate.deriv.abs() {
            candidate = p.clone();
        }
        if p.deriv.abs() <= 1e-14 {
            break;
        }
        if p.deriv < 0.0 {
            a = p;
            if side == -1 {
                b.deriv *= 0.5;
            }
            side = -1;
        } else {
            b = p;
            if side == 1 {
                a.deriv *= 0.5;
            }
            side = 1;
        }
    }
    Ok(if candidate.value <= best.value || !best.reliable() { candidate } else { best })
}

/// When the grid neighbour on the descent side of `best` is unreliable (the
/// support hull can be thin), bisects towards it for a reliable point where
/// the derivative has the other sign.
fn edge_bracket(
    pts: &[SPoint],
    best: &SPoint,
    eval: &mut impl FnMut(f64, Option<&[f64]>) -> Result<SPoint>,
) -> Result<Option<(SPoint, SPoint)>> {
    let Some(i) = pts.iter().position(|p| p.s == best.s) else { return Ok(None) };
    let left = best.deriv > 0.0;
    let nb = if left { i.checked_sub(1) } else { Some(i + 1).filter(|&j| j < pts.len()) };
    let Some(nb) = nb else { return Ok(None) };
    if pts[nb].reliable() {
        return Ok(None);
    }
    let (mut far, near) = (pts[nb].s, best.s);
    let mut inner = best.clone();
    for _ in 0..60 {
        let mid = 0.5 * (far + inner.s);
        if (mid - far).abs() <= 1e-13 * near {
            break;
        }
        let p = eval(mid, Some(&inner.dual))?;
        if !p.reliable() {
            far = mid;
        } else if (p.deriv > 0.0) == left {
            inner = p;
        } else {
            return Ok(Some(if left { (p, inner) } else { (inner, p) }));
        }
    }
    Ok(None)
}

fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if hi <= lo * (1.0 + 1e-12) || n < 2 {
        return vec![hi];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n).map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp()).collect()
}

/// Constants bounding the region where the empirical estimates are trusted.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionConstants {
    /// Exponential-moment radius for excursion radii (nestling).
    pub c1: Option<f64>,
    /// Exponential-moment radius for regeneration durations (non-nestling).
    pub c2: Option<f64>,
}

/// Fitted radii: the tail rates of `sup_disp` and `dtau` times [`TAIL_SAFETY`].
pub fn region_constants(set: &SampleSet) -> Result<RegionConstants> {
    let c1 = tail_exponent(set, TailField::SupDisp).ok().map(|f| TAIL_SAFETY * f.c_hat);
    let c2 = tail_exponent(set, TailField::Dtau).ok().map(|f| TAIL_SAFETY * f.c_hat);
    Ok(RegionConstants { c1, c2 })
}

/// Region of a velocity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionLabel {
    /// Nestling, dual duration tilt strictly negative.
    APlus,
    /// Nestling, pinned dual with `s h(eta) = 1`.
    AZero,
    /// Nestling, pinned dual with `s h(eta) < 1`.
    AMinus,
    /// Non-nestling, dual inside the quarter radius.
    APrime,
    Outside,
    Wall,
}

impl RegionLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::APlus => "A+",
            Self::AZero => "A0",
            Self::AMinus => "A-",
            Self::APrime => "A'",
            Self::Outside => "outside",
            Self::Wall => "wall",
        }
    }
}

/// `J` at a velocity with the minimising `s` and dual tilt.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RatePoint {
    pub v: Vec<f64>,
    pub j: f64,
    pub s_star: f64,
    pub eta_star: Vec<f64>,
    pub lambda_star: f64,
    pub region: RegionLabel,
    pub pinned: bool,
    pub wall: Wall,
    /// `grad J(v)`, equal to the dual spatial tilt.
    pub grad_j: Vec<f64>,
    /// `s h(eta)` at the dual, meaningful when pinned.
    pub theta: f64,
    /// Effective sample size at the dual tilt.
    pub ess: f64,
    /// Delta-method standard error of `J` from the importance weights.
    pub se: f64,
}

impl RatePoint {
    pub fn reliable(&self) -> bool {
        matches!(self.wall, Wall::None | Wall::Degenerate) && self.j.is_finite()
    }

    pub fn flags(&self) -> String {
        let mut f = Vec::new();
        if self.pinned {
            f.push("pinned");
        }
        match self.wall {
            Wall::None => {}
            Wall::Domain => f.push("domain_wall"),
            Wall::Divergent => f.push("divergent"),
            Wall::Degenerate => f.push("degenerate"),
        }
        f.join(";")
    }
}

/// Evaluates `s I(v/s, 1/s)` with the dual tilt.
fn perspective_point(cgf: &EmpiricalCgf, v: &[f64], s: f64, start: Option<&[f64]>) -> Result<SPoint> {
    let mut p: Vec<f64> = v.iter().map(|x| x / s).collect();
    p.push(1.0 / s);
    let r = joint_transform(cgf, &p, start)?;
    let lam_at = crate::convex::SmoothConvexFn::value(cgf, &r.argmax).unwrap_or(f64::NAN);
    Ok(SPoint {
        s,
        value: s * r.value,
        deriv: -lam_at,
        dual: r.argmax,
        pinned: r.pinned,
        wall: r.wall,
    })
}

/// `f(v, s) = s I(v/s, 1/s)`, the quantity minimised over `s` by [`rate_j`].
pub fn perspective_value(cgf: &EmpiricalCgf, v: &[f64], s: f64) -> Result<f64> {
    if v.len() != cgf.spatial_dim() {
        return Err(Error::DimensionMismatch { expected: cgf.spatial_dim(), got: v.len() });
    }
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("s = {s} must be positive")));
    }
    perspective_point(cgf, v, s, None).map(|p| p.value)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Largest and smallest `<dx, l>` over the atoms.
fn projection_range(cgf: &EmpiricalCgf, dir: &Direction) -> (f64, f64) {
    let l = dir.unit();
    cgf.atoms()
        .map(|(dx, _, _)| dot(&dx, &l))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p), hi.max(p)))
}

/// Speed rate `J(v) = inf_{0 < s <= 1} s I(v/s, 1/s)`.
pub fn rate_j(cgf: &EmpiricalCgf, dir: &Direction, v: &[f64], consts: &RegionConstants) -> Result<RatePoint> {
    rate_j_grid(cgf, dir, v, consts, S_GRID)
}

/// [`rate_j`] with an explicit number of scanned `s` values.
pub fn rate_j_grid(
    cgf: &EmpiricalCgf,
    dir: &Direction,
    v: &[f64],
    consts: &RegionConstants,
    grid_points: usize,
) -> Result<RatePoint> {
    let d = cgf.spatial_dim();
    if v.len() != d || dir.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
    }
    let proj = dir.project(v);
    if !(proj > 0.0) {
        return Err(Error::OutsideHalfSpace(v.to_vec()));
    }
    let (_, max_proj) = projection_range(cgf, dir);
    // Outside these bounds (v/s, 1/s) leaves the support hull.
    let s_lo = (1.0 / cgf.max_dtau() as f64).max(proj / max_proj);
    if s_lo > 1.0 + 1e-12 {
        return Ok(RatePoint {
            v: v.to_vec(),
            j: f64::INFINITY,
            s_star: f64::NAN,
            eta_star: vec![f64::NAN; d],
            lambda_star: f64::NAN,
            region: RegionLabel::Outside,
            pinned: false,
            wall: Wall::Divergent,
            grad_j: vec![f64::NAN; d],
            theta: f64::NAN,
            ess: f64::NAN,
            se: f64::NAN,
        });
    }
    let grid = log_grid(s_lo.min(1.0), 1.0, grid_points);
    // Untilted guess: s scales with the speed along the direction.
    let mean = cgf.mean();
    let guess = proj / dir.project(&mean[..d]);
    let best = minimize_over_s(&grid, guess, |s, warm| perspective_point(cgf, v, s, warm))?;
    finish_rate_point(cgf, v, best, consts)
}

fn finish_rate_point(cgf: &EmpiricalCgf, v: &[f64], best: SPoint, consts: &RegionConstants) -> Result<RatePoint> {
    let d = cgf.spatial_dim();
    let eta = best.dual[..d].to_vec();
    let lambda = best.dual[d];
    let est = cgf.eval(&TiltPoint::new(eta.clone(), lambda)).ok();
    let se = est.as_ref().map_or(f64::NAN, |e| e.se);
    let ess = est.as_ref().map_or(f64::NAN, |e| e.ess);
    let h = cgf.marginal(&eta).map(|(_, h)| h).unwrap_or(f64::NAN);
    let theta = best.s * h;
    let eta_norm = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
    let region = if !best.reliable() {
        RegionLabel::Wall
    } else if cgf.guarded() {
        if consts.c1.is_some_and(|c1| eta_norm >= c1) {
            RegionLabel::Outside
        } else if !best.pinned {
            RegionLabel::APlus
        } else if (theta - 1.0).abs() <= 1e-6 {
            RegionLabel::AZero
        } else if theta < 1.0 {
            RegionLabel::AMinus
        } else {
            RegionLabel::Outside
        }
    } else if consts.c2.map_or(true, |c2| eta_norm < c2 / 4.0) {
        RegionLabel::APrime
    } else {
        RegionLabel::Outside
    };
    // Standard error of J: s times the standard error of Lambda at the dual.
    Ok(RatePoint {
        v: v.to_vec(),
        // Rounding can leave a value like -1e-16 at the zero.
        j: best.value.max(0.0),
        s_star: best.s,
        grad_j: eta.clone(),
        eta_star: eta,
        lambda_star: lambda,
        region,
        pinned: best.pinned,
        wall: best.wall,
        theta,
        ess,
        se: best.s * se,
    })
}

/// Gradient of `J` at `v`: the dual spatial tilt, with a reliability flag.
pub fn grad_j(cgf: &EmpiricalCgf, dir: &Direction, v: &[f64]) -> Result<(Vec<f64>, bool)> {
    let r = rate_j(cgf, dir, v, &RegionConstants::default())?;
    let ok = r.reliable();
    Ok((r.eta_star, ok))
}

/// Central finite-difference gradient of `J` with step `h`.
pub fn grad_j_fd(cgf: &EmpiricalCgf, dir: &Direction, v: &[f64], h: f64) -> Result<Vec<f64>> {
    let consts = RegionConstants::default();
    (0..v.len())
        .map(|i| {
            let mut p = v.to_vec();
            let mut m = v.to_vec();
            p[i] += h;
            m[i] -= h;
            Ok((rate_j(cgf, dir, &p, &consts)?.j - rate_j(cgf, dir, &m, &consts)?.j) / (2.0 * h))
        })
        .collect()
}

/// `J1(v) = inf_{s > 0} s I1(v/s)`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateJ1 {
    pub value: f64,
    pub s_star: f64,
    pub eta: Vec<f64>,
    pub wall: Wall,
}

pub fn rate_j1(cgf: &EmpiricalCgf, dir: &Direction, v: &[f64]) -> Result<RateJ1> {
    let d = cgf.spatial_dim();
    if v.len() != d || dir.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: v.len() });
    }
    let proj = dir.project(v);
    if !(proj > 0.0) {
        return Err(Error::OutsideHalfSpace(v.to_vec()));
    }
    let (min_proj, max_proj) = projection_range(cgf, dir);
    let (s_lo, s_hi) = (proj / max_proj, proj / min_proj);
    let grid = log_grid(s_lo, s_hi, S_GRID);
    let marginal = cgf.marginal_fn();
    let mean = cgf.mean();
    let guess = proj / dir.project(&mean[..d]);
    let best = minimize_over_s(&grid, guess, |s, warm| {
        let x: Vec<f64> = v.iter().map(|c| c / s).collect();
        let opts = legendre_options(warm);
        let r = legendre(&marginal, &x, &opts)?;
        let lam_at = crate::convex::SmoothConvexFn::value(&marginal, &r.argmax).unwrap_or(f64::NAN);
        Ok(SPoint { s, value: s * r.value, deriv: -lam_at, dual: r.argmax, pinned: false, wall: r.wall })
    })?;
    Ok(RateJ1 { value: best.value, s_star: best.s, eta: best.dual, wall: best.wall })
}

/// Label of a tilt by the sign of the spatial marginal.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum TiltLabel {
    /// `Lambda(eta, 0) > 0` beyond the band.
    CPlus,
    /// Within the band around zero.
    CZero,
    /// Negative beyond the band (no root in nestling mode).
    CMinus,
    /// Outside the trusted domain.
    Outside,
}

/// Image of a tilt under the gradient map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GammaPoint {
    pub eta: Vec<f64>,
    /// Root `lambda(eta)` of `Lambda(eta, lambda) = 0`.
    pub lambda: f64,
    /// `gamma(eta)`: tilted mean displacement over tilted mean duration.
    pub v: Vec<f64>,
    /// `1 / tilted mean duration`.
    pub s0: f64,
    /// `h(eta)`.
    pub h: f64,
    pub lam_x: f64,
    pub lam_x_se: f64,
    pub label: TiltLabel,
}

/// Evaluates `lambda(eta)`, `gamma(eta)`, `s0(eta)` and `h(eta)`.
pub fn gamma_map(cgf: &EmpiricalCgf, eta: &[f64]) -> Result<GammaPoint> {
    let d = cgf.spatial_dim();
    let (m, h) = cgf.marginal(eta)?;
    let band = C0_BAND_SE * m.se;
    let label = if m.value.abs() <= band {
        TiltLabel::CZero
    } else if m.value > 0.0 {
        TiltLabel::CPlus
    } else {
        TiltLabel::CMinus
    };
    let lambda = if cgf.guarded() && m.value < 0.0 && label == TiltLabel::CZero {
        0.0
    } else {
        solve_implicit_root(cgf, eta, cgf.guarded())?
    };
    let est = cgf.eval(&TiltPoint::new(eta.to_vec(), lambda))?;
    let mt = est.grad[d];
    Ok(GammaPoint {
        eta: eta.to_vec(),
        lambda,
        v: est.grad[..d].iter().map(|x| x / mt).collect(),
        s0: 1.0 / mt,
        h,
        lam_x: m.value,
        lam_x_se: m.se,
        label,
    })
}

/// A grid node of a region scan.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionNode {
    pub eta: Vec<f64>,
    pub label: TiltLabel,
    pub gamma: Option<GammaPoint>,
}

/// A point of the `A0` boundary: the image of a root of the spatial marginal
/// along a ray, with the outward-normal test.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoundaryPoint {
    pub eta: Vec<f64>,
    pub v: Vec<f64>,
    pub s0: f64,
    /// Unit outward normal (two dimensions only).
    pub normal: Option<Vec<f64>>,
    /// `<normal, v>`.
    pub normal_dot_v: Option<f64>,
}

/// Tilt-space scan with images in velocity space.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionMap {
    pub dim: usize,
    pub nestling: bool,
    pub constants: RegionConstants,
    pub radius: f64,
    pub resolution: f64,
    /// Grid side length in nodes (per axis).
    pub side: usize,
    pub nodes: Vec<RegionNode>,
    /// `A0` boundary ordered by ray angle (nestling only).
    pub boundary: Vec<BoundaryPoint>,
}

const MAX_GRID_SIDE: usize = 801;

/// Scans tilts on a grid of spacing `resolution` inside the trusted ball
/// (radius `C1` when nestling, `C2 / 2` otherwise), labels them and maps them
/// through `gamma`. For nestling sets also traces the `A0` boundary.
pub fn region_scan(cgf: &EmpiricalCgf, consts: &RegionConstants, resolution: f64) -> Result<RegionMap> {
    let d = cgf.spatial_dim();
    let nestling = cgf.guarded();
    let radius = if nestling { consts.c1 } else { consts.c2.map(|c| c / 2.0) }
        .ok_or_else(|| Error::DegenerateGrid("missing tail constant for the scan radius".into()))?;
    if !(resolution > 0.0) || !(radius > 0.0) {
        return Err(Error::DegenerateGrid(format!("resolution {resolution}, radius {radius}")));
    }
    let half = (radius / resolution).floor() as usize;
    let side = 2 * half + 1;
    if half == 0 {
        return Err(Error::DegenerateGrid(format!("resolution {resolution} exceeds radius {radius}")));
    }
    if side > MAX_GRID_SIDE || d > 2 {
        return Err(Error::DegenerateGrid(format!("grid side {side} in dimension {d} is too large")));
    }
    let coords: Vec<f64> = (0..side).map(|i| (i as f64 - half as f64) * resolution).collect();
    let etas: Vec<Vec<f64>> = if d == 1 {
        coords.iter().map(|&x| vec![x]).collect()
    } else {
        coords.iter().flat_map(|&y| coords.iter().map(move |&x| vec![x, y])).collect()
    };
    let nodes: Vec<RegionNode> = etas
        .into_par_iter()
        .map(|eta| {
            let norm = eta.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm >= radius {
                return RegionNode { eta, label: TiltLabel::Outside, gamma: None };
            }
            match gamma_map(cgf, &eta) {
                Ok(g) => RegionNode { label: g.label, gamma: Some(g), eta },
                Err(_) => {
                    let label = match cgf.marginal(&eta) {
                        Ok((m, _)) if m.value < 0.0 => TiltLabel::CMinus,
                        _ => TiltLabel::Outside,
                    };
                    RegionNode { eta, label, gamma: None }
                }
            }
        })
        .collect();
    let images: Vec<&Vec<f64>> = nodes.iter().filter_map(|n| n.gamma.as_ref().map(|g| &g.v)).collect();
    let spread = images
        .iter()
        .flat_map(|a| images.first().map(|b| a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)))
        .fold(0.0, f64::max);
    if images.len() < 2 || spread < 1e-12 {
        return Err(Error::DegenerateGrid("all scanned tilts map to one velocity".into()));
    }
    let boundary = if nestling { zero_boundary(cgf, radius, 90)? } else { Vec::new() };
    Ok(RegionMap { dim: d, nestling, constants: *consts, radius, resolution, side, nodes, boundary })
}

/// Root `r > 0` of `Lambda(r u, 0)` along a unit direction `u` whose initial
/// slope is negative, within `radius`.
pub fn zero_along_ray(cgf: &EmpiricalCgf, u: &[f64], radius: f64) -> Option<f64> {
    let f = |r: f64| -> Option<(f64, f64)> {
        let eta: Vec<f64> = u.iter().map(|c| c * r).collect();
        let (m, _) = cgf.marginal(&eta).ok()?;
        Some((m.value, dot(&m.grad, u)))
    };
    let (_, slope0) = f(0.0)?;
    if slope0 >= 0.0 {
        return None;
    }
    // A point inside the negative dip, then one beyond the root.
    let mut lo = radius / 64.0;
    let mut tries = 0;
    while f(lo)?.0 >= 0.0 {
        lo *= 0.5;
        tries += 1;
        if tries > 60 {
            return None;
        }
    }
    let mut hi = lo;
    loop {
        hi = (hi * 1.5).min(radius);
        let (v, _) = f(hi)?;
        if v > 0.0 {
            break;
        }
        lo = hi;
        if hi >= radius {
            return None;
        }
    }
    let mut r = 0.5 * (lo + hi);
    for _ in 0..200 {
        let (v, g) = f(r)?;
        if v.abs() <= 1e-15 {
            break;
        }
        if v < 0.0 {
            lo = r;
        } else {
            hi = r;
        }
        let newton = r - v / g;
        r = if g > 0.0 && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    Some(r)
}

fn zero_boundary(cgf: &EmpiricalCgf, radius: f64, rays: usize) -> Result<Vec<BoundaryPoint>> {
    let d = cgf.spatial_dim();
    let dirs: Vec<Vec<f64>> = if d == 1 {
        vec![vec![-1.0], vec![1.0]]
    } else {
        (0..rays)
            .map(|k| {
                let a = 2.0 * std::f64::consts::PI * k as f64 / rays as f64;
                vec![a.cos(), a.sin()]
            })
            .collect()
    };
    let mut pts: Vec<(f64, Vec<f64>)> = Vec::new();
    for u in &dirs {
        if let Some(r) = zero_along_ray(cgf, u, radius) {
            let angle = if d == 1 { u[0] } else { u[1].atan2(u[0]) };
            pts.push((angle, u.iter().map(|c| c * r).collect()));
        }
    }
    // The origin always lies on the zero set.
    pts.push((f64::NAN, vec![0.0; d]));
    let mut out = Vec::new();
    for (_, eta) in &pts {
        let Ok(g) = gamma_map(cgf, eta) else { continue };
        out.push(BoundaryPoint { eta: eta.clone(), v: g.v, s0: g.s0, normal: None, normal_dot_v: None });
    }
    // Order by angle of the image around the origin in velocity space.
    if d == 2 {
        out.sort_by(|a, b| a.v[1].atan2(a.v[0]).total_cmp(&b.v[1].atan2(b.v[0])));
        let n = out.len();
        for i in 0..n {
            if n < 3 {
                break;
            }
            let prev = &out[(i + n - 1) % n].v;
            let next = &out[(i + 1) % n].v;
            let tangent = [next[0] - prev[0], next[1] - prev[1]];
            let len = (tangent[0].powi(2) + tangent[1].powi(2)).sqrt();
            if len == 0.0 {
                continue;
            }
            let mut normal = vec![tangent[1] / len, -tangent[0] / len];
            // Orient towards the image of tilts pushed into the positive side.
            let eta = &out[i].eta;
            if let Ok((m, _)) = cgf.marginal(eta) {
                let gn = m.grad.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
                let eps = 1e-3;
                let pushed: Vec<f64> = eta.iter().zip(&m.grad).map(|(e, g)| e + eps * g / gn).collect();
                if let Ok(gp) = gamma_map(cgf, &pushed) {
                    let out_dir = [gp.v[0] - out[i].v[0], gp.v[1] - out[i].v[1]];
                    if normal[0] * out_dir[0] + normal[1] * out_dir[1] < 0.0 {
                        normal = vec![-normal[0], -normal[1]];
                    }
                }
            }
            let ndv = normal[0] * out[i].v[0] + normal[1] * out[i].v[1];
            out[i].normal = Some(normal);
            out[i].normal_dot_v = Some(ndv);
        }
    }
    Ok(out)
}

fn point_in_triangle(p: &[f64], a: &[f64], b: &[f64], c: &[f64]) -> bool {
    let cross = |o: &[f64], u: &[f64], w: &[f64]| (u[0] - o[0]) * (w[1] - o[1]) - (u[1] - o[1]) * (w[0] - o[0]);
    let (d1, d2, d3) = (cross(a, b, p), cross(b, c, p), cross(c, a, p));
    let neg = d1 < 0.0 || d2 < 0.0 || d3 < 0.0;
    let pos = d1 > 0.0 || d2 > 0.0 || d3 > 0.0;
    !(neg && pos)
}

impl RegionMap {
    /// Pairs of distinct positive-side grid tilts whose images lie within
    /// `tol` of each other.
    pub fn injectivity_violations(&self, tol: f64) -> usize {
        let pts: Vec<&GammaPoint> = self
            .nodes
            .iter()
            .filter(|n| n.label == TiltLabel::CPlus)
            .filter_map(|n| n.gamma.as_ref())
            .collect();
        let mut bad = 0;
        for i in 0..pts.len() {
            for j in i + 1..pts.len() {
                let dv = pts[i].v.iter().zip(&pts[j].v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if dv < tol {
                    bad += 1;
                }
            }
        }
        bad
    }

    /// Outward-normal test at every boundary point with a normal.
    pub fn zero_set_normals_ok(&self) -> bool {
        self.boundary.iter().filter_map(|b| b.normal_dot_v).all(|x| x > 0.0)
    }

    fn node(&self, i: usize, j: usize) -> &RegionNode {
        &self.nodes[j * self.side + i]
    }

    /// Whether `v` lies in the piecewise-linear image of the scanned tilts
    /// with a root `lambda(eta)`.
    pub fn contains(&self, v: &[f64]) -> bool {
        let img = |n: &RegionNode| n.gamma.as_ref().map(|g| g.v.clone());
        if self.dim == 1 {
            let vals: Vec<f64> = self.nodes.iter().filter_map(|n| img(n).map(|x| x[0])).collect();
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            return v[0] >= lo && v[0] <= hi;
        }
        for j in 0..self.side - 1 {
            for i in 0..self.side - 1 {
                let corners = [self.node(i, j), self.node(i + 1, j), self.node(i + 1, j + 1), self.node(i, j + 1)];
                let imgs: Vec<Option<Vec<f64>>> = corners.iter().map(|n| img(n)).collect();
                for tri in [[0, 1, 2], [0, 2, 3]] {
                    if let (Some(a), Some(b), Some(c)) = (&imgs[tri[0]], &imgs[tri[1]], &imgs[tri[2]]) {
                        if point_in_triangle(v, a, b, c) {
                            return true;
                        }
                    }
                }
            }
        }
        false
    }

    /// In two dimensions: where the ray from the origin through `v` crosses
    /// the `A0` polyline, as a multiple of `v` (`> 1` means `v` is strictly
    /// inside, i.e. in `A-`).
    pub fn zero_set_crossing(&self, v: &[f64]) -> Option<f64> {
        if self.dim != 2 || self.boundary.len() < 2 {
            return None;
        }
        let n = self.boundary.len();
        let mut best: Option<f64> = None;
        for i in 0..n {
            let a = &self.boundary[i].v;
            let b = &self.boundary[(i + 1) % n].v;
            // Solve t v = a + u (b - a), 0 <= u <= 1, t > 0.
            let m = [[v[0], a[0] - b[0]], [v[1], a[1] - b[1]]];
            let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
            if det.abs() < 1e-300 {
                continue;
            }
            let t = (a[0] * m[1][1] - a[1] * m[0][1]) / det;
            let u = (m[0][0] * a[1] - m[1][0] * a[0]) / det;
            if t > 0.0 && (0.0..=1.0).contains(&u) {
                best = Some(best.map_or(t, |x: f64| x.max(t)));
            }
        }
        best
    }
}

/// Writes rate points as CSV: `v1..vd, J, s_star, eta_star1..d, lambda_star, region, flags`.
pub fn write_rate_csv<W: Write>(points: &[RatePoint], dim: usize, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut head: Vec<String> = (1..=dim).map(|i| format!("v{i}")).collect();
    head.extend(["J".to_string(), "s_star".to_string()]);
    head.extend((1..=dim).map(|i| format!("eta_star{i}")));
    head.extend(["lambda_star".to_string(), "region".to_string(), "flags".to_string()]);
    out.write_record(&head)?;
    for p in points {
        let mut row: Vec<String> = p.v.iter().map(ToString::to_string).collect();
        row.push(p.j.to_string());
        row.push(p.s_star.to_string());
        row.extend(p.eta_star.iter().map(ToString::to_string));
        row.push(p.lambda_star.to_string());
        row.push(p.region.as_str().to_string());
        row.push(p.flags());
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes a region scan as CSV: `eta1..d, label, v1..d, s0, lambda, lam_x, lam_x_se`.
pub fn write_region_csv<W: Write>(map: &RegionMap, w: W) -> Result<()> {
    let d = map.dim;
    let mut out = csv::Writer::from_writer(w);
    let mut head: Vec<String> = (1..=d).map(|i| format!("eta{i}")).collect();
    head.push("label".into());
    head.extend((1..=d).map(|i| format!("v{i}")));
    head.extend(["s0", "lambda", "lam_x", "lam_x_se"].map(String::from));
    out.write_record(&head)?;
    for n in &map.nodes {
        let mut row: Vec<String> = n.eta.iter().map(ToString::to_string).collect();
        row.push(format!("{:?}", n.label));
        match &n.gamma {
            Some(g) => {
                row.extend(g.v.iter().map(ToString::to_string));
                row.extend([g.s0, g.lambda, g.lam_x, g.lam_x_se].map(|x| x.to_string()));
            }
            None => row.extend(std::iter::repeat(String::new()).take(d + 4)),
        }
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}
