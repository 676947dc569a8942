//! Exact rational convex-hull queries for small point sets in low dimension.

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{Signed, Zero};

pub(crate) type Q = BigRational;

pub(crate) fn q_from_f64(x: f64) -> Q {
    BigRational::from_float(x).expect("finite coordinate")
}

pub(crate) fn q_to_f64(x: &Q) -> f64 {
    use num_traits::ToPrimitive;
    x.to_f64().unwrap_or(f64::NAN)
}

fn dot(a: &[Q], b: &[Q]) -> Q {
    a.iter().zip(b).fold(Q::zero(), |acc, (x, y)| acc + x * y)
}

/// Solves `a x = b` exactly. Returns `None` when inconsistent; free variables
/// are set to zero when the system is underdetermined.
fn solve(mut a: Vec<Vec<Q>>, mut b: Vec<Q>) -> Option<Vec<Q>> {
    let rows = a.len();
    let cols = if rows == 0 { 0 } else { a[0].len() };
    let mut pivots = Vec::new();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..rows).find(|&i| !a[i][c].is_zero()) else { continue };
        a.swap(r, p);
        b.swap(r, p);
        let inv = a[r][c].recip();
        for j in c..cols {
            a[r][j] = &a[r][j] * &inv;
        }
        b[r] = &b[r] * &inv;
        for i in 0..rows {
            if i != r && !a[i][c].is_zero() {
                let f = a[i][c].clone();
                for j in c..cols {
                    let t = &f * &a[r][j];
                    a[i][j] -= t;
                }
                let t = &f * &b[r];
                b[i] -= t;
            }
        }
        pivots.push(c);
        r += 1;
        if r == rows {
            break;
        }
    }
    if b[r..].iter().any(|x| !x.is_zero()) {
        return None;
    }
    let mut x = vec![Q::zero(); cols];
    for (i, &c) in pivots.iter().enumerate() {
        x[c] = b[i].clone();
    }
    Some(x)
}

fn rank(rows: &[Vec<Q>]) -> usize {
    let mut a: Vec<Vec<Q>> = rows.to_vec();
    let n = a.len();
    if n == 0 {
        return 0;
    }
    let cols = a[0].len();
    let mut r = 0;
    for c in 0..cols {
        let Some(p) = (r..n).find(|&i| !a[i][c].is_zero()) else { continue };
        a.swap(r, p);
        for i in r + 1..n {
            if !a[i][c].is_zero() {
                let f = &a[i][c] / &a[r][c];
                for j in c..cols {
                    let t = &f * &a[r][j];
                    a[i][j] -= t;
                }
            }
        }
        r += 1;
        if r == n {
            break;
        }
    }
    r
}

fn affine_rank(points: &[Vec<Q>]) -> usize {
    if points.is_empty() {
        return 0;
    }
    let base = &points[0];
    let diffs: Vec<Vec<Q>> = points[1..]
        .iter()
        .map(|p| p.iter().zip(base).map(|(x, y)| x - y).collect())
        .collect();
    rank(&diffs)
}

/// Nonzero vector orthogonal to all rows, assuming their rank is below the
/// ambient dimension.
fn null_vector(rows: &[Vec<Q>], dim: usize) -> Option<Vec<Q>> {
    for free in 0..dim {
        let mut a: Vec<Vec<Q>> = rows.to_vec();
        let mut b = vec![Q::zero(); rows.len()];
        let mut unit = vec![Q::zero(); dim];
        unit[free] = Q::from_integer(BigInt::from(1));
        a.push(unit);
        b.push(Q::from_integer(BigInt::from(1)));
        if let Some(x) = solve(a, b) {
            return Some(x);
        }
    }
    None
}

/// Barycentric test: is `target` a convex combination of `subset`?
fn in_simplex(subset: &[&Vec<Q>], target: &[Q]) -> bool {
    let dim = target.len();
    let m = subset.len();
    let mut a = vec![vec![Q::zero(); m]; dim + 1];
    let mut b = vec![Q::zero(); dim + 1];
    for (j, p) in subset.iter().enumerate() {
        for i in 0..dim {
            a[i][j] = p[i].clone();
        }
        a[dim][j] = Q::from_integer(BigInt::from(1));
    }
    b[..dim].clone_from_slice(target);
    b[dim] = Q::from_integer(BigInt::from(1));
    match solve(a, b) {
        Some(w) => w.iter().all(|x| !x.is_negative()),
        None => false,
    }
}

fn subsets(n: usize, k: usize, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
    fn rec(start: usize, n: usize, k: usize, cur: &mut Vec<usize>, f: &mut dyn FnMut(&[usize]) -> bool) -> bool {
        if cur.len() == k {
            return f(cur);
        }
        for i in start..n {
            cur.push(i);
            if rec(i + 1, n, k, cur, f) {
                return true;
            }
            cur.pop();
        }
        false
    }
    rec(0, n, k, &mut Vec::with_capacity(k), f)
}

/// Whether `target` lies in the convex hull of `points` (Carathéodory search).
pub(crate) fn hull_contains(points: &[Vec<Q>], target: &[Q]) -> bool {
    let dim = target.len();
    for k in 1..=(dim + 1).min(points.len()) {
        let found = subsets(points.len(), k, &mut |idx| {
            let sub: Vec<&Vec<Q>> = idx.iter().map(|&i| &points[i]).collect();
            in_simplex(&sub, target)
        });
        if found {
            return true;
        }
    }
    false
}

/// Position of the origin relative to the hull of `points`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum OriginPosition {
    Outside,
    Boundary,
    Interior,
}

pub(crate) fn origin_position(points: &[Vec<Q>], dim: usize) -> OriginPosition {
    let zero = vec![Q::zero(); dim];
    if !hull_contains(points, &zero) {
        return OriginPosition::Outside;
    }
    if affine_rank(points) < dim {
        return OriginPosition::Boundary;
    }
    // A supporting hyperplane through the origin is spanned by `dim` points of
    // a facet whose affine hull contains the origin.
    let on_facet = subsets(points.len(), dim, &mut |idx| {
        let sub: Vec<Vec<Q>> = idx.iter().map(|&i| points[i].clone()).collect();
        if affine_rank(&sub) != dim - 1 {
            return false;
        }
        let refs: Vec<&Vec<Q>> = sub.iter().collect();
        if !affine_contains(&refs, &zero) {
            return false;
        }
        let Some(normal) = null_vector(&sub, dim) else { return false };
        let signs: Vec<Q> = points.iter().map(|p| dot(&normal, p)).collect();
        signs.iter().all(|s| !s.is_negative()) || signs.iter().all(|s| !s.is_positive())
    });
    if on_facet {
        OriginPosition::Boundary
    } else {
        OriginPosition::Interior
    }
}

fn affine_contains(subset: &[&Vec<Q>], target: &[Q]) -> bool {
    let dim = target.len();
    let m = subset.len();
    let mut a = vec![vec![Q::zero(); m]; dim + 1];
    let mut b = vec![Q::zero(); dim + 1];
    for (j, p) in subset.iter().enumerate() {
        for i in 0..dim {
            a[i][j] = p[i].clone();
        }
        a[dim][j] = Q::from_integer(BigInt::from(1));
    }
    b[..dim].clone_from_slice(target);
    b[dim] = Q::from_integer(BigInt::from(1));
    solve(a, b).is_some()
}

/// Extreme points of the hull, deduplicated, in input order.
pub(crate) fn extreme_points(points: &[Vec<Q>]) -> Vec<Vec<Q>> {
    let mut uniq: Vec<Vec<Q>> = Vec::new();
    for p in points {
        if !uniq.contains(p) {
            uniq.push(p.clone());
        }
    }
    (0..uniq.len())
        .filter(|&i| {
            let rest: Vec<Vec<Q>> = uniq.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, p)| p.clone()).collect();
            rest.is_empty() || !hull_contains(&rest, &uniq[i])
        })
        .map(|i| uniq[i].clone())
        .collect()
}

/// Smallest value of `<p, direction>` over the points.
pub(crate) fn min_projection(points: &[Vec<Q>], direction: &[Q]) -> Q {
    points.iter().map(|p| dot(p, direction)).min().expect("nonempty point set")
}
