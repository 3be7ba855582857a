//! Points on the Stiefel manifold `V_k(n)` (n×k matrices with orthonormal
//! columns) and rotations in SO(n) built from skew-symmetric generators.

use std::cmp::Ordering;

use ndarray::{ArrayView1, ArrayView2};
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::autodiff::Var;
use crate::linalg::{self, Matrix};
use crate::rng::Rng;
use crate::{Error, Result};

/// Orthonormality required of every Stiefel point.
pub const STIEFEL_TOL: f64 = 1e-6;
/// Drift above which [`apply_rotations`] re-orthonormalizes.
pub const DRIFT_TOL: f64 = 1e-6;
/// Per-entry tolerance of [`lex_cmp`].
pub const LEX_TOL: f64 = 1e-9;

pub fn check_stiefel(u: ArrayView2<f64>) -> Result<()> {
    let (n, k) = u.dim();
    if k > n {
        return Err(Error::invalid(format!("{n}x{k} cannot have orthonormal columns")));
    }
    let err = linalg::orthonormality_error(u);
    if err < STIEFEL_TOL {
        Ok(())
    } else {
        Err(Error::invalid(format!("columns not orthonormal (error {err:e})")))
    }
}

/// Free parameters of a point in `V_k(n)`: `nk − k(k+1)/2`.
pub fn stiefel_param_count(n: usize, k: usize) -> usize {
    n * k - k * (k + 1) / 2
}

/// Skew-symmetric matrix whose strict-lower entries `S[i][j]` with `j < k`
/// are taken from `params` column by column; all other entries are zero.
pub fn skew_from_params(n: usize, k: usize, params: &[f64]) -> Result<Matrix> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    if params.len() != stiefel_param_count(n, k) {
        return Err(Error::invalid(format!(
            "expected {} parameters, got {}",
            stiefel_param_count(n, k),
            params.len()
        )));
    }
    let mut s = Matrix::zeros((n, n));
    let mut it = params.iter();
    for j in 0..k {
        for i in j + 1..n {
            let v = *it.next().unwrap();
            s[[i, j]] = v;
            s[[j, i]] = -v;
        }
    }
    Ok(s)
}

/// First `k` columns of `exp(S)` for `S` built from `params`.
pub fn stiefel_from_params(n: usize, k: usize, params: &[f64]) -> Result<Matrix> {
    let s = skew_from_params(n, k, params)?;
    let r = linalg::matrix_exp(s.view())?;
    Ok(r.slice(ndarray::s![.., ..k]).to_owned())
}

pub fn random_stiefel(n: usize, k: usize, rng: &mut Rng) -> Result<Matrix> {
    if k > n {
        return Err(Error::invalid(format!("k = {k} exceeds n = {n}")));
    }
    let params: Vec<f64> = (0..stiefel_param_count(n, k))
        .map(|_| rng.sample(StandardNormal))
        .collect();
    stiefel_from_params(n, k, &params)
}

/// `tr(Qᵀ(I − ½BBᵀ)B)` without normalization.
pub fn canonical_metric_raw(q: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if q.dim() != b.dim() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", q.dim(), b.dim())));
    }
    // (I − ½BBᵀ)B = B − ½B(BᵀB)
    let btb = b.t().dot(&b);
    let m = &b - &(b.dot(&btb) * 0.5);
    Ok((&q * &m).sum())
}

/// Canonical metric divided by `m(B, B)`, so a point scores 1 against itself.
pub fn canonical_metric(q: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    let num = canonical_metric_raw(q, b)?;
    let den = canonical_metric_raw(b, b)?;
    if den.abs() < f64::EPSILON {
        return Err(Error::NumericalFailure("degenerate metric normalizer".into()));
    }
    Ok(num / den)
}

/// `exp(tril(X) − tril(X)ᵀ)` with the strict lower triangle.
pub fn proj_to_rotation(x: ArrayView2<f64>) -> Result<Matrix> {
    let (n, c) = x.dim();
    if n != c {
        return Err(Error::invalid(format!("proj_to_rotation of non-square {n}x{c}")));
    }
    let mut s = Matrix::zeros((n, n));
    for i in 0..n {
        for j in 0..i {
            s[[i, j]] = x[[i, j]];
            s[[j, i]] = -x[[i, j]];
        }
    }
    linalg::matrix_exp(s.view())
}

/// Differentiable [`proj_to_rotation`] over the last two axes of `x`.
pub fn proj_to_rotation_var<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let l = x.tril_strict()?;
    l.sub(l.t()?)?.matrix_exp()
}

/// `R_L · U · R_R`, re-orthonormalized by QR if the result drifts more than
/// [`DRIFT_TOL`] from the manifold.
pub fn apply_rotations(u: ArrayView2<f64>, r_left: ArrayView2<f64>, r_right: ArrayView2<f64>) -> Result<Matrix> {
    let (n, k) = u.dim();
    if r_left.dim() != (n, n) || r_right.dim() != (k, k) {
        return Err(Error::invalid(format!(
            "rotations {:?} and {:?} do not fit a {n}x{k} point",
            r_left.dim(),
            r_right.dim()
        )));
    }
    let out = r_left.dot(&u).dot(&r_right);
    let drift = linalg::orthonormality_error(out.view());
    if drift > DRIFT_TOL {
        log::debug!("stiefel drift {drift:e}, re-orthonormalizing");
        return Ok(linalg::qr(out.view())?.0);
    }
    Ok(out)
}

/// Flips each column so its largest-magnitude entry (first index on ties)
/// is positive.
pub fn canonical_signs(u: &mut Matrix) {
    for mut col in u.columns_mut() {
        let mut best = 0;
        for i in 1..col.len() {
            if col[i].abs() > col[best].abs() {
                best = i;
            }
        }
        if col.len() > 0 && col[best] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
}

/// Lexicographic comparison treating entries within [`LEX_TOL`] as equal.
pub fn lex_cmp(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Ordering {
    for (x, y) in a.iter().zip(b.iter()) {
        if (x - y).abs() > LEX_TOL {
            return x.total_cmp(y);
        }
    }
    a.len().cmp(&b.len())
}

/// Canonical representative of `u` modulo column signs and row order:
/// column signs are fixed by [`canonical_signs`], then the rows (node
/// embeddings) are sorted lexicographically. Returns the sorted point and
/// the row permutation, `out.row(i) == signed(u).row(perm[i])`.
pub fn canonicalize(u: ArrayView2<f64>) -> (Matrix, Vec<usize>) {
    let mut v = u.to_owned();
    canonical_signs(&mut v);
    let mut perm: Vec<usize> = (0..v.nrows()).collect();
    perm.sort_by(|&a, &b| lex_cmp(v.row(a), v.row(b)).then(a.cmp(&b)));
    let out = Matrix::from_shape_fn(v.dim(), |(i, j)| v[[perm[i], j]]);
    (out, perm)
}

/// Euclidean blend of the canonical forms of `u1` and `u2`, projected back
/// onto the manifold by QR.
pub fn interpolate(u1: ArrayView2<f64>, u2: ArrayView2<f64>, t: f64) -> Result<Matrix> {
    if u1.dim() != u2.dim() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", u1.dim(), u2.dim())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::invalid(format!("interpolation weight {t} outside [0, 1]")));
    }
    let (a, _) = canonicalize(u1);
    let (b, _) = canonicalize(u2);
    let blend = &a * (1.0 - t) + &b * t;
    Ok(linalg::qr(blend.view())?.0)
}
