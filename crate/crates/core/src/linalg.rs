//! Dense kernels on `Array2<f64>`: symmetric eigendecomposition, thin QR and
//! the matrix exponential. All of them are deterministic and allocation-light;
//! none depend on an external LAPACK.

use ndarray::{Array1, Array2, ArrayView2};

use crate::{Error, Result};

pub type Matrix = Array2<f64>;

/// Library-wide numerical tolerances.
pub mod tol {
    /// Maximum `|m_ij - m_ji|` accepted by [`super::sym_eig`], relative to `max(1, max|m|)`.
    pub const SYMMETRY: f64 = 1e-10;
    /// Smallest admissible `|r_ii|` in [`super::qr`].
    pub const RANK: f64 = 1e-12;
    /// Scaling target for the 1-norm before the Taylor series in [`super::matrix_exp`].
    pub const EXP_SCALE_TARGET: f64 = 0.5;
    /// Number of Taylor terms (degree) used by [`super::matrix_exp`].
    pub const EXP_TAYLOR_TERMS: usize = 18;
    /// QL sweeps allowed per eigenvalue before giving up.
    pub const EIG_MAX_SWEEPS: usize = 100;
}

fn check_finite(m: ArrayView2<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid(format!("{what}: non-finite entry")))
    }
}

pub fn is_symmetric(m: ArrayView2<f64>, tol: f64) -> bool {
    let (r, c) = m.dim();
    if r != c {
        return false;
    }
    let scale = m.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    (0..r).all(|i| (0..i).all(|j| (m[[i, j]] - m[[j, i]]).abs() <= tol * scale))
}

pub fn frobenius(m: ArrayView2<f64>) -> f64 {
    m.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `‖UᵀU − I‖_F`.
pub fn orthonormality_error(u: ArrayView2<f64>) -> f64 {
    let g = u.t().dot(&u);
    let k = g.nrows();
    let mut s = 0.0;
    for i in 0..k {
        for j in 0..k {
            let d = g[[i, j]] - if i == j { 1.0 } else { 0.0 };
            s += d * d;
        }
    }
    s.sqrt()
}

/// Determinant by LU with partial pivoting.
pub fn det(m: ArrayView2<f64>) -> Result<f64> {
    let (n, c) = m.dim();
    if n != c {
        return Err(Error::invalid(format!("det of non-square {n}x{c}")));
    }
    let mut a = m.to_owned();
    let mut d = 1.0;
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[[x, col]].abs().total_cmp(&a[[y, col]].abs()))
            .unwrap();
        if a[[piv, col]] == 0.0 {
            return Ok(0.0);
        }
        if piv != col {
            for j in 0..n {
                a.swap([piv, j], [col, j]);
            }
            d = -d;
        }
        let p = a[[col, col]];
        d *= p;
        for r in col + 1..n {
            let f = a[[r, col]] / p;
            if f != 0.0 {
                for j in col..n {
                    a[[r, j]] -= f * a[[col, j]];
                }
            }
        }
    }
    Ok(d)
}

/// Eigendecomposition of a symmetric matrix. Eigenvalues come back in
/// non-decreasing order with eigenvectors as the matching columns.
pub fn sym_eig(m: ArrayView2<f64>) -> Result<(Array1<f64>, Matrix)> {
    let (n, c) = m.dim();
    if n != c {
        return Err(Error::invalid(format!("sym_eig of non-square {n}x{c}")));
    }
    check_finite(m, "sym_eig")?;
    if !is_symmetric(m, tol::SYMMETRY) {
        return Err(Error::invalid("sym_eig input is not symmetric"));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Matrix::zeros((0, 0))));
    }
    // Row-major scratch: v[i * n + j].
    let mut v: Vec<f64> = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            v.push(0.5 * (m[[i, j]] + m[[j, i]]));
        }
    }
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tridiagonalize(n, &mut v, &mut d, &mut e);
    ql_implicit(n, &mut v, &mut d, &mut e)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
    let w = Array1::from_iter(order.iter().map(|&i| d[i]));
    let mut vecs = Matrix::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..n {
            vecs[[r, dst]] = v[r * n + src];
        }
    }
    Ok((w, vecs))
}

/// Householder reduction to tridiagonal form; `v` is overwritten with the
/// accumulated orthogonal transform, `d`/`e` receive diagonal/sub-diagonal.
fn tridiagonalize(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) {
    let at = |i: usize, j: usize| i * n + j;
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
    }
    for i in (1..n).rev() {
        let scale: f64 = d[..i].iter().map(|x| x.abs()).sum();
        let mut h = 0.0;
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
                v[at(j, i)] = 0.0;
            }
        } else {
            for dk in d[..i].iter_mut() {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e[..i].iter_mut() {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[at(j, i)] = f;
                g = e[j] + v[at(j, j)] * f;
                for k in j + 1..i {
                    g += v[at(k, j)] * d[k];
                    e[k] += v[at(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[at(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[at(i - 1, j)];
                v[at(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n - 1 {
        v[at(n - 1, i)] = v[at(i, i)];
        v[at(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[at(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[at(k, i + 1)] * v[at(k, j)];
                }
                for k in 0..=i {
                    v[at(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[at(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[at(n - 1, j)];
        v[at(n - 1, j)] = 0.0;
    }
    v[at(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;
}

/// Implicit-shift QL on the tridiagonal (d, e), accumulating into `v`.
fn ql_implicit(n: usize, v: &mut [f64], d: &mut [f64], e: &mut [f64]) -> Result<()> {
    let at = |i: usize, j: usize| i * n + j;
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut sweeps = 0;
            loop {
                sweeps += 1;
                if sweeps > tol::EIG_MAX_SWEEPS {
                    return Err(Error::NumericalFailure(format!(
                        "QL iteration did not converge for eigenvalue {l}"
                    )));
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d[l + 2..n].iter_mut() {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[at(k, i + 1)];
                        v[at(k, i + 1)] = s * v[at(k, i)] + c * h;
                        v[at(k, i)] = c * v[at(k, i)] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok(())
}

/// Thin Householder QR of an `n × k` matrix with `n ≥ k`. The sign of each
/// column of `q` is chosen so that `diag(r) ≥ 0`.
pub fn qr(m: ArrayView2<f64>) -> Result<(Matrix, Matrix)> {
    let (n, k) = m.dim();
    if n < k {
        return Err(Error::invalid(format!("qr needs rows >= cols, got {n}x{k}")));
    }
    check_finite(m, "qr")?;
    let mut a = m.to_owned();
    let mut reflectors: Vec<Array1<f64>> = Vec::with_capacity(k);
    for j in 0..k {
        let norm = (j..n).map(|i| a[[i, j]] * a[[i, j]]).sum::<f64>().sqrt();
        let mut vj = Array1::zeros(n - j);
        if norm > 0.0 {
            let alpha = if a[[j, j]] > 0.0 { -norm } else { norm };
            for i in j..n {
                vj[i - j] = a[[i, j]];
            }
            vj[0] -= alpha;
            let vnorm2: f64 = vj.iter().map(|x| x * x).sum();
            if vnorm2 > 0.0 {
                for c in j..k {
                    let dot: f64 = (j..n).map(|i| vj[i - j] * a[[i, c]]).sum();
                    let f = 2.0 * dot / vnorm2;
                    for i in j..n {
                        a[[i, c]] -= f * vj[i - j];
                    }
                }
                vj /= vnorm2.sqrt();
            }
        }
        reflectors.push(vj);
    }
    let mut r = Matrix::zeros((k, k));
    for i in 0..k {
        for j in i..k {
            r[[i, j]] = a[[i, j]];
        }
    }
    // Q = H_0 H_1 ... H_{k-1} applied to the first k columns of I.
    let mut q = Matrix::zeros((n, k));
    for i in 0..k {
        q[[i, i]] = 1.0;
    }
    for j in (0..k).rev() {
        let vj = &reflectors[j];
        for c in 0..k {
            let dot: f64 = (j..n).map(|i| vj[i - j] * q[[i, c]]).sum();
            if dot != 0.0 {
                for i in j..n {
                    q[[i, c]] -= 2.0 * dot * vj[i - j];
                }
            }
        }
    }
    for i in 0..k {
        if r[[i, i]] < 0.0 {
            for j in i..k {
                r[[i, j]] = -r[[i, j]];
            }
            for row in 0..n {
                q[[row, i]] = -q[[row, i]];
            }
        }
        if r[[i, i]].abs() <= tol::RANK {
            return Err(Error::RankDeficient {
                index: i,
                value: r[[i, i]],
            });
        }
    }
    Ok((q, r))
}

pub fn one_norm(m: ArrayView2<f64>) -> f64 {
    m.columns()
        .into_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Number of squarings needed so that `‖S / 2^j‖₁ ≤ EXP_SCALE_TARGET`.
pub fn exp_squarings(norm1: f64) -> u32 {
    let mut j = 0;
    let mut s = norm1;
    while s > tol::EXP_SCALE_TARGET && j < 64 {
        s *= 0.5;
        j += 1;
    }
    j
}

/// Matrix exponential by scaling and squaring with a truncated Taylor series
/// evaluated in Horner form. The differentiable variant in
/// [`crate::autodiff`] follows exactly the same sequence of products.
pub fn matrix_exp(s: ArrayView2<f64>) -> Result<Matrix> {
    let (n, c) = s.dim();
    if n != c {
        return Err(Error::invalid(format!("matrix_exp of non-square {n}x{c}")));
    }
    check_finite(s, "matrix_exp")?;
    let j = exp_squarings(one_norm(s));
    let x = s.mapv(|v| v / 2f64.powi(j as i32));
    let eye = Matrix::eye(n);
    // I + X/1 (I + X/2 (I + ... (I + X/N)))
    let mut r = eye.clone();
    for t in (1..=tol::EXP_TAYLOR_TERMS).rev() {
        r = &eye + &(x.dot(&r) / t as f64);
    }
    for _ in 0..j {
        r = r.dot(&r);
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn random_symmetric(n: usize, rng: &mut crate::rng::Rng) -> Matrix {
        let mut m = Matrix::zeros((n, n));
        for i in 0..n {
            for j in 0..=i {
                let v: f64 = rng.sample(StandardNormal);
                m[[i, j]] = v;
                m[[j, i]] = v;
            }
        }
        m
    }

    fn random_skew(n: usize, rng: &mut crate::rng::Rng) -> Matrix {
        let mut m = Matrix::zeros((n, n));
        for i in 0..n {
            for j in 0..i {
                let v: f64 = rng.sample(StandardNormal);
                m[[i, j]] = v;
                m[[j, i]] = -v;
            }
        }
        m
    }

    #[test]
    fn eig_of_k2_laplacian() {
        let l = array![[1.0, -1.0], [-1.0, 1.0]];
        let (w, _) = sym_eig(l.view()).unwrap();
        assert!((w[0] - 0.0).abs() < 1e-12 && (w[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn eig_of_p3_laplacian_matches_characteristic_polynomial() {
        // L(P3) = [[1, -1/√2, 0], [-1/√2, 1, -1/√2], [0, -1/√2, 1]].
        // det(L - xI) = (1-x)^3 - (1-x) = (1-x)(x)(x-2)  ->  roots 0, 1, 2.
        let a = 1.0 / 2f64.sqrt();
        let l = array![[1.0, -a, 0.0], [-a, 1.0, -a], [0.0, -a, 1.0]];
        let charpoly = |x: f64| (1.0 - x).powi(3) - (1.0 - x);
        for r in [0.0, 1.0, 2.0] {
            assert!(charpoly(r).abs() < 1e-15);
        }
        let (w, _) = sym_eig(l.view()).unwrap();
        for (got, want) in w.iter().zip([0.0, 1.0, 2.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn eig_of_identity() {
        let (w, v) = sym_eig(Matrix::eye(5).view()).unwrap();
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-14));
        for c in v.columns() {
            let nz: Vec<_> = c.iter().filter(|x| x.abs() > 1e-12).collect();
            assert_eq!(nz.len(), 1);
            assert!((nz[0].abs() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn eig_reconstructs_random_symmetric() {
        let mut rng = crate::rng::stream(1, &[]);
        for n in 2..=32 {
            let m = random_symmetric(n, &mut rng);
            let (w, v) = sym_eig(m.view()).unwrap();
            let rec = v.dot(&Matrix::from_diag(&w)).dot(&v.t());
            assert!(frobenius((&rec - &m).view()) < 1e-8, "n = {n}");
            assert!(orthonormality_error(v.view()) < 1e-8);
            assert!(w.windows(2).into_iter().all(|p| p[0] <= p[1]));
            let trace: f64 = m.diag().sum();
            assert!((w.sum() - trace).abs() < 1e-8);
        }
    }

    #[test]
    fn eig_rejects_bad_input() {
        let m = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(sym_eig(m.view()), Err(Error::InvalidInput(_))));
        let m = Matrix::zeros((2, 3));
        assert!(matches!(sym_eig(m.view()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn qr_small_cases() {
        let m = array![[2.0, 0.0], [0.0, 3.0]];
        let (q, r) = qr(m.view()).unwrap();
        assert!(frobenius((&q - &Matrix::eye(2)).view()) < 1e-14);
        assert!(frobenius((&r - &m).view()) < 1e-14);

        let mut rng = crate::rng::stream(2, &[]);
        let x = Matrix::from_shape_fn((6, 3), |_| rng.sample(StandardNormal));
        let (q, r) = qr(x.view()).unwrap();
        assert!(frobenius((&q.dot(&r) - &x).view()) < 1e-10);
        assert!(orthonormality_error(q.view()) < 1e-10);
        for i in 0..3 {
            assert!(r[[i, i]] >= 0.0);
            for j in 0..i {
                assert_eq!(r[[i, j]], 0.0);
            }
        }
        // Idempotent on its own output.
        let (q2, r2) = qr(q.view()).unwrap();
        assert!(frobenius((&q2 - &q).view()) < 1e-10);
        assert!(frobenius((&r2 - &Matrix::eye(3)).view()) < 1e-10);
    }

    #[test]
    fn qr_detects_rank_deficiency() {
        let m = array![[1.0, 2.0], [2.0, 4.0], [3.0, 6.0]];
        assert!(matches!(qr(m.view()), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn exp_closed_forms() {
        let z = Matrix::zeros((4, 4));
        assert_eq!(matrix_exp(z.view()).unwrap(), Matrix::eye(4));
        let t = std::f64::consts::FRAC_PI_2;
        let s = array![[0.0, t], [-t, 0.0]];
        let r = matrix_exp(s.view()).unwrap();
        let want = array![[0.0, 1.0], [-1.0, 0.0]];
        assert!(frobenius((&r - &want).view()) < 1e-12);
    }

    #[test]
    fn exp_of_skew_is_rotation() {
        let mut rng = crate::rng::stream(3, &[]);
        for n in 2..=32 {
            let s = random_skew(n, &mut rng);
            let r = matrix_exp(s.view()).unwrap();
            assert!(orthonormality_error(r.view()) < 1e-8, "n = {n}");
            assert!((det(r.view()).unwrap() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn exp_inverse_property_at_spectral_norm_three() {
        let mut rng = crate::rng::stream(4, &[]);
        let s = random_skew(8, &mut rng);
        // Spectral norm of a skew matrix = sqrt of the largest eigenvalue of SᵀS.
        let (w, _) = sym_eig(s.t().dot(&s).view()).unwrap();
        let s = s * (3.0 / w[w.len() - 1].sqrt());
        let a = matrix_exp(s.view()).unwrap();
        let b = matrix_exp((-&s).view()).unwrap();
        assert!(frobenius((&a.dot(&b) - &Matrix::eye(8)).view()) < 1e-7);
    }
}
