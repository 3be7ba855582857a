//! Spectral wavelet node features: per-node energies of a bank of spline
//! band-pass filters of the normalized Laplacian, histogrammed per filter.

use ndarray::{Array1, Array2};

use crate::graphs::{normalized_laplacian, Graph};
use crate::linalg::{self, Matrix};
use crate::Result;

/// Spectrum bound of the normalized Laplacian; the bank is laid out over
/// `(0, LMAX]` for every graph so features are comparable across graphs.
pub const LMAX: f64 = 2.0;
const LOWPASS_FACTOR: f64 = 20.0;
const ALPHA: f64 = 2.0;
const BETA: f64 = 2.0;
const T1: f64 = 1.0;
const T2: f64 = 2.0;

/// Spline band-pass profile: `x^α` rising below `T1`, a cubic through
/// `(T1, 1)` and `(T2, 1)` matching both slopes, `x^-β` decay above `T2`.
fn band(x: f64) -> f64 {
    if x < T1 {
        x.powf(ALPHA) * T1.powf(-ALPHA)
    } else if x < T2 {
        let (h, s) = (T2 - T1, (x - T1) / (T2 - T1));
        let (d1, d2) = (ALPHA / T1, -BETA / T2);
        let h00 = 2.0 * s.powi(3) - 3.0 * s * s + 1.0;
        let h10 = s.powi(3) - 2.0 * s * s + s;
        let h01 = -2.0 * s.powi(3) + 3.0 * s * s;
        let h11 = s.powi(3) - s * s;
        h00 + h10 * h * d1 + h01 + h11 * h * d2
    } else {
        x.powf(-BETA) * T2.powf(BETA)
    }
}

/// Maximum of the cubic segment of [`band`] (its end values are 1).
fn band_peak() -> f64 {
    // d/ds of the Hermite cubic with unit end values:
    // h·d1·(3s² − 4s + 1) + h·d2·(3s² − 2s).
    let (d1, d2) = (ALPHA / T1, -BETA / T2);
    let (a, b, c) = (3.0 * (d1 + d2), -4.0 * d1 - 2.0 * d2, d1);
    let mut best: f64 = 1.0;
    let disc = b * b - 4.0 * a * c;
    if disc >= 0.0 && a != 0.0 {
        for r in [(-b + disc.sqrt()) / (2.0 * a), (-b - disc.sqrt()) / (2.0 * a)] {
            if (0.0..=1.0).contains(&r) {
                best = best.max(band(T1 + r * (T2 - T1)));
            }
        }
    }
    best
}

/// Filter bank of one low-pass kernel and `kernels − 1` scaled band-pass
/// kernels with log-spaced scales from `T2 / lmin` down to `T1 / LMAX`.
#[derive(Clone, Debug)]
pub struct AbsplineBank {
    pub scales: Vec<f64>,
    lowpass_gain: f64,
    lowpass_width: f64,
}

impl AbsplineBank {
    pub fn new(kernels: usize) -> Self {
        assert!(kernels >= 2, "need a low-pass and at least one band-pass kernel");
        let lmin = LMAX / LOWPASS_FACTOR;
        let (hi, lo) = ((T2 / lmin).ln(), (T1 / LMAX).ln());
        let m = kernels - 1;
        let scales = (0..m)
            .map(|i| if m == 1 { hi } else { hi + (lo - hi) * i as f64 / (m - 1) as f64 }.exp())
            .collect();
        AbsplineBank {
            scales,
            lowpass_gain: band_peak(),
            lowpass_width: 0.6 * lmin,
        }
    }

    pub fn len(&self) -> usize {
        self.scales.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Kernel `p` at eigenvalue `x`; `p = 0` is the low-pass kernel.
    pub fn eval(&self, p: usize, x: f64) -> f64 {
        if p == 0 {
            self.lowpass_gain * (-(x / self.lowpass_width).powi(4)).exp()
        } else {
            band(self.scales[p - 1] * x)
        }
    }
}

fn eigen(g: &Graph) -> Result<(Array1<f64>, Matrix)> {
    linalg::sym_eig(normalized_laplacian(g).view())
}

/// `S[p, i] = Σ_ℓ φ_p(λ_ℓ)² u_ℓ[i]²`, shape `[P, n]`.
pub fn wavelet_energies(g: &Graph, bank: &AbsplineBank) -> Result<Array2<f64>> {
    let (vals, vecs) = eigen(g)?;
    let n = g.n();
    let u2 = vecs.mapv(|x| x * x);
    let mut s = Array2::zeros((bank.len(), n));
    for p in 0..bank.len() {
        let w = vals.mapv(|l| bank.eval(p, l).powi(2));
        s.row_mut(p).assign(&u2.dot(&w));
    }
    Ok(s)
}

/// Same energies as squared row norms of the filtered matrices
/// `φ_p(L) = U diag(φ_p(λ)) Uᵀ`.
pub fn wavelet_energies_filtered(g: &Graph, bank: &AbsplineBank) -> Result<Array2<f64>> {
    let (vals, vecs) = eigen(g)?;
    let n = g.n();
    let mut s = Array2::zeros((bank.len(), n));
    for p in 0..bank.len() {
        let scaled = &vecs * &vals.mapv(|l| bank.eval(p, l));
        let filt = scaled.dot(&vecs.t());
        for i in 0..n {
            s[[p, i]] = filt.row(i).iter().map(|x| x * x).sum();
        }
    }
    Ok(s)
}

/// Per-kernel node histograms `S̄[p, q]`; each row counts all `n` nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct WaveletFeature {
    pub hist: Array2<f64>,
}

pub fn wavelet_feature(g: &Graph, bank: &AbsplineBank, bins: usize, bound: f64) -> Result<WaveletFeature> {
    let s = wavelet_energies(g, bank)?;
    let mut hist = Array2::zeros((bank.len(), bins));
    for p in 0..bank.len() {
        let h = super::mmd::histogram(s.row(p).iter().copied(), bins, 0.0, bound);
        hist.row_mut(p).assign(&Array1::from(h));
    }
    Ok(WaveletFeature { hist })
}
