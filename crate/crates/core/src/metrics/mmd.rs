//! Graph statistics and maximum mean discrepancy between graph sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::wavelet::{wavelet_feature, AbsplineBank};
use crate::graphs::{clustering_coefficients, degree_histogram, normalized_laplacian, orbit_counts, Graph, ORBITS};
use crate::linalg;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Kernel {
    /// `exp(-tv² / 2σ²)` with `tv` the total-variation distance between
    /// normalized histograms.
    GaussianTv { sigma: f64 },
    /// `exp(-emd² / 2σ²)` with the 1-D earth mover's distance between
    /// normalized histograms, measured in units of `bin_width`.
    GaussianEmd { sigma: f64, bin_width: f64 },
    /// `exp(-‖x − y‖² / 2σ²)` on raw vectors.
    Gaussian { sigma: f64 },
}

impl Kernel {
    fn is_histogram(&self) -> bool {
        !matches!(self, Kernel::Gaussian { .. })
    }

    /// Kernel value; the shorter vector is zero-padded. Histogram kernels
    /// expect already normalized inputs.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> f64 {
        let len = x.len().max(y.len());
        let at = |v: &[f64], i: usize| v.get(i).copied().unwrap_or(0.0);
        let (d, sigma) = match *self {
            Kernel::GaussianTv { sigma } => ((0..len).map(|i| (at(x, i) - at(y, i)).abs()).sum::<f64>() / 2.0, sigma),
            Kernel::GaussianEmd { sigma, bin_width } => {
                let (mut cx, mut cy, mut emd) = (0.0, 0.0, 0.0);
                for i in 0..len {
                    cx += at(x, i);
                    cy += at(y, i);
                    emd += (cx - cy).abs();
                }
                (emd * bin_width, sigma)
            }
            Kernel::Gaussian { sigma } => ((0..len).map(|i| (at(x, i) - at(y, i)).powi(2)).sum::<f64>().sqrt(), sigma),
        };
        (-d * d / (2.0 * sigma * sigma)).exp()
    }
}

fn normalized(v: &[f64]) -> Vec<f64> {
    let s: f64 = v.iter().sum();
    if s > 0.0 {
        v.iter().map(|x| x / s).collect()
    } else {
        v.to_vec()
    }
}

fn mean_kernel(a: &[Vec<f64>], b: &[Vec<f64>], kernel: Kernel) -> f64 {
    let total: f64 = a.par_iter().map(|x| b.iter().map(|y| kernel.eval(x, y)).sum::<f64>()).sum();
    total / (a.len() * b.len()) as f64
}

/// Squared MMD, V-statistic form (all pairs including `i = j`), clamped
/// at zero.
pub fn mmd(a: &[Vec<f64>], b: &[Vec<f64>], kernel: Kernel) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("MMD needs two non-empty sample sets"));
    }
    let prep = |s: &[Vec<f64>]| -> Vec<Vec<f64>> {
        if kernel.is_histogram() {
            s.iter().map(|v| normalized(v)).collect()
        } else {
            s.to_vec()
        }
    };
    let (a, b) = (prep(a), prep(b));
    let v = mean_kernel(&a, &a, kernel) + mean_kernel(&b, &b, kernel) - 2.0 * mean_kernel(&a, &b, kernel);
    Ok(v.max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Statistic {
    Degree,
    Clustering,
    Orbit,
    Spectral,
    Wavelet,
}

impl Statistic {
    pub const ALL: [Statistic; 5] = [
        Statistic::Degree,
        Statistic::Clustering,
        Statistic::Orbit,
        Statistic::Spectral,
        Statistic::Wavelet,
    ];
}

/// Which histogram distance the degree, clustering and spectral kernels use.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Tv,
    Emd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MmdConfig {
    pub family: KernelFamily,
    pub degree_sigma: f64,
    pub clustering_sigma: f64,
    pub clustering_bins: usize,
    pub orbit_sigma: f64,
    pub spectral_sigma: f64,
    pub spectral_bins: usize,
    pub wavelet_sigma: f64,
    pub wavelet_kernels: usize,
    pub wavelet_bins: usize,
    /// Upper end of the wavelet energy histogram range `[0, bound]`.
    pub wavelet_bound: f64,
}

impl Default for MmdConfig {
    fn default() -> Self {
        MmdConfig {
            family: KernelFamily::Tv,
            degree_sigma: 1.0,
            clustering_sigma: 0.1,
            clustering_bins: 100,
            orbit_sigma: 30.0,
            spectral_sigma: 1.0,
            spectral_bins: 200,
            wavelet_sigma: 1.0,
            wavelet_kernels: 12,
            wavelet_bins: 50,
            wavelet_bound: 1.4,
        }
    }
}

/// Lower end of the spectral histogram, just below 0 so zero eigenvalues
/// with rounding noise land in the first bin.
pub const SPECTRAL_LOW: f64 = -1e-5;
pub const SPECTRAL_HIGH: f64 = 2.0;

impl MmdConfig {
    pub fn emd() -> Self {
        MmdConfig { family: KernelFamily::Emd, ..Default::default() }
    }

    /// The wavelet statistic always uses the TV kernel (its feature is a
    /// stack of histograms, not one 1-D histogram); orbits use the
    /// Euclidean kernel on mean orbit counts.
    pub fn kernel(&self, stat: Statistic) -> Kernel {
        let hist = |sigma: f64, bin_width: f64| match self.family {
            KernelFamily::Tv => Kernel::GaussianTv { sigma },
            KernelFamily::Emd => Kernel::GaussianEmd { sigma, bin_width },
        };
        match stat {
            Statistic::Degree => hist(self.degree_sigma, 1.0),
            Statistic::Clustering => hist(self.clustering_sigma, 1.0 / self.clustering_bins as f64),
            Statistic::Orbit => Kernel::Gaussian { sigma: self.orbit_sigma },
            Statistic::Spectral => hist(self.spectral_sigma, (SPECTRAL_HIGH - SPECTRAL_LOW) / self.spectral_bins as f64),
            Statistic::Wavelet => Kernel::GaussianTv { sigma: self.wavelet_sigma },
        }
    }
}

/// Counts of `values` in `bins` equal bins over `[lo, hi]`; values outside
/// the range are clamped into the end bins.
pub fn histogram(values: impl IntoIterator<Item = f64>, bins: usize, lo: f64, hi: f64) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for v in values {
        let t = ((v - lo) / (hi - lo) * bins as f64).floor();
        h[(t.max(0.0) as usize).min(bins - 1)] += 1.0;
    }
    h
}

/// Mean orbit-count vector over nodes.
pub fn mean_orbit_counts(g: &Graph) -> Vec<f64> {
    let mut mean = vec![0.0; ORBITS];
    if g.n() == 0 {
        return mean;
    }
    for counts in orbit_counts(g) {
        for (m, c) in mean.iter_mut().zip(counts) {
            *m += c as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= g.n() as f64);
    mean
}

pub fn spectral_histogram(g: &Graph, bins: usize) -> Result<Vec<f64>> {
    if g.n() == 0 {
        return Ok(vec![0.0; bins]);
    }
    let (vals, _) = linalg::sym_eig(normalized_laplacian(g).view())?;
    Ok(histogram(vals.iter().copied(), bins, SPECTRAL_LOW, SPECTRAL_HIGH))
}

/// One feature vector per graph.
pub fn statistic_features(graphs: &[Graph], stat: Statistic, cfg: &MmdConfig) -> Result<Vec<Vec<f64>>> {
    let bank = AbsplineBank::new(cfg.wavelet_kernels);
    graphs
        .par_iter()
        .map(|g| -> Result<Vec<f64>> {
            Ok(match stat {
                Statistic::Degree => degree_histogram(g).into_iter().map(|c| c as f64).collect(),
                Statistic::Clustering => histogram(clustering_coefficients(g), cfg.clustering_bins, 0.0, 1.0),
                Statistic::Orbit => mean_orbit_counts(g),
                Statistic::Spectral => spectral_histogram(g, cfg.spectral_bins)?,
                Statistic::Wavelet => wavelet_feature(g, &bank, cfg.wavelet_bins, cfg.wavelet_bound)?
                    .hist
                    .into_iter()
                    .collect(),
            })
        })
        .collect()
}

pub fn statistic_mmd(a: &[Graph], b: &[Graph], stat: Statistic, cfg: &MmdConfig) -> Result<f64> {
    mmd(
        &statistic_features(a, stat, cfg)?,
        &statistic_features(b, stat, cfg)?,
        cfg.kernel(stat),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Direct triple double-sum oracle with an explicit TV distance.
    fn oracle(a: &[Vec<f64>], b: &[Vec<f64>], sigma: f64) -> f64 {
        let k = |x: &Vec<f64>, y: &Vec<f64>| {
            let sx: f64 = x.iter().sum();
            let sy: f64 = y.iter().sum();
            let mut tv = 0.0;
            for i in 0..x.len() {
                tv += (x[i] / sx - y[i] / sy).abs();
            }
            tv *= 0.5;
            (-(tv * tv) / (2.0 * sigma * sigma)).exp()
        };
        let mut xx = 0.0;
        for x in a {
            for y in a {
                xx += k(x, y);
            }
        }
        let mut yy = 0.0;
        for x in b {
            for y in b {
                yy += k(x, y);
            }
        }
        let mut xy = 0.0;
        for x in a {
            for y in b {
                xy += k(x, y);
            }
        }
        xx / (a.len() * a.len()) as f64 + yy / (b.len() * b.len()) as f64 - 2.0 * xy / (a.len() * b.len()) as f64
    }

    #[test]
    fn toy_histograms_match_double_sum() {
        let a = vec![vec![1.0, 2.0, 0.0], vec![0.0, 1.0, 3.0]];
        let b = vec![vec![2.0, 2.0, 2.0], vec![5.0, 0.0, 1.0], vec![0.0, 0.0, 4.0]];
        let got = mmd(&a, &b, Kernel::GaussianTv { sigma: 0.5 }).unwrap();
        let want = oracle(&a, &b, 0.5);
        assert!(want > 0.0);
        assert!((got - want).abs() < 1e-14, "{got} vs {want}");
    }

    #[test]
    fn emd_of_shifted_point_masses() {
        let k = Kernel::GaussianEmd { sigma: 1.0, bin_width: 0.5 };
        // Mass moved three bins: emd = 1.5.
        let v = k.eval(&[1.0, 0.0, 0.0, 0.0], &[0.0, 0.0, 0.0, 1.0]);
        assert!((v - (-1.5f64 * 1.5 / 2.0).exp()).abs() < 1e-15);
    }

    #[test]
    fn empty_sets_rejected() {
        assert!(mmd(&[], &[vec![1.0]], Kernel::GaussianTv { sigma: 1.0 }).is_err());
    }

    #[test]
    fn simple_features() {
        let k3 = Graph::complete(3);
        let f = statistic_features(&[k3], Statistic::Degree, &MmdConfig::default()).unwrap();
        assert_eq!(f[0], vec![0.0, 0.0, 3.0]);
        let k2 = Graph::complete(2);
        let s = spectral_histogram(&k2, 200).unwrap();
        assert_eq!(s[0], 1.0);
        assert_eq!(s[199], 1.0);
        assert_eq!(s.iter().sum::<f64>(), 2.0);
    }

    fn hist_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(0.0f64..5.0, 4), 1..5)
            .prop_map(|mut s| {
                for v in &mut s {
                    v[0] += 0.1;
                }
                s
            })
    }

    proptest! {
        #[test]
        fn mmd_nonnegative_symmetric_and_zero_on_self(a in hist_set(), b in hist_set()) {
            for kernel in [
                Kernel::GaussianTv { sigma: 1.0 },
                Kernel::GaussianEmd { sigma: 1.0, bin_width: 1.0 },
                Kernel::Gaussian { sigma: 2.0 },
            ] {
                let ab = mmd(&a, &b, kernel).unwrap();
                let ba = mmd(&b, &a, kernel).unwrap();
                prop_assert!(ab >= 0.0);
                prop_assert!((ab - ba).abs() < 1e-12);
                prop_assert!(mmd(&a, &a, kernel).unwrap() < 1e-12);
            }
        }
    }
}
