//! Stochastic block model validity: community recovery by spectral
//! clustering with likelihood refinement and BIC model selection, then a
//! Wald-type match test of the recovered edge probabilities.

use serde::{Deserialize, Serialize};

use crate::datasets::SbmParams;
use crate::graphs::{normalized_laplacian, Graph};
use crate::linalg;

/// Minimum per-parameter match probability for a valid graph.
pub const MATCH_THRESHOLD: f64 = 0.9;

/// Recovered block structure of one graph.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SbmFit {
    pub labels: Vec<usize>,
    pub sizes: Vec<usize>,
    pub p_within: f64,
    pub p_between: f64,
    /// Match probabilities of the within and between estimates.
    pub match_within: f64,
    pub match_between: f64,
}

/// Edge and pair counts between blocks.
struct Blocks {
    c: usize,
    sizes: Vec<usize>,
    /// Symmetric `c × c` edge counts (diagonal counts each edge once).
    edges: Vec<f64>,
}

impl Blocks {
    fn new(g: &Graph, labels: &[usize], c: usize) -> Self {
        let mut sizes = vec![0; c];
        for &l in labels {
            sizes[l] += 1;
        }
        let mut edges = vec![0.0; c * c];
        for (u, v) in g.edges() {
            let (a, b) = (labels[u], labels[v]);
            edges[a * c + b] += 1.0;
            if a != b {
                edges[b * c + a] += 1.0;
            }
        }
        Blocks { c, sizes, edges }
    }

    fn pairs(&self, a: usize, b: usize) -> f64 {
        let (na, nb) = (self.sizes[a] as f64, self.sizes[b] as f64);
        if a == b {
            na * (na - 1.0) / 2.0
        } else {
            na * nb
        }
    }

    /// Bernoulli log-likelihood at the maximum-likelihood block
    /// probabilities.
    fn log_likelihood(&self) -> f64 {
        let f = |e: f64, n: f64| {
            if n <= 0.0 || e <= 0.0 || e >= n {
                0.0
            } else {
                let p = e / n;
                e * p.ln() + (n - e) * (1.0 - p).ln()
            }
        };
        let mut ll = 0.0;
        for a in 0..self.c {
            for b in a..self.c {
                ll += f(self.edges[a * self.c + b], self.pairs(a, b));
            }
        }
        ll
    }

    /// Moves one node whose neighbours fall into blocks as `counts`.
    fn move_node(&mut self, counts: &[f64], from: usize, to: usize) {
        let c = self.c;
        for r in 0..c {
            let k = counts[r];
            if r == from {
                self.edges[from * c + from] -= k;
            } else {
                self.edges[from * c + r] -= k;
                self.edges[r * c + from] -= k;
            }
        }
        self.sizes[from] -= 1;
        for r in 0..c {
            let k = counts[r];
            if r == to {
                self.edges[to * c + to] += k;
            } else {
                self.edges[to * c + r] += k;
                self.edges[r * c + to] += k;
            }
        }
        self.sizes[to] += 1;
    }
}

/// Deterministic, order-independent k-means on the rows of `x`:
/// farthest-point seeding from the row farthest from the centroid, then
/// Lloyd iterations.
fn kmeans(x: &[Vec<f64>], c: usize) -> Vec<usize> {
    let dim = x[0].len();
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let mean: Vec<f64> = (0..dim).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / x.len() as f64).collect();
    let argmax = |score: &dyn Fn(&[f64]) -> f64| {
        (0..x.len()).max_by(|&i, &j| score(&x[i]).total_cmp(&score(&x[j]))).unwrap()
    };
    let mut centers = vec![x[argmax(&|r| d2(r, &mean))].clone()];
    while centers.len() < c {
        let next = argmax(&|r| centers.iter().map(|m| d2(r, m)).fold(f64::INFINITY, f64::min));
        centers.push(x[next].clone());
    }
    let mut labels = vec![0; x.len()];
    for _ in 0..100 {
        let new: Vec<usize> = x
            .iter()
            .map(|r| (0..c).min_by(|&a, &b| d2(r, &centers[a]).total_cmp(&d2(r, &centers[b]))).unwrap())
            .collect();
        let changed = new != labels;
        labels = new;
        for (k, center) in centers.iter_mut().enumerate() {
            let members: Vec<&Vec<f64>> = x.iter().zip(&labels).filter(|(_, &l)| l == k).map(|(r, _)| r).collect();
            if !members.is_empty() {
                *center = (0..dim).map(|j| members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64).collect();
            }
        }
        if !changed {
            break;
        }
    }
    labels
}

/// Greedy refinement: repeatedly applies the single-node move with the
/// largest likelihood gain (never emptying a block) until none improves.
fn refine(g: &Graph, labels: &mut [usize], c: usize) -> Blocks {
    let mut blocks = Blocks::new(g, labels, c);
    let counts_of = |labels: &[usize], v: usize| {
        let mut k = vec![0.0; c];
        for &u in g.neighbors(v) {
            k[labels[u]] += 1.0;
        }
        k
    };
    for _ in 0..4 * g.n() {
        let base = blocks.log_likelihood();
        let mut best: Option<(f64, usize, usize)> = None;
        for v in 0..g.n() {
            let from = labels[v];
            if blocks.sizes[from] <= 1 {
                continue;
            }
            let counts = counts_of(labels, v);
            for to in (0..c).filter(|&t| t != from) {
                blocks.move_node(&counts, from, to);
                let gain = blocks.log_likelihood() - base;
                blocks.move_node(&counts, to, from);
                if gain > 1e-9 && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, v, to));
                }
            }
        }
        let Some((_, v, to)) = best else { break };
        let counts = counts_of(labels, v);
        blocks.move_node(&counts, labels[v], to);
        labels[v] = to;
    }
    Blocks::new(g, labels, c)
}

/// Spectral embedding (leading `c` eigenvectors of the normalized
/// Laplacian, rows normalized), k-means, likelihood refinement.
fn partition(g: &Graph, vecs: &ndarray::Array2<f64>, c: usize) -> (Vec<usize>, Blocks) {
    let rows: Vec<Vec<f64>> = (0..g.n())
        .map(|i| {
            let r: Vec<f64> = (0..c).map(|j| vecs[[i, j]]).collect();
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                r.iter().map(|x| x / norm).collect()
            } else {
                r
            }
        })
        .collect();
    let mut labels = kmeans(&rows, c);
    // Drop empty clusters by relabelling.
    let mut used: Vec<usize> = labels.clone();
    used.sort_unstable();
    used.dedup();
    for l in labels.iter_mut() {
        *l = used.binary_search(l).unwrap();
    }
    let c = used.len();
    let blocks = refine(g, &mut labels, c);
    (labels, blocks)
}

/// Chooses the block count in `range` by an integrated-classification
/// criterion: BIC with one parameter per block pair plus the cost
/// `2 n ln c` of a uniform prior over the node labels.
pub fn recover_communities(g: &Graph, range: (usize, usize)) -> Vec<usize> {
    let n = g.n();
    if n < 2 {
        return vec![0; n];
    }
    let Ok((_, vecs)) = linalg::sym_eig(normalized_laplacian(g).view()) else {
        return vec![0; n];
    };
    let total_pairs = (n * (n - 1) / 2) as f64;
    let mut best: Option<(f64, Vec<usize>)> = None;
    for c in range.0.max(1)..=range.1.min(n) {
        let (labels, blocks) = partition(g, &vecs, c);
        let k = (blocks.c * (blocks.c + 1) / 2) as f64;
        let bic = -2.0 * blocks.log_likelihood() + k * total_pairs.ln() + 2.0 * n as f64 * (blocks.c as f64).ln();
        if best.as_ref().is_none_or(|b| bic < b.0) {
            best = Some((bic, labels));
        }
    }
    best.unwrap().1
}

/// Two-sided Wald match probability of estimate `p_hat` against `p0`, with
/// the single-draw Bernoulli variance `p̂(1 − p̂)`: `erfc(√(W/2))` for
/// `W = (p̂ − p0)² / (p̂(1 − p̂) + 1e-6)`.
pub fn wald_match(p_hat: f64, p0: f64) -> f64 {
    let w = (p_hat - p0).powi(2) / (p_hat * (1.0 - p_hat) + 1e-6);
    libm::erfc((w / 2.0).sqrt())
}

pub fn fit_sbm(g: &Graph, params: &SbmParams) -> SbmFit {
    let labels = recover_communities(g, params.blocks);
    let c = labels.iter().copied().max().map_or(0, |m| m + 1);
    let blocks = Blocks::new(g, &labels, c);
    let (mut ew, mut nw, mut eb, mut nb) = (0.0, 0.0, 0.0, 0.0);
    for a in 0..c {
        for b in a..c {
            let (e, n) = (blocks.edges[a * c + b], blocks.pairs(a, b));
            if a == b {
                ew += e;
                nw += n;
            } else {
                eb += e;
                nb += n;
            }
        }
    }
    let p_within = if nw > 0.0 { ew / nw } else { 0.0 };
    let p_between = if nb > 0.0 { eb / nb } else { 0.0 };
    SbmFit {
        match_within: wald_match(p_within, params.p_within),
        match_between: wald_match(p_between, params.p_between),
        labels,
        sizes: blocks.sizes,
        p_within,
        p_between,
    }
}

/// Valid iff the recovered block count and sizes are inside the generating
/// ranges and both probability estimates match with probability at least
/// [`MATCH_THRESHOLD`].
pub fn sbm_validity(g: &Graph, params: &SbmParams) -> bool {
    let fit = fit_sbm(g, params);
    let c = fit.sizes.len();
    (params.blocks.0..=params.blocks.1).contains(&c)
        && fit.sizes.iter().all(|s| (params.block_size.0..=params.block_size.1).contains(s))
        && fit.match_within.min(fit.match_between) >= MATCH_THRESHOLD
}
