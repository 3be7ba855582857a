//! The three conditional generators (eigenvalues → eigenvectors → graph) and
//! their discriminators.
//!
//! Every network works on padded batches described by a [`NodeMask`]; the
//! padded rows and pairs never influence real ones. Each network owns one
//! [`ParamStore`] so it can be optimized, averaged and checkpointed on its
//! own.

use ndarray::{s, Array2, Array3, IxDyn};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tape, Var};
use crate::graphs::{Graph, Spectrum};
use crate::manifold::{self, proj_to_rotation_var};
use crate::nn::{
    gram_schmidt, gumbel_softmax, masked_node_mean, upsample1d, Conv1d, Ctx, GatedConv1d, Init, Linear, Mlp, NodeMask,
    PairReadout, ParamId, ParamStore, PointNetSt, PpgnStack,
};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    /// Largest node count the eigenvector bank and query support.
    pub n_max: usize,
    /// Number of non-trivial spectral components.
    pub k: usize,
    /// Width of raw noise rows and of the noise MLPs.
    pub noise_dim: usize,
    /// Linear layers in each noise MLP.
    pub noise_layers: usize,
    /// Hidden width of the query MLP.
    pub mlp_width: usize,
    pub bank_size: usize,
    pub rotation_layers: usize,
    /// Base width `h` of PointNetST layers.
    pub pointnet_width: usize,
    pub gen_ppgn_width: usize,
    pub gen_ppgn_layers: usize,
    pub disc_ppgn_width: usize,
    pub disc_ppgn_layers: usize,
    /// `(kernel, channels)` of the eigenvalue generator's four conv layers.
    pub cnn_layers: Vec<(usize, usize)>,
    pub dropout: f64,
    pub gumbel_tau: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_max: 20,
            k: 2,
            noise_dim: 100,
            noise_layers: 4,
            mlp_width: 100,
            bank_size: 16,
            rotation_layers: 3,
            pointnet_width: 32,
            gen_ppgn_width: 64,
            gen_ppgn_layers: 8,
            disc_ppgn_width: 64,
            disc_ppgn_layers: 8,
            cnn_layers: vec![(5, 32), (9, 16), (17, 8), (25, 1)],
            dropout: 0.1,
            gumbel_tau: 1.0,
        }
    }
}

impl ModelConfig {
    /// Narrow configuration used by gradient checks and fast tests.
    pub fn toy(n_max: usize, k: usize) -> Self {
        ModelConfig {
            n_max,
            k,
            noise_dim: 8,
            noise_layers: 2,
            mlp_width: 8,
            bank_size: 3,
            rotation_layers: 2,
            pointnet_width: 4,
            gen_ppgn_width: 8,
            gen_ppgn_layers: 2,
            disc_ppgn_width: 8,
            disc_ppgn_layers: 2,
            cnn_layers: vec![(3, 4), (5, 4), (5, 2), (7, 1)],
            dropout: 0.1,
            gumbel_tau: 1.0,
        }
    }

    /// Reduced widths that train at a few seconds per step on one core.
    pub fn desk(n_max: usize, k: usize) -> Self {
        ModelConfig {
            n_max,
            k,
            noise_dim: 16,
            noise_layers: 2,
            mlp_width: 16,
            bank_size: 16,
            rotation_layers: 3,
            pointnet_width: 8,
            gen_ppgn_width: 16,
            gen_ppgn_layers: 3,
            disc_ppgn_width: 16,
            disc_ppgn_layers: 3,
            cnn_layers: vec![(5, 8), (9, 8), (17, 4), (25, 1)],
            dropout: 0.1,
            gumbel_tau: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k >= self.n_max {
            return Err(Error::invalid(format!("need 0 < k < n_max, got k = {}, n_max = {}", self.k, self.n_max)));
        }
        if self.cnn_layers.len() != 4 || self.cnn_layers.last().map(|l| l.1) != Some(1) {
            return Err(Error::invalid("eigenvalue CNN needs four layers ending in one channel"));
        }
        let widths = [
            self.noise_dim,
            self.noise_layers,
            self.mlp_width,
            self.bank_size,
            self.pointnet_width,
            self.gen_ppgn_width,
            self.disc_ppgn_width,
        ];
        if widths.contains(&0) {
            return Err(Error::invalid("model widths must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.gumbel_tau <= 0.0 {
            return Err(Error::invalid("dropout must lie in [0, 1) and the Gumbel temperature be positive"));
        }
        Ok(())
    }
}

/// The six networks, in the order used by [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Net {
    EigvalGen,
    EigvecGen,
    GraphGen,
    EigvalDisc,
    EigvecDisc,
    GraphDisc,
}

impl Net {
    pub const ALL: [Net; 6] = [
        Net::EigvalGen,
        Net::EigvecGen,
        Net::GraphGen,
        Net::EigvalDisc,
        Net::EigvecDisc,
        Net::GraphDisc,
    ];
    pub const GENERATORS: [Net; 3] = [Net::EigvalGen, Net::EigvecGen, Net::GraphGen];
    pub const DISCRIMINATORS: [Net; 3] = [Net::EigvalDisc, Net::EigvecDisc, Net::GraphDisc];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Net::EigvalGen => "eigval_gen",
            Net::EigvecGen => "eigvec_gen",
            Net::GraphGen => "graph_gen",
            Net::EigvalDisc => "eigval_disc",
            Net::EigvecDisc => "eigvec_disc",
            Net::GraphDisc => "graph_disc",
        }
    }
}

/// Parameter values of all six networks.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    pub stores: Vec<ParamStore>,
}

impl ParamSet {
    pub fn get(&self, net: Net) -> &ParamStore {
        &self.stores[net.index()]
    }

    pub fn get_mut(&mut self, net: Net) -> &mut ParamStore {
        &mut self.stores[net.index()]
    }
}

fn noise_mlp(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Mlp {
    let dims = vec![cfg.noise_dim; cfg.noise_layers + 1];
    Mlp::new(store, "noise", &dims, Init::FanIn, rng)
}

/// Sort each row ascending; the permutation is treated as constant.
fn sort_rows<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let v = x.value();
    let k = *v.shape().last().unwrap();
    let rows = v.len() / k;
    let flat = v.as_standard_layout().into_owned().into_shape_with_order((rows, k)).unwrap();
    let perms: Vec<Vec<usize>> = (0..rows)
        .map(|r| {
            let mut idx: Vec<usize> = (0..k).collect();
            idx.sort_by(|&a, &b| flat[[r, a]].total_cmp(&flat[[r, b]]).then(a.cmp(&b)));
            idx
        })
        .collect();
    x.gather_last(&perms)
}

/// Eigenvalue generator: noise MLP, linear seed, then a four-layer 1D CNN
/// with ×2 nearest upsampling before layers 2–4. The last layer is a plain
/// convolution whose output is mapped to (0, 2) by `2·σ`, truncated to `k`
/// and sorted.
#[derive(Clone, Debug)]
pub struct EigvalGen {
    pub noise: Mlp,
    pub seed: Linear,
    pub gated: Vec<GatedConv1d>,
    pub last: Conv1d,
    pub seed_len: usize,
    pub k: usize,
    pub n_max: usize,
}

impl EigvalGen {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let noise = noise_mlp(store, cfg, rng);
        let seed_len = cfg.k.div_ceil(8).max(1);
        let c0 = cfg.cnn_layers[0].1;
        let seed = Linear::new(store, "seed", cfg.noise_dim + 1, c0 * seed_len, Init::FanIn, rng);
        let mut gated = Vec::new();
        let mut ch = c0;
        for (i, &(kernel, out)) in cfg.cnn_layers[..3].iter().enumerate() {
            gated.push(GatedConv1d::new(store, &format!("conv{i}"), ch, out, kernel, 1, rng));
            ch = out;
        }
        let (kernel, out) = cfg.cnn_layers[3];
        let last = Conv1d::new(store, "conv3", ch, out, kernel, 1, rng);
        EigvalGen { noise, seed, gated, last, seed_len, k: cfg.k, n_max: cfg.n_max }
    }

    /// `z [B, d]` raw noise → `λ [B, k]`, ascending in (0, 2).
    pub fn forward<'t>(&self, cx: &Ctx<'t>, z: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let b = mask.batch();
        let w = self.noise.forward(cx, z)?;
        let x = Var::concat(&[w, mask.size_feature(cx.tape, self.n_max)], -1)?;
        let c0 = self.gated[0].filter.in_ch;
        let mut h = self.seed.forward(cx, x)?.reshape(&[b, c0, self.seed_len])?;
        for (i, conv) in self.gated.iter().enumerate() {
            if i > 0 {
                h = upsample1d(h, 2)?;
            }
            h = conv.forward(cx, h)?;
        }
        h = self.last.forward(cx, upsample1d(h, 2)?)?;
        let len = h.shape()[2];
        let raw = h.reshape(&[b, len])?.slice(-1, 0, self.k)?;
        sort_rows(raw.sigmoid().scale(2.0))
    }
}

/// Eigenvalue discriminator: strided gated 1D CNN (the generator's layers
/// in reverse) and a linear readout that also sees `n / n_max`.
#[derive(Clone, Debug)]
pub struct EigvalDisc {
    pub convs: Vec<GatedConv1d>,
    pub readout: Linear,
    pub n_max: usize,
}

impl EigvalDisc {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let mut convs = Vec::new();
        let mut ch = 1;
        let rev: Vec<(usize, usize)> = cfg.cnn_layers.iter().rev().copied().collect();
        // Kernels in reverse order; channels grow towards the widest generator layer.
        let chans: Vec<usize> = cfg.cnn_layers[..3].iter().rev().map(|l| l.1).chain([cfg.cnn_layers[0].1]).collect();
        for (i, (&(kernel, _), &out)) in rev.iter().zip(&chans).enumerate() {
            let stride = if i < 3 { 2 } else { 1 };
            convs.push(GatedConv1d::new(store, &format!("conv{i}"), ch, out, kernel, stride, rng));
            ch = out;
        }
        let readout = Linear::new(store, "readout", ch + 1, 1, Init::FanIn, rng);
        EigvalDisc { convs, readout, n_max: cfg.n_max }
    }

    /// `λ [B, k]` → score `[B]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, lambda: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let b = mask.batch();
        let k = lambda.shape()[1];
        let mut h = lambda.reshape(&[b, 1, k])?;
        for conv in &self.convs {
            h = conv.forward(cx, h)?;
        }
        let pooled = h.mean_axis(-1)?;
        let ch = pooled.shape()[1];
        let pooled = pooled.reshape(&[b, ch])?;
        let x = Var::concat(&[pooled, mask.size_feature(cx.tape, self.n_max)], -1)?;
        self.readout.forward(cx, x)?.reshape(&[b])
    }
}

/// Right rotation `proj(MLP(mean PointNetST(x)))` in SO(k); the MLP's last
/// layer starts at zero, so the rotation starts as the identity.
#[derive(Clone, Debug)]
pub struct RightRotation {
    pub set: PointNetSt,
    pub head: Mlp,
    pub k: usize,
    pub dropout: f64,
}

impl RightRotation {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, h: usize, k: usize, dropout: f64, rng: &mut Rng) -> Self {
        RightRotation {
            set: PointNetSt::new(store, &format!("{name}.set"), input, h, 4 * h, Init::FanIn, rng),
            head: Mlp::new(store, &format!("{name}.head"), &[4 * h, 2 * h, h, k * k], Init::Zero, rng),
            k,
            dropout,
        }
    }

    /// `x [B, n, in]` → `[B, k, k]` rotation.
    pub fn forward<'t>(&self, cx: &mut Ctx<'t>, x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let pooled = masked_node_mean(self.set.forward(cx, x, mask)?, mask)?;
        let pooled = cx.dropout(pooled, self.dropout)?;
        let gen = self.head.forward(cx, pooled)?.reshape(&[mask.batch(), self.k, self.k])?;
        proj_to_rotation_var(gen)
    }
}

/// Left rotation `proj(α · outer(PointNetST(x)))` in SO(n). The gain `α`
/// starts at zero so the rotation starts as the identity while the set
/// layer still receives gradients once `α` moves.
#[derive(Clone, Debug)]
pub struct LeftRotation {
    pub set: PointNetSt,
    pub gain: ParamId,
}

impl LeftRotation {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, h: usize, rng: &mut Rng) -> Self {
        LeftRotation {
            set: PointNetSt::new(store, &format!("{name}.set"), input, h, h, Init::FanIn, rng),
            gain: store.add(format!("{name}.gain"), Array::zeros(IxDyn(&[]))),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let f = self.set.forward(cx, x, mask)?;
        proj_to_rotation_var(f.outer()?.mul(cx.p(self.gain))?)
    }
}

#[derive(Clone, Debug)]
pub struct RotationLayer {
    pub left: LeftRotation,
    pub right: RightRotation,
}

/// Eigenvector generator: a query built from `λ` picks an entry of a
/// learned Stiefel bank through straight-through Gumbel-softmax over
/// normalized canonical-metric scores; rotation layers then refine it as
/// `U ← R_L U R_R`.
#[derive(Clone, Debug)]
pub struct EigvecGen {
    pub noise: Mlp,
    pub query: Mlp,
    pub bank: ParamId,
    pub layers: Vec<RotationLayer>,
    pub k: usize,
    pub n_max: usize,
    pub tau: f64,
}

impl EigvecGen {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        let noise = noise_mlp(store, cfg, rng);
        let (k, n_max) = (cfg.k, cfg.n_max);
        let w = cfg.mlp_width;
        let query = Mlp::new(store, "query", &[k + 1, w, w, n_max * k], Init::FanIn, rng);
        let mut bank = Array::zeros(IxDyn(&[cfg.bank_size, n_max, k]));
        for i in 0..cfg.bank_size {
            let b = manifold::random_stiefel(n_max, k, rng)?;
            bank.slice_mut(s![i, .., ..]).assign(&b);
        }
        let bank = store.add("bank", bank);
        let input = k + cfg.noise_dim + k + 1;
        let h = cfg.pointnet_width;
        let layers = (0..cfg.rotation_layers)
            .map(|i| RotationLayer {
                left: LeftRotation::new(store, &format!("rot{i}.left"), input, h, rng),
                right: RightRotation::new(store, &format!("rot{i}.right"), input, h, k, cfg.dropout, rng),
            })
            .collect();
        Ok(EigvecGen { noise, query, bank, layers, k, n_max, tau: cfg.gumbel_tau })
    }

    /// Bank entries restricted to each sample's real rows and
    /// re-orthonormalized: `[B, m, n, k]`.
    pub fn bank_for<'t>(&self, cx: &Ctx<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let bank = cx.p(self.bank);
        let m = bank.shape()[0];
        let n = mask.n;
        let rows = bank.slice(1, 0, n)?.reshape(&[1, m, n, self.k])?;
        let node = mask.nodes(cx.tape).reshape(&[mask.batch(), 1, n, 1])?;
        gram_schmidt(rows.mul(node)?)
    }

    /// Normalized canonical-metric score of `q [B, n, k]` against every
    /// bank entry `[B, m, n, k]` → `[B, m]`.
    pub fn scores<'t>(q: Var<'t>, bank: Var<'t>) -> Result<Var<'t>> {
        let shape = bank.shape();
        let (b, m, n, k) = (shape[0], shape[1], shape[2], shape[3]);
        // (I − ½BBᵀ)B = B − ½B(BᵀB)
        let btb = bank.t()?.matmul(bank)?;
        let mb = bank.sub(bank.matmul(btb)?.scale(0.5))?;
        let q = q.reshape(&[b, 1, n, k])?;
        let raw = q.mul(mb)?.sum_axis(-1)?.sum_axis(-2)?;
        let norm = bank.mul(mb)?.sum_axis(-1)?.sum_axis(-2)?;
        raw.div(norm)?.reshape(&[b, m])
    }

    /// `λ [B, k]`, raw noise `z [B, n, d]` → `U [B, n, k]`.
    pub fn forward<'t>(&self, cx: &mut Ctx<'t>, lambda: Var<'t>, z: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let (b, n, k) = (mask.batch(), mask.n, self.k);
        let t = cx.tape;
        let node = mask.nodes(t);
        let size = mask.size_feature(t, self.n_max);
        let w = self.noise.forward(cx, z)?;
        let q = self
            .query
            .forward(cx, Var::concat(&[lambda, size], -1)?)?
            .reshape(&[b, self.n_max, k])?
            .slice(1, 0, n)?
            .mul(node)?;
        let bank = self.bank_for(cx, mask)?;
        let scores = Self::scores(q, bank)?;
        let pick = gumbel_softmax(scores, self.tau, &mut cx.rng, true)?;
        let m = pick.shape()[1];
        let mut u = pick.reshape(&[b, m, 1, 1])?.mul(bank)?.sum_axis(1)?.reshape(&[b, n, k])?;
        let lam_rows = lambda.reshape(&[b, 1, k])?.broadcast_to(&[b, n, k])?;
        let size_rows = size.reshape(&[b, 1, 1])?.broadcast_to(&[b, n, 1])?;
        for layer in &self.layers {
            let x = Var::concat(&[u, w, lam_rows, size_rows], -1)?.mul(node)?;
            let rl = layer.left.forward(cx, x, mask)?;
            let rr = layer.right.forward(cx, x, mask)?;
            u = rl.matmul(u)?.matmul(rr)?;
        }
        u.mul(node)
    }
}

/// Per-channel outer products `x[b, i, c] · x[b, j, c]` → `[B, n, n, C]`.
fn channel_outer<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let shape = x.shape();
    let (b, n, c) = (shape[0], shape[1], shape[2]);
    x.reshape(&[b, n, 1, c])?.mul(x.reshape(&[b, 1, n, c])?)
}

/// `U diag(λ) Uᵀ` → `[B, n, n, 1]`.
fn rough_laplacian<'t>(lambda: Var<'t>, u: Var<'t>) -> Result<Var<'t>> {
    let shape = u.shape();
    let (b, n, k) = (shape[0], shape[1], shape[2]);
    u.mul(lambda.reshape(&[b, 1, k])?)?.matmul(u.t()?)?.reshape(&[b, n, n, 1])
}

fn masked_identity<'t>(mask: &NodeMask, tape: &'t Tape) -> Var<'t> {
    tape.constant(Array::from_shape_fn(IxDyn(&[mask.batch(), mask.n, mask.n, 1]), |ix| {
        (ix[1] == ix[2] && ix[1] < mask.counts[ix[0]]) as u8 as f64
    }))
}

/// Graph generator: PPGN refinement of the rough Laplacian, per-eigenvector
/// outer products and projected-noise outer products, read out as
/// symmetric edge probabilities with an empty diagonal.
#[derive(Clone, Debug)]
pub struct GraphGen {
    pub noise: Mlp,
    pub noise_proj: Linear,
    pub stack: PpgnStack,
    pub head: Mlp,
    pub k: usize,
}

impl GraphGen {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let noise = noise_mlp(store, cfg, rng);
        let noise_proj = Linear::new(store, "noise_proj", cfg.noise_dim, cfg.k, Init::FanIn, rng);
        let h = cfg.gen_ppgn_width;
        let stack = PpgnStack::new(store, "ppgn", 2 * cfg.k + 2, h, cfg.gen_ppgn_layers, h, cfg.dropout, rng);
        let head = Mlp::new(store, "head", &[h, h, 1], Init::FanIn, rng);
        GraphGen { noise, noise_proj, stack, head, k: cfg.k }
    }

    /// `λ [B, k]`, `U [B, n, k]`, raw noise `z [B, n, d]` → soft adjacency `[B, n, n]`.
    pub fn forward<'t>(&self, cx: &mut Ctx<'t>, lambda: Var<'t>, u: Var<'t>, z: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let (b, n) = (mask.batch(), mask.n);
        let t = cx.tape;
        let node = mask.nodes(t);
        let w = self.noise.forward(cx, z)?;
        let p = self.noise_proj.forward(cx, w)?.mul(node)?;
        let x = Var::concat(
            &[
                rough_laplacian(lambda, u)?,
                channel_outer(u)?,
                channel_outer(p)?,
                masked_identity(mask, t),
            ],
            -1,
        )?;
        let h = self.stack.forward(cx, x, mask)?;
        let logits = self.head.forward(cx, h)?.reshape(&[b, n, n])?;
        let sym = logits.add(logits.t()?)?.scale(0.5);
        sym.sigmoid().mul(mask.off_diagonal(t))
    }
}

/// Graph discriminator: PPGN over `[A, U diag(λ) Uᵀ, u_c u_cᵀ.., I]` and an
/// invariant diagonal/off-diagonal readout.
#[derive(Clone, Debug)]
pub struct GraphDisc {
    pub stack: PpgnStack,
    pub readout: PairReadout,
}

impl GraphDisc {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let h = cfg.disc_ppgn_width;
        GraphDisc {
            stack: PpgnStack::new(store, "ppgn", cfg.k + 3, h, cfg.disc_ppgn_layers, h, cfg.dropout, rng),
            readout: PairReadout::new(store, "readout", h, h, cfg.n_max, rng),
        }
    }

    /// `A [B, n, n]`, `λ [B, k]`, `U [B, n, k]` → `[B]`.
    pub fn forward<'t>(&self, cx: &mut Ctx<'t>, a: Var<'t>, lambda: Var<'t>, u: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let (b, n) = (mask.batch(), mask.n);
        let t = cx.tape;
        let x = Var::concat(
            &[
                a.reshape(&[b, n, n, 1])?,
                rough_laplacian(lambda, u)?,
                channel_outer(u)?,
                masked_identity(mask, t),
            ],
            -1,
        )?
        .mul(mask.pairs(t))?;
        let h = self.stack.forward(cx, x, mask)?;
        self.readout.forward(cx, h, mask)
    }
}

/// Eigenvector discriminator: right rotation, point-wise MLP, second right
/// rotation, then a PointNetST with mean pooling and an MLP readout.
#[derive(Clone, Debug)]
pub struct EigvecDisc {
    pub rot1: RightRotation,
    pub pointwise: Mlp,
    pub rot2: RightRotation,
    pub set: PointNetSt,
    pub head: Mlp,
    pub k: usize,
    pub n_max: usize,
    pub dropout: f64,
}

impl EigvecDisc {
    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut Rng) -> Self {
        let (k, h) = (cfg.k, cfg.pointnet_width);
        let input = 2 * k + 1;
        EigvecDisc {
            rot1: RightRotation::new(store, "rot1", input, h, k, cfg.dropout, rng),
            pointwise: Mlp::new(store, "pointwise", &[input, h, h, k], Init::FanIn, rng),
            rot2: RightRotation::new(store, "rot2", input, h, k, cfg.dropout, rng),
            set: PointNetSt::new(store, "set", input, h, 4 * h, Init::FanIn, rng),
            head: Mlp::new(store, "head", &[4 * h, 2 * h, h, 1], Init::FanIn, rng),
            k,
            n_max: cfg.n_max,
            dropout: cfg.dropout,
        }
    }

    /// `U [B, n, k]`, `λ [B, k]` → `[B]`.
    pub fn forward<'t>(&self, cx: &mut Ctx<'t>, u: Var<'t>, lambda: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let (b, n, k) = (mask.batch(), mask.n, self.k);
        let t = cx.tape;
        let node = mask.nodes(t);
        let cond = Var::concat(
            &[
                lambda.reshape(&[b, 1, k])?.broadcast_to(&[b, n, k])?,
                mask.size_feature(t, self.n_max).reshape(&[b, 1, 1])?.broadcast_to(&[b, n, 1])?,
            ],
            -1,
        )?;
        let with = |x: Var<'t>| -> Result<Var<'t>> { Var::concat(&[x, cond], -1)?.mul(node) };
        let u = u.mul(node)?;
        let x = u.matmul(self.rot1.forward(cx, with(u)?, mask)?)?;
        let x = self.pointwise.forward(cx, with(x)?)?.mul(node)?;
        let x = x.matmul(self.rot2.forward(cx, with(x)?, mask)?)?;
        let pooled = masked_node_mean(self.set.forward(cx, with(x)?, mask)?, mask)?;
        let pooled = cx.dropout(pooled, self.dropout)?;
        self.head.forward(cx, pooled)?.reshape(&[b])
    }
}

/// Architecture of all six networks.
#[derive(Clone, Debug)]
pub struct Networks {
    pub cfg: ModelConfig,
    pub eigval_gen: EigvalGen,
    pub eigvec_gen: EigvecGen,
    pub graph_gen: GraphGen,
    pub eigval_disc: EigvalDisc,
    pub eigvec_disc: EigvecDisc,
    pub graph_disc: GraphDisc,
}

impl Networks {
    /// Builds the architecture and freshly initialized parameters.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<(Networks, ParamSet)> {
        cfg.validate()?;
        let mut stores: Vec<ParamStore> = (0..6).map(|_| ParamStore::new()).collect();
        let r = |net: Net| crate::rng::stream(seed, &[0x1417, net.index() as u64]);
        let eigval_gen = EigvalGen::new(&mut stores[0], cfg, &mut r(Net::EigvalGen));
        let eigvec_gen = EigvecGen::new(&mut stores[1], cfg, &mut r(Net::EigvecGen))?;
        let graph_gen = GraphGen::new(&mut stores[2], cfg, &mut r(Net::GraphGen));
        let eigval_disc = EigvalDisc::new(&mut stores[3], cfg, &mut r(Net::EigvalDisc));
        let eigvec_disc = EigvecDisc::new(&mut stores[4], cfg, &mut r(Net::EigvecDisc));
        let graph_disc = GraphDisc::new(&mut stores[5], cfg, &mut r(Net::GraphDisc));
        Ok((
            Networks {
                cfg: cfg.clone(),
                eigval_gen,
                eigvec_gen,
                graph_gen,
                eigval_disc,
                eigvec_disc,
                graph_disc,
            },
            ParamSet { stores },
        ))
    }
}

/// Raw latent noise for one padded batch; every row has unit length.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseBundle {
    /// `[B, d]`
    pub z_lambda: Array,
    /// `[B, n, d]`
    pub z_u: Array,
    /// `[B, n, d]`
    pub z_a: Array,
}

fn unit_rows(shape: &[usize], rng: &mut Rng) -> Array {
    let mut a = Array::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal));
    let d = *shape.last().unwrap();
    for mut row in a.as_slice_mut().unwrap().chunks_mut(d).map(|c| ndarray::ArrayViewMut1::from(c)) {
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    a
}

/// Gaussian draws normalized to unit rows. Each sample's rows come from its
/// own stream, so a sample's noise does not depend on the batch it is in.
pub fn sample_noise(cfg: &ModelConfig, mask: &NodeMask, seed: u64, sample_ids: &[u64]) -> NoiseBundle {
    let (b, n, d) = (mask.batch(), mask.n, cfg.noise_dim);
    let mut z_lambda = Array::zeros(IxDyn(&[b, d]));
    let mut z_u = Array::zeros(IxDyn(&[b, n, d]));
    let mut z_a = Array::zeros(IxDyn(&[b, n, d]));
    for (i, &id) in sample_ids.iter().enumerate().take(b) {
        let r = |part: u64| crate::rng::stream(seed, &[0x2011, id, part]);
        z_lambda.slice_mut(s![i, ..]).assign(&unit_rows(&[d], &mut r(0)).into_dimensionality::<ndarray::Ix1>().unwrap());
        let zu: Array2<f64> = unit_rows(&[n, d], &mut r(1)).into_dimensionality().unwrap();
        let za: Array2<f64> = unit_rows(&[n, d], &mut r(2)).into_dimensionality().unwrap();
        z_u.slice_mut(s![i, .., ..]).assign(&zu);
        z_a.slice_mut(s![i, .., ..]).assign(&za);
    }
    NoiseBundle { z_lambda, z_u, z_a }
}

/// One generated graph before binarization.
#[derive(Clone, Debug)]
pub struct GeneratedSample {
    pub eigenvalues: Vec<f64>,
    /// `n × k`
    pub eigenvectors: Array2<f64>,
    /// `n × n`, symmetric, zero diagonal, entries in [0, 1].
    pub adjacency: Array2<f64>,
    pub n: usize,
}

impl GeneratedSample {
    pub fn to_graph(&self, threshold: f64) -> Graph {
        Graph::from_dense(self.adjacency.view(), threshold).expect("square adjacency")
    }
}

/// Spectra padded into batch tensors: `λ [B, k]`, `U [B, n, k]`.
pub fn spectra_tensors(spectra: &[Spectrum], n: usize) -> Result<(Array, Array)> {
    let b = spectra.len();
    let k = spectra.first().map(|s| s.k()).ok_or_else(|| Error::invalid("empty spectra batch"))?;
    let mut lam = Array::zeros(IxDyn(&[b, k]));
    let mut u = Array::zeros(IxDyn(&[b, n, k]));
    for (i, sp) in spectra.iter().enumerate() {
        if sp.k() != k || sp.n() > n {
            return Err(Error::invalid("inconsistent spectra in batch"));
        }
        lam.slice_mut(s![i, ..]).assign(&sp.eigenvalues);
        u.slice_mut(s![i, ..sp.n(), ..]).assign(&sp.eigenvectors);
    }
    Ok((lam, u))
}

/// Adjacency matrices padded into `[B, n, n]`.
pub fn adjacency_tensor(graphs: &[&Graph], n: usize) -> Array {
    let mut a = Array::zeros(IxDyn(&[graphs.len(), n, n]));
    for (i, g) in graphs.iter().enumerate() {
        for (u, v) in g.edges() {
            a[[i, u, v]] = 1.0;
            a[[i, v, u]] = 1.0;
        }
    }
    a
}

/// Runs the three generators in evaluation mode. With `real` spectra the
/// eigenvalue and eigenvector stages are replaced by the given ones.
pub fn generate(
    nets: &Networks,
    params: &ParamSet,
    counts: &[usize],
    seed: u64,
    first_id: u64,
    real: Option<&[Spectrum]>,
) -> Result<Vec<GeneratedSample>> {
    let mask = NodeMask::tight(counts.to_vec())?;
    if let Some(r) = real {
        if r.len() != counts.len() || r.iter().zip(counts).any(|(s, &c)| s.n() != c) {
            return Err(Error::invalid("real spectra do not match the requested node counts"));
        }
        if r.iter().any(|s| s.k() != nets.cfg.k) {
            return Err(Error::invalid(format!("spectra have k different from the model's k = {}", nets.cfg.k)));
        }
    }
    if counts.iter().any(|&c| c > nets.cfg.n_max || c <= nets.cfg.k) {
        return Err(Error::invalid(format!(
            "node counts must lie in {}..={}",
            nets.cfg.k + 1,
            nets.cfg.n_max
        )));
    }
    let ids: Vec<u64> = (0..counts.len() as u64).map(|i| first_id + i).collect();
    let noise = sample_noise(&nets.cfg, &mask, seed, &ids);
    let tape = Tape::new();
    let crng = |net: Net| crate::rng::stream(seed, &[0x3019, first_id, net.index() as u64]);
    let (lam, u) = match real {
        Some(r) => {
            let (l, u) = spectra_tensors(r, mask.n)?;
            (tape.constant(l), tape.constant(u))
        }
        None => {
            let cx = Ctx::new(&tape, params.get(Net::EigvalGen), false, false, crng(Net::EigvalGen));
            let lam = nets.eigval_gen.forward(&cx, tape.constant(noise.z_lambda.clone()), &mask)?;
            let mut cx = Ctx::new(&tape, params.get(Net::EigvecGen), false, false, crng(Net::EigvecGen));
            let u = nets.eigvec_gen.forward(&mut cx, lam, tape.constant(noise.z_u.clone()), &mask)?;
            (lam, u)
        }
    };
    let mut cx = Ctx::new(&tape, params.get(Net::GraphGen), false, false, crng(Net::GraphGen));
    let a = nets.graph_gen.forward(&mut cx, lam, u, tape.constant(noise.z_a.clone()), &mask)?;
    let (lv, uv, av) = (lam.value(), u.value(), a.value());
    let a3: Array3<f64> = (*av).clone().into_dimensionality().unwrap();
    let u3: Array3<f64> = (*uv).clone().into_dimensionality().unwrap();
    let mut out = Vec::with_capacity(counts.len());
    for (i, &n) in counts.iter().enumerate() {
        let adjacency = a3.slice(s![i, ..n, ..n]).to_owned();
        if adjacency.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalFailure("generator produced non-finite adjacency".into()));
        }
        out.push(GeneratedSample {
            eigenvalues: lv.slice(s![i, ..]).to_vec(),
            eigenvectors: u3.slice(s![i, ..n, ..]).to_owned(),
            adjacency,
            n,
        });
    }
    Ok(out)
}

/// [`generate`] in chunks of `chunk` samples, binarized at `threshold`.
/// Sample ids run consecutively, so the graphs do not depend on `chunk`.
pub fn generate_graphs(
    nets: &Networks,
    params: &ParamSet,
    counts: &[usize],
    seed: u64,
    real: Option<&[Spectrum]>,
    threshold: f64,
    chunk: usize,
) -> Result<Vec<Graph>> {
    let chunk = chunk.max(1);
    let mut out = Vec::with_capacity(counts.len());
    for (i, c) in counts.chunks(chunk).enumerate() {
        let lo = i * chunk;
        let r = real.map(|r| &r[lo..lo + c.len()]);
        let samples = generate(nets, params, c, seed, lo as u64, r)?;
        out.extend(samples.iter().map(|s| s.to_graph(threshold)));
    }
    Ok(out)
}
