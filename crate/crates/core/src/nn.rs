//! Neural building blocks on top of [`crate::autodiff`]: parameter storage,
//! MLPs, PointNetST set layers, PPGN layers, Gumbel-softmax, gated 1D
//! convolutions and node masks for variable-size batches.
//!
//! Layers are plain structs holding [`ParamId`]s. A forward pass binds a
//! [`ParamStore`] onto a tape through a [`Ctx`], which also carries the
//! train/eval flag and the RNG used for dropout and Gumbel noise.

use std::collections::HashMap;

use ndarray::IxDyn;
use rand::Rng as _;
use rand_distr::{Distribution, Uniform};

use crate::autodiff::{Array, Tape, Var};
use crate::rng::Rng;
use crate::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Array>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Array {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn assign(&mut self, other: &ParamStore) -> Result<()> {
        if self.names != other.names {
            return Err(Error::invalid("parameter sets differ"));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            if a.shape() != b.shape() {
                return Err(Error::invalid("parameter shapes differ"));
            }
            a.assign(b);
        }
        Ok(())
    }
}

/// Forward-pass context: parameters bound on a tape plus mode and RNG.
pub struct Ctx<'t> {
    pub tape: &'t Tape,
    vars: Vec<Var<'t>>,
    /// Training mode enables dropout.
    pub train: bool,
    pub rng: Rng,
}

impl<'t> Ctx<'t> {
    /// Binds every parameter of `store` as a leaf; `trainable` decides
    /// whether they receive gradients.
    pub fn new(tape: &'t Tape, store: &ParamStore, trainable: bool, train: bool, rng: Rng) -> Self {
        let vars = store
            .values()
            .iter()
            .map(|v| tape.leaf(v.clone(), trainable))
            .collect();
        Ctx { tape, vars, train, rng }
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }

    pub fn dropout(&mut self, x: Var<'t>, rate: f64) -> Result<Var<'t>> {
        if self.train {
            x.dropout(rate, &mut self.rng)
        } else {
            Ok(x)
        }
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Array {
    if bound == 0.0 {
        return Array::zeros(IxDyn(shape));
    }
    let d = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array::from_shape_simple_fn(IxDyn(shape), || d.sample(rng))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in ±1/√fan_in for weight and bias.
    FanIn,
    Zero,
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, init: Init, rng: &mut Rng) -> Self {
        let bound = match init {
            Init::FanIn => 1.0 / (fan_in as f64).sqrt(),
            Init::Zero => 0.0,
        };
        let w = store.add(format!("{name}.w"), uniform(&[fan_in, fan_out], bound, rng));
        let b = store.add(format!("{name}.b"), uniform(&[fan_out], bound, rng));
        Linear { w, b, fan_in, fan_out }
    }

    /// Applies to the last axis of `x`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let last = x.shape().last().copied().unwrap_or(0);
        if last != self.fan_in {
            return Err(Error::invalid(format!(
                "linear layer expects width {}, got {last}",
                self.fan_in
            )));
        }
        x.matmul(cx.p(self.w))?.add(cx.p(self.b))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Array::ones(IxDyn(&[width]))),
            beta: store.add(format!("{name}.beta"), Array::zeros(IxDyn(&[width]))),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(LAYER_NORM_EPS)?.mul(cx.p(self.gamma))?.add(cx.p(self.beta))
    }
}

/// `(linear → layer norm → GELU)*` followed by a final linear layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub norms: Vec<LayerNorm>,
}

impl Mlp {
    /// `dims = [in, hidden.., out]`; `last` chooses the final layer's init.
    pub fn new(store: &mut ParamStore, name: &str, dims: &[usize], last: Init, rng: &mut Rng) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let mut layers = Vec::new();
        let mut norms = Vec::new();
        for i in 0..dims.len() - 1 {
            let is_last = i == dims.len() - 2;
            let init = if is_last { last } else { Init::FanIn };
            layers.push(Linear::new(store, &format!("{name}.{i}"), dims[i], dims[i + 1], init, rng));
            if !is_last {
                norms.push(LayerNorm::new(store, &format!("{name}.{i}.ln"), dims[i + 1]));
            }
        }
        Mlp { layers, norms }
    }

    pub fn in_width(&self) -> usize {
        self.layers[0].fan_in
    }

    pub fn out_width(&self) -> usize {
        self.layers.last().unwrap().fan_out
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, mut x: Var<'t>) -> Result<Var<'t>> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(cx, x)?;
            if let Some(norm) = self.norms.get(i) {
                x = norm.forward(cx, x)?.gelu();
            }
        }
        Ok(x)
    }
}

/// Per-sample node counts of a padded batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NodeMask {
    pub counts: Vec<usize>,
    /// Padded node dimension.
    pub n: usize,
}

impl NodeMask {
    pub fn new(counts: Vec<usize>, n: usize) -> Result<Self> {
        if counts.is_empty() || counts.iter().any(|&c| c == 0 || c > n) {
            return Err(Error::invalid(format!("node counts {counts:?} invalid for padding {n}")));
        }
        Ok(NodeMask { counts, n })
    }

    /// Mask padded to the largest count.
    pub fn tight(counts: Vec<usize>) -> Result<Self> {
        let n = counts.iter().copied().max().unwrap_or(0);
        Self::new(counts, n)
    }

    pub fn batch(&self) -> usize {
        self.counts.len()
    }

    /// `[B, n, 1]` with ones on real nodes.
    pub fn nodes<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Array::from_shape_fn(IxDyn(&[self.batch(), self.n, 1]), |ix| {
            (ix[1] < self.counts[ix[0]]) as u8 as f64
        }))
    }

    /// `[B, n, n, 1]` with ones on pairs of real nodes.
    pub fn pairs<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Array::from_shape_fn(IxDyn(&[self.batch(), self.n, self.n, 1]), |ix| {
            let c = self.counts[ix[0]];
            (ix[1] < c && ix[2] < c) as u8 as f64
        }))
    }

    /// `[B, n, n]` with ones on pairs of distinct real nodes.
    pub fn off_diagonal<'t>(&self, tape: &'t Tape) -> Var<'t> {
        tape.constant(Array::from_shape_fn(IxDyn(&[self.batch(), self.n, self.n]), |ix| {
            let c = self.counts[ix[0]];
            (ix[1] < c && ix[2] < c && ix[1] != ix[2]) as u8 as f64
        }))
    }

    /// Node counts reshaped to `shape` (which must have `B` elements).
    pub fn count_tensor<'t>(&self, tape: &'t Tape, shape: &[usize], power: i32) -> Var<'t> {
        let v: Vec<f64> = self.counts.iter().map(|&c| (c as f64).powi(power)).collect();
        tape.constant(Array::from_shape_vec(IxDyn(shape), v).expect("B elements"))
    }

    /// `[B, 1]` with `n_i / n_max`.
    pub fn size_feature<'t>(&self, tape: &'t Tape, n_max: usize) -> Var<'t> {
        let v: Vec<f64> = self.counts.iter().map(|&c| c as f64 / n_max as f64).collect();
        tape.constant(Array::from_shape_vec(IxDyn(&[self.batch(), 1]), v).unwrap())
    }
}

/// Mean over real nodes: `x [B, n, h]` → `[B, h]`.
pub fn masked_node_mean<'t>(x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
    let t = x.tape();
    let b = mask.batch();
    let h = *x.shape().last().unwrap();
    let s = x.mul(mask.nodes(t))?.sum_axis(1)?;
    s.div(mask.count_tensor(t, &[b, 1, 1], 1))?.reshape(&[b, h])
}

/// Instance normalization of `x [B, n, n, h]` over the real node pairs of
/// each sample and channel; padded entries come out as zero.
pub fn masked_instance_norm<'t>(x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
    let t = x.tape();
    let pm = mask.pairs(t);
    let cnt = mask.count_tensor(t, &[mask.batch(), 1, 1, 1], 2);
    let mean = x.mul(pm)?.sum_axis(1)?.sum_axis(2)?.div(cnt)?;
    let xc = x.sub(mean)?.mul(pm)?;
    let var = xc.square().sum_axis(1)?.sum_axis(2)?.div(cnt)?;
    xc.div(var.add_scalar(INSTANCE_NORM_EPS).sqrt())
}

/// Permutation-equivariant set layer: per-element features, a pooled
/// global feature broadcast back to every element, and a joint MLP.
#[derive(Clone, Debug)]
pub struct PointNetSt {
    pub feat: Mlp,
    pub agg: Mlp,
    pub cat: Mlp,
}

impl PointNetSt {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, h: usize, out: usize, last: Init, rng: &mut Rng) -> Self {
        PointNetSt {
            feat: Mlp::new(store, &format!("{name}.feat"), &[input, h, h, h], Init::FanIn, rng),
            agg: Mlp::new(store, &format!("{name}.agg"), &[input, h, 2 * h, 4 * h], Init::FanIn, rng),
            cat: Mlp::new(store, &format!("{name}.cat"), &[5 * h, 4 * h, 2 * h, out], last, rng),
        }
    }

    /// `x [B, n, in]` → `[B, n, out]`, padded rows zeroed.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let t = cx.tape;
        let shape = x.shape();
        let (b, n) = (shape[0], shape[1]);
        let y = self.feat.forward(cx, x)?;
        let g = masked_node_mean(self.agg.forward(cx, x)?, mask)?;
        let gw = g.shape()[1];
        let g = g.reshape(&[b, 1, gw])?.broadcast_to(&[b, n, gw])?;
        let out = self.cat.forward(cx, Var::concat(&[y, g], -1)?)?;
        out.mul(mask.nodes(t))
    }
}

/// One PPGN block on channel-last pair tensors `[B, n, n, h]`.
#[derive(Clone, Debug)]
pub struct PpgnLayer {
    pub m1: Mlp,
    pub m2: Mlp,
    pub m3: Mlp,
}

impl PpgnLayer {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, h: usize, rng: &mut Rng) -> Self {
        PpgnLayer {
            m1: Mlp::new(store, &format!("{name}.m1"), &[input, h, h], Init::FanIn, rng),
            m2: Mlp::new(store, &format!("{name}.m2"), &[input, h, h], Init::FanIn, rng),
            m3: Mlp::new(store, &format!("{name}.m3"), &[input + h, h, h], Init::FanIn, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != shape[2] {
            return Err(Error::invalid(format!("PPGN layer needs [B, n, n, h], got {shape:?}")));
        }
        let t = cx.tape;
        let pm = mask.pairs(t);
        let a = self.m1.forward(cx, x)?.mul(pm)?.permute(&[0, 3, 1, 2])?;
        let b = self.m2.forward(cx, x)?.mul(pm)?.permute(&[0, 3, 1, 2])?;
        let inv_sqrt_n = mask.count_tensor(t, &[mask.batch(), 1, 1, 1], 1).sqrt();
        let prod = a.matmul(b)?.div(inv_sqrt_n)?.permute(&[0, 2, 3, 1])?;
        let out = self.m3.forward(cx, Var::concat(&[x, prod], -1)?)?;
        masked_instance_norm(out, mask)
    }
}

/// Embedding, a chain of PPGN layers, and a linear readout over the
/// concatenation of the embedded input and every layer output.
#[derive(Clone, Debug)]
pub struct PpgnStack {
    pub embed: Linear,
    pub layers: Vec<PpgnLayer>,
    pub readout: Linear,
    pub dropout: f64,
}

impl PpgnStack {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        h: usize,
        depth: usize,
        out: usize,
        dropout: f64,
        rng: &mut Rng,
    ) -> Self {
        let embed = Linear::new(store, &format!("{name}.embed"), input, h, Init::FanIn, rng);
        let layers = (0..depth)
            .map(|i| PpgnLayer::new(store, &format!("{name}.layer{i}"), h, h, rng))
            .collect();
        let readout = Linear::new(store, &format!("{name}.readout"), h * (depth + 1), out, Init::FanIn, rng);
        PpgnStack { embed, layers, readout, dropout }
    }

    /// `[B, n, n, in]` → `[B, n, n, out]` with padded pairs zeroed.
    pub fn forward<'t>(&self, cx: &mut Ctx<'t>, x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let pm = mask.pairs(cx.tape);
        let mut h = self.embed.forward(cx, x)?.mul(pm)?;
        let mut skips = vec![h];
        for layer in &self.layers {
            h = layer.forward(cx, h, mask)?;
            skips.push(h);
        }
        let cat = Var::concat(&skips, -1)?;
        let cat = cx.dropout(cat, self.dropout)?;
        self.readout.forward(cx, cat)?.mul(pm)
    }
}

/// Invariant readout of a pair tensor: one MLP on the mean diagonal
/// feature, one on the mean off-diagonal feature (both over real nodes and
/// both seeing `n / n_max`), summed to a score per sample.
#[derive(Clone, Debug)]
pub struct PairReadout {
    pub diag: Mlp,
    pub off: Mlp,
    pub n_max: usize,
}

impl PairReadout {
    pub fn new(store: &mut ParamStore, name: &str, h: usize, hidden: usize, n_max: usize, rng: &mut Rng) -> Self {
        PairReadout {
            diag: Mlp::new(store, &format!("{name}.diag"), &[h + 1, hidden, 1], Init::FanIn, rng),
            off: Mlp::new(store, &format!("{name}.off"), &[h + 1, hidden, 1], Init::FanIn, rng),
            n_max,
        }
    }

    /// `[B, n, n, h]` → `[B]`.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>, mask: &NodeMask) -> Result<Var<'t>> {
        let t = cx.tape;
        let shape = x.shape();
        let (b, n, h) = (shape[0], shape[1], shape[3]);
        let eye = t.constant(Array::from_shape_fn(IxDyn(&[1, n, n, 1]), |ix| (ix[1] == ix[2]) as u8 as f64));
        let xm = x.mul(mask.pairs(t))?;
        let total = xm.sum_axis(1)?.sum_axis(2)?.reshape(&[b, h])?;
        let diag_sum = xm.mul(eye)?.sum_axis(1)?.sum_axis(2)?.reshape(&[b, h])?;
        let off_sum = total.sub(diag_sum)?;
        let counts: Vec<f64> = mask.counts.iter().map(|&c| c as f64).collect();
        let nv = t.constant(Array::from_shape_vec(IxDyn(&[b, 1]), counts.clone()).unwrap());
        let pairs = t.constant(Array::from_shape_vec(IxDyn(&[b, 1]), counts.iter().map(|c| (c * (c - 1.0)).max(1.0)).collect()).unwrap());
        let size = mask.size_feature(t, self.n_max);
        let d = self.diag.forward(cx, Var::concat(&[diag_sum.div(nv)?, size], -1)?)?;
        let o = self.off.forward(cx, Var::concat(&[off_sum.div(pairs)?, size], -1)?)?;
        d.add(o)?.reshape(&[b])
    }
}

/// Straight-through Gumbel-softmax over the last axis. With `hard` the
/// forward value is the one-hot argmax while gradients follow the soft
/// relaxation.
pub fn gumbel_softmax<'t>(logits: Var<'t>, tau: f64, rng: &mut Rng, hard: bool) -> Result<Var<'t>> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature {tau} must be positive")));
    }
    let t = logits.tape();
    let noise = Array::from_shape_simple_fn(IxDyn(&logits.shape()), || {
        let u: f64 = rng.random::<f64>().clamp(1e-300, 1.0 - 1e-16);
        -(-u.ln()).ln()
    });
    let y = logits.add(t.constant(noise))?.scale(1.0 / tau).softmax()?;
    if !hard {
        return Ok(y);
    }
    let soft = y.value();
    let m = *soft.shape().last().unwrap();
    let rows = soft.len() / m;
    let flat = soft.as_standard_layout().into_owned().into_shape_with_order(IxDyn(&[rows, m])).unwrap();
    let mut onehot = Array::zeros(IxDyn(&[rows, m]));
    for r in 0..rows {
        let mut best = 0;
        for j in 1..m {
            if flat[[r, j]] > flat[[r, best]] {
                best = j;
            }
        }
        onehot[[r, best]] = 1.0;
    }
    let onehot = t.constant(onehot.into_shape_with_order(IxDyn(soft.shape())).unwrap());
    // onehot − stop_grad(y) + y
    onehot.sub(y.detach())?.add(y)
}

/// 1D convolution on `[B, C, L]` with "same"-style padding `K / 2`.
#[derive(Clone, Debug)]
pub struct Conv1d {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub in_ch: usize,
    pub out_ch: usize,
}

impl Conv1d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        let lin = Linear::new(store, name, in_ch * kernel, out_ch, Init::FanIn, rng);
        Conv1d { w: lin.w, b: lin.b, kernel, stride, in_ch, out_ch }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let patches = x.unfold1d(self.kernel, self.stride, self.kernel / 2)?;
        patches.matmul(cx.p(self.w))?.add(cx.p(self.b))?.permute(&[0, 2, 1])
    }
}

/// `tanh(W₁ * x) · σ(W₂ * x)`.
#[derive(Clone, Debug)]
pub struct GatedConv1d {
    pub filter: Conv1d,
    pub gate: Conv1d,
}

impl GatedConv1d {
    pub fn new(store: &mut ParamStore, name: &str, in_ch: usize, out_ch: usize, kernel: usize, stride: usize, rng: &mut Rng) -> Self {
        GatedConv1d {
            filter: Conv1d::new(store, &format!("{name}.filter"), in_ch, out_ch, kernel, stride, rng),
            gate: Conv1d::new(store, &format!("{name}.gate"), in_ch, out_ch, kernel, stride, rng),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        self.filter.forward(cx, x)?.tanh().mul(self.gate.forward(cx, x)?.sigmoid())
    }
}

/// Nearest-neighbour ×`factor` upsampling of `[B, C, L]` along `L`.
pub fn upsample1d<'t>(x: Var<'t>, factor: usize) -> Result<Var<'t>> {
    let len = *x.shape().last().ok_or_else(|| Error::invalid("upsample of scalar"))?;
    let m = Array::from_shape_fn(IxDyn(&[len, len * factor]), |ix| (ix[1] / factor == ix[0]) as u8 as f64);
    x.matmul(x.tape().constant(m))
}

/// Modified Gram–Schmidt on the columns of `x [.., n, k]`.
pub fn gram_schmidt<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let k = *x.shape().last().unwrap();
    let mut qs: Vec<Var<'t>> = Vec::with_capacity(k);
    for c in 0..k {
        let mut v = x.slice(-1, c, c + 1)?;
        for q in &qs {
            let proj = q.mul(v)?.sum_axis(-2)?;
            v = v.sub(q.mul(proj)?)?;
        }
        let norm = v.square().sum_axis(-2)?.sqrt();
        qs.push(v.div(norm)?);
    }
    Var::concat(&qs, -1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::seq::SliceRandom;
    use rand_distr::StandardNormal;

    fn rng(seed: u64) -> Rng {
        crate::rng::stream(seed, &[])
    }

    fn randn(shape: &[usize], r: &mut Rng) -> Array {
        Array::from_shape_simple_fn(IxDyn(shape), || r.sample(StandardNormal))
    }

    fn perm_rows(x: &Array, axis: usize, perm: &[usize]) -> Array {
        // out[.., i, ..] = x[.., perm[i], ..]
        x.select(ndarray::Axis(axis), perm)
    }

    #[test]
    fn zero_final_layer_gives_zero() {
        let mut r = rng(1);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[5, 7, 3], Init::Zero, &mut r);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false, false, rng(2));
        let y = mlp.forward(&cx, tape.constant(randn(&[4, 5], &mut r))).unwrap();
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wide_mlp_on_unit_noise_is_finite() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[100, 100, 100, 100, 100], Init::FanIn, &mut r);
        let mut z = randn(&[8, 100], &mut r);
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false, false, rng(4));
        let y = mlp.forward(&cx, tape.constant(z)).unwrap();
        assert!(y.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn mlp_gradient_check() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", &[3, 4, 2], Init::FanIn, &mut r);
        let x = randn(&[2, 3], &mut r);
        let err = grad_check(
            |x| {
                let cx = Ctx::new(x.tape(), &store, false, false, rng(0));
                Ok(mlp.forward(&cx, x)?.tanh().sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn pointnet_equivariance_and_padding() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let net = PointNetSt::new(&mut store, "p", 3, 4, 2, Init::FanIn, &mut r);
        let x = randn(&[1, 6, 3], &mut r);
        let mut perm: Vec<usize> = (0..6).collect();
        perm.shuffle(&mut r);
        let run = |x: &Array, mask: &NodeMask| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store, false, false, rng(0));
            (*net.forward(&cx, tape.constant(x.clone()), mask).unwrap().value()).clone()
        };
        let full = NodeMask::tight(vec![6]).unwrap();
        let a = run(&x, &full);
        let b = run(&perm_rows(&x, 1, &perm), &full);
        assert!(crate::autodiff::max_abs_diff(&perm_rows(&a, 1, &perm), &b) < 1e-12);

        let constant = Array::from_shape_fn(IxDyn(&[1, 6, 3]), |ix| ix[2] as f64);
        let c = run(&constant, &full);
        for i in 1..6 {
            for j in 0..2 {
                assert!((c[[0, i, j]] - c[[0, 0, j]]).abs() < 1e-12);
            }
        }

        // Padding with garbage rows leaves the real rows untouched.
        let mut padded = randn(&[1, 9, 3], &mut r);
        padded.slice_mut(ndarray::s![.., ..6, ..]).assign(&x);
        let p = run(&padded, &NodeMask::new(vec![6], 9).unwrap());
        let trimmed = p.slice(ndarray::s![.., ..6, ..]).to_owned().into_dyn();
        assert!(crate::autodiff::max_abs_diff(&trimmed, &a) < 1e-10);
        assert!(p.slice(ndarray::s![.., 6.., ..]).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn masked_mean_with_full_mask_is_plain_mean() {
        let mut r = rng(7);
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 5, 3], &mut r));
        let mask = NodeMask::new(vec![5, 5], 5).unwrap();
        let a = masked_node_mean(x, &mask).unwrap().value();
        let b = x.mean_axis(1).unwrap().reshape(&[2, 3]).unwrap().value();
        assert_eq!(*a, *b);
    }

    fn conj(x: &Array, perm: &[usize]) -> Array {
        perm_rows(&perm_rows(x, 1, perm), 2, perm)
    }

    #[test]
    fn ppgn_layer_equivariance_and_single_node() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let layer = PpgnLayer::new(&mut store, "l", 3, 4, &mut r);
        let run = |x: &Array, mask: &NodeMask| {
            let tape = Tape::new();
            let cx = Ctx::new(&tape, &store, false, false, rng(0));
            (*layer.forward(&cx, tape.constant(x.clone()), mask).unwrap().value()).clone()
        };
        let x = randn(&[2, 7, 7, 3], &mut r);
        let mask = NodeMask::tight(vec![7, 7]).unwrap();
        let y = run(&x, &mask);
        for _ in 0..10 {
            let mut perm: Vec<usize> = (0..7).collect();
            perm.shuffle(&mut r);
            let yp = run(&conj(&x, &perm), &mask);
            assert!(crate::autodiff::max_abs_diff(&conj(&y, &perm), &yp) < 1e-10);
        }
        let one = run(&randn(&[1, 1, 1, 3], &mut r), &NodeMask::tight(vec![1]).unwrap());
        assert!(one.iter().all(|v| v.is_finite()));
        let tape = Tape::new();
        assert!(layer.forward(&Ctx::new(&tape, &store, false, false, rng(0)), tape.constant(randn(&[1, 2, 3, 3], &mut r)), &mask).is_err());
    }

    #[test]
    fn ppgn_stack_activations_stay_bounded() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let stack = PpgnStack::new(&mut store, "s", 2, 16, 8, 4, 0.0, &mut r);
        let tape = Tape::new();
        let mut cx = Ctx::new(&tape, &store, false, false, rng(0));
        let mask = NodeMask::tight(vec![12]).unwrap();
        let mut h = stack.embed.forward(&cx, tape.constant(randn(&[1, 12, 12, 2], &mut r))).unwrap();
        for layer in &stack.layers {
            h = layer.forward(&cx, h, &mask).unwrap();
        }
        let v = h.value();
        let var = v.mapv(|x| x * x).mean().unwrap() - v.mean().unwrap().powi(2);
        assert!((0.1..=10.0).contains(&var), "{var}");
        let out = stack.forward(&mut cx, tape.constant(randn(&[1, 12, 12, 2], &mut r)), &mask).unwrap();
        assert!(out.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn ppgn_stack_masking_matches_unpadded() {
        let mut r = rng(10);
        let mut store = ParamStore::new();
        let stack = PpgnStack::new(&mut store, "s", 2, 6, 3, 2, 0.0, &mut r);
        let head = PairReadout::new(&mut store, "h", 2, 5, 20, &mut r);
        let run = |x: &Array, mask: &NodeMask| {
            let tape = Tape::new();
            let mut cx = Ctx::new(&tape, &store, false, false, rng(0));
            let y = stack.forward(&mut cx, tape.constant(x.clone()), mask).unwrap();
            let s = head.forward(&cx, y, mask).unwrap();
            ((*y.value()).clone(), (*s.value()).clone())
        };
        let sizes = [12, 15, 20];
        let mut batch = randn(&[3, 20, 20, 2], &mut r);
        let mut singles = Vec::new();
        for (b, &n) in sizes.iter().enumerate() {
            let x = randn(&[1, n, n, 2], &mut r);
            batch.slice_mut(ndarray::s![b..b + 1, ..n, ..n, ..]).assign(&x);
            singles.push(run(&x, &NodeMask::tight(vec![n]).unwrap()));
        }
        let (yb, sb) = run(&batch, &NodeMask::new(sizes.to_vec(), 20).unwrap());
        for (b, &n) in sizes.iter().enumerate() {
            let part = yb.slice(ndarray::s![b..b + 1, ..n, ..n, ..]).to_owned().into_dyn();
            assert!(crate::autodiff::max_abs_diff(&part, &singles[b].0) < 1e-10);
            assert!((sb[[b]] - singles[b].1[[0]]).abs() < 1e-10);
        }
    }

    #[test]
    fn gumbel_softmax_properties() {
        let mut r = rng(11);
        let tape = Tape::new();
        let logits = tape.constant(Array::from_shape_vec(IxDyn(&[3]), vec![1.0, 0.0, -0.5]).unwrap());
        for _ in 0..100 {
            let y = gumbel_softmax(logits, 0.01, &mut r, false).unwrap().value();
            assert!((y.sum() - 1.0).abs() < 1e-12);
        }
        // Top-two logit gap of 1. Gumbel noise occasionally nearly closes the
        // gap, so about 97.5% of draws concentrate above 0.99, not all of them.
        let mut concentrated = 0;
        for _ in 0..100 {
            let y = gumbel_softmax(logits, 0.01, &mut r, false).unwrap().value();
            if y.iter().cloned().fold(0.0, f64::max) > 0.99 {
                concentrated += 1;
            }
        }
        assert!(concentrated >= 90, "{concentrated}");

        let flat = tape.constant(Array::zeros(IxDyn(&[4])));
        let mut freq = [0usize; 4];
        let trials = 10_000;
        for _ in 0..trials {
            let y = gumbel_softmax(flat, 1.0, &mut r, true).unwrap().value();
            freq[y.iter().position(|&v| v == 1.0).unwrap()] += 1;
        }
        let sigma = (trials as f64 * 0.25 * 0.75).sqrt();
        for f in freq {
            assert!((f as f64 - trials as f64 / 4.0).abs() < 3.0 * sigma, "{freq:?}");
        }
    }

    #[test]
    fn hard_gumbel_passes_soft_gradients() {
        let tape = Tape::new();
        let logits = tape.param(Array::from_shape_vec(IxDyn(&[3]), vec![0.3, 0.1, -0.2]).unwrap());
        let y = gumbel_softmax(logits, 1.0, &mut rng(12), true).unwrap();
        assert_eq!(y.value().iter().filter(|&&v| v == 1.0).count(), 1);
        let w = tape.constant(Array::from_shape_vec(IxDyn(&[3]), vec![1.0, 2.0, 3.0]).unwrap());
        let g = tape.grad(y.mul(w).unwrap().sum(), &[logits], false).unwrap()[0].value();
        assert!(g.iter().any(|v| v.abs() > 1e-6));
    }

    #[test]
    fn gated_conv_properties() {
        let mut r = rng(13);
        let mut store = ParamStore::new();
        let conv = GatedConv1d::new(&mut store, "g", 2, 3, 5, 1, &mut r);
        let x = randn(&[2, 2, 8], &mut r);
        let tape = Tape::new();
        let cx = Ctx::new(&tape, &store, false, false, rng(0));
        let y = conv.forward(&cx, tape.constant(x.clone())).unwrap().value();
        assert_eq!(y.shape(), &[2, 3, 8]);
        assert!(y.iter().all(|v| v.abs() < 1.0));
        let err = grad_check(
            |x| {
                let cx = Ctx::new(x.tape(), &store, false, false, rng(0));
                Ok(conv.forward(&cx, x)?.sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");

        // A huge positive gate bias saturates the sigmoid: output is the tanh branch.
        let mut sat = store.clone();
        sat.get_mut(conv.gate.b).fill(1e3);
        let cx = Ctx::new(&tape, &sat, false, false, rng(0));
        let xv = tape.constant(x);
        let gated = conv.forward(&cx, xv).unwrap().value();
        let plain = conv.filter.forward(&cx, xv).unwrap().tanh().value();
        assert!(crate::autodiff::max_abs_diff(&gated, &plain) < 1e-12);

        let short = tape.constant(randn(&[1, 2, 3], &mut r));
        assert!(matches!(short.unfold1d(5, 1, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn gram_schmidt_orthonormalizes() {
        let mut r = rng(14);
        let tape = Tape::new();
        let x = tape.constant(randn(&[2, 6, 3], &mut r));
        let q = gram_schmidt(x).unwrap().value();
        for b in 0..2 {
            let m = q.index_axis(ndarray::Axis(0), b).into_dimensionality::<ndarray::Ix2>().unwrap();
            assert!(crate::linalg::orthonormality_error(m) < 1e-12);
        }
    }
}
