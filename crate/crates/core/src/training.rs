//! Adversarial training of the three conditional GANs: one-sided Lipschitz
//! penalty, teacher forcing between stages, Adam, weight averaging,
//! checkpoints and model selection.

use std::fs;
use std::io::{BufRead, Write as _};
use std::path::{Path, PathBuf};

use ndarray::{s, Array1, Array2, Array3, Axis, IxDyn};
use rand::seq::index::sample as sample_indices;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Array, Gradients, Tape, Var};
use crate::graphs::{top_k_spectrum, Graph, Spectrum};
use crate::linalg;
use crate::manifold;
use crate::metrics::{ratio, FeatureSet, MmdConfig, MmdRow};
use crate::models::{adjacency_tensor, generate_graphs, sample_noise, spectra_tensors, ModelConfig, Net, Networks, ParamSet};
use crate::nn::{Ctx, NodeMask, ParamStore};
use crate::rng::{self, Rng};
use crate::{Error, Result};

/// Which of the three GANs receive updates.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct Stages {
    pub eigenvalues: bool,
    pub eigenvectors: bool,
    pub graph: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages { eigenvalues: true, eigenvectors: true, graph: true }
    }
}

impl Stages {
    fn enabled(&self, stage: usize) -> bool {
        [self.eigenvalues, self.eigenvectors, self.graph][stage]
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Weight of the one-sided penalty in the discriminator loss.
    pub lambda_lp: f64,
    pub batch_size: usize,
    pub steps: u64,
    /// Steps during which every stage is conditioned on real spectra.
    pub warmup_steps: u64,
    /// Steps of cosine annealing of the real-conditioning probability.
    pub anneal_steps: u64,
    pub tau_start: f64,
    pub tau_end: f64,
    /// Retention of the exponential moving average.
    pub ema: f64,
    pub rewire_p: f64,
    /// Variance of the Gaussian noise added to penalty graphs.
    pub noise_var: f64,
    /// Variance of the noise on real eigenvalues used as conditioning; also
    /// sets the size of the random rotation applied to real eigenvectors.
    pub cond_noise_var: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub stages: Stages,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.5,
            beta2: 0.9,
            adam_eps: 1e-8,
            lambda_lp: 5.0,
            batch_size: 10,
            steps: 5000,
            warmup_steps: 900,
            anneal_steps: 900,
            tau_start: 1.0,
            tau_end: 0.8,
            ema: 0.995,
            rewire_p: 0.1,
            noise_var: 0.05,
            cond_noise_var: 0.05,
            seed: 0,
            checkpoint_every: 500,
            log_every: 1,
            stages: Stages::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.lr, self.lambda_lp, self.adam_eps];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.batch_size == 0 {
            return Err(Error::invalid("learning rate, penalty weight, Adam epsilon and batch size must be positive"));
        }
        let unit = [self.beta1, self.beta2, self.ema];
        if unit.iter().any(|v| !(0.0..1.0).contains(v)) {
            return Err(Error::invalid("Adam betas and EMA retention must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.tau_start) || !(0.0..=1.0).contains(&self.tau_end) {
            return Err(Error::invalid("teacher-forcing probabilities must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.rewire_p) || self.noise_var < 0.0 || self.cond_noise_var < 0.0 {
            return Err(Error::invalid("rewire probability must lie in [0, 1] and noise variances be non-negative"));
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::invalid("checkpoint and log intervals must be positive"));
        }
        Ok(())
    }
}

/// `(loss_D, loss_G)` of the Wasserstein objective with the penalty term.
pub fn wgan_lp_losses<'t>(d_real: Var<'t>, d_fake: Var<'t>, gp: Var<'t>, lambda_lp: f64) -> Result<(Var<'t>, Var<'t>)> {
    let loss_d = d_fake.mean().sub(d_real.mean())?.add(gp.scale(lambda_lp))?;
    let loss_g = d_fake.mean().neg();
    Ok((loss_d, loss_g))
}

/// `γ · mean_b max(0, ‖∇_x d(x_b)‖ − 1)²` over the samples of a batch.
/// `scores [B]` must depend on `inputs` (each `[B, ..]`) sample by sample.
/// The result is differentiable with respect to the discriminator
/// parameters through the recorded input gradients.
pub fn gradient_penalty<'t>(scores: Var<'t>, inputs: &[Var<'t>], gamma: f64) -> Result<Var<'t>> {
    let tape = scores.tape();
    let b = scores.shape()[0];
    let grads = tape.grad(scores.sum(), inputs, true)?;
    let mut sq: Option<Var<'t>> = None;
    for g in grads {
        let per = g.square().reshape(&[b, g.value().len() / b.max(1)])?.sum_axis(1)?;
        sq = Some(match sq {
            Some(acc) => acc.add(per)?,
            None => per,
        });
    }
    let sq = sq.ok_or_else(|| Error::invalid("gradient penalty needs at least one input"))?;
    let norm = sq.add_scalar(1e-12).sqrt();
    Ok(norm.add_scalar(-1.0).relu().square().mean().scale(gamma))
}

/// Real-conditioning probability at `step`: 1 during warmup, cosine from
/// `tau_start` to `tau_end` during the anneal, `tau_end` afterwards.
pub fn teacher_forcing_prob(step: u64, cfg: &TrainConfig) -> f64 {
    if step < cfg.warmup_steps {
        return cfg.tau_start;
    }
    let into = step - cfg.warmup_steps;
    if into >= cfg.anneal_steps {
        return cfg.tau_end;
    }
    let frac = into as f64 / cfg.anneal_steps as f64;
    cfg.tau_end + (cfg.tau_start - cfg.tau_end) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Per-sample flags: `true` means the next stage is conditioned on (perturbed)
/// real spectra, `false` on generated ones.
pub fn teacher_forcing_mix(step: u64, batch: usize, cfg: &TrainConfig, rng: &mut Rng) -> Vec<bool> {
    let p = teacher_forcing_prob(step, cfg);
    if step < cfg.warmup_steps {
        return vec![true; batch];
    }
    (0..batch).map(|_| rng.random::<f64>() < p).collect()
}

/// Flips every off-diagonal slot among the first `n` nodes with probability
/// `p` (soft entries map to `1 − a`), adds symmetric Gaussian noise of
/// variance `var` and clips to [0, 1].
pub fn perturb_graph(a: &Array2<f64>, n: usize, p: f64, var: f64, rng: &mut Rng) -> Array2<f64> {
    let mut out = a.clone();
    let normal = Normal::new(0.0, var.sqrt()).expect("finite variance");
    for i in 0..n {
        for j in i + 1..n {
            let mut v = a[[i, j]];
            if p > 0.0 && rng.random::<f64>() < p {
                v = 1.0 - v;
            }
            if var > 0.0 {
                v += normal.sample(rng);
            }
            let v = v.clamp(0.0, 1.0);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
        out[[i, i]] = 0.0;
    }
    out
}

/// `(1 − t) λ_real + t λ_fake` per sample.
pub fn interpolate_eigenvalues(real: &Array2<f64>, fake: &Array2<f64>, t: &[f64]) -> Array2<f64> {
    let mut out = real.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row.zip_mut_with(&fake.row(i), |r, &f| *r = (1.0 - t[i]) * *r + t[i] * f);
    }
    out
}

/// Stiefel interpolation of canonicalized eigenvectors per sample, over the
/// first `counts[b]` rows.
pub fn interpolate_eigenvectors(real: &Array3<f64>, fake: &Array3<f64>, counts: &[usize], t: &[f64]) -> Result<Array3<f64>> {
    let mut out = Array3::zeros(real.raw_dim());
    for (b, &n) in counts.iter().enumerate() {
        let r = real.slice(s![b, ..n, ..]);
        let f = fake.slice(s![b, ..n, ..]);
        out.slice_mut(s![b, ..n, ..]).assign(&manifold::interpolate(r, f, t[b])?);
    }
    Ok(out)
}

/// Which discriminator a penalty set is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyKind {
    Eigenvalues,
    Eigenvectors,
    Graphs,
}

/// Inputs of one stage for a padded batch. `u` and `a` are absent for the
/// stages that do not use them.
#[derive(Clone, Debug)]
pub struct StageInputs {
    pub lambda: Array2<f64>,
    pub u: Array3<f64>,
    pub a: Array3<f64>,
    pub counts: Vec<usize>,
}

impl StageInputs {
    fn concat(parts: &[StageInputs]) -> StageInputs {
        let lv: Vec<_> = parts.iter().map(|p| p.lambda.view()).collect();
        let uv: Vec<_> = parts.iter().map(|p| p.u.view()).collect();
        let av: Vec<_> = parts.iter().map(|p| p.a.view()).collect();
        StageInputs {
            lambda: ndarray::concatenate(Axis(0), &lv).unwrap(),
            u: ndarray::concatenate(Axis(0), &uv).unwrap(),
            a: ndarray::concatenate(Axis(0), &av).unwrap(),
            counts: parts.iter().flat_map(|p| p.counts.iter().copied()).collect(),
        }
    }
}

/// Penalty points for one discriminator: eigenvalues and eigenvectors use
/// per-sample interpolation between real and fake; graphs use rewired and
/// noised copies of both real and fake samples. The unperturbed real and
/// fake samples are always appended.
pub fn make_penalty_inputs(
    real: &StageInputs,
    fake: &StageInputs,
    kind: PenaltyKind,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<StageInputs> {
    let b = real.counts.len();
    let mut parts = Vec::new();
    match kind {
        PenaltyKind::Eigenvalues | PenaltyKind::Eigenvectors => {
            let t: Vec<f64> = (0..b).map(|_| rng.random::<f64>()).collect();
            let lambda = interpolate_eigenvalues(&real.lambda, &fake.lambda, &t);
            let u = if kind == PenaltyKind::Eigenvectors {
                interpolate_eigenvectors(&real.u, &fake.u, &real.counts, &t)?
            } else {
                real.u.clone()
            };
            parts.push(StageInputs { lambda, u, a: real.a.clone(), counts: real.counts.clone() });
        }
        PenaltyKind::Graphs => {
            for src in [real, fake] {
                let mut a = src.a.clone();
                for (i, &n) in src.counts.iter().enumerate() {
                    let g = perturb_graph(&src.a.index_axis(Axis(0), i).to_owned(), n, cfg.rewire_p, cfg.noise_var, rng);
                    a.index_axis_mut(Axis(0), i).assign(&g);
                }
                parts.push(StageInputs { a, ..src.clone() });
            }
        }
    }
    parts.push(real.clone());
    parts.push(fake.clone());
    Ok(StageInputs::concat(&parts))
}

/// A padded batch of real graphs and their spectra.
#[derive(Clone, Debug)]
pub struct RealBatch {
    pub mask: NodeMask,
    pub inputs: StageInputs,
}

impl RealBatch {
    pub fn new(graphs: &[&Graph], spectra: &[&Spectrum]) -> Result<Self> {
        let counts: Vec<usize> = graphs.iter().map(|g| g.n()).collect();
        let mask = NodeMask::tight(counts.clone())?;
        let owned: Vec<Spectrum> = spectra.iter().map(|s| (*s).clone()).collect();
        let (lam, u) = spectra_tensors(&owned, mask.n)?;
        let inputs = StageInputs {
            lambda: lam.into_dimensionality().unwrap(),
            u: u.into_dimensionality().unwrap(),
            a: adjacency_tensor(graphs, mask.n).into_dimensionality().unwrap(),
            counts,
        };
        Ok(RealBatch { mask, inputs })
    }
}

/// Perturbed copy of real spectra used as generator conditioning:
/// eigenvalues get Gaussian noise (clipped to [0, 2] and re-sorted),
/// eigenvectors a small random rotation of their real rows.
pub fn perturb_spectra(inputs: &StageInputs, var: f64, rng: &mut Rng) -> Result<(Array2<f64>, Array3<f64>)> {
    let mut lam = inputs.lambda.clone();
    let mut u = inputs.u.clone();
    if var == 0.0 {
        return Ok((lam, u));
    }
    let sd = var.sqrt();
    for (b, &n) in inputs.counts.iter().enumerate() {
        let mut row: Vec<f64> = lam.row(b).iter().map(|&l| (l + sd * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 2.0)).collect();
        row.sort_by(f64::total_cmp);
        lam.row_mut(b).assign(&Array1::from(row));
        let g = Array2::from_shape_simple_fn((n, n), || rng.sample::<f64, _>(StandardNormal) * sd / (n as f64).sqrt());
        let skew = (&g - &g.t()) * 0.5;
        let rot = linalg::matrix_exp(skew.view())?;
        let block = rot.dot(&inputs.u.slice(s![b, ..n, ..]));
        u.slice_mut(s![b, ..n, ..]).assign(&block);
    }
    Ok((lam, u))
}

/// Constant sign per (sample, column) making the largest-magnitude entry of
/// each eigenvector column positive: `[B, 1, k]`.
fn canonical_sign_tensor(u: &Array) -> Array {
    let sh = u.shape();
    let (b, n, k) = (sh[0], sh[1], sh[2]);
    Array::from_shape_fn(IxDyn(&[b, 1, k]), |ix| {
        let (bi, c) = (ix[0], ix[2]);
        let mut best = 0.0_f64;
        for i in 0..n {
            let v = u[[bi, i, c]];
            if v.abs() > best.abs() + 1e-12 {
                best = v;
            }
        }
        if best < 0.0 {
            -1.0
        } else {
            1.0
        }
    })
}

/// Per-sample choice between two arrays along the batch axis.
fn select_rows(flags: &[bool], when_true: &Array, when_false: &Array) -> Array {
    let mut out = when_false.clone();
    for (b, &f) in flags.iter().enumerate() {
        if f {
            out.index_axis_mut(Axis(0), b).assign(&when_true.index_axis(Axis(0), b));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamMoments {
    pub m: Vec<Array>,
    pub v: Vec<Array>,
    pub t: u64,
}

impl AdamMoments {
    pub fn zeros_like(store: &ParamStore) -> Self {
        let z: Vec<Array> = store.values().iter().map(|v| Array::zeros(v.raw_dim())).collect();
        AdamMoments { m: z.clone(), v: z, t: 0 }
    }
}

/// One Adam step with bias correction. `grads[i]` is `None` for parameters
/// the loss does not reach, which are treated as zero gradient.
pub fn adam_step(store: &mut ParamStore, moments: &mut AdamMoments, grads: &[Option<Array>], cfg: &TrainConfig) {
    moments.t += 1;
    let t = moments.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, p) in store.values_mut().iter_mut().enumerate() {
        let (m, v) = (&mut moments.m[i], &mut moments.v[i]);
        match &grads[i] {
            Some(g) => {
                ndarray::Zip::from(&mut *m).and(g).for_each(|m, &g| *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g);
                ndarray::Zip::from(&mut *v).and(g).for_each(|v, &g| *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g);
            }
            None => {
                m.mapv_inplace(|x| x * cfg.beta1);
                v.mapv_inplace(|x| x * cfg.beta2);
            }
        }
        ndarray::Zip::from(p)
            .and(&*m)
            .and(&*v)
            .for_each(|p, &m, &v| *p -= cfg.lr * (m / c1) / ((v / c2).sqrt() + cfg.adam_eps));
    }
}

/// `shadow ← r · shadow + (1 − r) · params`.
pub fn ema_update(shadow: &mut ParamStore, params: &ParamStore, retention: f64) {
    for (s, p) in shadow.values_mut().iter_mut().zip(params.values()) {
        ndarray::Zip::from(s).and(p).for_each(|s, &p| *s = retention * *s + (1.0 - retention) * p);
    }
}

/// Re-orthonormalizes every bank entry; returns the largest deviation from
/// orthonormality found before the projection.
pub fn reproject_bank(nets: &Networks, store: &mut ParamStore) -> Result<f64> {
    let bank = store.get_mut(nets.eigvec_gen.bank);
    let m = bank.shape()[0];
    let mut drift = 0.0_f64;
    for i in 0..m {
        let mut entry = bank.index_axis_mut(Axis(0), i);
        let e2: Array2<f64> = entry.to_owned().into_dimensionality().unwrap();
        drift = drift.max(linalg::orthonormality_error(e2.view()));
        let (q, _) = linalg::qr(e2.view())?;
        entry.assign(&q.into_dyn());
    }
    Ok(drift)
}

/// Parameters, optimizer moments and averaged weights of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub params: ParamSet,
    pub ema: ParamSet,
    pub adam: Vec<AdamMoments>,
}

impl TrainState {
    pub fn new(params: ParamSet) -> Self {
        let adam = params.stores.iter().map(AdamMoments::zeros_like).collect();
        TrainState { step: 0, ema: params.clone(), params, adam }
    }
}

/// Scalars recorded for one step. Arrays are indexed by stage
/// (eigenvalues, eigenvectors, graph).
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss_d: [f64; 3],
    pub loss_g: [f64; 3],
    pub gp: [f64; 3],
    /// `mean d(real) − mean d(fake)` before the update.
    pub wasserstein: [f64; 3],
    pub stiefel_drift: f64,
    pub teacher_prob: f64,
}

impl StepLog {
    pub fn is_finite(&self) -> bool {
        self.loss_d.iter().chain(&self.loss_g).chain(&self.gp).chain(&self.wasserstein).all(|v| v.is_finite())
            && self.stiefel_drift.is_finite()
    }
}

const DISCS: [Net; 3] = [Net::EigvalDisc, Net::EigvecDisc, Net::GraphDisc];
const GENS: [Net; 3] = [Net::EigvalGen, Net::EigvecGen, Net::GraphGen];

fn disc_scores<'t>(
    nets: &Networks,
    stage: usize,
    cx: &mut Ctx<'t>,
    lambda: Var<'t>,
    u: Var<'t>,
    a: Var<'t>,
    mask: &NodeMask,
) -> Result<Var<'t>> {
    match stage {
        0 => nets.eigval_disc.forward(cx, lambda, mask),
        1 => nets.eigvec_disc.forward(cx, u, lambda, mask),
        _ => nets.graph_disc.forward(cx, a, lambda, u, mask),
    }
}

fn collect_grads(grads: &Gradients, vars: &[Var<'_>]) -> Vec<Option<Array>> {
    vars.iter().map(|v| grads.get(*v).cloned()).collect()
}

/// Discriminator update for one stage; returns `(loss_D, gp, wasserstein gap)`.
fn update_discriminator(
    nets: &Networks,
    cfg: &TrainConfig,
    state: &mut TrainState,
    stage: usize,
    real: &StageInputs,
    fake: &StageInputs,
    rng_base: u64,
) -> Result<(f64, f64, f64)> {
    let net = DISCS[stage];
    let kind = [PenaltyKind::Eigenvalues, PenaltyKind::Eigenvectors, PenaltyKind::Graphs][stage];
    let mut prng = rng::stream(rng_base, &[net.index() as u64, 1]);
    let pen = make_penalty_inputs(real, fake, kind, cfg, &mut prng)?;
    let tape = Tape::new();
    let mut cx = Ctx::new(&tape, state.params.get(net), true, true, rng::stream(rng_base, &[net.index() as u64, 2]));
    let mask = NodeMask::new(real.counts.clone(), real.u.shape()[1])?;
    let c = |a: &Array2<f64>| tape.constant(a.clone().into_dyn());
    let c3 = |a: &Array3<f64>| tape.constant(a.clone().into_dyn());
    let d_real = disc_scores(nets, stage, &mut cx, c(&real.lambda), c3(&real.u), c3(&real.a), &mask)?;
    let d_fake = disc_scores(nets, stage, &mut cx, c(&fake.lambda), c3(&fake.u), c3(&fake.a), &mask)?;
    let pmask = NodeMask::new(pen.counts.clone(), mask.n)?;
    let (pl, pu, pa) = match stage {
        0 => (tape.leaf(pen.lambda.clone().into_dyn(), true), c3(&pen.u), c3(&pen.a)),
        1 => (c(&pen.lambda), tape.leaf(pen.u.clone().into_dyn(), true), c3(&pen.a)),
        _ => (c(&pen.lambda), c3(&pen.u), tape.leaf(pen.a.clone().into_dyn(), true)),
    };
    let probe = [pl, pu, pa][stage];
    let d_pen = disc_scores(nets, stage, &mut cx, pl, pu, pa, &pmask)?;
    let gp = gradient_penalty(d_pen, &[probe], 1.0)?;
    let gap = d_real.mean().item() - d_fake.mean().item();
    let (loss_d, _) = wgan_lp_losses(d_real, d_fake, gp, cfg.lambda_lp)?;
    let grads = tape.backward(loss_d)?;
    let g = collect_grads(&grads, cx.vars());
    let (ld, gpv) = (loss_d.item(), gp.item());
    drop(cx);
    adam_step(&mut state.params.stores[net.index()], &mut state.adam[net.index()], &g, cfg);
    Ok((ld, gpv, gap))
}

/// One optimization step on `batch`: generators forward with
/// teacher-forced conditioning, each discriminator updated against
/// detached fakes, then the generators updated against the new
/// discriminators, followed by weight averaging and bank re-projection.
pub fn train_step(nets: &Networks, cfg: &TrainConfig, state: &mut TrainState, batch: &RealBatch) -> Result<StepLog> {
    let step = state.step;
    let base = rng::derive_seed(cfg.seed, &[0x7a11, step]);
    let mask = &batch.mask;
    let b = mask.batch();
    let real = &batch.inputs;
    let ids: Vec<u64> = (0..b as u64).map(|i| step * b as u64 + i).collect();
    let noise = sample_noise(&nets.cfg, mask, base, &ids);
    let flags = teacher_forcing_mix(step, b, cfg, &mut rng::stream(base, &[1]));
    let (lam_pert, u_pert) = perturb_spectra(real, cfg.cond_noise_var, &mut rng::stream(base, &[2]))?;

    let gt = Tape::new();
    let gctx = |net: Net| Ctx::new(&gt, state.params.get(net), true, true, rng::stream(base, &[3, net.index() as u64]));
    let cx_l = gctx(Net::EigvalGen);
    let lam_fake = nets.eigval_gen.forward(&cx_l, gt.constant(noise.z_lambda.clone()), mask)?;
    let lam_cond = select_rows(&flags, &lam_pert.into_dyn(), &lam_fake.value());
    let mut cx_u = gctx(Net::EigvecGen);
    let u_raw = nets.eigvec_gen.forward(&mut cx_u, gt.constant(lam_cond.clone()), gt.constant(noise.z_u.clone()), mask)?;
    let u_fake = u_raw.mul(gt.constant(canonical_sign_tensor(&u_raw.value())))?;
    let u_cond = select_rows(&flags, &u_pert.into_dyn(), &u_fake.value());
    let mut cx_a = gctx(Net::GraphGen);
    let a_fake = nets.graph_gen.forward(
        &mut cx_a,
        gt.constant(lam_cond.clone()),
        gt.constant(u_cond.clone()),
        gt.constant(noise.z_a.clone()),
        mask,
    )?;

    let d2 = |a: &Array| -> Array2<f64> { a.clone().into_dimensionality().unwrap() };
    let d3 = |a: &Array| -> Array3<f64> { a.clone().into_dimensionality().unwrap() };
    let counts = real.counts.clone();
    let fakes = [
        StageInputs { lambda: d2(&lam_fake.value()), u: real.u.clone(), a: real.a.clone(), counts: counts.clone() },
        StageInputs { lambda: d2(&lam_cond), u: d3(&u_fake.value()), a: real.a.clone(), counts: counts.clone() },
        StageInputs { lambda: d2(&lam_cond), u: d3(&u_cond), a: d3(&a_fake.value()), counts },
    ];

    let mut log = StepLog { step, teacher_prob: teacher_forcing_prob(step, cfg), ..StepLog::default() };
    for stage in 0..3 {
        if cfg.stages.enabled(stage) {
            let (ld, gp, gap) = update_discriminator(nets, cfg, state, stage, real, &fakes[stage], base)?;
            log.loss_d[stage] = ld;
            log.gp[stage] = gp;
            log.wasserstein[stage] = gap;
        }
    }

    let lam_c = gt.constant(lam_cond);
    let u_c = gt.constant(u_cond);
    let placeholder = gt.constant(real.a.clone().into_dyn());
    let inputs = [(lam_fake, u_c, placeholder), (lam_c, u_fake, placeholder), (lam_c, u_c, a_fake)];
    let mut total: Option<Var<'_>> = None;
    let mut d_ctxs = Vec::new();
    for stage in 0..3 {
        if !cfg.stages.enabled(stage) {
            continue;
        }
        let net = DISCS[stage];
        let mut cx = Ctx::new(&gt, state.params.get(net), false, true, rng::stream(base, &[4, net.index() as u64]));
        let (l, u, a) = inputs[stage];
        let d_fake = disc_scores(nets, stage, &mut cx, l, u, a, mask)?;
        let loss_g = d_fake.mean().neg();
        log.loss_g[stage] = loss_g.item();
        total = Some(match total {
            Some(t) => t.add(loss_g)?,
            None => loss_g,
        });
        d_ctxs.push(cx);
    }
    if !log.is_finite() {
        return Err(Error::NumericalFailure(format!("non-finite losses at step {step}: {log:?}")));
    }
    if let Some(total) = total {
        let grads = gt.backward(total)?;
        let gen_grads: Vec<Vec<Option<Array>>> =
            [&cx_l, &cx_u, &cx_a].iter().map(|cx| collect_grads(&grads, cx.vars())).collect();
        drop(d_ctxs);
        for (stage, g) in gen_grads.iter().enumerate() {
            if cfg.stages.enabled(stage) {
                let net = GENS[stage];
                adam_step(&mut state.params.stores[net.index()], &mut state.adam[net.index()], g, cfg);
            }
        }
    }
    log.stiefel_drift = reproject_bank(nets, state.params.get_mut(Net::EigvecGen))?;
    for net in Net::ALL {
        ema_update(&mut state.ema.stores[net.index()], &state.params.stores[net.index()], cfg.ema);
    }
    state.step += 1;
    Ok(log)
}

/// Training graphs with their spectra; graphs too small for `k` non-trivial
/// eigenpairs are skipped with a warning.
pub struct TrainData {
    pub graphs: Vec<Graph>,
    pub spectra: Vec<Spectrum>,
}

impl TrainData {
    pub fn new(graphs: &[Graph], k: usize, n_max: usize) -> Result<Self> {
        let mut kept = Vec::new();
        let mut spectra = Vec::new();
        for (i, g) in graphs.iter().enumerate() {
            if g.n() <= k + 1 {
                log::warn!("skipping training graph {i}: {} nodes cannot carry {k} non-trivial eigenpairs", g.n());
                continue;
            }
            if g.n() > n_max {
                return Err(Error::invalid(format!("training graph {i} has {} nodes, model supports {n_max}", g.n())));
            }
            spectra.push(top_k_spectrum(g, k)?);
            kept.push(g.clone());
        }
        if kept.is_empty() {
            return Err(Error::invalid("no usable training graphs"));
        }
        Ok(TrainData { graphs: kept, spectra })
    }

    /// Batch drawn without replacement for `step`; the whole set when it is
    /// smaller than the batch size.
    pub fn batch(&self, cfg: &TrainConfig, step: u64) -> Result<RealBatch> {
        let len = self.graphs.len();
        let mut r = rng::stream(cfg.seed, &[0xba7c, step]);
        let idx: Vec<usize> = if len <= cfg.batch_size {
            (0..len).collect()
        } else {
            sample_indices(&mut r, len, cfg.batch_size).into_vec()
        };
        let g: Vec<&Graph> = idx.iter().map(|&i| &self.graphs[i]).collect();
        let s: Vec<&Spectrum> = idx.iter().map(|&i| &self.spectra[i]).collect();
        RealBatch::new(&g, &s)
    }
}

// -- checkpoints ---------------------------------------------------------------

const MAGIC: &[u8; 8] = b"SPGCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    group: String,
    net: Net,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    version: u32,
    step: u64,
    model: ModelConfig,
    train: TrainConfig,
    adam_t: Vec<u64>,
    arrays: Vec<ArrayMeta>,
}

/// A restored checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub state: TrainState,
}

impl Checkpoint {
    /// Architecture matching the stored parameters.
    pub fn networks(&self) -> Result<Networks> {
        Ok(Networks::new(&self.model, 0)?.0)
    }
}

fn groups(state: &TrainState) -> Vec<(&'static str, Net, &ParamStore, Option<&[Array]>)> {
    let mut out = Vec::new();
    for net in Net::ALL {
        let i = net.index();
        out.push(("params", net, &state.params.stores[i], None));
        out.push(("ema", net, &state.ema.stores[i], None));
        out.push(("adam_m", net, &state.params.stores[i], Some(&state.adam[i].m[..])));
        out.push(("adam_v", net, &state.params.stores[i], Some(&state.adam[i].v[..])));
    }
    out
}

/// Binary checkpoint: magic, version, JSON header, little-endian `f64`
/// payload and a SHA-256 trailer over everything before it.
pub fn save_checkpoint(path: &Path, model: &ModelConfig, train: &TrainConfig, state: &TrainState) -> Result<()> {
    let mut arrays = Vec::new();
    let mut payload = Vec::new();
    for (group, net, store, override_values) in groups(state) {
        let values = override_values.unwrap_or(store.values());
        for (name, v) in store.names().iter().zip(values) {
            arrays.push(ArrayMeta { group: group.into(), net, name: name.clone(), shape: v.shape().to_vec() });
            for x in v.iter() {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    let meta = CheckpointMeta {
        version: CHECKPOINT_VERSION,
        step: state.step,
        model: model.clone(),
        train: train.clone(),
        adam_t: state.adam.iter().map(|a| a.t).collect(),
        arrays,
    };
    let header = serde_json::to_vec(&meta).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
    let mut bytes = Vec::with_capacity(header.len() + payload.len() + 64);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    bytes.extend_from_slice(&payload);
    let digest = Sha256::digest(&bytes);
    bytes.extend_from_slice(&digest);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::Integrity { path: path.to_path_buf(), message: message.to_string() };
    if bytes.len() < MAGIC.len() + 12 + 32 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != trailer {
        return Err(bad("checksum mismatch; the file is corrupted or truncated"));
    }
    let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(body[12..20].try_into().unwrap()) as usize;
    let header = body.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let meta: CheckpointMeta = serde_json::from_slice(header).map_err(|e| bad(&format!("bad header: {e}")))?;
    let (_, fresh) = Networks::new(&meta.model, 0)?;
    let mut state = TrainState::new(fresh);
    let mut data = body[20 + hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for a in &meta.arrays {
        let i = a.net.index();
        let store = match a.group.as_str() {
            "params" => &mut state.params.stores[i],
            "ema" => &mut state.ema.stores[i],
            "adam_m" | "adam_v" => &mut state.params.stores[i],
            other => return Err(bad(&format!("unknown array group {other}"))),
        };
        let id = store.id(&a.name).ok_or_else(|| bad(&format!("unknown parameter {}", a.name)))?;
        let len: usize = a.shape.iter().product();
        let values: Vec<f64> = data.by_ref().take(len).collect();
        if values.len() != len {
            return Err(bad("truncated payload"));
        }
        let arr = Array::from_shape_vec(IxDyn(&a.shape), values).map_err(|_| bad("bad array shape"))?;
        let expected = store.get(id).shape().to_vec();
        if expected != a.shape {
            return Err(bad(&format!("shape mismatch for {}", a.name)));
        }
        let idx = id_index(store, &a.name);
        match a.group.as_str() {
            "adam_m" => state.adam[i].m[idx] = arr,
            "adam_v" => state.adam[i].v[idx] = arr,
            "ema" => *state.ema.stores[i].get_mut(id) = arr,
            _ => *state.params.stores[i].get_mut(id) = arr,
        }
    }
    if data.next().is_some() {
        return Err(bad("trailing payload"));
    }
    for (a, t) in state.adam.iter_mut().zip(&meta.adam_t) {
        a.t = *t;
    }
    state.step = meta.step;
    Ok(Checkpoint { model: meta.model, train: meta.train, state })
}

fn id_index(store: &ParamStore, name: &str) -> usize {
    store.names().iter().position(|n| n == name).expect("name checked")
}

// -- run directories -----------------------------------------------------------

/// Layout of a training run: `config.toml`, `log.jsonl` and
/// `checkpoints/step_NNNNNNN.ckpt`.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunConfigSnapshot {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn checkpoint_path(&self, step: u64) -> PathBuf {
        self.checkpoint_dir().join(format!("step_{step:07}.ckpt"))
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("log.jsonl")
    }

    pub fn checkpoints(&self) -> Result<Vec<PathBuf>> {
        let dir = self.checkpoint_dir();
        if !dir.exists() {
            return Ok(Vec::new());
        }
        let mut out: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        out.sort();
        Ok(out)
    }

    pub fn latest_checkpoint(&self) -> Result<Option<PathBuf>> {
        Ok(self.checkpoints()?.pop())
    }

    fn write_config(&self, model: &ModelConfig, train: &TrainConfig) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(|e| Error::io(&self.root, e))?;
        let snap = RunConfigSnapshot { model: model.clone(), train: train.clone() };
        let text = toml::to_string(&snap).map_err(|e| Error::invalid(format!("config snapshot: {e}")))?;
        let path = self.root.join("config.toml");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Log records, dropping any written after `step` (left over from a run
    /// that was interrupted after its last checkpoint).
    fn truncate_log(&self, step: u64) -> Result<()> {
        let path = self.log_path();
        if !path.exists() {
            return Ok(());
        }
        let file = fs::File::open(&path).map_err(|e| Error::io(&path, e))?;
        let kept: Vec<String> = std::io::BufReader::new(file)
            .lines()
            .map_while(|l| l.ok())
            .filter(|l| serde_json::from_str::<StepLog>(l).map(|r| r.step < step).unwrap_or(false))
            .collect();
        let mut text = kept.join("\n");
        if !text.is_empty() {
            text.push('\n');
        }
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn read_log(&self) -> Result<Vec<StepLog>> {
        let path = self.log_path();
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        text.lines()
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| Error::Parse {
                    context: path.display().to_string(),
                    record: i + 1,
                    message: e.to_string(),
                })
            })
            .collect()
    }
}

/// Runs (or resumes) training up to `train.steps`. With a run directory the
/// config is snapshotted, logs are appended and checkpoints written every
/// `checkpoint_every` steps and at the end; an existing checkpoint in the
/// directory is resumed from.
pub fn train(
    model: &ModelConfig,
    train: &TrainConfig,
    graphs: &[Graph],
    run: Option<&RunDir>,
) -> Result<(Networks, TrainState, Vec<StepLog>)> {
    train_with(model, train, graphs, run, |_, _, _| Ok(true))
}

/// [`train`] with a hook called after every step; returning `Ok(false)`
/// stops early (after the step's log line and checkpoint are written).
pub fn train_with(
    model: &ModelConfig,
    train: &TrainConfig,
    graphs: &[Graph],
    run: Option<&RunDir>,
    mut on_step: impl FnMut(&Networks, &TrainState, &StepLog) -> Result<bool>,
) -> Result<(Networks, TrainState, Vec<StepLog>)> {
    train.validate()?;
    let (nets, fresh) = Networks::new(model, train.seed)?;
    let mut state = TrainState::new(fresh);
    if let Some(run) = run {
        if let Some(path) = run.latest_checkpoint()? {
            let ck = load_checkpoint(&path)?;
            if ck.model != *model {
                return Err(Error::invalid(format!("{} was written for a different model config", path.display())));
            }
            log::info!("resuming from {} at step {}", path.display(), ck.state.step);
            state = ck.state;
        }
        run.write_config(model, train)?;
        run.truncate_log(state.step)?;
    }
    let data = TrainData::new(graphs, model.k, model.n_max)?;
    let mut logs = Vec::new();
    let mut log_file = match run {
        Some(r) => Some(
            fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(r.log_path())
                .map_err(|e| Error::io(r.log_path(), e))?,
        ),
        None => None,
    };
    while state.step < train.steps {
        let batch = data.batch(train, state.step)?;
        let rec = match train_step(&nets, train, &mut state, &batch) {
            Ok(r) => r,
            Err(e) => {
                if let Some(r) = run {
                    let dump = r.root.join(format!("failure_step_{:07}.ckpt", state.step));
                    let _ = save_checkpoint(&dump, model, train, &state);
                    log::error!("training aborted at step {}: {e}; state dumped to {}", state.step, dump.display());
                }
                return Err(e);
            }
        };
        if rec.step % train.log_every == 0 {
            log::info!(
                "step {} loss_d {:.4?} loss_g {:.4?} gp {:.4?}",
                rec.step,
                rec.loss_d,
                rec.loss_g,
                rec.gp
            );
        }
        if let Some(f) = log_file.as_mut() {
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(run.unwrap().log_path(), e))?;
        }
        let go_on = on_step(&nets, &state, &rec)?;
        logs.push(rec);
        if let Some(r) = run {
            if state.step % train.checkpoint_every == 0 || state.step == train.steps || !go_on {
                save_checkpoint(&r.checkpoint_path(state.step), model, train, &state)?;
            }
        }
        if !go_on {
            break;
        }
    }
    Ok((nets, state, logs))
}

// -- model selection -----------------------------------------------------------

/// Score of one candidate in [`select_model`].
#[derive(Clone, Debug, PartialEq)]
pub struct Candidate {
    pub path: PathBuf,
    pub step: u64,
    pub mmd: MmdRow,
    /// Mean ratio to the train-vs-validation MMDs; lower is better.
    pub score: f64,
}

/// Mean ratio of the MMDs of `generated` against the validation features
/// to the `baseline` train-vs-validation MMDs.
pub fn selection_score(generated: &[Graph], val: &FeatureSet, baseline: &MmdRow, cfg: &MmdConfig) -> Result<(MmdRow, f64)> {
    let row = FeatureSet::new(generated, cfg)?.mmd_row(val, cfg)?;
    let score = ratio(&row, baseline).ok_or_else(|| Error::invalid("train-vs-validation MMDs are all zero"))?;
    Ok((row, score))
}

/// Loads each checkpoint, samples one graph per validation graph (same
/// node counts) from its averaged parameters and scores it with
/// [`selection_score`]. Returns the index of the best candidate and all
/// scores. Candidates are evaluated in parallel.
pub fn select_model(
    checkpoints: &[PathBuf],
    train: &[Graph],
    val: &[Graph],
    cfg: &MmdConfig,
    seed: u64,
) -> Result<(usize, Vec<Candidate>)> {
    if checkpoints.is_empty() {
        return Err(Error::invalid("model selection needs at least one checkpoint"));
    }
    let val_features = FeatureSet::new(val, cfg)?;
    let baseline = FeatureSet::new(train, cfg)?.mmd_row(&val_features, cfg)?;
    let counts: Vec<usize> = val.iter().map(Graph::n).collect();
    let candidates: Vec<Candidate> = checkpoints
        .par_iter()
        .map(|path| {
            let ck = load_checkpoint(path)?;
            let nets = ck.networks()?;
            let graphs = generate_graphs(&nets, &ck.state.ema, &counts, seed, None, 0.5, 16)?;
            let (mmd, score) = selection_score(&graphs, &val_features, &baseline, cfg)?;
            Ok(Candidate { path: path.clone(), step: ck.state.step, mmd, score })
        })
        .collect::<Result<_>>()?;
    let best = (0..candidates.len())
        .min_by(|&a, &b| candidates[a].score.total_cmp(&candidates[b].score))
        .expect("non-empty");
    Ok((best, candidates))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphs::is_connected;

    fn rng(seed: u64) -> Rng {
        rng::stream(seed, &[31])
    }

    fn connected_gnp(n: usize, p: f64, r: &mut Rng) -> Graph {
        loop {
            let mut g = Graph::empty(n);
            for i in 0..n {
                for j in i + 1..n {
                    if r.random::<f64>() < p {
                        g.add_edge(i, j);
                    }
                }
            }
            if is_connected(&g) {
                return g;
            }
        }
    }

    fn toy_graphs(count: usize, seed: u64) -> Vec<Graph> {
        let mut r = rng(seed);
        (0..count).map(|i| connected_gnp(5 + i % 4, 0.6, &mut r)).collect()
    }

    fn toy_train() -> TrainConfig {
        TrainConfig { batch_size: 3, steps: 6, warmup_steps: 2, anneal_steps: 2, checkpoint_every: 3, ..TrainConfig::default() }
    }

    #[test]
    fn wgan_losses_follow_their_definition() {
        let t = Tape::new();
        let c = |v: Vec<f64>| t.constant(Array::from_shape_vec(IxDyn(&[v.len()]), v).unwrap());
        let (ld, lg) = wgan_lp_losses(c(vec![1.0, 2.0]), c(vec![1.0, 2.0]), t.scalar(0.0), 5.0).unwrap();
        assert_eq!(ld.item(), 0.0);
        assert_eq!(lg.item(), -1.5);
        let (ld, _) = wgan_lp_losses(c(vec![1.0, 2.0]), c(vec![1.0, 2.0]), t.scalar(1.0), 5.0).unwrap();
        assert_eq!(ld.item(), 5.0);
        let (ld2, _) = wgan_lp_losses(c(vec![1.5, 2.5]), c(vec![1.0, 2.0]), t.scalar(0.0), 5.0).unwrap();
        assert!((ld2.item() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn penalty_of_linear_critics() {
        let t = Tape::new();
        let x = t.leaf(Array::from_shape_vec(IxDyn(&[4, 1]), vec![0.1, 0.5, -2.0, 3.0]).unwrap(), true);
        let gp = gradient_penalty(x.scale(0.5).sum_axis(1).unwrap().reshape(&[4]).unwrap(), &[x], 1.0).unwrap();
        assert_eq!(gp.item(), 0.0);
        let gp = gradient_penalty(x.scale(2.0).sum_axis(1).unwrap().reshape(&[4]).unwrap(), &[x], 3.0).unwrap();
        assert!((gp.item() - 3.0).abs() < 1e-9);
    }

    /// Analytic parameter gradient of the penalty against central differences.
    fn penalty_param_fd(stage: usize) -> f64 {
        let cfg = ModelConfig::toy(8, 2);
        let (nets, params) = Networks::new(&cfg, 3).unwrap();
        let net = DISCS[stage];
        let mut r = rng(4);
        let counts = vec![8, 6];
        let mask = NodeMask::new(counts.clone(), 8).unwrap();
        let mut u = Array3::zeros((2, 8, 2));
        for (b, &n) in counts.iter().enumerate() {
            u.slice_mut(s![b, ..n, ..]).assign(&manifold::random_stiefel(n, 2, &mut r).unwrap());
        }
        let lam = Array2::from_shape_vec((2, 2), vec![0.3, 0.9, 0.5, 1.4]).unwrap();
        let mut a = Array3::from_shape_simple_fn((2, 8, 8), || r.random::<f64>());
        for b in 0..2 {
            let m = a.index_axis(Axis(0), b).to_owned();
            a.index_axis_mut(Axis(0), b).assign(&((&m + &m.t()) * 0.5));
        }
        // Scale inputs so the gradient norm exceeds one and the penalty is active.
        let (lam, u, a) = (lam * 3.0, u * 3.0, a * 3.0);
        let gp_of = |store: &ParamStore, record: bool| -> (f64, Vec<Option<Array>>) {
            let tape = Tape::new();
            let mut cx = Ctx::new(&tape, store, true, false, rng(5));
            let leaf = |x: Array, g: bool| tape.leaf(x, g);
            let (pl, pu, pa) =
                (leaf(lam.clone().into_dyn(), stage == 0), leaf(u.clone().into_dyn(), stage == 1), leaf(a.clone().into_dyn(), stage == 2));
            let probe = [pl, pu, pa][stage];
            let scores = disc_scores(&nets, stage, &mut cx, pl, pu, pa, &mask).unwrap();
            let scores = scores.scale([1e5, 1e3, 1e3][stage]);
            let gp = gradient_penalty(scores, &[probe], 1.0).unwrap();
            let g = if record { collect_grads(&tape.backward(gp).unwrap(), cx.vars()) } else { Vec::new() };
            (gp.item(), g)
        };
        let store = params.get(net).clone();
        let (gp0, grads) = gp_of(&store, true);
        assert!(gp0 > 0.0, "penalty inactive for stage {stage}");
        let mut worst = 0.0_f64;
        let h = 1e-4;
        for (pi, g) in grads.iter().enumerate() {
            let g = g.clone().unwrap_or_else(|| Array::zeros(store.values()[pi].raw_dim()));
            for j in (0..g.len()).step_by(1 + g.len() / 3) {
                let mut up = store.clone();
                up.values_mut()[pi].as_slice_memory_order_mut().unwrap()[j] += h;
                let mut down = store.clone();
                down.values_mut()[pi].as_slice_memory_order_mut().unwrap()[j] -= h;
                let num = (gp_of(&up, false).0 - gp_of(&down, false).0) / (2.0 * h);
                let ana = g.as_slice_memory_order().unwrap()[j];
                // Biases feeding an instance norm have exactly zero gradient;
                // the floor keeps finite-difference round-off from dominating.
                let err = (ana - num).abs() / (ana.abs() + num.abs() + 1e-6 * gp0);
                worst = worst.max(err);
            }
        }
        worst
    }

    #[test]
    fn penalty_parameter_gradients_match_finite_differences() {
        for stage in 0..3 {
            let err = penalty_param_fd(stage);
            assert!(err < 1e-4, "stage {stage}: {err}");
        }
    }

    #[test]
    fn perturbation_is_identity_without_noise_and_keeps_symmetry() {
        let mut r = rng(6);
        let a = Graph::cycle(7).adjacency();
        assert_eq!(perturb_graph(&a, 7, 0.0, 0.0, &mut r), a);
        let b = perturb_graph(&a, 7, 0.3, 0.05, &mut r);
        for i in 0..7 {
            assert_eq!(b[[i, i]], 0.0);
            for j in 0..7 {
                assert_eq!(b[[i, j]], b[[j, i]]);
                assert!((0.0..=1.0).contains(&b[[i, j]]));
            }
        }
    }

    #[test]
    fn rewiring_flips_about_ten_percent_of_slots() {
        let mut r = rng(7);
        let n = 448; // 448·447/2 ≈ 10⁵ slots
        let a = Array2::zeros((n, n));
        let b = perturb_graph(&a, n, 0.1, 0.0, &mut r);
        let slots = n * (n - 1) / 2;
        let flipped = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| b[[i, j]] == 1.0).count();
        let frac = flipped as f64 / slots as f64;
        assert!((frac - 0.1).abs() < 0.01, "{frac}");
    }

    #[test]
    fn teacher_forcing_schedule() {
        let cfg = TrainConfig { warmup_steps: 100, anneal_steps: 50, ..TrainConfig::default() };
        assert!(teacher_forcing_mix(0, 16, &cfg, &mut rng(1)).iter().all(|&f| f));
        assert!((teacher_forcing_prob(150, &cfg) - 0.8).abs() < 1e-15);
        assert!((teacher_forcing_prob(125, &cfg) - 0.9).abs() < 1e-12);
        assert_eq!(teacher_forcing_prob(10_000, &cfg), 0.8);
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op_and_ema_tracks_frozen_params() {
        let mut store = ParamStore::new();
        store.add("w", Array::from_elem(IxDyn(&[3]), 1.5));
        let before = store.clone();
        let mut m = AdamMoments::zeros_like(&store);
        adam_step(&mut store, &mut m, &[Some(Array::zeros(IxDyn(&[3])))], &TrainConfig::default());
        assert_eq!(store, before);
        let mut shadow = store.clone();
        shadow.values_mut()[0].fill(0.0);
        for _ in 0..5000 {
            ema_update(&mut shadow, &store, 0.995);
        }
        assert!((shadow.values()[0][[0]] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_bank_orthonormal() {
        let graphs = toy_graphs(5, 8);
        let model = ModelConfig::toy(8, 2);
        let cfg = TrainConfig { steps: 10, ..toy_train() };
        let (nets, s1, l1) = train(&model, &cfg, &graphs, None).unwrap();
        let (_, s2, l2) = train(&model, &cfg, &graphs, None).unwrap();
        assert_eq!(l1, l2);
        assert_eq!(s1, s2);
        assert!(l1.iter().all(StepLog::is_finite));
        let bank = s1.params.get(Net::EigvecGen).get(nets.eigvec_gen.bank);
        for e in bank.outer_iter() {
            let e: Array2<f64> = e.to_owned().into_dimensionality().unwrap();
            assert!(linalg::orthonormality_error(e.view()) < 1e-6);
        }
        assert_ne!(s1.params, TrainState::new(Networks::new(&model, cfg.seed).unwrap().1).params);
    }

    #[test]
    fn checkpoints_round_trip_and_detect_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let graphs = toy_graphs(4, 9);
        let model = ModelConfig::toy(8, 2);
        let cfg = toy_train();
        let run = RunDir::new(dir.path().join("run"));
        let (_, state, _) = train(&model, &cfg, &graphs, Some(&run)).unwrap();
        let ckpts = run.checkpoints().unwrap();
        assert_eq!(ckpts.len(), 2);
        let back = load_checkpoint(ckpts.last().unwrap()).unwrap();
        assert_eq!(back.state, state);
        assert_eq!(back.model, model);
        let mut bytes = fs::read(&ckpts[0]).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        fs::write(&ckpts[0], &bytes).unwrap();
        assert!(matches!(load_checkpoint(&ckpts[0]), Err(Error::Integrity { .. })));
    }

    #[test]
    fn resuming_reproduces_the_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let graphs = toy_graphs(4, 10);
        let model = ModelConfig::toy(8, 2);
        let full = toy_train();
        let (_, reference, ref_logs) = train(&model, &full, &graphs, None).unwrap();
        let run = RunDir::new(dir.path());
        train(&model, &TrainConfig { steps: 3, ..full.clone() }, &graphs, Some(&run)).unwrap();
        let (_, resumed, _) = train(&model, &full, &graphs, Some(&run)).unwrap();
        assert_eq!(resumed, reference);
        assert_eq!(run.read_log().unwrap(), ref_logs);
    }

    #[test]
    fn selection_needs_checkpoints_and_returns_a_single_one() {
        let graphs = toy_graphs(8, 12);
        let cfg = MmdConfig::default();
        let err = select_model(&[], &graphs[..4], &graphs[4..], &cfg, 0).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
        let dir = tempfile::tempdir().unwrap();
        let run = RunDir::new(dir.path());
        let model = ModelConfig::toy(8, 2);
        train(&model, &TrainConfig { steps: 1, ..toy_train() }, &graphs, Some(&run)).unwrap();
        let ckpts = run.checkpoints().unwrap();
        let (best, scores) = select_model(&ckpts, &graphs[..4], &graphs[4..], &cfg, 0).unwrap();
        assert_eq!(best, 0);
        assert_eq!(scores[0].path, ckpts[0]);
        assert!(scores[0].score.is_finite());
    }

    #[test]
    fn copies_of_training_graphs_beat_random_adjacency() {
        let mut r = rng(13);
        let train: Vec<Graph> = (0..20).map(|_| connected_gnp(12, 0.3, &mut r)).collect();
        let val: Vec<Graph> = (0..20).map(|_| connected_gnp(12, 0.3, &mut r)).collect();
        let cfg = MmdConfig::default();
        let val_f = FeatureSet::new(&val, &cfg).unwrap();
        let baseline = FeatureSet::new(&train, &cfg).unwrap().mmd_row(&val_f, &cfg).unwrap();
        let random: Vec<Graph> = (0..20).map(|_| connected_gnp(12, 0.8, &mut r)).collect();
        let (_, copies) = selection_score(&train, &val_f, &baseline, &cfg).unwrap();
        let (_, noise) = selection_score(&random, &val_f, &baseline, &cfg).unwrap();
        assert!((copies - 1.0).abs() < 1e-9, "{copies}");
        assert!(noise > 2.0 * copies, "{noise} vs {copies}");
    }
}
