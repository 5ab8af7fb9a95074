//! Desk-scale pretraining of the clipped any-variate transformer on the
//! masked last-step regression loss `½ (y − Clip_{B_x}(read(TF(H))))²`.
//!
//! Gradients are computed by hand-written reverse mode. Conventions:
//! `relu'(0) = 0`, and the clip derivative is 1 strictly inside the bound and
//! 0 at or beyond it.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoding::{encode_anyvariate_slots, EncodedInput, TimeSeries};
use crate::error::{Error, Result};
use crate::model::{
    attn_forward_cached, param_op_norm, AttnHead, AttnLayer, AttnVariant, BlockMask, HeadCache,
    Layer, MlpLayer, TransformerParams,
};
use crate::numerics::{clip, matmul, matmul_nt, matmul_tn, relu, DenseMatrix};
use crate::synth::Dataset;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "ICL_TS_LAB_THREADS";

/// Builds the global rayon pool from [`THREADS_ENV`] when set. Safe to call
/// more than once; later calls are ignored.
pub fn configure_threads_from_env() {
    if let Some(n) = std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
    {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainGd,
    AdaptiveMoments,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            kind: OptimizerKind::AdaptiveMoments,
            beta1: 0.9,
            beta2: 0.98,
            weight_decay: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch: usize,
    pub steps: usize,
    pub mask_prob: f64,
    pub optimizer: OptimizerConfig,
    pub warmup_steps: usize,
    /// Cosine decay of the learning rate after warm-up.
    pub cosine: bool,
    /// Operator-norm budget; logged against, never enforced.
    pub norm_budget: f64,
    pub b_x: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 16,
            steps: 300,
            mask_prob: 0.15,
            optimizer: OptimizerConfig::default(),
            warmup_steps: 30,
            cosine: true,
            norm_budget: 100.0,
            b_x: 4.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_prob) {
            return Err(Error::InvalidBound(format!("mask_prob = {}", self.mask_prob)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidStep(format!("lr = {}", self.lr)));
        }
        if self.batch == 0 {
            return Err(Error::Size("batch must be >= 1".into()));
        }
        if !(self.b_x > 0.0) {
            return Err(Error::InvalidBound(format!("B_x = {}", self.b_x)));
        }
        Ok(())
    }

    /// Learning rate at zero-indexed `step`: linear warm-up, then cosine
    /// decay to 0 at `steps` when enabled.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        if !self.cosine || self.steps <= self.warmup_steps {
            return self.lr;
        }
        let progress = (step - self.warmup_steps) as f64 / (self.steps - self.warmup_steps) as f64;
        0.5 * self.lr * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// Shape of the model inputs: context length, variate slots and embedding
/// dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub t_ctx: usize,
    pub d_slots: usize,
    pub dim: usize,
}

impl WindowSpec {
    /// Encodes steps `start..start+t_ctx` of `series` with the target masked.
    pub fn encode(&self, series: &TimeSeries, start: usize) -> Result<(EncodedInput, f64)> {
        let w = series.window(start, self.t_ctx)?;
        let label = w.get(0, self.t_ctx - 1);
        Ok((encode_anyvariate_slots(&w, self.dim, self.d_slots)?, label))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub clip_bound: Option<f64>,
    /// Standard deviation multiplier of the initial weights.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    /// Desk-scale default: `D = 32`, 2 layers, 4 heads, MLP width 64.
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            layers: 2,
            heads: 4,
            hidden: 64,
            clip_bound: Some(8.0),
            init_scale: 1.0,
        }
    }
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> DenseMatrix {
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape")
}

/// Random any-variate transformer with an MLP in every layer.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> TransformerParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.dim;
    let s = cfg.init_scale;
    let qk_std = s / (d as f64).sqrt();
    let v_std = s / (d as f64 * cfg.heads.max(1) as f64).sqrt();
    let layers = (0..cfg.layers)
        .map(|_| {
            let heads = (0..cfg.heads)
                .map(|_| AttnHead {
                    v: gaussian(d, d, v_std, &mut rng),
                    q: gaussian(d, d, qk_std, &mut rng),
                    k: gaussian(d, d, qk_std, &mut rng),
                    u1: 0.0,
                    u2: 0.0,
                })
                .collect();
            let mlp = (cfg.hidden > 0).then(|| MlpLayer {
                w1: gaussian(cfg.hidden, d, s * (2.0 / d as f64).sqrt(), &mut rng),
                w2: gaussian(d, cfg.hidden, 0.5 * s / (cfg.hidden as f64).sqrt(), &mut rng),
            });
            Layer {
                attn: AttnLayer {
                    heads,
                    variant: AttnVariant::AnyVariate,
                },
                mlp,
            }
        })
        .collect();
    TransformerParams {
        layers,
        clip_bound: cfg.clip_bound,
    }
}

/// Values saved during the forward pass of one layer.
struct LayerCache {
    input: DenseMatrix,
    heads: Vec<HeadCache>,
    attn_out: DenseMatrix,
    /// `W1 · attn_out` when an MLP is present.
    pre_hidden: Option<DenseMatrix>,
    hidden: Option<DenseMatrix>,
    /// Output before the clip.
    pre_clip: DenseMatrix,
}

struct ForwardTrace {
    layers: Vec<LayerCache>,
    output: DenseMatrix,
}

fn forward_trace(
    params: &TransformerParams,
    h: &DenseMatrix,
    mask: &BlockMask,
) -> Result<ForwardTrace> {
    let mut cur = h.clone();
    let mut layers = Vec::with_capacity(params.layers.len());
    for (index, layer) in params.layers.iter().enumerate() {
        let step = || -> Result<(LayerCache, DenseMatrix)> {
            let (attn_out, heads) = attn_forward_cached(&layer.attn, &cur, Some(mask))?;
            let (pre_hidden, hidden, pre_clip) = match &layer.mlp {
                Some(mlp) => {
                    let z = matmul(&mlp.w1, &attn_out)?;
                    let a = relu(&z);
                    let out = attn_out.add(&matmul(&mlp.w2, &a)?)?;
                    (Some(z), Some(a), out)
                }
                None => (None, None, attn_out.clone()),
            };
            let next = match params.clip_bound {
                Some(b) => clip(&pre_clip, b)?,
                None => pre_clip.clone(),
            };
            Ok((
                LayerCache {
                    input: cur.clone(),
                    heads,
                    attn_out,
                    pre_hidden,
                    hidden,
                    pre_clip,
                },
                next,
            ))
        };
        let (cache, next) = step().map_err(|e| e.at_layer(index))?;
        layers.push(cache);
        cur = next;
    }
    Ok(ForwardTrace {
        layers,
        output: cur,
    })
}

fn read_pred(enc: &EncodedInput, out: &DenseMatrix) -> f64 {
    out.get(enc.layout.value_row, enc.layout.target_col)
}

/// `Clip_{B_x}(read(TF(H)))`.
pub fn predict_clipped(params: &TransformerParams, enc: &EncodedInput, b_x: f64) -> Result<f64> {
    if !(b_x > 0.0) {
        return Err(Error::InvalidBound(format!("B_x = {b_x}")));
    }
    let out = crate::model::tf_forward(params, &enc.h, Some(&enc.mask))?;
    Ok(read_pred(enc, &out).clamp(-b_x, b_x))
}

/// `½ (y − Clip_{B_x}(read(TF(H))))²`.
pub fn loss_mse(params: &TransformerParams, enc: &EncodedInput, label: f64, b_x: f64) -> Result<f64> {
    Ok(0.5 * (label - predict_clipped(params, enc, b_x)?).powi(2))
}

/// Zero-valued parameters with the shapes of `params`.
pub fn zeros_like(params: &TransformerParams) -> TransformerParams {
    let mut g = params.clone();
    for_each_value_mut(&mut g, |x| *x = 0.0);
    g
}

fn for_each_value_mut(p: &mut TransformerParams, mut f: impl FnMut(&mut f64)) {
    for layer in &mut p.layers {
        for h in &mut layer.attn.heads {
            h.v.data_mut().iter_mut().for_each(&mut f);
            h.q.data_mut().iter_mut().for_each(&mut f);
            h.k.data_mut().iter_mut().for_each(&mut f);
            f(&mut h.u1);
            f(&mut h.u2);
        }
        if let Some(m) = &mut layer.mlp {
            m.w1.data_mut().iter_mut().for_each(&mut f);
            m.w2.data_mut().iter_mut().for_each(&mut f);
        }
    }
}

/// All trainable values in a fixed order: per layer, per head `V, Q, K, u1,
/// u2`, then `W1, W2`.
pub fn flatten(p: &TransformerParams) -> Vec<f64> {
    let mut out = Vec::new();
    let mut q = p.clone();
    for_each_value_mut(&mut q, |x| out.push(*x));
    out
}

pub fn unflatten_into(p: &mut TransformerParams, values: &[f64]) -> Result<()> {
    let n = flatten(p).len();
    if n != values.len() {
        return Err(Error::Dimension(format!("{} values for {n} parameters", values.len())));
    }
    let mut it = values.iter();
    for_each_value_mut(p, |x| *x = *it.next().expect("length checked"));
    Ok(())
}

/// Named contiguous ranges of [`flatten`]'s output.
pub fn param_blocks(p: &TransformerParams) -> Vec<(String, std::ops::Range<usize>)> {
    let mut out = Vec::new();
    let mut at = 0;
    let mut push = |name: String, len: usize| {
        out.push((name, at..at + len));
        at += len;
    };
    for (l, layer) in p.layers.iter().enumerate() {
        for (m, h) in layer.attn.heads.iter().enumerate() {
            push(format!("layer{l}.head{m}.V"), h.v.data().len());
            push(format!("layer{l}.head{m}.Q"), h.q.data().len());
            push(format!("layer{l}.head{m}.K"), h.k.data().len());
            push(format!("layer{l}.head{m}.u1"), 1);
            push(format!("layer{l}.head{m}.u2"), 1);
        }
        if let Some(mlp) = &layer.mlp {
            push(format!("layer{l}.W1"), mlp.w1.data().len());
            push(format!("layer{l}.W2"), mlp.w2.data().len());
        }
    }
    out
}

/// Loss and its gradient with respect to every parameter.
pub fn loss_and_grad(
    params: &TransformerParams,
    enc: &EncodedInput,
    label: f64,
    b_x: f64,
) -> Result<(f64, TransformerParams)> {
    if !(b_x > 0.0) {
        return Err(Error::InvalidBound(format!("B_x = {b_x}")));
    }
    let trace = forward_trace(params, &enc.h, &enc.mask)?;
    let raw = read_pred(enc, &trace.output);
    let pred = raw.clamp(-b_x, b_x);
    let loss = 0.5 * (label - pred).powi(2);
    let mut grads = zeros_like(params);
    let dpred = if raw.abs() < b_x { pred - label } else { 0.0 };
    let (dim, n) = enc.h.shape();
    let mut g = DenseMatrix::zeros(dim, n);
    g.set(enc.layout.value_row, enc.layout.target_col, dpred);
    if dpred == 0.0 {
        return Ok((loss, grads));
    }
    let inv_n = 1.0 / n as f64;
    for (l, (layer, cache)) in params.layers.iter().zip(&trace.layers).enumerate().rev() {
        // clip
        if let Some(b) = params.clip_bound {
            for (gv, &x) in g.data_mut().iter_mut().zip(cache.pre_clip.data()) {
                if x.abs() >= b {
                    *gv = 0.0;
                }
            }
        }
        // MLP
        if let (Some(mlp), Some(z), Some(a)) = (&layer.mlp, &cache.pre_hidden, &cache.hidden) {
            let gm = grads.layers[l].mlp.as_mut().expect("same shape");
            gm.w2 = matmul_nt(&g, a)?;
            let mut dz = matmul_tn(&mlp.w2, &g)?;
            for (dv, &zv) in dz.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *dv = 0.0;
                }
            }
            gm.w1 = matmul_nt(&dz, &cache.attn_out)?;
            g.add_assign(&matmul_tn(&mlp.w1, &dz)?)?;
        }
        // attention
        let x = &cache.input;
        let mut dx = g.clone();
        for (m, (head, hc)) in layer.attn.heads.iter().zip(&cache.heads).enumerate() {
            let a = relu(&hc.scores);
            let dvh = matmul_nt(&g, &a)?.scale(inv_n);
            let mut ds = matmul_tn(&hc.vh, &g)?.scale(inv_n);
            for (dv, &s) in ds.data_mut().iter_mut().zip(hc.scores.data()) {
                if s <= 0.0 {
                    *dv = 0.0;
                }
            }
            let dqh = matmul_nt(&hc.kh, &ds)?;
            let dkh = matmul(&hc.qh, &ds)?;
            let gh = &mut grads.layers[l].attn.heads[m];
            if layer.attn.variant == AttnVariant::AnyVariate {
                let (mut same, mut cross) = (0.0, 0.0);
                for s in 0..n {
                    for r in 0..n {
                        if enc.mask.same_block(s, r) {
                            same += ds.get(s, r);
                        } else {
                            cross += ds.get(s, r);
                        }
                    }
                }
                gh.u1 = same;
                gh.u2 = cross;
            }
            gh.v = matmul_nt(&dvh, x)?;
            gh.q = matmul_nt(&dqh, x)?;
            gh.k = matmul_nt(&dkh, x)?;
            dx.add_assign(&matmul_tn(&head.v, &dvh)?)?;
            dx.add_assign(&matmul_tn(&head.q, &dqh)?)?;
            dx.add_assign(&matmul_tn(&head.k, &dkh)?)?;
        }
        g = dx;
    }
    Ok((loss, grads))
}

/// Gradient of [`loss_mse`].
pub fn grad(
    params: &TransformerParams,
    enc: &EncodedInput,
    label: f64,
    b_x: f64,
) -> Result<TransformerParams> {
    Ok(loss_and_grad(params, enc, label, b_x)?.1)
}

/// Sign pattern of every ReLU and clip in the forward pass, used to detect
/// finite-difference probes that cross a kink.
fn activation_pattern(
    params: &TransformerParams,
    enc: &EncodedInput,
    b_x: f64,
) -> Result<Vec<bool>> {
    let trace = forward_trace(params, &enc.h, &enc.mask)?;
    let mut bits = Vec::new();
    for c in &trace.layers {
        for h in &c.heads {
            bits.extend(h.scores.data().iter().map(|&s| s > 0.0));
        }
        if let Some(z) = &c.pre_hidden {
            bits.extend(z.data().iter().map(|&s| s > 0.0));
        }
        if let Some(b) = params.clip_bound {
            bits.extend(c.pre_clip.data().iter().map(|&s| s.abs() < b));
        }
    }
    bits.push(read_pred(enc, &trace.output).abs() < b_x);
    Ok(bits)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCheck {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose probes crossed a ReLU or clip kink.
    pub excluded: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub blocks: Vec<BlockCheck>,
    pub step_size: f64,
}

/// Entry cap for [`finite_diff_check`].
pub const MAX_CHECK_ENTRIES: usize = 10_000;

/// Denominator floor of the relative error `|a − n| / max(|a|, |n|, floor)`.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Central differences on every parameter entry against [`grad`].
pub fn finite_diff_check(
    params: &TransformerParams,
    enc: &EncodedInput,
    label: f64,
    b_x: f64,
    h: f64,
) -> Result<GradCheckReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidStep(format!("h = {h}")));
    }
    let theta = flatten(params);
    if theta.len() > MAX_CHECK_ENTRIES {
        return Err(Error::Size(format!(
            "{} parameters exceed the {MAX_CHECK_ENTRIES} entry cap",
            theta.len()
        )));
    }
    let analytic = flatten(&grad(params, enc, label, b_x)?);
    let base = activation_pattern(params, enc, b_x)?;
    let mut probe = params.clone();
    let mut eval = |values: &[f64]| -> Result<(f64, bool)> {
        unflatten_into(&mut probe, values)?;
        let l = loss_mse(&probe, enc, label, b_x)?;
        let same = activation_pattern(&probe, enc, b_x)? == base;
        Ok((l, same))
    };
    let mut blocks = Vec::new();
    let mut overall = 0.0f64;
    for (name, range) in param_blocks(params) {
        let mut block = BlockCheck {
            name,
            max_rel_err: 0.0,
            checked: 0,
            excluded: 0,
        };
        for k in range {
            let mut plus = theta.clone();
            plus[k] += h;
            let mut minus = theta.clone();
            minus[k] -= h;
            let (lp, sp) = eval(&plus)?;
            let (lm, sm) = eval(&minus)?;
            if !(sp && sm) {
                block.excluded += 1;
                continue;
            }
            let numeric = (lp - lm) / (2.0 * h);
            let a = analytic[k];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
            block.max_rel_err = block.max_rel_err.max(rel);
            block.checked += 1;
        }
        overall = overall.max(block.max_rel_err);
        blocks.push(block);
    }
    Ok(GradCheckReport {
        max_rel_err: overall,
        blocks,
        step_size: h,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub train_loss: f64,
    pub op_norm: f64,
    pub lr: f64,
}

/// Draws one training example: a random window of a random series with the
/// last target step masked and earlier target steps zeroed with probability
/// `mask_prob`.
pub fn sample_example(
    dataset: &Dataset,
    window: &WindowSpec,
    mask_prob: f64,
    rng: &mut impl Rng,
) -> Result<(EncodedInput, f64)> {
    let s = &dataset.series[rng.gen_range(0..dataset.series.len())];
    if s.len() < window.t_ctx {
        return Err(Error::Size(format!(
            "series of length {} is shorter than the context {}",
            s.len(),
            window.t_ctx
        )));
    }
    let start = rng.gen_range(0..=s.len() - window.t_ctx);
    let (mut enc, label) = window.encode(s, start)?;
    for c in 0..window.t_ctx - 1 {
        if rng.gen::<f64>() < mask_prob {
            enc.h.set(enc.layout.value_row, c, 0.0);
        }
    }
    Ok((enc, label))
}

struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Optimises `params0` on random windows of `dataset`.
pub fn train(
    params0: &TransformerParams,
    dataset: &Dataset,
    cfg: &TrainConfig,
    window: &WindowSpec,
) -> Result<(TransformerParams, Vec<HistoryRow>)> {
    cfg.validate()?;
    if dataset.series.is_empty() {
        return Err(Error::Size("empty dataset".into()));
    }
    let mut params = params0.clone();
    let mut theta = flatten(&params);
    let mut state = AdamState {
        m: vec![0.0; theta.len()],
        v: vec![0.0; theta.len()],
        t: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = (0..cfg.batch)
            .map(|_| sample_example(dataset, window, cfg.mask_prob, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let results = batch
            .par_iter()
            .map(|(enc, y)| loss_and_grad(&params, enc, *y, cfg.b_x))
            .collect::<Result<Vec<_>>>()?;
        let mut loss = 0.0;
        let mut g = vec![0.0; theta.len()];
        for (l, gr) in &results {
            loss += l;
            for (a, b) in g.iter_mut().zip(flatten(gr)) {
                *a += b;
            }
        }
        let scale = 1.0 / cfg.batch as f64;
        loss *= scale;
        g.iter_mut().for_each(|x| *x *= scale);
        if !loss.is_finite() || g.iter().any(|x| !x.is_finite()) {
            return Err(Error::Divergence { step });
        }
        let lr = cfg.lr_at(step);
        match cfg.optimizer.kind {
            OptimizerKind::PlainGd => {
                for (p, gi) in theta.iter_mut().zip(&g) {
                    *p -= lr * gi;
                }
            }
            OptimizerKind::AdaptiveMoments => {
                let o = &cfg.optimizer;
                state.t += 1;
                let bc1 = 1.0 - o.beta1.powi(state.t);
                let bc2 = 1.0 - o.beta2.powi(state.t);
                for k in 0..theta.len() {
                    state.m[k] = o.beta1 * state.m[k] + (1.0 - o.beta1) * g[k];
                    state.v[k] = o.beta2 * state.v[k] + (1.0 - o.beta2) * g[k] * g[k];
                    let mh = state.m[k] / bc1;
                    let vh = state.v[k] / bc2;
                    theta[k] -= lr * (mh / (vh.sqrt() + 1e-8) + o.weight_decay * theta[k]);
                }
            }
        }
        unflatten_into(&mut params, &theta)?;
        history.push(HistoryRow {
            step,
            train_loss: loss,
            op_norm: param_op_norm(&params).value,
            lr,
        });
    }
    Ok((params, history))
}

/// Mean loss over the windows ending at steps `t_ctx−1, t_ctx−1+stride, …`
/// of every test series.
pub fn eval_positions(
    params: &TransformerParams,
    test: &Dataset,
    b_x: f64,
    window: &WindowSpec,
    stride: usize,
) -> Result<f64> {
    let stride = stride.max(1);
    let starts: Vec<(usize, usize)> = test
        .series
        .iter()
        .enumerate()
        .flat_map(|(i, s)| {
            let last = s.len().saturating_sub(window.t_ctx);
            let n = if s.len() >= window.t_ctx { last / stride + 1 } else { 0 };
            (0..n).map(move |k| (i, k * stride))
        })
        .collect();
    if starts.is_empty() {
        return Ok(0.0);
    }
    let losses = starts
        .par_iter()
        .map(|&(i, start)| {
            let (enc, y) = window.encode(&test.series[i], start)?;
            loss_mse(params, &enc, y, b_x)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}

/// Mean loss over every test position.
pub fn eval_test_loss(
    params: &TransformerParams,
    test: &Dataset,
    b_x: f64,
    window: &WindowSpec,
) -> Result<f64> {
    eval_positions(params, test, b_x, window, 1)
}
