//! Explicit transformer weights that run least-squares gradient descent in
//! context on an encoded autoregressive series.
//!
//! Pipeline: lag shift (standard attention for the univariate encoding,
//! block-confined any-variate attention otherwise), a stacking layer that
//! gathers every variate's lags into the target block, `L2` gradient steps,
//! a read-out layer writing `⟨w, φ_T⟩` into the target slot, and two optional
//! layers producing the mean squared residual.
//!
//! Row map of the embedding (top to bottom): value, `q_max` lag rows, the
//! feature rows (any-variate only, variate-major then lag), the weight rows,
//! a residual row, a variance row, free rows, then the encoder's index rows.
//!
//! Selection uses integer-valued "gate" coordinates scaled by a power of two
//! `G`: a pair that should interact scores exactly `0` on the gate part and a
//! pair that should not scores at most `-G`, which outweighs any data term.
//! Gate coordinates come before data coordinates so the cancellation is exact.
//! Linear updates use the pair of heads `relu(t) - relu(-t) = t`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::baseline::{gram_extremes, in_context_split, ls_closed_form};
use crate::encoding::{
    encode_anyvariate_slots, encode_univariate, EncodedInput, EncodingKind, Layout, TimeSeries,
};
use crate::error::{Error, Result};
use crate::model::{
    param_op_norm, AttnHead, AttnLayer, AttnVariant, Layer, TransformerParams,
};
use crate::numerics::{norm2, spectral_norm_or_bound, DenseMatrix};

/// Row regions the constructed layers read and write.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IclLayout {
    pub enc: Layout,
    pub q_max: usize,
    /// Lags actually fitted (`1 <= lags <= q_max`); rows for larger lags stay 0.
    pub lags: usize,
    pub lag_rows: Range<usize>,
    pub feature_rows: Range<usize>,
    pub weight_rows: Range<usize>,
    pub resid_row: usize,
    pub sigma_row: usize,
}

/// Construction stages, in pipeline order, for capacity checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Shift,
    Stack,
    Gd,
    Mle,
}

impl IclLayout {
    fn with_encoding(enc: Layout, q_max: usize, lags: usize) -> Result<Self> {
        if lags == 0 || lags > q_max {
            return Err(Error::Lag { q: lags, t: enc.t });
        }
        if enc.t <= q_max + 1 {
            return Err(Error::Lag { q: q_max, t: enc.t });
        }
        let lag_rows = 1..1 + q_max;
        let feature_rows = match enc.kind {
            EncodingKind::Univariate => lag_rows.clone(),
            EncodingKind::AnyVariate => lag_rows.end..lag_rows.end + q_max * enc.d_slots,
        };
        let p = feature_rows.len();
        let w_start = feature_rows.end.max(lag_rows.end);
        let weight_rows = w_start..w_start + p;
        Ok(IclLayout {
            resid_row: weight_rows.end,
            sigma_row: weight_rows.end + 1,
            enc,
            q_max,
            lags,
            lag_rows,
            feature_rows,
            weight_rows,
        })
    }

    /// Layout for the univariate encoding of a `t`-step series.
    pub fn univariate(t: usize, dim: usize, q_max: usize, lags: usize) -> Result<Self> {
        if dim < t + 3 {
            return Err(capacity(t + 3, dim, "D >= T + 3"));
        }
        IclLayout::with_encoding(Layout::univariate(t, dim), q_max, lags)
    }

    /// Layout for the any-variate encoding of `d <= d_slots` variates.
    pub fn any_variate(
        t: usize,
        dim: usize,
        d: usize,
        d_slots: usize,
        q_max: usize,
        lags: usize,
    ) -> Result<Self> {
        if d == 0 || d > d_slots {
            return Err(capacity(d, d_slots, "d <= d_max"));
        }
        if dim < t + d_slots + 1 {
            return Err(capacity(t + d_slots + 1, dim, "D >= T + d_max + 1"));
        }
        IclLayout::with_encoding(Layout::any_variate(t, d, d_slots, dim), q_max, lags)
    }

    /// Smallest univariate layout that fits `stage`.
    pub fn univariate_min(t: usize, q_max: usize, lags: usize, stage: Stage) -> Result<Self> {
        let probe = IclLayout::univariate(t, probe_dim(t, q_max, 1), q_max, lags)?;
        IclLayout::univariate(t, probe.required_dim(stage).0, q_max, lags)
    }

    /// Smallest any-variate layout that fits `stage`.
    pub fn any_variate_min(
        t: usize,
        d: usize,
        d_slots: usize,
        q_max: usize,
        lags: usize,
        stage: Stage,
    ) -> Result<Self> {
        let probe = IclLayout::any_variate(t, probe_dim(t, q_max, d_slots), d, d_slots, q_max, lags)?;
        let dim = probe.required_dim(stage).0;
        IclLayout::any_variate(t, dim, d, d_slots, q_max, lags)
    }

    pub fn dim(&self) -> usize {
        self.enc.dim
    }

    pub fn t(&self) -> usize {
        self.enc.t
    }

    pub fn n_tokens(&self) -> usize {
        self.enc.n_tokens()
    }

    pub fn is_univariate(&self) -> bool {
        self.enc.kind == EncodingKind::Univariate
    }

    /// Number of regression features stored per column.
    pub fn n_features(&self) -> usize {
        self.feature_rows.len()
    }

    /// Training windows seen by the gradient layers: steps `lags..T-1`.
    pub fn n_samples(&self) -> usize {
        self.t() - self.lags - 1
    }

    pub fn lag_row(&self, m: usize) -> usize {
        self.lag_rows.start + m - 1
    }

    /// Feature row of variate `i`, lag `m >= 1`.
    pub fn feature_row(&self, i: usize, m: usize) -> usize {
        self.feature_rows.start + i * self.q_max + m - 1
    }

    /// Rows the stage needs and the inequality that expresses it.
    pub fn required_dim(&self, stage: Stage) -> (usize, String) {
        let t = self.t();
        let (q, ds) = (self.q_max, self.enc.d_slots);
        match (self.enc.kind, stage) {
            (EncodingKind::Univariate, Stage::Shift) => (q + t + 3, "D >= q_max + T + 3".into()),
            (EncodingKind::AnyVariate, Stage::Shift) => {
                (q + t + ds + 1, "D >= q_max + T + d_max + 1".into())
            }
            (EncodingKind::Univariate, Stage::Stack) => (q + t + 3, "D >= q_max + T + 3".into()),
            (EncodingKind::AnyVariate, Stage::Stack) => (
                self.feature_rows.end + t + ds,
                "D >= 1 + q_max + q_max*d_max + T + d_max".into(),
            ),
            (EncodingKind::Univariate, Stage::Gd) => {
                (self.weight_rows.end + t + 2, "D >= 1 + 2*q_max + T + 2".into())
            }
            (EncodingKind::AnyVariate, Stage::Gd) => (
                self.weight_rows.end + t + ds,
                "D >= 1 + q_max + 2*q_max*d_max + T + d_max".into(),
            ),
            (EncodingKind::Univariate, Stage::Mle) => {
                (self.sigma_row + 1 + t + 2, "D >= 3 + 2*q_max + T + 2".into())
            }
            (EncodingKind::AnyVariate, Stage::Mle) => (
                self.sigma_row + 1 + t + ds,
                "D >= 3 + q_max + 2*q_max*d_max + T + d_max".into(),
            ),
        }
    }

    pub fn check(&self, stage: Stage) -> Result<()> {
        let (need, rule) = self.required_dim(stage);
        if self.dim() < need {
            return Err(capacity(need, self.dim(), &rule));
        }
        Ok(())
    }

    /// Encodes a series with this layout's encoder.
    pub fn encode(&self, series: &TimeSeries) -> Result<EncodedInput> {
        if series.len() != self.t() || series.d() != self.enc.d {
            return Err(Error::Layout(format!(
                "series is {}x{}, layout expects {}x{}",
                series.d(),
                series.len(),
                self.enc.d,
                self.t()
            )));
        }
        match self.enc.kind {
            EncodingKind::Univariate => encode_univariate(series, self.dim()),
            EncodingKind::AnyVariate => encode_anyvariate_slots(series, self.dim(), self.enc.d_slots),
        }
    }
}

fn probe_dim(t: usize, q_max: usize, d_slots: usize) -> usize {
    4 + q_max + 2 * q_max * d_slots + t + d_slots + 2
}

fn capacity(required: usize, available: usize, rule: &str) -> Error {
    Error::Capacity {
        required,
        available,
        detail: rule.to_string(),
    }
}

/// Dense row vector of a linear functional given as `(row, coefficient)` terms.
fn functional(dim: usize, terms: &[(usize, f64)], scale: f64) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    for &(r, c) in terms {
        v[r] += scale * c;
    }
    v
}

fn add_row(m: &mut DenseMatrix, row: usize, v: &[f64]) {
    for (c, x) in v.iter().enumerate() {
        if *x != 0.0 {
            m.add_at(row, c, *x);
        }
    }
}

/// Equals 0 on target-block columns at steps `lags..T-1`, at most -1 elsewhere.
fn sample_gate(l: &IclLayout) -> Vec<f64> {
    let dim = l.dim();
    let mut v = functional(dim, &l.enc.target_functional(), 1.0);
    let c = functional(dim, &l.enc.const_functional(), -2.0);
    v.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
    for s in l.lags..l.t() - 1 {
        v[l.enc.time_row(s)] += 1.0;
    }
    v
}

/// Equals 0 on the target column, at most -1 elsewhere.
fn query_gate(l: &IclLayout) -> Vec<f64> {
    let dim = l.dim();
    let mut v = functional(dim, &l.enc.target_functional(), 1.0);
    let c = functional(dim, &l.enc.const_functional(), -2.0);
    v.iter_mut().zip(&c).for_each(|(a, b)| *a += b);
    v[l.enc.time_row(l.t() - 1)] += 1.0;
    v
}

/// Power-of-two gate scale exceeding every data term the gated heads see,
/// given feature-norm bound `b_x` and weight-norm bound `b_w`.
pub fn gate_constant(b_x: f64, b_w: f64) -> f64 {
    let raw = 4.0 * (1.0 + b_w.abs()) * (1.0 + b_x.abs()).powi(2);
    2f64.powi(raw.log2().ceil() as i32)
}

fn shift_head(l: &IclLayout, m: usize) -> AttnHead {
    let dim = l.dim();
    let t = l.t();
    let mut h = AttnHead::zeros(dim);
    for s in 0..t {
        h.q.set(l.enc.time_row(s), l.enc.time_row(s), 1.0);
        h.k.set(l.enc.time_row(s), l.enc.time_row((s + m) % t), 1.0);
    }
    if m <= l.lags {
        h.v.set(l.lag_row(m), l.enc.value_row, l.n_tokens() as f64);
    }
    h
}

/// Shift heads `m = 1..=q_max` split into `split` layers of consecutive heads.
/// Any-variate layouts get block-confined attention.
pub fn build_shift_layers(l: &IclLayout, split: usize) -> Result<Vec<AttnLayer>> {
    l.check(Stage::Shift)?;
    if split == 0 {
        return Err(Error::InvalidBound("split must be at least 1".into()));
    }
    let heads: Vec<AttnHead> = (1..=l.q_max).map(|m| shift_head(l, m)).collect();
    let per = heads.len().div_ceil(split).max(1);
    let mut layers = Vec::new();
    let mut chunks: Vec<Vec<AttnHead>> = heads.chunks(per).map(<[AttnHead]>::to_vec).collect();
    if chunks.is_empty() {
        chunks.push(Vec::new());
    }
    for chunk in chunks {
        let layer = match l.enc.kind {
            EncodingKind::Univariate => AttnLayer {
                heads: chunk,
                variant: AttnVariant::Standard,
            },
            EncodingKind::AnyVariate => confine_to_blocks(chunk),
        };
        layers.push(layer);
    }
    Ok(layers)
}

/// Any-variate layer with `u1 = 0` and `u2` below minus every possible
/// cross-block score. Shift heads read only the time one-hot rows, whose
/// column norm is exactly 1, so `|<Q h_s, K h_r>| <= ‖Q‖ ‖K‖`.
fn confine_to_blocks(heads: Vec<AttnHead>) -> AttnLayer {
    let heads = heads
        .into_iter()
        .map(|mut h| {
            let qk = spectral_norm_or_bound(&h.q).value * spectral_norm_or_bound(&h.k).value;
            h.u1 = 0.0;
            h.u2 = -(qk + 1.0);
            h
        })
        .collect();
    AttnLayer {
        heads,
        variant: AttnVariant::AnyVariate,
    }
}

/// Univariate lag-shift layer: `q_max` standard heads writing `x_{i-m}` into
/// lag row `m` of column `i`.
pub fn build_shift_layer(q_max: usize, t: usize, dim: usize) -> Result<AttnLayer> {
    if dim < q_max + t + 3 {
        return Err(capacity(q_max + t + 3, dim, "D >= q_max + T + 3"));
    }
    if q_max == 0 {
        return Ok(AttnLayer {
            heads: Vec::new(),
            variant: AttnVariant::Standard,
        });
    }
    let l = IclLayout::univariate(t, dim, q_max, q_max)?;
    Ok(build_shift_layers(&l, 1)?.remove(0))
}

/// Block-confined lag shift for the any-variate encoding of `d` variates.
pub fn build_groupwise_shift(q_max: usize, t: usize, d: usize, dim: usize) -> Result<AttnLayer> {
    if dim < q_max + t + d + 1 {
        return Err(capacity(q_max + t + d + 1, dim, "D >= q_max + T + d + 1"));
    }
    if q_max == 0 {
        return Ok(AttnLayer {
            heads: Vec::new(),
            variant: AttnVariant::AnyVariate,
        });
    }
    let l = IclLayout::any_variate(t, dim, d, d, q_max, q_max)?;
    Ok(build_shift_layers(&l, 1)?.remove(0))
}

/// One head per variate slot copying that variate's lag rows into the
/// feature rows of the target block at the same step.
pub fn build_stack(l: &IclLayout) -> Result<AttnLayer> {
    if l.is_univariate() {
        return Err(Error::Layout("stacking needs the any-variate encoding".into()));
    }
    l.check(Stage::Stack)?;
    let dim = l.dim();
    let n = l.n_tokens() as f64;
    let vars = l.enc.variate_rows.clone().expect("any-variate");
    let cst = functional(dim, &l.enc.const_functional(), 1.0);
    let mut heads = Vec::with_capacity(l.enc.d_slots);
    for i in 0..l.enc.d_slots {
        let mut h = AttnHead::zeros(dim);
        // score = [t_s = t_r] + v_i(s) + v_1(r) - 2
        h.q.set(0, vars.start + i, 1.0);
        add_row(&mut h.k, 0, &cst);
        add_row(&mut h.q, 1, &cst);
        let mut recv = functional(dim, &l.enc.const_functional(), -2.0);
        recv[vars.start] += 1.0;
        add_row(&mut h.k, 1, &recv);
        for s in 0..l.t() {
            let r = l.enc.time_row(s);
            h.q.set(r, r, 1.0);
            h.k.set(r, r, 1.0);
        }
        for m in 1..=l.lags {
            h.v.set(l.feature_row(i, m), l.lag_row(m), n);
        }
        heads.push(h);
    }
    Ok(AttnLayer {
        heads,
        variant: AttnVariant::Standard,
    })
}

/// [`build_stack`] for `d_max` variate slots and `q_max` lags.
pub fn build_stack_layer(q_max: usize, d_max: usize, t: usize, dim: usize) -> Result<AttnLayer> {
    let l = IclLayout::any_variate(t, dim, d_max, d_max, q_max, q_max)?;
    build_stack(&l)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdIclSpec {
    pub q_max: usize,
    pub d_max: usize,
    /// Lag order fitted in context.
    pub lags: usize,
    pub l2: usize,
    pub eta: f64,
    pub b_w: f64,
    pub b_x: f64,
    pub epsilon: f64,
    pub alpha: f64,
    pub beta: f64,
    pub kappa: f64,
    /// Shift heads are spread over this many layers.
    #[serde(default = "one")]
    pub split_heads: usize,
    #[serde(default)]
    pub with_mle: bool,
}

fn one() -> usize {
    1
}

/// `⌈2κ ln(B_x B_w / 2ε)⌉`, at least 1.
pub fn gd_layers_for(kappa: f64, b_x: f64, b_w: f64, epsilon: f64) -> usize {
    let v = (2.0 * kappa * (b_x * b_w / (2.0 * epsilon)).ln()).ceil();
    if v.is_finite() && v >= 1.0 {
        v as usize
    } else {
        1
    }
}

impl GdIclSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidStep(format!("step size {}", self.eta)));
        }
        if self.lags == 0 || self.lags > self.q_max {
            return Err(Error::Lag {
                q: self.lags,
                t: self.q_max,
            });
        }
        if !(self.b_x > 0.0 && self.b_w > 0.0) {
            return Err(Error::InvalidBound(format!(
                "B_x = {}, B_w = {}",
                self.b_x, self.b_w
            )));
        }
        if self.split_heads == 0 {
            return Err(Error::InvalidBound("split_heads must be >= 1".into()));
        }
        Ok(())
    }

    /// Spec fitted to one series: `η = 1/β` from the empirical Gram of the
    /// in-context windows and `L2` from the layer-count formula, unless
    /// `l2` is given.
    pub fn for_series(
        series: &TimeSeries,
        q_max: usize,
        d_max: usize,
        lags: usize,
        epsilon: f64,
        l2: Option<usize>,
    ) -> Result<GdIclSpec> {
        let (data, _) = in_context_split(series, lags)?;
        let (alpha, beta) = gram_extremes(&data);
        let w_hat = ls_closed_form(&data, 0.0)?;
        let b_w = norm2(&w_hat).max(1.0);
        let b_x = realized_input_bound(series, lags);
        let kappa = if alpha > 0.0 { beta / alpha } else { f64::INFINITY };
        let l2 = l2.unwrap_or_else(|| gd_layers_for(kappa, b_x, b_w, epsilon));
        Ok(GdIclSpec {
            q_max,
            d_max,
            lags,
            l2,
            eta: 1.0 / beta,
            b_w,
            b_x,
            epsilon,
            alpha,
            beta,
            kappa,
            split_heads: 1,
            with_mle: false,
        })
    }
}

/// Largest of the lag-feature norms and the absolute values of the series.
pub fn realized_input_bound(series: &TimeSeries, lags: usize) -> f64 {
    let feat = crate::synth::realized_feature_bound(series, lags);
    let vals = series.values().max_abs();
    feat.max(vals).max(1e-12)
}

/// Gradient-step layers on the regression loss, reading features and labels
/// from the target block and keeping `w` identical in every column.
pub fn build_gd_layers(spec: &GdIclSpec, l: &IclLayout) -> Result<Vec<AttnLayer>> {
    spec.validate()?;
    l.check(Stage::Gd)?;
    let dim = l.dim();
    let p = l.n_features();
    let g = gate_constant(spec.b_x, spec.b_w);
    let c = spec.eta * l.n_tokens() as f64 / l.n_samples() as f64;
    let gate = sample_gate(l);
    let cst = l.enc.const_functional();
    let head = |sign: f64| {
        let mut h = AttnHead::zeros(dim);
        add_row(&mut h.q, 0, &gate);
        add_row(&mut h.k, 0, &functional(dim, &cst, g));
        for k in 0..p {
            h.q.set(1 + k, l.feature_rows.start + k, 1.0);
            h.k.set(1 + k, l.weight_rows.start + k, sign);
            h.v.set(l.weight_rows.start + k, l.feature_rows.start + k, -sign * c);
        }
        h.q.set(1 + p, l.enc.value_row, 1.0);
        add_row(&mut h.k, 1 + p, &functional(dim, &cst, -sign));
        h
    };
    let layer = AttnLayer {
        heads: vec![head(1.0), head(-1.0)],
        variant: AttnVariant::Standard,
    };
    Ok(vec![layer; spec.l2])
}

/// Writes `⟨w, φ_T⟩` into the value slot of the target column.
pub fn build_readout_layer(spec: &GdIclSpec, l: &IclLayout) -> Result<AttnLayer> {
    spec.validate()?;
    l.check(Stage::Gd)?;
    let dim = l.dim();
    let p = l.n_features();
    let g = gate_constant(spec.b_x, spec.b_w);
    let n = l.n_tokens() as f64;
    let qg = query_gate(l);
    let cst = l.enc.const_functional();
    let head = |sign: f64| {
        let mut h = AttnHead::zeros(dim);
        add_row(&mut h.q, 0, &qg);
        add_row(&mut h.k, 0, &functional(dim, &cst, g));
        add_row(&mut h.q, 1, &functional(dim, &cst, 1.0));
        add_row(&mut h.k, 1, &qg.iter().map(|x| g * x).collect::<Vec<_>>());
        for k in 0..p {
            h.q.set(2 + k, l.feature_rows.start + k, 1.0);
            h.k.set(2 + k, l.weight_rows.start + k, sign);
        }
        add_row(&mut h.v, l.enc.value_row, &functional(dim, &cst, sign * n));
        h
    };
    Ok(AttnLayer {
        heads: vec![head(1.0), head(-1.0)],
        variant: AttnVariant::Standard,
    })
}

/// Two layers: residuals `r_t = y_t − ⟨w, φ_t⟩` on the training columns, then
/// `(1/n) Σ r_t²` into the variance row of every column.
pub fn build_mle_layers(spec: &GdIclSpec, l: &IclLayout) -> Result<Vec<AttnLayer>> {
    spec.validate()?;
    l.check(Stage::Mle)?;
    let dim = l.dim();
    let t = l.t();
    let p = l.n_features();
    let g = gate_constant(spec.b_x, spec.b_w);
    let n = l.n_tokens() as f64;
    let gate = sample_gate(l);
    let cst = l.enc.const_functional();
    let mut recv = functional(dim, &l.enc.target_functional(), g);
    for (r, x) in functional(dim, &cst, -2.0 * g).iter().enumerate() {
        recv[r] += x;
    }

    // Diagonal pairs only: G([t_s = t_r] + gate(s) + target(r) - 2) == 0.
    let resid_head = |sign: f64| {
        let mut h = AttnHead::zeros(dim);
        for s in 0..t {
            h.q.set(s, l.enc.time_row(s), 1.0);
            h.k.set(s, l.enc.time_row(s), g);
        }
        add_row(&mut h.q, t, &gate);
        add_row(&mut h.k, t, &functional(dim, &cst, g));
        add_row(&mut h.q, t + 1, &functional(dim, &cst, 1.0));
        add_row(&mut h.k, t + 1, &recv);
        for k in 0..p {
            h.q.set(t + 2 + k, l.feature_rows.start + k, 1.0);
            h.k.set(t + 2 + k, l.weight_rows.start + k, sign);
        }
        h.q.set(t + 2 + p, l.enc.value_row, 1.0);
        add_row(&mut h.k, t + 2 + p, &functional(dim, &cst, -sign));
        add_row(&mut h.v, l.resid_row, &functional(dim, &cst, -sign * n));
        h
    };
    let resid = AttnLayer {
        heads: vec![resid_head(1.0), resid_head(-1.0)],
        variant: AttnVariant::Standard,
    };

    let c = n / l.n_samples() as f64;
    let square_head = |sign: f64| {
        let mut h = AttnHead::zeros(dim);
        add_row(&mut h.q, 0, &gate);
        add_row(&mut h.k, 0, &functional(dim, &cst, g));
        h.q.set(1, l.resid_row, sign);
        add_row(&mut h.k, 1, &functional(dim, &cst, 1.0));
        h.v.set(l.sigma_row, l.resid_row, sign * c);
        h
    };
    let square = AttnLayer {
        heads: vec![square_head(1.0), square_head(-1.0)],
        variant: AttnVariant::Standard,
    };
    Ok(vec![resid, square])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConstructionReport {
    #[serde(rename = "layers")]
    pub layer_count: usize,
    #[serde(rename = "heads")]
    pub head_counts: Vec<usize>,
    #[serde(rename = "op_norm")]
    pub param_op_norm: f64,
    pub op_norm_is_estimate: bool,
    /// `|4R + 8/β|` with `R = max{B_x B_w, B_x, 1}`.
    #[serde(rename = "bound")]
    pub claimed_bound: f64,
    /// Layers spent on reformatting (shift and stack).
    pub reformat_layers: usize,
    pub reformat_heads: usize,
    pub max_step_heads: usize,
    pub budget_ok: bool,
}

/// Full pipeline for one layout: shift, stack (any-variate), `L2` gradient
/// layers, read-out and optionally the two variance layers.
pub fn assemble_icl_transformer(
    spec: &GdIclSpec,
    l: &IclLayout,
) -> Result<(TransformerParams, ConstructionReport)> {
    spec.validate()?;
    if l.q_max != spec.q_max || l.lags != spec.lags {
        return Err(Error::Layout(format!(
            "layout has q_max={}, lags={}; spec has q_max={}, lags={}",
            l.q_max, l.lags, spec.q_max, spec.lags
        )));
    }
    if !l.is_univariate() && l.enc.d_slots != spec.d_max {
        return Err(Error::Layout(format!(
            "layout has {} variate slots, spec has d_max={}",
            l.enc.d_slots, spec.d_max
        )));
    }
    l.check(if spec.with_mle { Stage::Mle } else { Stage::Gd })?;
    let mut attn = build_shift_layers(l, spec.split_heads)?;
    if !l.is_univariate() {
        attn.push(build_stack(l)?);
    }
    let reformat_layers = attn.len();
    attn.extend(build_gd_layers(spec, l)?);
    attn.push(build_readout_layer(spec, l)?);
    if spec.with_mle {
        attn.extend(build_mle_layers(spec, l)?);
    }
    let head_counts: Vec<usize> = attn.iter().map(|a| a.heads.len()).collect();
    let params = TransformerParams {
        layers: attn
            .into_iter()
            .map(|a| Layer { attn: a, mlp: None })
            .collect(),
        clip_bound: None,
    };
    let op = param_op_norm(&params);
    let reformat_heads: usize = head_counts[..reformat_layers].iter().sum();
    let max_step_heads = head_counts[reformat_layers..].iter().copied().max().unwrap_or(0);
    let expected_heads = spec.q_max + if l.is_univariate() { 0 } else { spec.d_max };
    let r = (spec.b_x * spec.b_w).max(spec.b_x).max(1.0);
    let report = ConstructionReport {
        layer_count: head_counts.len(),
        param_op_norm: op.value,
        op_norm_is_estimate: op.is_upper_bound_estimate,
        claimed_bound: (4.0 * r + 8.0 / spec.beta).abs(),
        reformat_layers,
        reformat_heads,
        max_step_heads,
        budget_ok: reformat_heads == expected_heads && max_step_heads <= 3,
        head_counts,
    };
    Ok((params, report))
}

/// Weight rows of the target column mapped back to the compact
/// `[variate][lag < lags]` order used by the least-squares oracle.
pub fn read_weights(l: &IclLayout, h: &DenseMatrix) -> Vec<f64> {
    let col = l.enc.target_col;
    let vars = if l.is_univariate() { 1 } else { l.enc.d };
    let mut w = Vec::with_capacity(vars * l.lags);
    for i in 0..vars {
        for m in 1..=l.lags {
            let off = l.feature_row(i, m) - l.feature_rows.start;
            w.push(h.get(l.weight_rows.start + off, col));
        }
    }
    w
}

/// The variance slot of the target column.
pub fn read_sigma2(l: &IclLayout, h: &DenseMatrix) -> f64 {
    h.get(l.sigma_row, l.enc.target_col)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoding::history_matrix;
    use crate::model::{attn_forward, tf_forward};

    #[test]
    fn shift_layer_matches_history_of_short_series() {
        let s = TimeSeries::univariate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let enc = encode_univariate(&s, 10).unwrap();
        let layer = build_shift_layer(1, 4, 10).unwrap();
        let out = attn_forward(&layer, &enc.h, None).unwrap();
        // target masked in place, so the lag row wraps the masked value
        assert_eq!(out.row(0), &[1.0, 2.0, 3.0, 0.0]);
        assert_eq!(out.row(1), &[0.0, 1.0, 2.0, 3.0]);
        let hist = history_matrix(&s.masked_target(), 0, 1).unwrap();
        assert_eq!(out.row(1), hist.row(1));
    }

    #[test]
    fn zero_lag_shift_is_identity() {
        let layer = build_shift_layer(0, 4, 10).unwrap();
        assert!(layer.heads.is_empty());
    }

    #[test]
    fn capacity_errors_name_the_inequality() {
        match build_shift_layer(3, 8, 10) {
            Err(Error::Capacity { detail, .. }) => assert!(detail.contains("q_max + T + 3")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn one_gd_layer_by_hand() {
        // samples (1 -> 2), (2 -> 4); query step masked
        let s = TimeSeries::univariate(&[1.0, 2.0, 4.0, 8.0]).unwrap();
        let l = IclLayout::univariate(4, 16, 1, 1).unwrap();
        let spec = GdIclSpec {
            q_max: 1,
            d_max: 1,
            lags: 1,
            l2: 1,
            eta: 0.1,
            b_w: 2.0,
            b_x: 8.0,
            epsilon: 0.1,
            alpha: 1.0,
            beta: 1.0,
            kappa: 1.0,
            split_heads: 1,
            with_mle: false,
        };
        let mut layers = build_shift_layers(&l, 1).unwrap();
        layers.extend(build_gd_layers(&spec, &l).unwrap());
        let params = TransformerParams {
            layers: layers.into_iter().map(|a| Layer { attn: a, mlp: None }).collect(),
            clip_bound: None,
        };
        let enc = l.encode(&s).unwrap();
        let out = tf_forward(&params, &enc.h, Some(&enc.mask)).unwrap();
        let w = read_weights(&l, &out);
        assert!((w[0] - 0.5).abs() < 1e-14, "{w:?}");
    }

    #[test]
    fn gate_constant_is_power_of_two() {
        let g = gate_constant(3.0, 1.5);
        assert_eq!(g, 256.0);
        assert_eq!(g.log2().fract(), 0.0);
    }
}
