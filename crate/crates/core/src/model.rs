//! ReLU attention (standard and any-variate), MLP layers, the clipped
//! transformer stack, its parameter operator norm and the layer-wise
//! Lipschitz constants.
//!
//! Tokens are the columns of the embedding `H` (D×N). Attention uses a single
//! `1/N` normalisation of the summed head outputs:
//!
//! `out_r = h_r + (1/N) Σ_m Σ_s relu(<Q_m h_s, K_m h_r> + u1 U_sr + u2 Ū_sr) V_m h_s`.
//!
//! The forward pass skips senders whose value column is zero and the zero
//! coordinates of `Q h_s`. Summation order matches the dense formula.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{clip, matmul, relu, spectral_norm_or_bound, DenseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttnVariant {
    Standard,
    #[default]
    AnyVariate,
}

/// One attention head. `u1`/`u2` only act in any-variate layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnHead {
    #[serde(rename = "V")]
    pub v: DenseMatrix,
    #[serde(rename = "Q")]
    pub q: DenseMatrix,
    #[serde(rename = "K")]
    pub k: DenseMatrix,
    #[serde(default)]
    pub u1: f64,
    #[serde(default)]
    pub u2: f64,
}

impl AttnHead {
    pub fn zeros(dim: usize) -> Self {
        AttnHead {
            v: DenseMatrix::zeros(dim, dim),
            q: DenseMatrix::zeros(dim, dim),
            k: DenseMatrix::zeros(dim, dim),
            u1: 0.0,
            u2: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.v.rows()
    }

    fn check(&self, dim: usize) -> Result<()> {
        for (name, m) in [("V", &self.v), ("Q", &self.q), ("K", &self.k)] {
            if m.shape() != (dim, dim) {
                return Err(Error::Dimension(format!(
                    "{name} is {:?}, embedding dimension is {dim}",
                    m.shape()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnLayer {
    pub heads: Vec<AttnHead>,
    #[serde(default)]
    pub variant: AttnVariant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpLayer {
    #[serde(rename = "W1")]
    pub w1: DenseMatrix,
    #[serde(rename = "W2")]
    pub w2: DenseMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    #[serde(flatten)]
    pub attn: AttnLayer,
    #[serde(default)]
    pub mlp: Option<MlpLayer>,
}

/// A stack of attention(+MLP) layers with optional clipping after each layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerParams {
    pub layers: Vec<Layer>,
    #[serde(default)]
    pub clip_bound: Option<f64>,
}

/// Block structure over the token axis: tokens `i` and `j` share a block when
/// `i / block_size == j / block_size`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockMask {
    pub n_tokens: usize,
    pub block_size: usize,
}

impl BlockMask {
    #[inline]
    pub fn same_block(&self, i: usize, j: usize) -> bool {
        i / self.block_size == j / self.block_size
    }

    /// Dense `U`: ones inside diagonal blocks.
    pub fn u(&self) -> DenseMatrix {
        let n = self.n_tokens;
        let mut m = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if self.same_block(i, j) {
                    m.set(i, j, 1.0);
                }
            }
        }
        m
    }

    /// Dense `Ū = 1 1ᵀ − U`.
    pub fn ubar(&self) -> DenseMatrix {
        self.u().map(|x| 1.0 - x)
    }
}

pub fn build_block_mask(n_tokens: usize, block_size: usize) -> Result<BlockMask> {
    if block_size == 0 || !n_tokens.is_multiple_of(block_size) {
        return Err(Error::Layout(format!(
            "block size {block_size} does not divide {n_tokens} tokens"
        )));
    }
    Ok(BlockMask {
        n_tokens,
        block_size,
    })
}

/// Per-head products kept for the backward pass.
#[derive(Clone, Debug)]
pub struct HeadCache {
    pub qh: DenseMatrix,
    pub kh: DenseMatrix,
    pub vh: DenseMatrix,
    /// Pre-activation scores, `scores[s][r]` (sender-major).
    pub scores: DenseMatrix,
}

fn layer_bias(
    layer: &AttnLayer,
    head: &AttnHead,
    mask: Option<&BlockMask>,
) -> Option<(BlockMask, f64, f64)> {
    match layer.variant {
        AttnVariant::Standard => None,
        AttnVariant::AnyVariate => mask.map(|m| (*m, head.u1, head.u2)),
    }
}

fn validate_attn(layer: &AttnLayer, h: &DenseMatrix, mask: Option<&BlockMask>) -> Result<()> {
    if h.cols() == 0 {
        return Err(Error::Dimension("embedding has no tokens".into()));
    }
    for head in &layer.heads {
        head.check(h.rows())?;
    }
    if layer.variant == AttnVariant::AnyVariate {
        match mask {
            None => {
                return Err(Error::Layout(
                    "any-variate attention needs a block mask".into(),
                ))
            }
            Some(m) if m.n_tokens != h.cols() => {
                return Err(Error::Dimension(format!(
                    "mask covers {} tokens, embedding has {}",
                    m.n_tokens,
                    h.cols()
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Attention forward pass. The mask is required for any-variate layers and
/// ignored by standard ones.
pub fn attn_forward(
    layer: &AttnLayer,
    h: &DenseMatrix,
    mask: Option<&BlockMask>,
) -> Result<DenseMatrix> {
    validate_attn(layer, h, mask)?;
    let (dim, n) = h.shape();
    let mut acc = DenseMatrix::zeros(dim, n);
    let mut scores = vec![0.0; n];
    for head in &layer.heads {
        let vh = matmul(&head.v, h)?;
        if vh.max_abs() == 0.0 {
            continue;
        }
        let qh = matmul(&head.q, h)?;
        let kh = matmul(&head.k, h)?;
        let bias = layer_bias(layer, head, mask);
        let mut head_acc = DenseMatrix::zeros(dim, n);
        for s in 0..n {
            let v_rows: Vec<(usize, f64)> = (0..dim)
                .filter_map(|i| {
                    let x = vh.get(i, s);
                    (x != 0.0).then_some((i, x))
                })
                .collect();
            if v_rows.is_empty() {
                continue;
            }
            scores.iter_mut().for_each(|x| *x = 0.0);
            for c in 0..dim {
                let a = qh.get(c, s);
                if a == 0.0 {
                    continue;
                }
                for (sc, &kv) in scores.iter_mut().zip(kh.row(c)) {
                    *sc += a * kv;
                }
            }
            if let Some((m, u1, u2)) = bias {
                for (r, sc) in scores.iter_mut().enumerate() {
                    *sc += if m.same_block(s, r) { u1 } else { u2 };
                }
            }
            for (r, &sc) in scores.iter().enumerate() {
                if sc > 0.0 {
                    for &(i, x) in &v_rows {
                        head_acc.add_at(i, r, x * sc);
                    }
                }
            }
        }
        acc.add_assign(&head_acc)?;
    }
    let inv = n as f64;
    let mut out = h.clone();
    for (o, a) in out.data_mut().iter_mut().zip(acc.data()) {
        *o += a / inv;
    }
    Ok(out)
}

/// Dense reference for [`attn_forward`], also returning per-head caches.
pub fn attn_forward_cached(
    layer: &AttnLayer,
    h: &DenseMatrix,
    mask: Option<&BlockMask>,
) -> Result<(DenseMatrix, Vec<HeadCache>)> {
    validate_attn(layer, h, mask)?;
    let (dim, n) = h.shape();
    let mut acc = DenseMatrix::zeros(dim, n);
    let mut caches = Vec::with_capacity(layer.heads.len());
    for head in &layer.heads {
        let qh = matmul(&head.q, h)?;
        let kh = matmul(&head.k, h)?;
        let vh = matmul(&head.v, h)?;
        // scores[s][r] = <qh_s, kh_r> + bias
        let mut scores = crate::numerics::matmul_tn(&qh, &kh)?;
        if let Some((m, u1, u2)) = layer_bias(layer, head, mask) {
            for s in 0..n {
                for r in 0..n {
                    scores.add_at(s, r, if m.same_block(s, r) { u1 } else { u2 });
                }
            }
        }
        let a = relu(&scores);
        acc.add_assign(&matmul(&vh, &a)?)?;
        caches.push(HeadCache { qh, kh, vh, scores });
    }
    let inv = n as f64;
    let mut out = h.clone();
    for (o, a) in out.data_mut().iter_mut().zip(acc.data()) {
        *o += a / inv;
    }
    Ok((out, caches))
}

/// `H + W2 relu(W1 H)`.
pub fn mlp_forward(mlp: &MlpLayer, h: &DenseMatrix) -> Result<DenseMatrix> {
    let hidden = relu(&matmul(&mlp.w1, h)?);
    h.add(&matmul(&mlp.w2, &hidden)?)
}

/// Runs every layer in order: attention, then the MLP if present, then the
/// clip if a bound is configured.
pub fn tf_forward(
    params: &TransformerParams,
    h: &DenseMatrix,
    mask: Option<&BlockMask>,
) -> Result<DenseMatrix> {
    let mut cur = h.clone();
    for (index, layer) in params.layers.iter().enumerate() {
        cur = forward_layer(layer, &cur, mask, params.clip_bound).map_err(|e| e.at_layer(index))?;
    }
    Ok(cur)
}

fn forward_layer(
    layer: &Layer,
    h: &DenseMatrix,
    mask: Option<&BlockMask>,
    clip_bound: Option<f64>,
) -> Result<DenseMatrix> {
    let mut cur = attn_forward(&layer.attn, h, mask)?;
    if let Some(mlp) = &layer.mlp {
        cur = mlp_forward(mlp, &cur)?;
    }
    if let Some(b) = clip_bound {
        cur = clip(&cur, b)?;
    }
    Ok(cur)
}

/// Operator norm of the parameter stack, with a flag raised when any
/// spectral norm fell back to its Frobenius upper bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpNorm {
    pub value: f64,
    pub is_upper_bound_estimate: bool,
}

/// `max_l [ max_m{‖Q‖,‖K‖,|u1|,|u2|} + Σ_m ‖V‖ + ‖W1‖ + ‖W2‖ ]`.
pub fn param_op_norm(params: &TransformerParams) -> OpNorm {
    let mut value = 0.0f64;
    let mut flagged = false;
    let mut norm = |m: &DenseMatrix| {
        let e = spectral_norm_or_bound(m);
        flagged |= e.is_upper_bound_estimate;
        e.value
    };
    for layer in &params.layers {
        let mut qk = 0.0f64;
        let mut v_sum = 0.0;
        for head in &layer.attn.heads {
            qk = qk
                .max(norm(&head.q))
                .max(norm(&head.k))
                .max(head.u1.abs())
                .max(head.u2.abs());
            v_sum += norm(&head.v);
        }
        let mut total = qk + v_sum;
        if let Some(mlp) = &layer.mlp {
            total += norm(&mlp.w1) + norm(&mlp.w2);
        }
        value = value.max(total);
    }
    OpNorm {
        value,
        is_upper_bound_estimate: flagged,
    }
}

/// Lipschitz constants of one any-variate layer and the `L`-layer stack.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub iota: f64,
    pub b_theta: f64,
    pub b_h: f64,
    pub multi_layer: f64,
    pub r_bar: f64,
    pub overflow: bool,
}

/// Constants for parameter-norm bound `B`, input radius `R`, `T` steps,
/// `d` variates and `L` layers.
pub fn lipschitz_constants(b: f64, r: f64, t: usize, d: usize, layers: usize) -> Result<LipschitzReport> {
    if !(b >= 0.0 && r >= 0.0) || !b.is_finite() || !r.is_finite() {
        return Err(Error::InvalidBound(format!("B={b}, R={r}")));
    }
    if t == 0 || d == 0 || layers == 0 {
        return Err(Error::InvalidBound(format!("T={t}, d={d}, L={layers}")));
    }
    let tf = t as f64;
    let spread = (tf - 1.0) * d as f64;
    let iota = (b * b * r * r + tf + spread).max(b * spread);
    let b3r2 = b.powi(3) * r * r;
    let b_theta = (1.0 + b * b) * (1.0 + iota) + b * r * (1.0 + b3r2);
    let b_h = (1.0 + b * b) * (1.0 + b3r2);
    let multi_layer = layers as f64 * b_h.powi(layers as i32 - 1) * b_theta;
    let r_bar = r + b.powi(3) * r.powi(3);
    let overflow = ![iota, b_theta, b_h, multi_layer, r_bar]
        .iter()
        .all(|x| x.is_finite());
    let fix = |x: f64| if x.is_finite() { x } else { f64::INFINITY };
    Ok(LipschitzReport {
        iota: fix(iota),
        b_theta: fix(b_theta),
        b_h: fix(b_h),
        multi_layer: fix(multi_layer),
        r_bar: fix(r_bar),
        overflow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_requires_divisible_blocks() {
        assert!(build_block_mask(6, 4).is_err());
        let m = build_block_mask(6, 3).unwrap();
        let u = m.u();
        assert_eq!(u.get(0, 2), 1.0);
        assert_eq!(u.get(2, 3), 0.0);
        assert_eq!(m.ubar().get(2, 3), 1.0);
    }

    #[test]
    fn any_variate_without_mask_is_rejected() {
        let layer = AttnLayer {
            heads: vec![AttnHead::zeros(2)],
            variant: AttnVariant::AnyVariate,
        };
        let h = DenseMatrix::zeros(2, 3);
        assert!(matches!(attn_forward(&layer, &h, None), Err(Error::Layout(_))));
    }

    #[test]
    fn lipschitz_frozen_values() {
        // B=1, R=1, T=2, d=1: iota = max{1+2+1, 1} = 4
        let rep = lipschitz_constants(1.0, 1.0, 2, 1, 3).unwrap();
        assert_eq!(rep.iota, 4.0);
        assert_eq!(rep.b_theta, 2.0 * 5.0 + 2.0);
        assert_eq!(rep.b_h, 4.0);
        assert_eq!(rep.multi_layer, 3.0 * 16.0 * 12.0);
        assert_eq!(rep.r_bar, 2.0);
        assert!(!rep.overflow);
    }

    #[test]
    fn lipschitz_overflow_is_flagged() {
        let rep = lipschitz_constants(1e80, 1e80, 10, 2, 4).unwrap();
        assert!(rep.overflow);
        assert_eq!(rep.multi_layer, f64::INFINITY);
    }

    #[test]
    fn tf_errors_carry_layer_index() {
        let good = Layer {
            attn: AttnLayer {
                heads: vec![AttnHead::zeros(2)],
                variant: AttnVariant::Standard,
            },
            mlp: None,
        };
        let bad = Layer {
            attn: AttnLayer {
                heads: vec![AttnHead::zeros(3)],
                variant: AttnVariant::Standard,
            },
            mlp: None,
        };
        let p = TransformerParams {
            layers: vec![good, bad],
            clip_bound: None,
        };
        match tf_forward(&p, &DenseMatrix::zeros(2, 2), None) {
            Err(Error::Layer { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }
}
