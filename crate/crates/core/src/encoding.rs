//! Embedding of a (possibly multivariate) series into the `D×N` token matrix
//! the transformer reads, plus the lag history matrix used as a reference.
//!
//! Any-variate layout: variate `j` occupies the columns `j·T..(j+1)·T`; the
//! value sits in row 0, the time one-hot in `T` rows and the variate one-hot
//! in the last rows. The target value `x^1_T` is masked to 0.
//!
//! Univariate layout: row 0 value, scratch rows, `T` time one-hot rows, a
//! constant-one row and the indicator row `1{i < T}`.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{build_block_mask, BlockMask};
use crate::numerics::DenseMatrix;

/// `d` variates over `T` steps; variate 0 is the prediction target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: DenseMatrix,
}

impl TimeSeries {
    pub fn new(values: DenseMatrix) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return Err(Error::Dimension("series must be non-empty".into()));
        }
        Ok(TimeSeries { values })
    }

    pub fn from_variates(variates: &[Vec<f64>]) -> Result<Self> {
        TimeSeries::new(DenseMatrix::from_rows(variates)?)
    }

    pub fn univariate(values: &[f64]) -> Result<Self> {
        TimeSeries::from_variates(&[values.to_vec()])
    }

    pub fn d(&self) -> usize {
        self.values.rows()
    }

    pub fn len(&self) -> usize {
        self.values.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.cols() == 0
    }

    /// Zero-indexed value of variate `j` at step `t`.
    #[inline]
    pub fn get(&self, j: usize, t: usize) -> f64 {
        self.values.get(j, t)
    }

    pub fn variate(&self, j: usize) -> &[f64] {
        self.values.row(j)
    }

    pub fn values(&self) -> &DenseMatrix {
        &self.values
    }

    /// Steps `start..start+len` of every variate.
    pub fn window(&self, start: usize, len: usize) -> Result<TimeSeries> {
        if start + len > self.len() || len == 0 {
            return Err(Error::Dimension(format!(
                "window {start}..{} outside series of length {}",
                start + len,
                self.len()
            )));
        }
        let rows: Vec<Vec<f64>> = (0..self.d())
            .map(|j| self.variate(j)[start..start + len].to_vec())
            .collect();
        TimeSeries::from_variates(&rows)
    }

    /// Copy with the target value at the last step set to 0.
    pub fn masked_target(&self) -> TimeSeries {
        let mut v = self.values.clone();
        v.set(0, self.len() - 1, 0.0);
        TimeSeries { values: v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingKind {
    AnyVariate,
    Univariate,
}

/// Row and column map of an encoded input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub kind: EncodingKind,
    pub dim: usize,
    /// Steps per variate block.
    pub t: usize,
    /// Variates actually present (column blocks).
    pub d: usize,
    /// Variate one-hot rows reserved (any-variate only, `>= d`).
    pub d_slots: usize,
    pub value_row: usize,
    pub time_rows: Range<usize>,
    pub variate_rows: Option<Range<usize>>,
    pub const_row: Option<usize>,
    pub indicator_row: Option<usize>,
    pub target_col: usize,
}

impl Layout {
    /// Any-variate layout for `d` variate blocks of `t` steps with `d_slots`
    /// variate one-hot rows. Capacity is not checked here.
    pub fn any_variate(t: usize, d: usize, d_slots: usize, dim: usize) -> Layout {
        let time_start = dim - d_slots - t;
        Layout {
            kind: EncodingKind::AnyVariate,
            dim,
            t,
            d,
            d_slots,
            value_row: 0,
            time_rows: time_start..time_start + t,
            variate_rows: Some(dim - d_slots..dim),
            const_row: None,
            indicator_row: None,
            target_col: t - 1,
        }
    }

    /// Univariate layout. Capacity is not checked here.
    pub fn univariate(t: usize, dim: usize) -> Layout {
        let time_start = dim - 2 - t;
        Layout {
            kind: EncodingKind::Univariate,
            dim,
            t,
            d: 1,
            d_slots: 1,
            value_row: 0,
            time_rows: time_start..time_start + t,
            variate_rows: None,
            const_row: Some(dim - 2),
            indicator_row: Some(dim - 1),
            target_col: t - 1,
        }
    }

    /// Rows at the bottom of the embedding taken by index rows other than
    /// the time one-hots.
    pub fn tail_rows(&self) -> usize {
        match self.kind {
            EncodingKind::AnyVariate => self.d_slots,
            EncodingKind::Univariate => 2,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.d * self.t
    }

    /// Coefficients of a linear functional that equals 1 on every column.
    pub fn const_functional(&self) -> Vec<(usize, f64)> {
        match self.kind {
            EncodingKind::Univariate => vec![(self.const_row.expect("univariate"), 1.0)],
            EncodingKind::AnyVariate => self
                .variate_rows
                .clone()
                .expect("any-variate")
                .map(|r| (r, 1.0))
                .collect(),
        }
    }

    /// Coefficients of a functional equal to 1 on target-variate columns and 0
    /// elsewhere.
    pub fn target_functional(&self) -> Vec<(usize, f64)> {
        match self.kind {
            EncodingKind::Univariate => self.const_functional(),
            EncodingKind::AnyVariate => {
                vec![(self.variate_rows.clone().expect("any-variate").start, 1.0)]
            }
        }
    }

    /// Row holding the one-hot entry for zero-indexed step `t`.
    pub fn time_row(&self, t: usize) -> usize {
        self.time_rows.start + t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub h: DenseMatrix,
    pub layout: Layout,
    pub mask: BlockMask,
}

/// Rows used by the any-variate embedding itself (value, time, variate).
pub fn anyvariate_min_dim(t: usize, d_slots: usize) -> usize {
    1 + t + d_slots
}

/// Rows used by the univariate embedding itself.
pub fn univariate_min_dim(t: usize) -> usize {
    1 + t + 2
}

/// Any-variate embedding with one variate slot per variate.
pub fn encode_anyvariate(series: &TimeSeries, dim: usize) -> Result<EncodedInput> {
    encode_anyvariate_slots(series, dim, series.d())
}

/// Any-variate embedding reserving `d_slots >= d` variate one-hot rows, so a
/// model built for `d_slots` variates accepts fewer.
pub fn encode_anyvariate_slots(
    series: &TimeSeries,
    dim: usize,
    d_slots: usize,
) -> Result<EncodedInput> {
    let (d, t) = (series.d(), series.len());
    if d_slots < d {
        return Err(Error::Capacity {
            required: d,
            available: d_slots,
            detail: "variate slots".into(),
        });
    }
    let need = anyvariate_min_dim(t, d_slots);
    if dim < need {
        return Err(Error::Capacity {
            required: need,
            available: dim,
            detail: "any-variate embedding".into(),
        });
    }
    let layout = Layout::any_variate(t, d, d_slots, dim);
    let n = d * t;
    let mut h = DenseMatrix::zeros(dim, n);
    let var_start = dim - d_slots;
    for j in 0..d {
        for s in 0..t {
            let col = j * t + s;
            h.set(0, col, series.get(j, s));
            h.set(layout.time_row(s), col, 1.0);
            h.set(var_start + j, col, 1.0);
        }
    }
    h.set(0, t - 1, 0.0);
    Ok(EncodedInput {
        h,
        layout,
        mask: build_block_mask(n, t)?,
    })
}

/// Univariate embedding of a single-variate series.
pub fn encode_univariate(series: &TimeSeries, dim: usize) -> Result<EncodedInput> {
    if series.d() != 1 {
        return Err(Error::Layout(format!(
            "univariate encoding got {} variates",
            series.d()
        )));
    }
    let t = series.len();
    let need = univariate_min_dim(t);
    if dim < need {
        return Err(Error::Capacity {
            required: need,
            available: dim,
            detail: "univariate embedding".into(),
        });
    }
    let layout = Layout::univariate(t, dim);
    let (const_row, ind_row) = (dim - 2, dim - 1);
    let mut h = DenseMatrix::zeros(dim, t);
    for s in 0..t {
        h.set(0, s, if s + 1 == t { 0.0 } else { series.get(0, s) });
        h.set(layout.time_row(s), s, 1.0);
        h.set(const_row, s, 1.0);
        h.set(ind_row, s, if s + 1 < t { 1.0 } else { 0.0 });
    }
    Ok(EncodedInput {
        h,
        layout,
        mask: build_block_mask(t, t)?,
    })
}

/// The value slot of the target column after a forward pass.
pub fn read_y(enc: &EncodedInput, h_out: &DenseMatrix) -> Result<f64> {
    let l = &enc.layout;
    if h_out.shape() != (l.dim, l.n_tokens()) {
        return Err(Error::Layout(format!(
            "output is {:?}, layout expects {:?}",
            h_out.shape(),
            (l.dim, l.n_tokens())
        )));
    }
    Ok(h_out.get(l.value_row, l.target_col))
}

/// `(q+1)×T` matrix with row `r`, column `c` equal to `x_{c-r}` of variate
/// `j`, wrapping periodically.
pub fn history_matrix(series: &TimeSeries, j: usize, q: usize) -> Result<DenseMatrix> {
    let t = series.len();
    if q >= t {
        return Err(Error::Lag { q, t });
    }
    if j >= series.d() {
        return Err(Error::Dimension(format!(
            "variate {j} of {}",
            series.d()
        )));
    }
    let mut a = DenseMatrix::zeros(q + 1, t);
    for r in 0..=q {
        for c in 0..t {
            a.set(r, c, series.get(j, (c + t - r) % t));
        }
    }
    Ok(a)
}
