//! Dense row-major matrices and the handful of kernels the rest of the crate
//! needs: products, elementwise ReLU and clipping, column norms and a power
//! iteration estimate of the spectral norm.
//!
//! Products accumulate in ascending inner index and skip exact zeros. The
//! constructions in [`crate::construct`] rely on that order so that gate
//! terms cancel exactly before any data-dependent term is added.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix")]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for DenseMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        DenseMatrix::from_vec(raw.rows, raw.cols, raw.data)
    }
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{rows}x{cols} matrix needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != c {
                return Err(Error::Dimension(format!(
                    "row {i} has {} entries, expected {c}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(DenseMatrix {
            rows: r,
            cols: c,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn add_at(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] += v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.zip(other, |a, b| a - b)
    }

    fn zip(&self, other: &DenseMatrix, f: impl Fn(f64, f64) -> f64) -> Result<DenseMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add_assign(&mut self, other: &DenseMatrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Dimension(format!(
                "add_assign on {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn max_abs_diff(&self, other: &DenseMatrix) -> Result<f64> {
        Ok(self.sub(other)?.max_abs())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Column `j` is identically zero.
    pub fn col_is_zero(&self, j: usize) -> bool {
        (0..self.rows).all(|i| self.get(i, j) == 0.0)
    }

    /// Comma-separated rows, one line per matrix row, round-trip exact.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.rows {
            let line: Vec<String> = self.row(i).iter().map(|x| format!("{x:?}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<DenseMatrix> {
        let mut rows = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split(',')
                .map(|tok| {
                    tok.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Parse(format!("line {}: {e}", n + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        DenseMatrix::from_rows(&rows)
    }
}

/// `a · b`, accumulating over the inner index in ascending order and
/// skipping zero entries of `a`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::Dimension(format!(
            "matmul {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    let n = b.cols;
    for i in 0..a.rows {
        let orow = &mut out.data[i * n..(i + 1) * n];
        for k in 0..a.cols {
            let aik = a.data[i * a.cols + k];
            if aik == 0.0 {
                continue;
            }
            let brow = &b.data[k * n..(k + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aik * bv;
            }
        }
    }
    Ok(out)
}

/// `aᵀ · b` without materialising the transpose.
pub fn matmul_tn(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.rows != b.rows {
        return Err(Error::Dimension(format!(
            "matmul_tn {:?}ᵀ x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = DenseMatrix::zeros(a.cols, b.cols);
    let n = b.cols;
    for k in 0..a.rows {
        let brow = &b.data[k * n..(k + 1) * n];
        for i in 0..a.cols {
            let aki = a.data[k * a.cols + i];
            if aki == 0.0 {
                continue;
            }
            let orow = &mut out.data[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += aki * bv;
            }
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materialising the transpose.
pub fn matmul_nt(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.cols {
        return Err(Error::Dimension(format!(
            "matmul_nt {:?} x {:?}ᵀ",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = DenseMatrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let arow = a.row(i);
        for j in 0..b.rows {
            let brow = b.row(j);
            out.data[i * b.rows + j] = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Ok(out)
}

pub fn matvec(a: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if a.cols != x.len() {
        return Err(Error::Dimension(format!(
            "matvec {:?} x {}",
            a.shape(),
            x.len()
        )));
    }
    Ok((0..a.rows)
        .map(|i| a.row(i).iter().zip(x).map(|(p, q)| p * q).sum())
        .collect())
}

pub fn relu(h: &DenseMatrix) -> DenseMatrix {
    h.map(|x| x.max(0.0))
}

/// Elementwise clip to `[-bound, bound]`.
pub fn clip(h: &DenseMatrix, bound: f64) -> Result<DenseMatrix> {
    if !(bound > 0.0) {
        return Err(Error::InvalidBound(format!(
            "clip bound must be positive, got {bound}"
        )));
    }
    Ok(h.map(|x| x.clamp(-bound, bound)))
}

/// Largest column Euclidean norm, `‖H‖_{2,∞}`.
pub fn col2inf_norm(h: &DenseMatrix) -> f64 {
    let mut sq = vec![0.0; h.cols];
    for i in 0..h.rows {
        for (s, x) in sq.iter_mut().zip(h.row(i)) {
            *s += x * x;
        }
    }
    sq.into_iter().fold(0.0, f64::max).sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 100_000;

/// Spectral norm by power iteration on `AᵀA`, started from the normalised
/// all-ones vector. Stops when the eigen-residual `‖AᵀAv − λv‖` falls below
/// `tol · λ`.
pub fn spectral_norm(a: &DenseMatrix, tol: f64, max_iter: usize) -> Result<f64> {
    let n = a.cols;
    if a.rows == 0 || n == 0 || a.max_abs() == 0.0 {
        return Ok(0.0);
    }
    let frobenius = a.frobenius();
    let gram_apply = |v: &[f64]| -> Vec<f64> {
        let av = matvec(a, v).expect("shape checked");
        let mut out = vec![0.0; n];
        for (i, &s) in av.iter().enumerate() {
            if s != 0.0 {
                for (o, &x) in out.iter_mut().zip(a.row(i)) {
                    *o += s * x;
                }
            }
        }
        out
    };

    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut w = gram_apply(&v);
    if norm2(&w) == 0.0 {
        // The all-ones start is orthogonal to the row space; restart on the
        // heaviest column.
        let heaviest = (0..n)
            .max_by(|&x, &y| {
                let cx: f64 = (0..a.rows).map(|i| a.get(i, x).powi(2)).sum();
                let cy: f64 = (0..a.rows).map(|i| a.get(i, y).powi(2)).sum();
                cx.total_cmp(&cy)
            })
            .unwrap_or(0);
        v = vec![0.0; n];
        v[heaviest] = 1.0;
        w = gram_apply(&v);
    }

    let mut lambda = 0.0;
    for _ in 0..max_iter {
        lambda = dot(&v, &w);
        let residual: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        if residual <= tol * lambda.abs() {
            return Ok(lambda.max(0.0).sqrt());
        }
        let nw = norm2(&w);
        if nw == 0.0 || !nw.is_finite() {
            break;
        }
        v = w.iter().map(|x| x / nw).collect();
        w = gram_apply(&v);
    }
    Err(Error::Convergence {
        iterations: max_iter,
        estimate: lambda.max(0.0).sqrt(),
        frobenius,
    })
}

/// A spectral-norm value that may have fallen back to the Frobenius bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub is_upper_bound_estimate: bool,
}

/// [`spectral_norm`] with the Frobenius upper bound as a flagged fallback.
pub fn spectral_norm_or_bound(a: &DenseMatrix) -> NormEstimate {
    match spectral_norm(a, DEFAULT_TOL, DEFAULT_MAX_ITER) {
        Ok(value) => NormEstimate {
            value,
            is_upper_bound_estimate: false,
        },
        Err(Error::Convergence { frobenius, .. }) => NormEstimate {
            value: frobenius,
            is_upper_bound_estimate: true,
        },
        Err(_) => NormEstimate {
            value: a.frobenius(),
            is_upper_bound_estimate: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> DenseMatrix {
        DenseMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_small() {
        let a = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = m(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(matmul(&a, &b).unwrap(), m(&[&[19.0, 22.0], &[43.0, 50.0]]));
        assert_eq!(matmul_tn(&a, &b).unwrap(), matmul(&a.transpose(), &b).unwrap());
        assert_eq!(matmul_nt(&a, &b).unwrap(), matmul(&a, &b.transpose()).unwrap());
    }

    #[test]
    fn matmul_rejects_bad_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Dimension(_))));
    }

    #[test]
    fn clip_rejects_nonpositive_bound() {
        let a = DenseMatrix::zeros(1, 1);
        assert!(matches!(clip(&a, 0.0), Err(Error::InvalidBound(_))));
        assert!(matches!(clip(&a, f64::NAN), Err(Error::InvalidBound(_))));
    }

    #[test]
    fn col2inf_of_known_matrix() {
        let a = m(&[&[3.0, 1.0], &[4.0, 0.0]]);
        assert_eq!(col2inf_norm(&a), 5.0);
    }

    #[test]
    fn spectral_norm_diagonal_and_rank_one() {
        let d = m(&[&[3.0, 0.0], &[0.0, -5.0]]);
        assert!((spectral_norm(&d, 1e-12, 10_000).unwrap() - 5.0).abs() < 1e-9);
        // All-ones start is orthogonal to the right singular vector here.
        let r = m(&[&[1.0, -1.0], &[2.0, -2.0]]);
        let expect = (10.0f64).sqrt();
        assert!((spectral_norm(&r, 1e-12, 10_000).unwrap() - expect).abs() < 1e-9);
    }

    #[test]
    fn spectral_norm_reports_nonconvergence() {
        let a = m(&[&[1.0, 0.3], &[0.2, 0.99]]);
        match spectral_norm(&a, 1e-15, 1) {
            Err(Error::Convergence { frobenius, .. }) => {
                assert!((frobenius - a.frobenius()).abs() < 1e-15)
            }
            other => panic!("expected convergence error, got {other:?}"),
        }
        let est = spectral_norm_or_bound(&a);
        assert!(!est.is_upper_bound_estimate);
    }

    #[test]
    fn json_roundtrip_and_validation() {
        let a = m(&[&[1.5, -2.0, 0.1]]);
        let s = serde_json::to_string(&a).unwrap();
        assert_eq!(serde_json::from_str::<DenseMatrix>(&s).unwrap(), a);
        assert!(serde_json::from_str::<DenseMatrix>(r#"{"rows":2,"cols":2,"data":[1.0]}"#).is_err());
    }

    #[test]
    fn csv_roundtrip_is_exact() {
        let a = m(&[&[0.1, 1.0 / 3.0], &[-2.5e-300, 7.0]]);
        assert_eq!(DenseMatrix::from_csv(&a.to_csv()).unwrap(), a);
    }
}
