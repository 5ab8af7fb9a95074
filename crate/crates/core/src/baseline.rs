//! Least-squares oracles on sliding windows: full-batch gradient descent,
//! the closed-form (ridge / minimum-norm) solution, the residual variance and
//! plain linear prediction.
//!
//! Feature rows are variate-major then lag: `[x¹_{t-1..t-q}; …; x^d_{t-1..t-q}]`.
//! The regression loss is `(1/2n) Σ (⟨w, φ_t⟩ − y_t)²` with `n` the number of
//! realised windows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::encoding::TimeSeries;
use crate::error::{Error, Result};
use crate::numerics::{dot, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionData {
    pub x: DenseMatrix,
    pub y: Vec<f64>,
    pub q: usize,
    pub d: usize,
}

impl RegressionData {
    pub fn n_samples(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.x.cols()
    }

    pub fn new(x: DenseMatrix, y: Vec<f64>) -> Result<Self> {
        if x.rows() != y.len() || x.rows() == 0 {
            return Err(Error::Dimension(format!(
                "{} feature rows, {} targets",
                x.rows(),
                y.len()
            )));
        }
        let p = x.cols();
        Ok(RegressionData { x, y, q: p, d: 1 })
    }

    fn gram(&self) -> DMatrix<f64> {
        let n = self.n_samples() as f64;
        let p = self.n_features();
        let mut g = DMatrix::zeros(p, p);
        for r in 0..self.n_samples() {
            let row = self.x.row(r);
            for a in 0..p {
                for b in 0..p {
                    g[(a, b)] += row[a] * row[b];
                }
            }
        }
        g / n
    }

    fn moment(&self) -> DVector<f64> {
        let n = self.n_samples() as f64;
        let mut m = DVector::zeros(self.n_features());
        for (r, y) in self.y.iter().enumerate() {
            for (a, x) in self.x.row(r).iter().enumerate() {
                m[a] += x * y;
            }
        }
        m / n
    }

    /// `(1/2n) Σ (⟨w, φ_t⟩ − y_t)²`.
    pub fn loss(&self, w: &[f64]) -> f64 {
        let n = self.n_samples() as f64;
        (0..self.n_samples())
            .map(|r| (dot(self.x.row(r), w) - self.y[r]).powi(2))
            .sum::<f64>()
            / (2.0 * n)
    }

    /// `(1/n) Σ (⟨w, φ_t⟩ − y_t) φ_t`.
    pub fn gradient(&self, w: &[f64]) -> Vec<f64> {
        let n = self.n_samples() as f64;
        let mut g = vec![0.0; self.n_features()];
        for r in 0..self.n_samples() {
            let row = self.x.row(r);
            let e = dot(row, w) - self.y[r];
            for (gi, xi) in g.iter_mut().zip(row) {
                *gi += e * xi;
            }
        }
        g.iter_mut().for_each(|v| *v /= n);
        g
    }
}

/// Stacked lag features at (zero-indexed) step `t`, needing `t >= q`.
pub fn lag_features(series: &TimeSeries, q: usize, t: usize) -> Vec<f64> {
    let mut phi = Vec::with_capacity(q * series.d());
    for j in 0..series.d() {
        for i in 1..=q {
            phi.push(series.get(j, t - i));
        }
    }
    phi
}

/// One row per target step `t ∈ [q, T)`: `T − q` samples, the last one
/// predicting the final target value.
pub fn build_regression_dataset(series: &TimeSeries, q: usize) -> Result<RegressionData> {
    let t_len = series.len();
    if q == 0 || q >= t_len {
        return Err(Error::Lag { q, t: t_len });
    }
    let p = q * series.d();
    let mut data = Vec::with_capacity((t_len - q) * p);
    let mut y = Vec::with_capacity(t_len - q);
    for t in q..t_len {
        data.extend(lag_features(series, q, t));
        y.push(series.get(0, t));
    }
    Ok(RegressionData {
        x: DenseMatrix::from_vec(t_len - q, p, data)?,
        y,
        q,
        d: series.d(),
    })
}

/// In-context split for a series whose last target value is unknown: the
/// windows fully inside the first `T − 1` steps, and the query window
/// predicting step `T`.
pub fn in_context_split(series: &TimeSeries, q: usize) -> Result<(RegressionData, Vec<f64>)> {
    let t_len = series.len();
    if q == 0 || q + 1 >= t_len {
        return Err(Error::Lag { q, t: t_len });
    }
    let train = build_regression_dataset(&series.window(0, t_len - 1)?, q)?;
    Ok((train, lag_features(series, q, t_len - 1)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GdTrace {
    pub iterates: Vec<Vec<f64>>,
    pub eta: f64,
    pub losses: Vec<f64>,
}

impl GdTrace {
    pub fn last(&self) -> &[f64] {
        self.iterates.last().expect("trace holds w0")
    }

    /// `iter,loss,dist` rows, `dist = ‖w_k − ŵ‖`.
    pub fn to_csv(&self, w_hat: &[f64]) -> String {
        let mut out = String::from("# schema=1\niter,loss,dist\n");
        for (k, (w, l)) in self.iterates.iter().zip(&self.losses).enumerate() {
            let dist = w
                .iter()
                .zip(w_hat)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            out.push_str(&format!("{k},{l:?},{dist:?}\n"));
        }
        out
    }
}

/// Full-batch gradient descent on the regression loss.
pub fn ls_gd(data: &RegressionData, w0: &[f64], eta: f64, steps: usize) -> Result<GdTrace> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidStep(format!("step size {eta}")));
    }
    if w0.len() != data.n_features() {
        return Err(Error::Dimension(format!(
            "w0 has {} entries, data has {} features",
            w0.len(),
            data.n_features()
        )));
    }
    let mut w = w0.to_vec();
    let initial = data.loss(&w);
    let mut trace = GdTrace {
        iterates: vec![w.clone()],
        eta,
        losses: vec![initial],
    };
    for step in 1..=steps {
        let g = data.gradient(&w);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
        let l = data.loss(&w);
        if !l.is_finite() || l > 10.0 * initial.max(f64::MIN_POSITIVE) {
            return Err(Error::Divergence { step });
        }
        trace.iterates.push(w.clone());
        trace.losses.push(l);
    }
    Ok(trace)
}

/// Gradient descent iterate after `steps` steps without keeping the trace.
pub fn gd_iterate(data: &RegressionData, w0: &[f64], eta: f64, steps: usize) -> Vec<f64> {
    let mut w = w0.to_vec();
    for _ in 0..steps {
        let g = data.gradient(&w);
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= eta * gi;
        }
    }
    w
}

/// Minimiser of the regression loss plus `(λ/2)‖w‖²`; the minimum-norm
/// solution when unregularised and rank deficient.
pub fn ls_closed_form(data: &RegressionData, ridge: f64) -> Result<Vec<f64>> {
    if !(ridge >= 0.0) {
        return Err(Error::InvalidBound(format!("ridge {ridge}")));
    }
    let p = data.n_features();
    let g = data.gram() + DMatrix::identity(p, p) * ridge;
    let b = data.moment();
    let eig = SymmetricEigen::new(g);
    let lmax = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    let cutoff = 1e-12 * lmax;
    let mut w = DVector::zeros(p);
    for (k, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff && lam > 0.0 {
            let u = eig.eigenvectors.column(k);
            w += u * (u.dot(&b) / lam);
        }
    }
    Ok(w.iter().copied().collect())
}

/// Extreme eigenvalues `(α, β)` of the empirical Gram `(1/n) XᵀX`.
pub fn gram_extremes(data: &RegressionData) -> (f64, f64) {
    let eig = SymmetricEigen::new(data.gram());
    let lo = eig.eigenvalues.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    let hi = eig.eigenvalues.iter().fold(0.0f64, |m, &v| m.max(v));
    (lo.max(0.0), hi)
}

/// Mean squared residual `(1/n) Σ (y_t − ⟨w, φ_t⟩)²`.
pub fn nll_variance(data: &RegressionData, w: &[f64]) -> f64 {
    2.0 * data.loss(w)
}

pub fn predict(w: &[f64], window: &[f64]) -> Result<f64> {
    if w.len() != window.len() {
        return Err(Error::Dimension(format!(
            "weights have {} entries, window {}",
            w.len(),
            window.len()
        )));
    }
    Ok(dot(w, window))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RegressionData {
        RegressionData::new(DenseMatrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap(), vec![2.0, 4.0])
            .unwrap()
    }

    #[test]
    fn windows_of_short_series() {
        let s = TimeSeries::univariate(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let data = build_regression_dataset(&s, 1).unwrap();
        assert_eq!(data.x.col(0), vec![1.0, 2.0, 3.0]);
        assert_eq!(data.y, vec![2.0, 3.0, 4.0]);
        assert_eq!(build_regression_dataset(&s, 3).unwrap().n_samples(), 1);
        assert!(matches!(build_regression_dataset(&s, 4), Err(Error::Lag { .. })));
    }

    #[test]
    fn bivariate_rows_are_variate_major() {
        let s = TimeSeries::from_variates(&[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]).unwrap();
        let data = build_regression_dataset(&s, 2).unwrap();
        assert_eq!(data.x.row(0), &[2.0, 1.0, 20.0, 10.0]);
    }

    #[test]
    fn one_gd_step_by_hand() {
        let trace = ls_gd(&toy(), &[0.0], 0.1, 1).unwrap();
        assert!((trace.last()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn closed_form_exact_fit_and_ridge_limit() {
        let w = ls_closed_form(&toy(), 0.0).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
        let stationary = ls_gd(&toy(), &w, 0.1, 5).unwrap();
        assert!((stationary.last()[0] - 2.0).abs() < 1e-12);
        assert!(ls_closed_form(&toy(), 1e12).unwrap()[0].abs() < 1e-10);
    }

    #[test]
    fn min_norm_on_duplicate_columns() {
        let x = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0]]).unwrap();
        let data = RegressionData::new(x, vec![2.0, 4.0]).unwrap();
        let w = ls_closed_form(&data, 0.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-10 && (w[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn variance_of_unit_residuals() {
        let x = DenseMatrix::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let data = RegressionData::new(x, vec![1.0, -1.0]).unwrap();
        assert_eq!(nll_variance(&data, &[0.0]), 1.0);
    }

    #[test]
    fn predict_checks_lengths() {
        assert_eq!(predict(&[1.0, 0.0], &[3.0, 9.0]).unwrap(), 3.0);
        assert!(predict(&[1.0], &[3.0, 9.0]).is_err());
    }

    #[test]
    fn divergent_step_is_reported() {
        assert!(matches!(ls_gd(&toy(), &[0.0], 10.0, 5), Err(Error::Divergence { .. })));
    }
}
