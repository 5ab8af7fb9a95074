//! Synthetic autoregressive data.
//!
//! The target variate follows
//! `x^1_t = s · Σ_{i=1..q} Σ_{j=1..d} a_i^j x^j_{t-i} + ε_t` with `s = 1/(qd)`
//! when normalised and `s = 1` otherwise. Covariates are i.i.d. `N(0, 1)`
//! draws and the first `q` steps of every variate are `N(0, 1)` initial
//! values. The first `burn_in` generated steps are discarded.
//!
//! Standard-normal coefficients can make the recursion explosive even after
//! normalisation; dataset sampling redraws those unless told otherwise.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::encoding::TimeSeries;
use crate::error::{Error, Result};
use crate::numerics::{norm2, DenseMatrix};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArParams {
    pub d: usize,
    pub q: usize,
    /// `coeffs[i][j]` multiplies `x^j_{t-1-i}`.
    pub coeffs: Vec<Vec<f64>>,
    pub noise_var: f64,
    pub normalized: bool,
    pub seed: u64,
}

impl ArParams {
    pub fn new(coeffs: Vec<Vec<f64>>, noise_var: f64, normalized: bool, seed: u64) -> Result<Self> {
        let q = coeffs.len();
        let d = coeffs.first().map_or(0, Vec::len);
        if q == 0 || d == 0 || coeffs.iter().any(|r| r.len() != d) {
            return Err(Error::Dimension("coefficients must be a non-empty q×d grid".into()));
        }
        if !(noise_var >= 0.0) {
            return Err(Error::InvalidBound(format!("noise variance {noise_var}")));
        }
        Ok(ArParams {
            d,
            q,
            coeffs,
            noise_var,
            normalized,
            seed,
        })
    }

    pub fn scale(&self) -> f64 {
        if self.normalized {
            1.0 / (self.q * self.d) as f64
        } else {
            1.0
        }
    }

    /// Effective regression weights in variate-major, then lag, order.
    pub fn weights(&self) -> Vec<f64> {
        let s = self.scale();
        (0..self.d)
            .flat_map(|j| (0..self.q).map(move |i| (i, j)))
            .map(|(i, j)| s * self.coeffs[i][j])
            .collect()
    }

    /// Noise-free conditional mean of `x^1_t` given the past of `series`.
    pub fn conditional_mean(&self, series: &TimeSeries, t: usize) -> f64 {
        let mut acc = 0.0;
        for (i, row) in self.coeffs.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                acc += a * series.get(j, t - 1 - i);
            }
        }
        self.scale() * acc
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeasonalitySpec {
    pub amplitude: f64,
    pub frequency: usize,
}

/// A generated series with the noise draws that drove its target.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSeries {
    pub series: TimeSeries,
    /// `noise[t]` is `ε_t` for `t >= first_recursive`; earlier entries are 0.
    pub noise: Vec<f64>,
    /// First output step produced by the recursion rather than initial draws.
    pub first_recursive: usize,
}

/// `T` steps after discarding `burn_in`, deterministic in `params.seed`.
pub fn gen_ar(params: &ArParams, t: usize, burn_in: usize) -> Result<TimeSeries> {
    Ok(gen_ar_traced(params, t, burn_in, None)?.series)
}

/// Full generator. `initial`, when given, is a `d×q` block replacing the random
/// initial values.
pub fn gen_ar_traced(
    params: &ArParams,
    t: usize,
    burn_in: usize,
    initial: Option<&DenseMatrix>,
) -> Result<GeneratedSeries> {
    if t == 0 {
        return Err(Error::Size("series length must be at least 1".into()));
    }
    let (d, q) = (params.d, params.q);
    if let Some(init) = initial {
        if init.shape() != (d, q) {
            return Err(Error::Dimension(format!(
                "initial block is {:?}, expected {:?}",
                init.shape(),
                (d, q)
            )));
        }
    }
    let total = t + burn_in;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise_dist = Normal::new(0.0, params.noise_var.sqrt())
        .map_err(|e| Error::InvalidBound(e.to_string()))?;
    let mut x = DenseMatrix::zeros(d, total);
    let mut noise = vec![0.0; total];
    for s in 0..q.min(total) {
        for j in 0..d {
            let v = match initial {
                Some(init) => init.get(j, s),
                None => rng.sample(StandardNormal),
            };
            x.set(j, s, v);
        }
    }
    let scale = params.scale();
    for s in q..total {
        for j in 1..d {
            x.set(j, s, rng.sample(StandardNormal));
        }
        let mut acc = 0.0;
        for (i, row) in params.coeffs.iter().enumerate() {
            for (j, a) in row.iter().enumerate() {
                acc += a * x.get(j, s - 1 - i);
            }
        }
        let eps = noise_dist.sample(&mut rng);
        let v = scale * acc + eps;
        if !v.is_finite() {
            return Err(Error::Divergence { step: s });
        }
        x.set(0, s, v);
        noise[s] = eps;
    }
    let rows: Vec<Vec<f64>> = (0..d).map(|j| x.row(j)[burn_in..].to_vec()).collect();
    Ok(GeneratedSeries {
        series: TimeSeries::from_variates(&rows)?,
        noise: noise[burn_in..].to_vec(),
        first_recursive: q.saturating_sub(burn_in),
    })
}

/// Adds `a · sin(2π t / f)` to every variate at zero-indexed step `t`.
pub fn add_seasonality(series: &TimeSeries, spec: SeasonalitySpec) -> Result<TimeSeries> {
    if spec.frequency == 0 {
        return Err(Error::InvalidBound("seasonality frequency must be >= 1".into()));
    }
    let f = spec.frequency as f64;
    let rows: Vec<Vec<f64>> = (0..series.d())
        .map(|j| {
            series
                .variate(j)
                .iter()
                .enumerate()
                .map(|(t, x)| x + spec.amplitude * (2.0 * std::f64::consts::PI * t as f64 / f).sin())
                .collect()
        })
        .collect();
    TimeSeries::from_variates(&rows)
}

/// Sampling ranges for dataset generation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArRanges {
    pub d: Vec<usize>,
    pub q: Vec<usize>,
    pub sigma2: (f64, f64),
    pub normalized: bool,
    /// Seasonal amplitude drawn uniformly from this range when present.
    #[serde(default)]
    pub seasonal_amplitude: Option<(f64, f64)>,
    #[serde(default = "default_frequency")]
    pub seasonal_frequency: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    /// Redraw coefficients until the target recursion is stationary.
    #[serde(default = "default_stationary")]
    pub stationary_only: bool,
}

fn default_stationary() -> bool {
    true
}

fn default_frequency() -> usize {
    30
}

fn default_burn_in() -> usize {
    50
}

impl Default for ArRanges {
    /// Pretraining ranges: `d, q ∈ {1..5}`, `σ² ~ U(0.1, 1)`, normalised.
    fn default() -> Self {
        ArRanges {
            d: (1..=5).collect(),
            q: (1..=5).collect(),
            sigma2: (0.1, 1.0),
            normalized: true,
            seasonal_amplitude: None,
            seasonal_frequency: default_frequency(),
            burn_in: default_burn_in(),
            stationary_only: true,
        }
    }
}

impl ArRanges {
    /// Held-out evaluation series: unit noise variance.
    pub fn test(d: usize, q: usize) -> Self {
        ArRanges {
            d: vec![d],
            q: vec![q],
            sigma2: (1.0, 1.0),
            ..ArRanges::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if self.d.is_empty() || self.q.is_empty() || self.d.contains(&0) || self.q.contains(&0) {
            return Err(Error::InvalidBound("d and q ranges must be non-empty and positive".into()));
        }
        let (lo, hi) = self.sigma2;
        if !(0.0 <= lo && lo <= hi) {
            return Err(Error::InvalidBound(format!("sigma2 range ({lo}, {hi})")));
        }
        Ok(())
    }
}

fn uniform(rng: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

pub fn sample_ar_params(ranges: &ArRanges, rng: &mut impl Rng) -> Result<ArParams> {
    ranges.validate()?;
    let d = ranges.d[rng.gen_range(0..ranges.d.len())];
    let q = ranges.q[rng.gen_range(0..ranges.q.len())];
    let coeffs = (0..q)
        .map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect())
        .collect();
    let noise_var = uniform(rng, ranges.sigma2.0, ranges.sigma2.1);
    ArParams::new(coeffs, noise_var, ranges.normalized, rng.gen())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ranges: ArRanges,
    pub master_seed: u64,
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub series: Vec<TimeSeries>,
    pub params: Vec<ArParams>,
    pub seasonality: Vec<Option<SeasonalitySpec>>,
    pub meta: DatasetMeta,
}

/// Seed of the `index`-th series under `master_seed` (splitmix64 mixing).
pub fn derive_seed(master_seed: u64, index: u64) -> u64 {
    let mut z = master_seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const MAX_STATIONARY_DRAWS: usize = 10_000;

/// Spectral radius of the companion matrix of the target's own lags. The
/// covariates enter as exogenous i.i.d. inputs and do not affect stability.
pub fn target_spectral_radius(params: &ArParams) -> f64 {
    let q = params.q;
    let mut c = DMatrix::<f64>::zeros(q, q);
    for i in 0..q {
        c[(0, i)] = params.scale() * params.coeffs[i][0];
    }
    for i in 1..q {
        c[(i, i - 1)] = 1.0;
    }
    c.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Whether every root of the target recursion lies strictly inside the unit
/// circle.
pub fn is_stationary(params: &ArParams) -> bool {
    target_spectral_radius(params) < 1.0
}

pub fn gen_dataset(n: usize, ranges: &ArRanges, master_seed: u64, t: usize) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Size("dataset needs at least one series".into()));
    }
    ranges.validate()?;
    let mut series = Vec::with_capacity(n);
    let mut params = Vec::with_capacity(n);
    let mut seasonality = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(master_seed, i as u64));
        let mut p = sample_ar_params(ranges, &mut rng)?;
        let mut attempts = 1;
        while ranges.stationary_only && !is_stationary(&p) {
            if attempts == MAX_STATIONARY_DRAWS {
                return Err(Error::Condition(format!(
                    "no stationary coefficients for series {i} in {attempts} draws"
                )));
            }
            p = sample_ar_params(ranges, &mut rng)?;
            attempts += 1;
        }
        let mut s = gen_ar(&p, t, ranges.burn_in).map_err(|e| e.at_series(i))?;
        let season = ranges.seasonal_amplitude.map(|(lo, hi)| SeasonalitySpec {
            amplitude: uniform(&mut rng, lo, hi),
            frequency: ranges.seasonal_frequency,
        });
        if let Some(spec) = season {
            s = add_seasonality(&s, spec)?;
        }
        series.push(s);
        params.push(p);
        seasonality.push(season);
    }
    Ok(Dataset {
        series,
        params,
        seasonality,
        meta: DatasetMeta {
            ranges: ranges.clone(),
            master_seed,
            t,
        },
    })
}

impl Error {
    fn at_series(self, index: usize) -> Error {
        match self {
            Error::Divergence { step } => Error::SeriesDivergence {
                series: index,
                step,
            },
            other => other,
        }
    }
}

/// Largest Euclidean norm of the stacked `q`-lag feature vector over all
/// windows of the series.
pub fn realized_feature_bound(series: &TimeSeries, q: usize) -> f64 {
    let mut best = 0.0f64;
    let mut phi = Vec::with_capacity(q * series.d());
    for t in q..=series.len() {
        phi.clear();
        for j in 0..series.d() {
            for i in 1..=q {
                phi.push(series.get(j, t - i));
            }
        }
        best = best.max(norm2(&phi));
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_noise_geometric_decay() {
        let p = ArParams::new(vec![vec![0.5]], 0.0, true, 1).unwrap();
        let init = DenseMatrix::from_rows(&[vec![1.0]]).unwrap();
        let g = gen_ar_traced(&p, 5, 0, Some(&init)).unwrap();
        assert_eq!(g.series.variate(0), &[1.0, 0.5, 0.25, 0.125, 0.0625]);
    }

    #[test]
    fn seasonality_sine_table() {
        let s = TimeSeries::univariate(&[0.0; 4]).unwrap();
        let out = add_seasonality(
            &s,
            SeasonalitySpec {
                amplitude: 1.0,
                frequency: 4,
            },
        )
        .unwrap();
        let expect = [0.0, 1.0, 0.0, -1.0];
        for (a, b) in out.variate(0).iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = sample_ar_params(&ArRanges::default(), &mut rng).unwrap();
        assert_eq!(gen_ar(&p, 200, 50).unwrap(), gen_ar(&p, 200, 50).unwrap());
    }

    #[test]
    fn degenerate_ranges_fix_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let r = ArRanges {
            d: vec![1],
            q: vec![1],
            ..ArRanges::default()
        };
        let p = sample_ar_params(&r, &mut rng).unwrap();
        assert_eq!((p.d, p.q), (1, 1));
        assert!(sample_ar_params(&ArRanges { d: vec![], ..r }, &mut rng).is_err());
    }

    #[test]
    fn realized_bound_of_known_series() {
        let s = TimeSeries::univariate(&[3.0, 4.0, 0.0]).unwrap();
        assert_eq!(realized_feature_bound(&s, 2), 5.0);
    }

    #[test]
    fn companion_radius_of_known_recursions() {
        let ar1 = ArParams::new(vec![vec![0.5]], 1.0, true, 0).unwrap();
        assert!((target_spectral_radius(&ar1) - 0.5).abs() < 1e-12);
        // roots 0.8 and 0.7
        let ar2 = ArParams::new(vec![vec![1.5, 9.0], vec![-0.56, -9.0]], 1.0, false, 0).unwrap();
        assert!((target_spectral_radius(&ar2) - 0.8).abs() < 1e-12);
        assert!(!is_stationary(&ArParams::new(vec![vec![1.2]], 1.0, true, 0).unwrap()));
    }
}
