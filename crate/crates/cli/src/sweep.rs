//! Lookback sweeps over one long unit-noise test series per seed.
//!
//! Every lookback is evaluated at the same end positions, so the curves
//! differ only in how much context each method sees. `mse` is the
//! conditional error `σ² + mean((ŷ − E[y | past])²)`, which has the noise
//! floor σ² and far less sampling noise than `raw_mse = mean((ŷ − y)²)`.
//! Neither carries the ½ factor of the training loss.

use std::path::PathBuf;

use icl_ts_core::baseline::{gd_iterate, gram_extremes, in_context_split, ls_closed_form, predict};
use icl_ts_core::construct::{assemble_icl_transformer, realized_input_bound, GdIclSpec, IclLayout, Stage};
use icl_ts_core::encoding::TimeSeries;
use icl_ts_core::model::tf_forward;
use icl_ts_core::synth::{derive_seed, gen_ar, is_stationary, sample_ar_params, ArParams, ArRanges};
use icl_ts_core::train::predict_clipped;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::write_csv;
use crate::pretrain::ModelFile;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ConstructedIcl,
    #[serde(rename = "ls-gd-50")]
    #[value(name = "ls-gd-50")]
    LsGd50,
    #[serde(rename = "ls-gd-100")]
    #[value(name = "ls-gd-100")]
    LsGd100,
    LsClosed,
    TrainedModel,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::ConstructedIcl => "constructed-icl",
            Method::LsGd50 => "ls-gd-50",
            Method::LsGd100 => "ls-gd-100",
            Method::LsClosed => "ls-closed",
            Method::TrainedModel => "trained-model",
        }
    }
}

/// Gradient layers of the constructed transformer, matched to `ls-gd-100`.
pub const CONSTRUCTED_STEPS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub lookbacks: Vec<usize>,
    pub methods: Vec<Method>,
    pub test_sigma2: f64,
    pub d: usize,
    pub q: usize,
    pub seeds: Vec<u64>,
    /// End positions evaluated per cell.
    pub positions: usize,
    /// Required by `trained-model`.
    pub model: Option<PathBuf>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        SweepSpec {
            lookbacks: vec![8, 16, 32, 64, 128, 256, 512],
            methods: vec![Method::ConstructedIcl, Method::LsGd50, Method::LsGd100, Method::LsClosed],
            test_sigma2: 1.0,
            d: 1,
            q: 5,
            seeds: (0..5).collect(),
            positions: 20,
            model: None,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.lookbacks.is_empty() || self.lookbacks.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("lookback grid {:?} must be non-empty and strictly increasing", self.lookbacks));
        }
        if self.methods.is_empty() {
            return bad("no methods".into());
        }
        if self.methods.contains(&Method::TrainedModel) && self.model.is_none() {
            return bad("trained-model needs a model file".into());
        }
        if self.d == 0 || self.q == 0 {
            return bad("d and q must be positive".into());
        }
        if self.lookbacks[0] <= self.q {
            return bad(format!("lookback {} leaves no in-context examples for q = {}", self.lookbacks[0], self.q));
        }
        if self.seeds.is_empty() || self.positions == 0 {
            return bad("need at least one seed and one position".into());
        }
        if !(self.test_sigma2 > 0.0 && self.test_sigma2.is_finite()) {
            return bad(format!("test sigma2 = {}", self.test_sigma2));
        }
        Ok(())
    }

    /// Rows the sweep produces.
    pub fn n_cells(&self) -> usize {
        self.lookbacks.len() * self.methods.len() * self.seeds.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub method: Method,
    pub d: usize,
    pub q: usize,
    pub lookback: usize,
    pub seed: u64,
    pub mse: f64,
    pub raw_mse: f64,
    pub error: String,
}

/// One test series per seed, long enough for the largest lookback.
struct TestSeries {
    params: ArParams,
    series: TimeSeries,
}

fn test_series(spec: &SweepSpec, seed: u64) -> CliResult<TestSeries> {
    let ranges = ArRanges {
        sigma2: (spec.test_sigma2, spec.test_sigma2),
        ..ArRanges::test(spec.d, spec.q)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0));
    let params = loop {
        let p = sample_ar_params(&ranges, &mut rng)?;
        if is_stationary(&p) {
            break p;
        }
    };
    let len = spec.lookbacks.last().copied().unwrap_or(0) + spec.positions;
    let series = gen_ar(&params, len, ranges.burn_in)?;
    Ok(TestSeries { params, series })
}

/// Spec of the constructed transformer for one window. `B_w` bounds the
/// norms along the gradient-descent path, which is what the gates need.
fn constructed_spec(window: &TimeSeries, q: usize) -> CliResult<GdIclSpec> {
    let (data, _) = in_context_split(window, q)?;
    let (alpha, beta) = gram_extremes(&data);
    if !(beta > 0.0) {
        return Err(CliError::Config("degenerate window: zero Gram matrix".into()));
    }
    let eta = 1.0 / beta;
    let mut w = vec![0.0; data.n_features()];
    let mut b_w = 1.0f64;
    for _ in 0..CONSTRUCTED_STEPS {
        w = gd_iterate(&data, &w, eta, 1);
        b_w = b_w.max(w.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    Ok(GdIclSpec {
        q_max: q,
        d_max: window.d(),
        lags: q,
        l2: CONSTRUCTED_STEPS,
        eta,
        b_w,
        b_x: realized_input_bound(window, q),
        epsilon: 1e-3,
        alpha,
        beta,
        kappa: if alpha > 0.0 { beta / alpha } else { f64::INFINITY },
        split_heads: 1,
        with_mle: false,
    })
}

fn gd_prediction(window: &TimeSeries, q: usize, steps: usize) -> CliResult<f64> {
    let (data, query) = in_context_split(window, q)?;
    let (_, beta) = gram_extremes(&data);
    if !(beta > 0.0) {
        return Err(CliError::Config("degenerate window: zero Gram matrix".into()));
    }
    let w = gd_iterate(&data, &vec![0.0; data.n_features()], 1.0 / beta, steps);
    Ok(predict(&w, &query)?)
}

fn predict_one(method: Method, window: &TimeSeries, q: usize, model: Option<&ModelFile>) -> CliResult<f64> {
    match method {
        Method::ConstructedIcl => {
            let spec = constructed_spec(window, q)?;
            let layout = IclLayout::any_variate_min(window.len(), window.d(), window.d(), q, q, Stage::Gd)?;
            let (params, _) = assemble_icl_transformer(&spec, &layout)?;
            let enc = layout.encode(window)?;
            let out = tf_forward(&params, &enc.h, Some(&enc.mask))?;
            Ok(out.get(enc.layout.value_row, enc.layout.target_col))
        }
        Method::LsGd50 => gd_prediction(window, q, 50),
        Method::LsGd100 => gd_prediction(window, q, 100),
        Method::LsClosed => {
            let (data, query) = in_context_split(window, q)?;
            Ok(predict(&ls_closed_form(&data, 0.0)?, &query)?)
        }
        Method::TrainedModel => {
            let m = model.ok_or_else(|| CliError::Config("trained-model needs a model file".into()))?;
            let ws = m.window_for(window.len() - 1, window.d())?;
            let (enc, _) = ws.encode(window, 0)?;
            Ok(predict_clipped(&m.params, &enc, m.b_x)?)
        }
    }
}

fn run_cell(
    spec: &SweepSpec,
    method: Method,
    lookback: usize,
    test: &TestSeries,
    model: Option<&ModelFile>,
) -> CliResult<(f64, f64)> {
    let first_end = spec.lookbacks.last().copied().unwrap_or(0);
    let (mut cond, mut raw) = (0.0, 0.0);
    for k in 0..spec.positions {
        let end = first_end + k;
        let window = test.series.window(end - lookback, lookback + 1)?;
        let pred = predict_one(method, &window, spec.q, model)?;
        if !pred.is_finite() {
            return Err(CliError::Divergence(format!("non-finite prediction at step {end}")));
        }
        let mean = test.params.conditional_mean(&test.series, end);
        cond += (pred - mean).powi(2);
        raw += (pred - test.series.get(0, end)).powi(2);
    }
    let n = spec.positions as f64;
    Ok((test.params.noise_var + cond / n, raw / n))
}

/// Runs every `(method, lookback, seed)` cell. Cells are independent and run
/// in parallel; rows come back sorted so the output never depends on
/// scheduling.
pub fn run_sweep(spec: &SweepSpec) -> CliResult<Vec<SweepRow>> {
    spec.validate()?;
    let model = match (&spec.model, spec.methods.contains(&Method::TrainedModel)) {
        (Some(p), true) => Some(ModelFile::load(p)?),
        _ => None,
    };
    let tests = spec
        .seeds
        .iter()
        .map(|&s| test_series(spec, s))
        .collect::<CliResult<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(spec.n_cells());
    for &m in &spec.methods {
        for &lb in &spec.lookbacks {
            for k in 0..spec.seeds.len() {
                cells.push((m, lb, k));
            }
        }
    }
    let mut rows: Vec<SweepRow> = cells
        .par_iter()
        .map(|&(method, lookback, k)| {
            let (mse, raw_mse, error) = match run_cell(spec, method, lookback, &tests[k], model.as_ref()) {
                Ok((a, b)) => (a, b, String::new()),
                Err(e) => (f64::NAN, f64::NAN, e.to_string()),
            };
            SweepRow {
                method,
                d: spec.d,
                q: spec.q,
                lookback,
                seed: spec.seeds[k],
                mse,
                raw_mse,
                error,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        (a.method, a.d, a.q, a.lookback, a.seed).cmp(&(b.method, b.d, b.q, b.lookback, b.seed))
    });
    if rows.iter().all(|r| !r.error.is_empty()) {
        return Err(CliError::Divergence(format!("all {} sweep cells failed: {}", rows.len(), rows[0].error)));
    }
    Ok(rows)
}

pub fn write_sweep(path: &std::path::Path, rows: &[SweepRow]) -> CliResult<()> {
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.method.name().to_string(),
                r.d.to_string(),
                r.q.to_string(),
                r.lookback.to_string(),
                r.seed.to_string(),
                format!("{:?}", r.mse),
                format!("{:?}", r.raw_mse),
                r.error.clone(),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "mse = sigma2 + mean((pred - conditional mean)^2), no 1/2 factor".into(),
            "raw_mse = mean((pred - y)^2)".into(),
        ],
        &["method", "d", "q", "lookback", "seed", "mse", "raw_mse", "error"],
        &table,
    )
}

/// Seed-averaged `mse` per lookback for one method, skipping failed cells.
pub fn mean_curve(rows: &[SweepRow], method: Method) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.method == method && r.mse.is_finite()) {
        match out.iter_mut().find(|(lb, _, _)| *lb == r.lookback) {
            Some(e) => {
                e.1 += r.mse;
                e.2 += 1;
            }
            None => out.push((r.lookback, r.mse, 1)),
        }
    }
    out.sort_by_key(|e| e.0);
    out.into_iter().map(|(lb, s, c)| (lb, s / c as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_must_increase_and_leave_examples() {
        assert!(SweepSpec::default().validate().is_ok());
        for lookbacks in [vec![], vec![16, 16], vec![32, 16], vec![5, 16]] {
            let s = SweepSpec {
                lookbacks,
                ..SweepSpec::default()
            };
            assert!(s.validate().is_err());
        }
        let s = SweepSpec {
            methods: vec![Method::TrainedModel],
            ..SweepSpec::default()
        };
        assert!(s.validate().is_err());
    }

    #[test]
    fn mean_curve_skips_failed_cells() {
        let row = |lookback, seed, mse| SweepRow {
            method: Method::LsClosed,
            d: 1,
            q: 1,
            lookback,
            seed,
            mse,
            raw_mse: mse,
            error: String::new(),
        };
        let rows = [row(8, 0, 2.0), row(8, 1, 4.0), row(16, 0, f64::NAN), row(16, 1, 1.5)];
        assert_eq!(mean_curve(&rows, Method::LsClosed), vec![(8, 3.0), (16, 1.5)]);
    }
}
