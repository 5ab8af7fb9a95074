//! Training and evaluation of any-variate models on generated datasets.
//!
//! Evaluation reports MSE without the ½ factor of the training loss, so a
//! perfect predictor on unit-noise test series sits at 1.

use std::path::Path;

use icl_ts_core::encoding::anyvariate_min_dim;
use icl_ts_core::model::TransformerParams;
use icl_ts_core::synth::{derive_seed, gen_dataset, ArRanges, Dataset};
use icl_ts_core::train::{
    eval_positions, init_params, train, HistoryRow, ModelConfig, TrainConfig, WindowSpec,
};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};
use crate::io::{out_path, read_json, write_csv, write_json};

pub const MODEL_FILE: &str = "model.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const EVAL_FILE: &str = "eval.csv";

/// Above these sizes a configuration is accepted but has not been exercised.
const DESK_DIM: usize = 64;
const DESK_LAYERS: usize = 4;

/// Everything a training run needs besides the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainRun {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: WindowSpec,
}

impl Default for TrainRun {
    fn default() -> Self {
        TrainRun {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            window: WindowSpec {
                t_ctx: 16,
                d_slots: 5,
                dim: 32,
            },
        }
    }
}

impl TrainRun {
    pub fn validate(&self) -> CliResult<()> {
        self.train.validate()?;
        if self.window.dim != self.model.dim {
            return Err(CliError::Config(format!(
                "window dim {} differs from model dim {}",
                self.window.dim, self.model.dim
            )));
        }
        if self.window.t_ctx < 2 || self.window.d_slots == 0 {
            return Err(CliError::Config("window needs t_ctx >= 2 and d_slots >= 1".into()));
        }
        let need = anyvariate_min_dim(self.window.t_ctx, self.window.d_slots);
        if need > self.window.dim {
            return Err(CliError::Config(format!(
                "t_ctx {} with {} variate slots needs dim >= {need}",
                self.window.t_ctx, self.window.d_slots
            )));
        }
        Ok(())
    }

    fn notes(&self) -> Vec<String> {
        if self.model.dim > DESK_DIM || self.model.layers > DESK_LAYERS {
            vec!["not validated at desk scale".into()]
        } else {
            Vec::new()
        }
    }
}

/// Saved model: configuration, provenance and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: ModelConfig,
    pub window: WindowSpec,
    pub b_x: f64,
    pub steps: usize,
    pub seed: u64,
    pub trained_d: Vec<usize>,
    pub trained_q: Vec<usize>,
    pub notes: Vec<String>,
    pub params: TransformerParams,
}

impl ModelFile {
    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }

    /// Window of `lookback + 1` steps, if the embedding can hold it.
    pub fn window_for(&self, lookback: usize, d: usize) -> CliResult<WindowSpec> {
        if d > self.window.d_slots {
            return Err(CliError::Config(format!(
                "d = {d} exceeds the model's {} variate slots",
                self.window.d_slots
            )));
        }
        let t_ctx = lookback + 1;
        let need = anyvariate_min_dim(t_ctx, self.window.d_slots);
        if need > self.window.dim {
            return Err(CliError::Config(format!(
                "lookback {lookback} needs dim >= {need}, model has {}",
                self.window.dim
            )));
        }
        Ok(WindowSpec {
            t_ctx,
            ..self.window
        })
    }
}

fn distinct<T: Copy + Ord>(xs: impl Iterator<Item = T>) -> Vec<T> {
    let mut v: Vec<T> = xs.collect();
    v.sort_unstable();
    v.dedup();
    v
}

/// Trains from the seeded initialisation; `run.train.seed` drives both the
/// initial weights and the example sampling.
pub fn fit(data: &Dataset, run: &TrainRun) -> CliResult<(ModelFile, Vec<HistoryRow>)> {
    run.validate()?;
    let init = init_params(&run.model, derive_seed(run.train.seed, 0));
    let (params, history) = train(&init, data, &run.train, &run.window)?;
    let model = ModelFile {
        model: run.model.clone(),
        window: run.window,
        b_x: run.train.b_x,
        steps: run.train.steps,
        seed: run.train.seed,
        trained_d: distinct(data.params.iter().map(|p| p.d)),
        trained_q: distinct(data.params.iter().map(|p| p.q)),
        notes: run.notes(),
        params,
    };
    Ok((model, history))
}

pub fn write_history(path: &Path, history: &[HistoryRow], norm_budget: f64) -> CliResult<()> {
    let rows: Vec<Vec<String>> = history
        .iter()
        .map(|h| {
            vec![
                h.step.to_string(),
                format!("{:?}", h.train_loss),
                format!("{:?}", h.op_norm),
                format!("{:?}", h.lr),
            ]
        })
        .collect();
    write_csv(
        path,
        &[
            "train_loss keeps the 1/2 factor".into(),
            format!("norm_budget={norm_budget:?}"),
        ],
        &["step", "train_loss", "op_norm", "lr"],
        &rows,
    )
}

/// `train` subcommand: writes `model.json` and `history.csv` into `out`.
pub fn cmd_train(data: &Dataset, run: &TrainRun, out: &Path) -> CliResult<ModelFile> {
    let (model, history) = fit(data, run)?;
    write_json(out_path(out, MODEL_FILE)?, &model)?;
    write_history(&out.join(HISTORY_FILE), &history, run.train.norm_budget)?;
    Ok(model)
}

/// Evaluation grid: fresh unit-noise series for every `(d, q)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSpec {
    pub d: Vec<usize>,
    pub q: Vec<usize>,
    /// Defaults to the training context minus the target step.
    pub lookbacks: Vec<usize>,
    pub series: usize,
    pub positions: usize,
}

impl Default for EvalSpec {
    fn default() -> Self {
        EvalSpec {
            d: vec![2],
            q: vec![2],
            lookbacks: Vec::new(),
            series: 4,
            positions: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub d: usize,
    pub q: usize,
    pub lookback: usize,
    pub mse: f64,
    pub error: String,
}

fn eval_cell(model: &ModelFile, d: usize, q: usize, lookback: usize, spec: &EvalSpec, seed: u64) -> CliResult<f64> {
    let window = model.window_for(lookback, d)?;
    let test = gen_dataset(spec.series, &ArRanges::test(d, q), seed, lookback + spec.positions)?;
    Ok(2.0 * eval_positions(&model.params, &test, model.b_x, &window, 1)?)
}

/// Per-`(d, q, lookback)` test MSE. Cells the model cannot encode get a NaN
/// row with the reason.
pub fn evaluate(model: &ModelFile, spec: &EvalSpec, seed: u64) -> CliResult<Vec<EvalRow>> {
    if spec.series == 0 || spec.positions == 0 {
        return Err(CliError::Config("eval needs series >= 1 and positions >= 1".into()));
    }
    if spec.d.contains(&0) || spec.q.contains(&0) {
        return Err(CliError::Config("d and q must be positive".into()));
    }
    let lookbacks = if spec.lookbacks.is_empty() {
        vec![model.window.t_ctx - 1]
    } else {
        spec.lookbacks.clone()
    };
    let mut rows = Vec::new();
    for &d in &spec.d {
        for &q in &spec.q {
            for &lookback in &lookbacks {
                let cell_seed = derive_seed(seed, (d * 1000 + q) as u64);
                let (mse, error) = match eval_cell(model, d, q, lookback, spec, cell_seed) {
                    Ok(m) => (m, String::new()),
                    Err(CliError::Divergence(e)) => return Err(CliError::Divergence(e)),
                    Err(e) => (f64::NAN, e.to_string()),
                };
                rows.push(EvalRow {
                    d,
                    q,
                    lookback,
                    mse,
                    error,
                });
            }
        }
    }
    Ok(rows)
}

/// `eval` subcommand: writes `eval.csv` into `out`.
pub fn cmd_eval(model: &ModelFile, spec: &EvalSpec, seed: u64, out: &Path) -> CliResult<Vec<EvalRow>> {
    let rows = evaluate(model, spec, seed)?;
    let table: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.d.to_string(),
                r.q.to_string(),
                r.lookback.to_string(),
                format!("{:?}", r.mse),
                r.error.clone(),
            ]
        })
        .collect();
    let mut comments = vec!["mse is reported without the 1/2 factor".to_string()];
    comments.push(format!(
        "trained on d in {:?}, q in {:?}",
        model.trained_d, model.trained_q
    ));
    write_csv(
        out_path(out, EVAL_FILE)?,
        &comments,
        &["d", "q", "lookback", "mse", "error"],
        &table,
    )?;
    Ok(rows)
}

/// Test MSE as a function of the number of pretraining series.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendSpec {
    pub ns: Vec<usize>,
    pub seeds: Vec<u64>,
    pub run: TrainRun,
    pub ranges: ArRanges,
    pub series_len: usize,
    pub test_series: usize,
    pub test_len: usize,
    pub test_stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendRow {
    pub n: usize,
    pub seed: u64,
    pub test_mse: f64,
}

/// For every seed the training sets are nested: the first `n` series of the
/// largest set, so differences between sizes come from the added series.
pub fn learning_trend(spec: &TrendSpec) -> CliResult<Vec<TrendRow>> {
    let mut rows = Vec::new();
    for &seed in &spec.seeds {
        let test_ranges = ArRanges {
            sigma2: (1.0, 1.0),
            ..spec.ranges.clone()
        };
        let test = gen_dataset(spec.test_series, &test_ranges, derive_seed(seed, 1), spec.test_len)?;
        for &n in &spec.ns {
            let data = gen_dataset(n, &spec.ranges, derive_seed(seed, 2), spec.series_len)?;
            let mut run = spec.run.clone();
            run.train.seed = seed;
            let (model, _) = fit(&data, &run)?;
            let loss = eval_positions(&model.params, &test, model.b_x, &model.window, spec.test_stride)?;
            rows.push(TrendRow {
                n,
                seed,
                test_mse: 2.0 * loss,
            });
        }
    }
    Ok(rows)
}

/// Median test MSE per `n`, in the order of `ns`.
pub fn median_by_n(rows: &[TrendRow], ns: &[usize]) -> Vec<(usize, f64)> {
    ns.iter()
        .map(|&n| {
            let mut v: Vec<f64> = rows.iter().filter(|r| r.n == n).map(|r| r.test_mse).collect();
            v.sort_by(f64::total_cmp);
            let m = match v.len() {
                0 => f64::NAN,
                k if k % 2 == 1 => v[k / 2],
                k => 0.5 * (v[k / 2 - 1] + v[k / 2]),
            };
            (n, m)
        })
        .collect()
}
