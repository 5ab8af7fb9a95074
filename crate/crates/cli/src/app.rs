//! Command-line surface and dispatch.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use icl_ts_core::synth::{gen_dataset, ArRanges};
use serde::Serialize;
use serde_json::json;

use crate::bounds::{default_inputs, run_bounds, Ar1Inputs, BoundsArgs};
use crate::error::{CliError, CliResult};
use crate::io::{out_path, read_config, read_dataset, to_json_string, write_dataset, write_json};
use crate::pretrain::{cmd_eval, cmd_train, EvalSpec, ModelFile, TrainRun, MODEL_FILE};
use crate::sweep::{mean_curve, run_sweep, write_sweep, Method, SweepSpec};
use crate::verify::{run_verify, Tamper, VerifyOptions};

#[derive(Debug, Parser)]
#[command(name = "icl-ts-lab", version, about = "In-context learning on autoregressive time series")]
pub struct Cli {
    /// Master seed; every command is deterministic given it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// JSON file with the command's settings; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic AR dataset.
    Gen(GenArgs),
    /// Check the constructed transformers against their oracles.
    Verify(VerifyArgs),
    /// Sweep the lookback on held-out series.
    Sweep(SweepArgs),
    /// Evaluate the generalization bound calculators.
    Bounds(BoundsCliArgs),
    /// Pretrain an any-variate model on a dataset.
    Train(TrainArgs),
    /// Evaluate a trained model on fresh series.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, default_value_t = 100)]
    pub n: usize,
    /// Series length after burn-in.
    #[arg(long = "T", default_value_t = 512)]
    pub t: usize,
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<usize>>,
    /// Noise variance range `lo,hi` (a single value fixes it).
    #[arg(long, value_delimiter = ',')]
    pub sigma2: Option<Vec<f64>>,
    /// Seasonal amplitude range `lo,hi`.
    #[arg(long, value_delimiter = ',')]
    pub seasonal: Option<Vec<f64>>,
    /// Held-out series: unit noise variance.
    #[arg(long)]
    pub test: bool,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[arg(long)]
    pub reformat_instances: Option<usize>,
    #[arg(long)]
    pub gd_instances: Option<usize>,
    #[arg(long)]
    pub mle_instances: Option<usize>,
    /// Spread the shift heads over this many layers.
    #[arg(long)]
    pub split_heads: Option<usize>,
    /// Corrupt the construction on purpose (negative control).
    #[arg(long, value_enum)]
    pub tamper: Option<Tamper>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    pub lookbacks: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',', value_enum)]
    pub methods: Option<Vec<Method>>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub q: Option<usize>,
    /// Number of seeds, offset by `--seed`.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub positions: Option<usize>,
    #[arg(long)]
    pub sigma2: Option<f64>,
    /// Model file for `trained-model`.
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsCliArgs {
    /// Sample counts; repeat or comma-separate to compare.
    #[arg(long, value_delimiter = ',')]
    pub n: Vec<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub kappa: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    /// Also check the AR(1) conditions and evaluate its bound.
    #[arg(long)]
    pub ar1: bool,
    /// AR(1) coefficient vector.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub ar1_w: Option<Vec<f64>>,
    #[arg(long)]
    pub ar1_sigma: Option<f64>,
    #[arg(long)]
    pub ar1_b_x: Option<f64>,
    #[arg(long)]
    pub ar1_b_w: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub t_ctx: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model file; defaults to `<out>/model.json`.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub d: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub q: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    pub lookbacks: Option<Vec<usize>>,
    #[arg(long)]
    pub series: Option<usize>,
    #[arg(long)]
    pub positions: Option<usize>,
}

fn load_or_default<T: serde::de::DeserializeOwned + Default>(config: Option<&Path>) -> CliResult<T> {
    config.map_or_else(|| Ok(T::default()), read_config)
}

fn range(v: &[f64], what: &str) -> CliResult<(f64, f64)> {
    match v {
        [x] => Ok((*x, *x)),
        [lo, hi] => Ok((*lo, *hi)),
        _ => Err(CliError::Config(format!("--{what} takes one value or `lo,hi`"))),
    }
}

fn print_json<T: Serialize>(value: &T) -> CliResult<()> {
    println!("{}", to_json_string(value)?);
    Ok(())
}

fn gen(cli: &Cli, a: &GenArgs) -> CliResult<()> {
    let mut ranges: ArRanges = load_or_default(cli.config.as_deref())?;
    if let Some(d) = &a.d {
        ranges.d = d.clone();
    }
    if let Some(q) = &a.q {
        ranges.q = q.clone();
    }
    if let Some(s) = &a.sigma2 {
        ranges.sigma2 = range(s, "sigma2")?;
    }
    if a.test {
        ranges.sigma2 = (1.0, 1.0);
    }
    if let Some(s) = &a.seasonal {
        ranges.seasonal_amplitude = Some(range(s, "seasonal")?);
    }
    if a.n == 0 || a.t == 0 {
        return Err(CliError::Config("--n and --T must be positive".into()));
    }
    let seed = cli.seed.unwrap_or(0);
    let data = gen_dataset(a.n, &ranges, seed, a.t)?;
    let manifest = write_dataset(&cli.out, &data)?;
    let mut by_dq: BTreeMap<String, usize> = BTreeMap::new();
    for e in &manifest.series {
        *by_dq.entry(format!("d={},q={}", e.d, e.q)).or_default() += 1;
    }
    print_json(&json!({
        "command": "gen",
        "out": cli.out.display().to_string(),
        "master_seed": seed,
        "n": manifest.n,
        "t": manifest.t,
        "ranges": manifest.ranges,
        "series_by_dq": by_dq,
    }))
}

fn verify(cli: &Cli, a: &VerifyArgs) -> CliResult<()> {
    let mut opts: VerifyOptions = load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        opts.seed = s;
    }
    opts.reformat_instances = a.reformat_instances.unwrap_or(opts.reformat_instances);
    opts.gd_instances = a.gd_instances.unwrap_or(opts.gd_instances);
    opts.mle_instances = a.mle_instances.unwrap_or(opts.mle_instances);
    opts.split_heads = a.split_heads.unwrap_or(opts.split_heads);
    if a.tamper.is_some() {
        opts.tamper = a.tamper;
    }
    if opts.split_heads == 0 {
        return Err(CliError::Config("--split-heads must be >= 1".into()));
    }
    let report = run_verify(&opts)?;
    write_json(out_path(&cli.out, "verify.json")?, &report)?;
    print_json(&report)?;
    if report.pass {
        Ok(())
    } else {
        Err(CliError::Verification(format!("failed checks: {}", report.failed().join(", "))))
    }
}

fn sweep(cli: &Cli, a: &SweepArgs) -> CliResult<()> {
    let mut spec: SweepSpec = load_or_default(cli.config.as_deref())?;
    if let Some(v) = &a.lookbacks {
        spec.lookbacks = v.clone();
    }
    if let Some(v) = &a.methods {
        spec.methods = v.clone();
    }
    spec.d = a.d.unwrap_or(spec.d);
    spec.q = a.q.unwrap_or(spec.q);
    spec.positions = a.positions.unwrap_or(spec.positions);
    spec.test_sigma2 = a.sigma2.unwrap_or(spec.test_sigma2);
    if a.model.is_some() {
        spec.model = a.model.clone();
    }
    let base = cli.seed.unwrap_or(0);
    match a.seeds {
        Some(k) => spec.seeds = (0..k as u64).map(|i| base + i).collect(),
        None if cli.seed.is_some() => spec.seeds = spec.seeds.iter().map(|s| base + s).collect(),
        None => {}
    }
    let rows = run_sweep(&spec)?;
    let path = out_path(&cli.out, "sweep.csv")?;
    write_sweep(&path, &rows)?;
    let curves: BTreeMap<&str, Vec<(usize, f64)>> =
        spec.methods.iter().map(|&m| (m.name(), mean_curve(&rows, m))).collect();
    print_json(&json!({
        "command": "sweep",
        "csv": path.display().to_string(),
        "rows": rows.len(),
        "failed_cells": rows.iter().filter(|r| !r.error.is_empty()).count(),
        "mean_mse": curves,
    }))
}

fn bounds(cli: &Cli, a: &BoundsCliArgs) -> CliResult<()> {
    let mut inputs = match &cli.config {
        Some(p) => read_config(p)?,
        None => default_inputs(),
    };
    if let Some(v) = a.alpha {
        inputs.alpha = v;
    }
    if let Some(v) = a.kappa {
        inputs.kappa = v;
    }
    if let Some(v) = a.layers {
        inputs.l = v;
    }
    let ar1 = (a.ar1 || a.ar1_w.is_some()).then(|| {
        let d = Ar1Inputs::default();
        Ar1Inputs {
            w: a.ar1_w.clone().unwrap_or(d.w),
            sigma_eps: a.ar1_sigma.unwrap_or(d.sigma_eps),
            b_x: a.ar1_b_x.unwrap_or(d.b_x),
            b_w: a.ar1_b_w.unwrap_or(d.b_w),
            delta: d.delta,
        }
    });
    let report = run_bounds(&BoundsArgs {
        inputs,
        ns: a.n.clone(),
        ar1,
    })?;
    write_json(out_path(&cli.out, "bounds.json")?, &report)?;
    print_json(&report)
}

fn train(cli: &Cli, a: &TrainArgs) -> CliResult<()> {
    let mut run: TrainRun = load_or_default(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        run.train.seed = s;
    }
    run.train.steps = a.steps.unwrap_or(run.train.steps);
    run.train.batch = a.batch.unwrap_or(run.train.batch);
    run.train.lr = a.lr.unwrap_or(run.train.lr);
    run.window.t_ctx = a.t_ctx.unwrap_or(run.window.t_ctx);
    let data = read_dataset(&a.data)?;
    let model = cmd_train(&data, &run, &cli.out)?;
    print_json(&json!({
        "command": "train",
        "model": cli.out.join(MODEL_FILE).display().to_string(),
        "steps": model.steps,
        "trained_d": model.trained_d,
        "trained_q": model.trained_q,
        "notes": model.notes,
    }))
}

fn eval(cli: &Cli, a: &EvalArgs) -> CliResult<()> {
    let mut spec: EvalSpec = load_or_default(cli.config.as_deref())?;
    if let Some(v) = &a.d {
        spec.d = v.clone();
    }
    if let Some(v) = &a.q {
        spec.q = v.clone();
    }
    if let Some(v) = &a.lookbacks {
        spec.lookbacks = v.clone();
    }
    spec.series = a.series.unwrap_or(spec.series);
    spec.positions = a.positions.unwrap_or(spec.positions);
    let path = a.model.clone().unwrap_or_else(|| cli.out.join(MODEL_FILE));
    let model = ModelFile::load(&path)?;
    let rows = cmd_eval(&model, &spec, cli.seed.unwrap_or(0), &cli.out)?;
    print_json(&json!({ "command": "eval", "rows": rows }))
}

pub fn run(cli: &Cli) -> CliResult<()> {
    match &cli.command {
        Command::Gen(a) => gen(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Sweep(a) => sweep(cli, a),
        Command::Bounds(a) => bounds(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
    }
}
