//! Oracle-equivalence checks for the constructed transformers.
//!
//! Every check draws random instances from a seeded generator, runs the
//! constructed layers, and compares against an independent computation:
//! rotated series for the reformatting layers, plain gradient descent for
//! the gradient layers, and the mean squared residual for the variance
//! layers.

use icl_ts_core::baseline::{gd_iterate, in_context_split, nll_variance, predict};
use icl_ts_core::construct::{
    assemble_icl_transformer, build_shift_layers, build_stack, read_sigma2, read_weights,
    GdIclSpec, IclLayout, Stage,
};
use icl_ts_core::encoding::{history_matrix, EncodedInput, TimeSeries};
use icl_ts_core::model::{attn_forward, AttnLayer, AttnVariant, TransformerParams};
use icl_ts_core::numerics::DenseMatrix;
use icl_ts_core::synth::{gen_ar, is_stationary, sample_ar_params, ArParams, ArRanges};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

pub const REFORMAT_TOL: f64 = 1e-9;
pub const GD_PREDICTION_TOL: f64 = 1e-8;
pub const GD_ITERATE_TOL: f64 = 1e-10;
pub const MLE_TOL: f64 = 1e-10;
pub const MLE_NOISELESS_TOL: f64 = 1e-12;

/// Deliberate corruption used as a negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Tamper {
    /// Zero the cross-block bias of every any-variate shift head.
    U2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub instances: usize,
    pub max_deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Check {
            name: name.into(),
            instances: 0,
            max_deviation: 0.0,
            tolerance,
            pass: true,
        }
    }

    fn record(&mut self, deviation: f64) {
        self.instances += 1;
        // NaN never passes
        if !(deviation <= self.max_deviation) {
            self.max_deviation = if deviation.is_nan() { f64::NAN } else { deviation };
        }
        self.pass = self.max_deviation <= self.tolerance;
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    pub reformat_instances: usize,
    pub gd_instances: usize,
    pub mle_instances: usize,
    pub split_heads: usize,
    pub tamper: Option<Tamper>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            seed: 0,
            reformat_instances: 100,
            gd_instances: 50,
            mle_instances: 50,
            split_heads: 1,
            tamper: None,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VerifyReport {
    pub options: VerifyOptions,
    pub checks: Vec<Check>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn failed(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.pass).map(|c| c.name.as_str()).collect()
    }
}

/// Stationary series drawn from the unit-noise test ranges.
pub fn random_series(d: usize, q: usize, t: usize, noise: f64, rng: &mut ChaCha8Rng) -> CliResult<TimeSeries> {
    let ranges = ArRanges::test(d, q);
    loop {
        let mut p = sample_ar_params(&ranges, rng)?;
        if !is_stationary(&p) {
            continue;
        }
        p.noise_var = noise;
        return Ok(gen_ar(&p, t, ranges.burn_in)?);
    }
}

fn run(layers: &[AttnLayer], enc: &EncodedInput) -> CliResult<DenseMatrix> {
    let mut h = enc.h.clone();
    for l in layers {
        h = attn_forward(l, &h, Some(&enc.mask))?;
    }
    Ok(h)
}

fn max_row_dev(got: &[f64], want: &[f64]) -> f64 {
    got.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn tamper_layers(layers: &mut [AttnLayer], tamper: Option<Tamper>) {
    if tamper == Some(Tamper::U2) {
        for l in layers.iter_mut().filter(|l| l.variant == AttnVariant::AnyVariate) {
            l.heads.iter_mut().for_each(|h| h.u2 = 0.0);
        }
    }
}

/// Shift (univariate and group-wise), stacking and block-isolation checks.
pub fn reformat_checks(
    instances: usize,
    seed: u64,
    split: usize,
    tamper: Option<Tamper>,
) -> CliResult<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut uni = Check::new("shift-univariate", REFORMAT_TOL);
    let mut group = Check::new("shift-groupwise", REFORMAT_TOL);
    let mut stack = Check::new("stack", REFORMAT_TOL);
    let mut isolation = Check::new("block-isolation", REFORMAT_TOL);
    for _ in 0..instances {
        let q = rng.gen_range(1..=8);
        let t = rng.gen_range(q + 2..=64);
        let d = rng.gen_range(1..=5);
        let d_slots = rng.gen_range(d..=5);
        let s = random_series(d, rng.gen_range(1..=5), t, 1.0, &mut rng)?;
        let masked = s.masked_target();
        let hist: Vec<DenseMatrix> =
            (0..d).map(|i| history_matrix(&masked, i, q)).collect::<Result<_, _>>()?;

        let target = TimeSeries::univariate(s.variate(0))?;
        let lu = IclLayout::univariate_min(t, q, q, Stage::Shift)?;
        let out = run(&build_shift_layers(&lu, split)?, &lu.encode(&target)?)?;
        uni.record((1..=q).map(|m| max_row_dev(out.row(lu.lag_row(m)), hist[0].row(m))).fold(0.0, f64::max));

        let l = IclLayout::any_variate_min(t, d, d_slots, q, q, Stage::Stack)?;
        let mut shift = build_shift_layers(&l, split)?;
        tamper_layers(&mut shift, tamper);
        let enc = l.encode(&s)?;
        let shifted = run(&shift, &enc)?;
        let mut dev = 0.0f64;
        for (i, h) in hist.iter().enumerate() {
            for m in 1..=q {
                dev = dev.max(max_row_dev(&shifted.row(l.lag_row(m))[i * t..(i + 1) * t], h.row(m)));
            }
        }
        group.record(dev);

        let mut layers = shift.clone();
        layers.push(build_stack(&l)?);
        let out = run(&layers, &enc)?;
        let mut dev = 0.0f64;
        for i in 0..d_slots {
            for m in 1..=q {
                let got = &out.row(l.feature_row(i, m))[..t];
                dev = dev.max(match hist.get(i) {
                    Some(h) => max_row_dev(got, h.row(m)),
                    None => got.iter().fold(0.0, |a, x| a.max(x.abs())),
                });
            }
        }
        stack.record(dev);

        if d >= 2 {
            let k = rng.gen_range(1..d);
            let mut vals = s.values().clone();
            vals.row_mut(k).iter_mut().for_each(|x| *x = 0.0);
            let zeroed = run(&layers, &l.encode(&TimeSeries::new(vals)?)?)?;
            isolation.record(isolation_deviation(&l, &out, &zeroed, k));
        }
    }
    Ok(vec![uni, group, stack, isolation])
}

/// Largest change outside the rows allowed to depend on variate `k`: its
/// own block and its feature rows in the target block.
fn isolation_deviation(l: &IclLayout, a: &DenseMatrix, b: &DenseMatrix, k: usize) -> f64 {
    let t = l.t();
    let mut dev = 0.0f64;
    for col in 0..l.n_tokens() {
        if col / t == k {
            continue;
        }
        for row in 0..l.dim() {
            let allowed = col / t == 0 && (1..=l.q_max).any(|m| l.feature_row(k, m) == row);
            if !allowed {
                dev = dev.max((a.get(row, col) - b.get(row, col)).abs());
            }
        }
    }
    dev
}

/// A random instance for the gradient-descent pipeline.
#[derive(Clone, Debug)]
pub struct GdInstance {
    pub series: TimeSeries,
    pub layout: IclLayout,
    pub spec: GdIclSpec,
}

pub fn random_gd_instance(rng: &mut ChaCha8Rng, split: usize, with_mle: bool) -> CliResult<GdInstance> {
    let d = rng.gen_range(1..=5);
    let q = rng.gen_range(1..=5);
    let t = rng.gen_range((q + 2).max(8)..=64);
    let l2 = rng.gen_range(1..=100);
    let univariate = d == 1 && rng.gen_bool(0.5);
    let d_slots = if univariate { 1 } else { rng.gen_range(d..=5) };
    let series = random_series(d, q, t, 1.0, rng)?;
    let stage = if with_mle { Stage::Mle } else { Stage::Gd };
    let layout = if univariate {
        IclLayout::univariate_min(t, q, q, stage)?
    } else {
        IclLayout::any_variate_min(t, d, d_slots, q, q, stage)?
    };
    let mut spec = GdIclSpec::for_series(&series, q, d_slots, q, 1e-3, Some(l2))?;
    spec.split_heads = split;
    spec.with_mle = with_mle;
    Ok(GdInstance {
        series,
        layout,
        spec,
    })
}

struct GdRun {
    prediction: f64,
    oracle: f64,
    /// Largest relative deviation of the weight rows from the oracle
    /// iterate over all gradient layers.
    iterate_dev: f64,
    sigma2: Option<(f64, f64)>,
    budget_ok: bool,
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / b.abs().max(f64::MIN_POSITIVE)
    }
}

fn run_gd_instance(inst: &GdInstance) -> CliResult<GdRun> {
    let (params, report) = assemble_icl_transformer(&inst.spec, &inst.layout)?;
    let enc = inst.layout.encode(&inst.series)?;
    let (data, query) = in_context_split(&inst.series, inst.spec.lags)?;
    let mut w = vec![0.0; data.n_features()];
    let mut h = enc.h.clone();
    let mut iterate_dev = 0.0f64;
    let l2 = inst.spec.l2;
    for (idx, layer) in params.layers.iter().enumerate() {
        h = attn_forward(&layer.attn, &h, Some(&enc.mask))?;
        if idx >= report.reformat_layers && idx < report.reformat_layers + l2 {
            w = gd_iterate(&data, &w, inst.spec.eta, 1);
            let got = read_weights(&inst.layout, &h);
            let scale = w.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(f64::MIN_POSITIVE);
            let dev = got.iter().zip(&w).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max) / scale;
            iterate_dev = iterate_dev.max(dev);
        }
    }
    let oracle = predict(&w, &query)?;
    let prediction = h.get(enc.layout.value_row, enc.layout.target_col);
    let sigma2 = inst
        .spec
        .with_mle
        .then(|| (read_sigma2(&inst.layout, &h), nll_variance(&data, &w)));
    Ok(GdRun {
        prediction,
        oracle,
        iterate_dev,
        sigma2,
        budget_ok: report.budget_ok,
    })
}

/// Gradient-layer equivalence: prediction, per-layer iterates and the head
/// budget.
pub fn gd_checks(instances: usize, seed: u64, split: usize) -> CliResult<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pred = Check::new("gd-prediction", GD_PREDICTION_TOL);
    let mut iter = Check::new("gd-iterates", GD_ITERATE_TOL);
    let mut budget = Check::new("head-budget", 0.0);
    for _ in 0..instances {
        let inst = random_gd_instance(&mut rng, split, false)?;
        let r = run_gd_instance(&inst)?;
        pred.record(rel(r.prediction, r.oracle));
        iter.record(r.iterate_dev);
        budget.record(if r.budget_ok { 0.0 } else { 1.0 });
    }
    Ok(vec![pred, iter, budget])
}

/// Noiseless AR(1) series with `x_0 = 1` and coefficient `a`.
fn noiseless_ar1(a: f64, t: usize) -> CliResult<TimeSeries> {
    let p = ArParams::new(vec![vec![a]], 0.0, true, 0)?;
    let init = DenseMatrix::from_vec(1, 1, vec![1.0])?;
    Ok(icl_ts_core::synth::gen_ar_traced(&p, t, 0, Some(&init))?.series)
}

/// Variance layers against the mean squared residual, and their exact zero
/// on noiseless series fitted in one step.
pub fn mle_checks(instances: usize, seed: u64) -> CliResult<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut var = Check::new("mle-variance", MLE_TOL);
    let mut zero = Check::new("mle-noiseless", MLE_NOISELESS_TOL);
    for _ in 0..instances {
        let inst = random_gd_instance(&mut rng, 1, true)?;
        let r = run_gd_instance(&inst)?;
        let (got, want) = r.sigma2.expect("variance layers present");
        var.record((got - want).abs() / want.abs().max(1.0));
    }
    for k in 0..instances.clamp(1, 10) {
        let a = rng.gen_range(-0.95..0.95);
        let t = rng.gen_range(8..=64);
        let s = noiseless_ar1(a, t)?;
        let layout = if k % 2 == 0 {
            IclLayout::univariate_min(t, 1, 1, Stage::Mle)?
        } else {
            IclLayout::any_variate_min(t, 1, 1, 1, 1, Stage::Mle)?
        };
        let mut spec = GdIclSpec::for_series(&s, 1, 1, 1, 1e-3, Some(1))?;
        spec.with_mle = true;
        let r = run_gd_instance(&GdInstance {
            series: s,
            layout,
            spec,
        })?;
        zero.record(r.sigma2.expect("variance layers present").0.abs());
    }
    Ok(vec![var, zero])
}

pub fn run_verify(opts: &VerifyOptions) -> CliResult<VerifyReport> {
    let mut checks = reformat_checks(opts.reformat_instances, opts.seed, opts.split_heads, opts.tamper)?;
    checks.extend(gd_checks(opts.gd_instances, opts.seed.wrapping_add(1), opts.split_heads)?);
    checks.extend(mle_checks(opts.mle_instances, opts.seed.wrapping_add(2))?);
    let pass = checks.iter().all(|c| c.pass);
    Ok(VerifyReport {
        options: opts.clone(),
        checks,
        pass,
    })
}

/// Prediction of a constructed transformer and of its oracle on one series.
pub fn constructed_prediction(params: &TransformerParams, layout: &IclLayout, s: &TimeSeries) -> CliResult<f64> {
    let enc = layout.encode(s)?;
    let out = icl_ts_core::model::tf_forward(params, &enc.h, Some(&enc.mask))?;
    Ok(out.get(enc.layout.value_row, enc.layout.target_col))
}
