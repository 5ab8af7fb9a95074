//! Acceptance suite: one test per criterion, each printing a single
//! `criterion N: PASS|FAIL` line. Criteria run one at a time so the reported
//! runtimes are not inflated by each other.

use std::io::Write;
use std::sync::Mutex;
use std::time::Instant;

use icl_ts_core::baseline::{in_context_split, nll_variance};
use icl_ts_core::construct::{assemble_icl_transformer, read_weights, GdIclSpec, IclLayout, Stage};
use icl_ts_core::depbounds::{
    alpha_log, dobrushin_coeff, gen_bound, influence, log_influence, test_error_bound, BoundInputs, DiscreteJoint,
};
use icl_ts_core::encoding::{encode_anyvariate, TimeSeries};
use icl_ts_core::model::attn_forward;
use icl_ts_core::synth::{gen_ar, is_stationary, ArParams, ArRanges};
use icl_ts_core::train::{finite_diff_check, init_params, ModelConfig};
use icl_ts_lab::bounds::{default_inputs, halving_layers};
use icl_ts_lab::pretrain::{learning_trend, median_by_n, TrainRun, TrendSpec};
use icl_ts_lab::sweep::{mean_curve, run_sweep, Method, SweepSpec};
use icl_ts_lab::verify::{gd_checks, mle_checks, reformat_checks, Check};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REFORMAT_TOL: f64 = 1e-9;
const GD_REL_TOL: f64 = 1e-8;
const DECAY_RATIO: f64 = 0.5;
const FP_FLOOR: f64 = 1e-12;
const SPEARMAN_MAX: f64 = -0.8;
const SWEEP_BAND: (f64, f64) = (1.0, 1.3);
const SWEEP_TAIL_LOOKBACK: usize = 256;
const MLE_TOL: f64 = 1e-10;
const MLE_NOISELESS_TOL: f64 = 1e-12;
const N_RATIO_TOL: f64 = 1e-12;
const GRAD_REL_TOL: f64 = 1e-5;

static SERIAL: Mutex<()> = Mutex::new(());

fn criterion(n: u32, name: &str, body: impl FnOnce() -> Result<String, String>) {
    let _guard = SERIAL.lock().unwrap_or_else(|e| e.into_inner());
    let start = Instant::now();
    let outcome = body();
    let secs = start.elapsed().as_secs_f64();
    let line = match &outcome {
        Ok(detail) => format!("criterion {n}: PASS {name}: {detail} ({secs:.1}s)"),
        Err(detail) => format!("criterion {n}: FAIL {name}: {detail} ({secs:.1}s)"),
    };
    // Written to the raw handle so the line survives libtest's output capture.
    let _ = writeln!(std::io::stderr(), "{line}");
    if let Err(detail) = outcome {
        panic!("criterion {n} failed: {detail}");
    }
}

fn require(checks: &[Check], names: &[&str], tol: f64) -> Result<String, String> {
    let mut parts = Vec::new();
    for &name in names {
        let c = checks
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| format!("missing check {name}"))?;
        let s = format!("{name} max {:.2e} over {}", c.max_deviation, c.instances);
        if !(c.max_deviation <= tol) || c.instances == 0 {
            return Err(s);
        }
        parts.push(s);
    }
    Ok(parts.join(", "))
}

#[test]
fn c1_reformat_exactness() {
    criterion(1, "reformat exactness", || {
        let checks = reformat_checks(100, 0, 1, None).map_err(|e| e.to_string())?;
        require(
            &checks,
            &["shift-univariate", "shift-groupwise", "stack", "block-isolation"],
            REFORMAT_TOL,
        )
    });
}

#[test]
fn c2_gd_icl_equivalence() {
    criterion(2, "GD-ICL equivalence", || {
        let checks = gd_checks(50, 1, 1).map_err(|e| e.to_string())?;
        require(&checks, &["gd-prediction"], GD_REL_TOL)
    });
}

/// Noiseless target driven by two i.i.d. covariates, so the in-context
/// regression is realizable and well conditioned.
fn noiseless_instance(rng: &mut ChaCha8Rng) -> TimeSeries {
    loop {
        let coeffs = vec![(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect()];
        let p = ArParams::new(coeffs, 0.0, true, rng.gen()).unwrap();
        if is_stationary(&p) {
            return gen_ar(&p, 64, 50).unwrap();
        }
    }
}

/// Prediction error of the in-context predictor: RMS over the regression
/// windows of the series, with the weights read from the transformer after
/// each gradient layer. The single-query error at the target slot can dip by
/// cancellation and is reported, not asserted.
#[test]
fn c3_exponential_layer_decay() {
    criterion(3, "exponential layer decay", || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (mut pairs, mut query_dips) = (0, 0);
        let mut worst = 0.0f64;
        let mut instances = 0;
        while instances < 10 {
            let s = noiseless_instance(&mut rng);
            let probe = GdIclSpec::for_series(&s, 1, 3, 1, 1e-3, Some(1)).map_err(|e| e.to_string())?;
            if !(probe.kappa <= 20.0) {
                continue;
            }
            instances += 1;
            let k = (probe.kappa * 4f64.ln()).ceil() as usize;
            let l2 = (probe.kappa * (1e14f64).ln()).ceil() as usize + 2 * k;
            let spec = GdIclSpec { l2, ..probe };
            let layout = IclLayout::any_variate_min(64, 3, 3, 1, 1, Stage::Gd).map_err(|e| e.to_string())?;
            let (params, report) = assemble_icl_transformer(&spec, &layout).map_err(|e| e.to_string())?;
            let enc = layout.encode(&s).map_err(|e| e.to_string())?;
            let (data, _) = in_context_split(&s, 1).map_err(|e| e.to_string())?;
            let y = s.get(0, 63);
            let readout = &params.layers[report.reformat_layers + l2].attn;
            let mut h = enc.h.clone();
            for layer in &params.layers[..report.reformat_layers] {
                h = attn_forward(&layer.attn, &h, Some(&enc.mask)).map_err(|e| e.to_string())?;
            }
            // Index l holds the errors after l gradient layers.
            let mut rms = vec![nll_variance(&data, &[0.0; 3]).sqrt()];
            let mut query = vec![y.abs()];
            for layer in &params.layers[report.reformat_layers..report.reformat_layers + l2] {
                h = attn_forward(&layer.attn, &h, Some(&enc.mask)).map_err(|e| e.to_string())?;
                rms.push(nll_variance(&data, &read_weights(&layout, &h)).sqrt());
                let out = attn_forward(readout, &h, Some(&enc.mask)).map_err(|e| e.to_string())?;
                query.push((out.get(enc.layout.value_row, enc.layout.target_col) - y).abs());
            }
            for l in 0..rms.len() - k {
                if rms[l + k] <= FP_FLOOR {
                    break;
                }
                pairs += 1;
                if query[l + k] > DECAY_RATIO * query[l] && query[l + k] > FP_FLOOR {
                    query_dips += 1;
                }
                let ratio = rms[l + k] / rms[l];
                worst = worst.max(ratio);
                if ratio > DECAY_RATIO {
                    return Err(format!(
                        "kappa {:.2}: rms error {:.3e} after {l} layers, {:.3e} after {}",
                        spec.kappa,
                        rms[l],
                        rms[l + k],
                        l + k
                    ));
                }
            }
        }
        Ok(format!(
            "{instances} instances, {pairs} layer pairs, worst ratio {worst:.3}; single-query ratio above {DECAY_RATIO} on {query_dips} pairs"
        ))
    });
}

/// Spearman rank correlation, average ranks for ties.
fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            for &k in &idx[i..=j] {
                r[k] = (i + j) as f64 / 2.0;
            }
            i = j + 1;
        }
        r
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

#[test]
fn c4_lookback_curve_shape() {
    criterion(4, "lookback curve shape", || {
        let spec = SweepSpec {
            methods: vec![Method::ConstructedIcl],
            ..SweepSpec::default()
        };
        let rows = run_sweep(&spec).map_err(|e| e.to_string())?;
        if let Some(r) = rows.iter().find(|r| !r.error.is_empty()) {
            return Err(format!("cell failed: lookback {} seed {}: {}", r.lookback, r.seed, r.error));
        }
        let curve = mean_curve(&rows, Method::ConstructedIcl);
        let x: Vec<f64> = curve.iter().map(|c| c.0 as f64).collect();
        let y: Vec<f64> = curve.iter().map(|c| c.1).collect();
        let rho = spearman(&x, &y);
        let shown: Vec<String> = curve.iter().map(|(l, m)| format!("{l}:{m:.3}")).collect();
        let detail = format!("spearman {rho:.3}, mse {}", shown.join(" "));
        let tail_ok = curve
            .iter()
            .filter(|c| c.0 >= SWEEP_TAIL_LOOKBACK)
            .all(|c| c.1 >= SWEEP_BAND.0 && c.1 <= SWEEP_BAND.1);
        if rho <= SPEARMAN_MAX && tail_ok {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
}

#[test]
fn c5_mle_layers() {
    criterion(5, "MLE layers", || {
        let checks = mle_checks(50, 2).map_err(|e| e.to_string())?;
        let a = require(&checks, &["mle-variance"], MLE_TOL)?;
        let b = require(&checks, &["mle-noiseless"], MLE_NOISELESS_TOL)?;
        Ok(format!("{a}, {b}"))
    });
}

fn random_positive_joint(rng: &mut ChaCha8Rng) -> DiscreteJoint {
    let sizes: Vec<usize> = (0..rng.gen_range(2..=4)).map(|_| rng.gen_range(2..=3)).collect();
    let total: usize = sizes.iter().product();
    let raw: Vec<f64> = (0..total).map(|_| rng.gen_range(0.05..1.0)).collect();
    let sum: f64 = raw.iter().sum();
    DiscreteJoint::new(sizes, raw.iter().map(|p| p / sum).collect()).unwrap()
}

/// Marginals on a 1/8 grid, so every product is exact in binary.
fn dyadic_marginal(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
    let mut cuts: Vec<u32> = (0..k - 1).map(|_| rng.gen_range(1..8)).collect();
    cuts.sort_unstable();
    let mut prev = 0;
    let mut out = Vec::with_capacity(k);
    for c in cuts.into_iter().chain(std::iter::once(8)) {
        out.push((c - prev) as f64 / 8.0);
        prev = c;
    }
    out
}

#[test]
fn c6_dobrushin_brute_force() {
    criterion(6, "Dobrushin brute force", || {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let marginals: Vec<Vec<f64>> = (0..3)
                .map(|_| {
                    let k = rng.gen_range(2..=3);
                    dyadic_marginal(&mut rng, k)
                })
                .collect();
            let j = DiscreteJoint::product(&marginals).map_err(|e| e.to_string())?;
            let a = dobrushin_coeff(&j).map_err(|e| e.to_string())?.value;
            if a != 0.0 {
                return Err(format!("product {marginals:?} has alpha {a:e}"));
            }
        }
        let copy = DiscreteJoint::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap();
        let i_copy = influence(&copy, 0, 1).map_err(|e| e.to_string())?.value;
        if i_copy != 1.0 {
            return Err(format!("copy pair influence {i_copy}"));
        }
        let mut pairs = 0;
        for _ in 0..100 {
            let j = random_positive_joint(&mut rng);
            for a in 0..j.n_vars() {
                for b in (0..j.n_vars()).filter(|&b| b != a) {
                    let inf = influence(&j, a, b).map_err(|e| e.to_string())?.value;
                    let log_inf = log_influence(&j, a, b).map_err(|e| e.to_string())?;
                    if inf > log_inf {
                        return Err(format!("I = {inf} > I_log = {log_inf}"));
                    }
                    pairs += 1;
                }
            }
            alpha_log(&j).map_err(|e| e.to_string())?;
        }
        Ok(format!("20 products at alpha 0, copy pair I = 1, I <= I_log on {pairs} ordered pairs"))
    });
}

#[test]
fn c7_bound_calculators() {
    criterion(7, "bound calculators", || {
        let base = default_inputs();
        let at = |n: usize| BoundInputs { n, ..base.clone() };
        let ratio = gen_bound(&at(400)).unwrap() / gen_bound(&at(100)).unwrap();
        if (ratio - 0.5).abs() > N_RATIO_TOL {
            return Err(format!("n ratio {ratio}"));
        }
        let mut worst = 0.0f64;
        for &kappa in &[0.7, 1.0, 2.5, 4.0, 9.3, 50.0] {
            for l in [1usize, 5, 20] {
                let inp = BoundInputs { kappa, l, ..base.clone() };
                let step = halving_layers(kappa);
                let before = test_error_bound(&inp).unwrap().approx_term;
                let after = test_error_bound(&BoundInputs { l: l + step, ..inp.clone() }).unwrap().approx_term;
                let r = after / before;
                worst = worst.max(r);
                // At most one layer beyond the exact halving point.
                if r > DECAY_RATIO * (1.0 + N_RATIO_TOL) || r < DECAY_RATIO * (-1.0 / kappa).exp() * (1.0 - N_RATIO_TOL) {
                    return Err(format!("kappa {kappa}, L {l}: approximation ratio {r}"));
                }
            }
        }
        Ok(format!("n ratio {ratio:.15}, worst layer-step ratio {worst:.6}"))
    });
}

#[test]
fn c8_gradient_integrity() {
    criterion(8, "gradient integrity", || {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut worst = 0.0f64;
        let mut checked = 0;
        for seed in 0..5 {
            let cfg = ModelConfig {
                dim: 12,
                layers: 2,
                heads: 2,
                hidden: 8,
                clip_bound: Some(6.0),
                init_scale: 1.0,
            };
            let mut p = init_params(&cfg, seed);
            for layer in &mut p.layers {
                for h in &mut layer.attn.heads {
                    h.u1 = rng.gen_range(-1.0..1.0);
                    h.u2 = rng.gen_range(-1.0..1.0);
                }
            }
            let vals: Vec<Vec<f64>> = (0..2).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
            let enc = encode_anyvariate(&TimeSeries::from_variates(&vals).unwrap(), 12).unwrap();
            let r = finite_diff_check(&p, &enc, 0.4, 4.0, 1e-5).map_err(|e| e.to_string())?;
            let u_checked: usize = r
                .blocks
                .iter()
                .filter(|b| b.name.ends_with("u1") || b.name.ends_with("u2"))
                .map(|b| b.checked)
                .sum();
            if u_checked == 0 {
                return Err(format!("seed {seed}: no bias parameter was checked"));
            }
            checked += r.blocks.iter().map(|b| b.checked).sum::<usize>();
            worst = worst.max(r.max_rel_err);
            if !(r.max_rel_err < GRAD_REL_TOL) {
                return Err(format!("seed {seed}: max relative error {:.3e}", r.max_rel_err));
            }
        }
        Ok(format!("max relative error {worst:.2e} over {checked} entries"))
    });
}

#[test]
fn c9_desk_scale_learning_trend() {
    criterion(9, "desk-scale learning trend", || {
        let mut run = TrainRun::default();
        run.window.t_ctx = 16;
        run.window.d_slots = 2;
        run.train.steps = 1200;
        run.train.warmup_steps = 120;
        run.train.lr = 3e-3;
        let ranges = ArRanges {
            d: vec![1, 2],
            q: vec![1, 2],
            ..ArRanges::default()
        };
        let spec = TrendSpec {
            ns: vec![8, 32, 128],
            seeds: vec![0, 1, 2],
            run,
            ranges,
            series_len: 64,
            test_series: 32,
            test_len: 64,
            test_stride: 4,
        };
        let rows = learning_trend(&spec).map_err(|e| e.to_string())?;
        let med = median_by_n(&rows, &spec.ns);
        let shown: Vec<String> = med.iter().map(|(n, m)| format!("n={n}:{m:.3}")).collect();
        let detail = format!("median test mse {}", shown.join(" "));
        if med.windows(2).all(|w| w[1].1 <= w[0].1) {
            Ok(detail)
        } else {
            Err(detail)
        }
    });
}
