//! Clause-by-clause reports from the bound calculators.

use icl_ts_core::depbounds::{
    ar1_bound, ar1_condition_check, gen_bound, test_error_bound, Ar1Bound, BoundInputs, ConditionReport,
    TestErrorBound,
};
use serde::{Deserialize, Serialize};

use crate::error::CliResult;

/// Desk-scale defaults: a 2-layer, 4-head, `D = 32` model on a weakly
/// dependent univariate series.
pub fn default_inputs() -> BoundInputs {
    BoundInputs {
        b_x: 1.0,
        b: 1.0,
        r: 1.0,
        b_w: 1.0,
        sigma_eps: 0.5,
        alpha: 0.25,
        kappa: 4.0,
        l: 8,
        m: 4,
        d_model: 32,
        d_hidden: 64,
        n: 100,
        t: 512,
        d: 1,
        epsilon: 0.05,
        c: 1.0,
    }
}

/// Stationary AR(1) example: `w = 0.5`, unit noise, `B_x = B_w = 0.5`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ar1Inputs {
    pub w: Vec<f64>,
    pub sigma_eps: f64,
    pub b_x: f64,
    pub b_w: f64,
    pub delta: f64,
}

impl Default for Ar1Inputs {
    fn default() -> Self {
        Ar1Inputs {
            w: vec![0.5],
            sigma_eps: 1.0,
            b_x: 0.5,
            b_w: 0.5,
            delta: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsArgs {
    pub inputs: BoundInputs,
    /// Sample counts to evaluate; consecutive pairs are compared.
    pub ns: Vec<usize>,
    pub ar1: Option<Ar1Inputs>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    pub gen_bound: f64,
    pub test_error: TestErrorBound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NRatio {
    pub from: usize,
    pub to: usize,
    /// `gen_bound(to) / gen_bound(from)`.
    pub ratio: f64,
    /// `√(from / to)`.
    pub expected: f64,
}

/// Approximation term after `⌈κ ln 2⌉` more layers, relative to before.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerStep {
    pub l: usize,
    pub l_next: usize,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ar1Report {
    pub inputs: Ar1Inputs,
    pub conditions: ConditionReport,
    pub bound: Ar1Bound,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub inputs: BoundInputs,
    pub evaluations: Vec<Evaluation>,
    pub n_ratios: Vec<NRatio>,
    pub layer_step: LayerStep,
    pub ar1: Option<Ar1Report>,
}

/// Layers needed to halve the approximation term.
pub fn halving_layers(kappa: f64) -> usize {
    (kappa * std::f64::consts::LN_2).ceil() as usize
}

pub fn layer_step(inputs: &BoundInputs) -> CliResult<LayerStep> {
    let before = test_error_bound(inputs)?;
    let l_next = inputs.l + halving_layers(inputs.kappa);
    let after = test_error_bound(&BoundInputs {
        l: l_next,
        ..inputs.clone()
    })?;
    Ok(LayerStep {
        l: inputs.l,
        l_next,
        ratio: after.approx_term / before.approx_term,
    })
}

pub fn run_bounds(args: &BoundsArgs) -> CliResult<BoundsReport> {
    let ns = if args.ns.is_empty() {
        vec![args.inputs.n]
    } else {
        args.ns.clone()
    };
    let evaluations = ns
        .iter()
        .map(|&n| {
            let inp = BoundInputs {
                n,
                ..args.inputs.clone()
            };
            Ok(Evaluation {
                n,
                gen_bound: gen_bound(&inp)?,
                test_error: test_error_bound(&inp)?,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    let n_ratios = evaluations
        .windows(2)
        .map(|w| NRatio {
            from: w[0].n,
            to: w[1].n,
            ratio: w[1].gen_bound / w[0].gen_bound,
            expected: (w[0].n as f64 / w[1].n as f64).sqrt(),
        })
        .collect();
    let ar1 = match &args.ar1 {
        Some(a) => {
            let conditions = ar1_condition_check(&a.w, a.sigma_eps, a.b_x, a.b_w)?;
            let inp = BoundInputs {
                b_x: a.b_x,
                b_w: a.b_w,
                sigma_eps: a.sigma_eps,
                d: a.w.len(),
                ..args.inputs.clone()
            };
            Some(Ar1Report {
                inputs: a.clone(),
                conditions,
                bound: ar1_bound(&inp, a.delta)?,
            })
        }
        None => None,
    };
    Ok(BoundsReport {
        inputs: args.inputs.clone(),
        evaluations,
        n_ratios,
        layer_step: layer_step(&args.inputs)?,
        ar1,
    })
}
