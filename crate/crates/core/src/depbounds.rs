//! Dobrushin-type dependence coefficients of small discrete joint
//! distributions by exhaustive enumeration, the AR(1) weak-dependence checks,
//! and evaluators for the pretraining generalization and test-error bounds.
//!
//! Bound formulas carry an unspecified universal constant; every evaluator
//! takes it explicitly as `c` (default 1) and the values are meaningful up to
//! that constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest joint table accepted for enumeration.
pub const MAX_JOINT_ENTRIES: usize = 1_000_000;

/// Joint pmf over `sizes.len()` discrete variables, stored row-major with
/// variable 0 most significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    sizes: Vec<usize>,
    prob: Vec<f64>,
}

impl DiscreteJoint {
    pub fn new(sizes: Vec<usize>, prob: Vec<f64>) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::Size("need at least two variables with non-empty domains".into()));
        }
        let total = sizes
            .iter()
            .try_fold(1usize, |acc, &s| acc.checked_mul(s))
            .filter(|&n| n <= MAX_JOINT_ENTRIES)
            .ok_or_else(|| Error::Size(format!("joint over {sizes:?} exceeds {MAX_JOINT_ENTRIES} entries")))?;
        if prob.len() != total {
            return Err(Error::Dimension(format!(
                "{} probabilities for {total} outcomes",
                prob.len()
            )));
        }
        if let Some(k) = prob.iter().position(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(Error::InvalidBound(format!("probability {} at {k}", prob[k])));
        }
        let sum: f64 = prob.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidBound(format!("probabilities sum to {sum}")));
        }
        Ok(DiscreteJoint { sizes, prob })
    }

    /// Product of independent marginals.
    pub fn product(marginals: &[Vec<f64>]) -> Result<Self> {
        let sizes: Vec<usize> = marginals.iter().map(Vec::len).collect();
        let mut prob = vec![1.0];
        for m in marginals {
            prob = prob.iter().flat_map(|p| m.iter().map(move |x| p * x)).collect();
        }
        let sum: f64 = prob.iter().sum();
        prob.iter_mut().for_each(|p| *p /= sum);
        DiscreteJoint::new(sizes, prob)
    }

    pub fn n_vars(&self) -> usize {
        self.sizes.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn prob(&self) -> &[f64] {
        &self.prob
    }

    fn index(&self, assign: &[usize]) -> usize {
        assign
            .iter()
            .zip(&self.sizes)
            .fold(0, |acc, (&a, &s)| acc * s + a)
    }

    fn p(&self, assign: &[usize]) -> f64 {
        self.prob[self.index(assign)]
    }

    /// All assignments of the variables other than `i` and `j`, written into
    /// a full-length template with `i` and `j` left at 0.
    fn rest_assignments(&self, i: usize, j: usize) -> Vec<Vec<usize>> {
        let mut out = vec![vec![0; self.n_vars()]];
        for (v, &s) in self.sizes.iter().enumerate() {
            if v == i || v == j {
                continue;
            }
            out = out
                .into_iter()
                .flat_map(|a| {
                    (0..s).map(move |x| {
                        let mut b = a.clone();
                        b[v] = x;
                        b
                    })
                })
                .collect();
        }
        out
    }

    fn check_pair(&self, j: usize, i: usize) -> Result<()> {
        if i == j || i >= self.n_vars() || j >= self.n_vars() {
            return Err(Error::Dimension(format!(
                "variable pair ({j}, {i}) for {} variables",
                self.n_vars()
            )));
        }
        Ok(())
    }

    /// Conditional pmf of `X_i` at the assignment `a` of all other variables,
    /// `None` when the conditioning event has probability 0.
    fn conditional(&self, a: &mut [usize], i: usize) -> Option<Vec<f64>> {
        let saved = a[i];
        let mut p: Vec<f64> = (0..self.sizes[i])
            .map(|x| {
                a[i] = x;
                self.p(a)
            })
            .collect();
        a[i] = saved;
        let z: f64 = p.iter().sum();
        if z <= 0.0 {
            return None;
        }
        p.iter_mut().for_each(|x| *x /= z);
        Some(p)
    }
}

/// A maximised quantity plus the number of conditioning events skipped for
/// having zero probability.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Supported {
    pub value: f64,
    pub skipped_events: usize,
}

/// `max_{x_{-i-j}, x_j, x_j'} TV(P(X_i | x_j, x_{-i-j}), P(X_i | x_j', x_{-i-j}))`.
pub fn influence(joint: &DiscreteJoint, j: usize, i: usize) -> Result<Supported> {
    joint.check_pair(j, i)?;
    let mut best = 0.0f64;
    let mut skipped = 0;
    for mut a in joint.rest_assignments(i, j) {
        let conds: Vec<Option<Vec<f64>>> = (0..joint.sizes[j])
            .map(|xj| {
                a[j] = xj;
                joint.conditional(&mut a, i)
            })
            .collect();
        skipped += conds.iter().filter(|c| c.is_none()).count();
        let supported: Vec<&Vec<f64>> = conds.iter().flatten().collect();
        for (k, p) in supported.iter().enumerate() {
            for q in &supported[k + 1..] {
                let tv = 0.5 * p.iter().zip(q.iter()).map(|(x, y)| (x - y).abs()).sum::<f64>();
                best = best.max(tv);
            }
        }
    }
    Ok(Supported {
        value: best.min(1.0),
        skipped_events: skipped,
    })
}

/// `α = max_i Σ_{j≠i} I_{j→i}`.
pub fn dobrushin_coeff(joint: &DiscreteJoint) -> Result<Supported> {
    let n = joint.n_vars();
    let mut alpha = 0.0f64;
    let mut skipped = 0;
    for i in 0..n {
        let mut row = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            let inf = influence(joint, j, i)?;
            row += inf.value;
            skipped += inf.skipped_events;
        }
        alpha = alpha.max(row);
    }
    Ok(Supported {
        value: alpha,
        skipped_events: skipped,
    })
}

/// `(1/4) sup log[P(x_i,x_j,r) P(x_i',x_j',r) / (P(x_i',x_j,r) P(x_i,x_j',r))]`.
pub fn log_influence(joint: &DiscreteJoint, j: usize, i: usize) -> Result<f64> {
    joint.check_pair(j, i)?;
    if let Some(k) = joint.prob.iter().position(|&p| p <= 0.0) {
        return Err(Error::Positivity(k));
    }
    let mut best = 0.0f64;
    for mut a in joint.rest_assignments(i, j) {
        let mut lp = |xi: usize, xj: usize| {
            a[i] = xi;
            a[j] = xj;
            joint.p(&a).ln()
        };
        let (si, sj) = (joint.sizes[i], joint.sizes[j]);
        let table: Vec<Vec<f64>> = (0..si).map(|xi| (0..sj).map(|xj| lp(xi, xj)).collect()).collect();
        for xi in 0..si {
            for xi2 in 0..si {
                for xj in 0..sj {
                    for xj2 in 0..sj {
                        let v = table[xi][xj] + table[xi2][xj2] - table[xi2][xj] - table[xi][xj2];
                        best = best.max(0.25 * v);
                    }
                }
            }
        }
    }
    Ok(best)
}

/// `max_i Σ_{j≠i} I^log_{j,i}`.
pub fn alpha_log(joint: &DiscreteJoint) -> Result<f64> {
    let n = joint.n_vars();
    let mut alpha = 0.0f64;
    for i in 0..n {
        let mut row = 0.0;
        for j in (0..n).filter(|&j| j != i) {
            row += log_influence(joint, j, i)?;
        }
        alpha = alpha.max(row);
    }
    Ok(alpha)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Clause {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    pub pass: bool,
    /// `rhs - lhs`; positive when the strict inequality holds.
    pub margin: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub quantity: String,
    pub value: f64,
    pub clauses: Vec<Clause>,
}

fn clause(name: &str, lhs: f64, rhs: f64) -> Clause {
    Clause {
        name: name.into(),
        lhs,
        rhs,
        pass: lhs < rhs,
        margin: rhs - lhs,
    }
}

/// Weak-dependence conditions for a Gaussian AR(1): both printed potential
/// conditions (`B_x² < ln ½ + σ²` and `B_w B_x < ln ½ + σ²`) and `‖w‖_∞ < 1`.
pub fn ar1_condition_check(w: &[f64], sigma_eps: f64, b_x: f64, b_w: f64) -> Result<ConditionReport> {
    if !(sigma_eps > 0.0) {
        return Err(Error::InvalidBound(format!("sigma_eps = {sigma_eps}")));
    }
    let rhs = 0.5f64.ln() + sigma_eps * sigma_eps;
    let w_inf = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let clauses = vec![
        clause("potential_bx_squared", b_x * b_x, rhs),
        clause("potential_bw_bx", b_w * b_x, rhs),
        clause("stationarity", w_inf, 1.0),
    ];
    let all = clauses.iter().all(|c| c.pass);
    Ok(ConditionReport {
        quantity: "ar1_conditions".into(),
        value: if all { 1.0 } else { 0.0 },
        clauses,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundInputs {
    pub b_x: f64,
    pub b: f64,
    pub r: f64,
    pub b_w: f64,
    pub sigma_eps: f64,
    pub alpha: f64,
    pub kappa: f64,
    pub l: usize,
    pub m: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n: usize,
    pub t: usize,
    pub d: usize,
    pub epsilon: f64,
    #[serde(default = "unit")]
    pub c: f64,
}

fn unit() -> f64 {
    1.0
}

impl BoundInputs {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::InvalidBound("n must be >= 1".into()));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(Error::InvalidBound(format!("epsilon = {} not in (0,1)", self.epsilon)));
        }
        if !(self.alpha < 1.0) {
            return Err(Error::Condition(format!("Dobrushin coefficient {} >= 1", self.alpha)));
        }
        if self.alpha < 0.0 {
            return Err(Error::InvalidBound(format!("alpha = {}", self.alpha)));
        }
        Ok(())
    }

    /// `log(2 + max{B, R, B_x, T, d})`.
    pub fn zeta(&self) -> f64 {
        (2.0 + self.b.max(self.r).max(self.b_x).max(self.t as f64).max(self.d as f64)).ln()
    }

    fn complexity(&self, zeta: f64) -> f64 {
        let (l, m, dm, dh) = (
            self.l as f64,
            self.m as f64,
            self.d_model as f64,
            self.d_hidden as f64,
        );
        ((l * (m * dm * dm + dm * dh) * zeta + (1.0 / self.epsilon).ln()) / self.n as f64).sqrt()
    }
}

/// `C · B_x²/(1−α) · √((L(MD² + DD′)ζ + log(1/ε))/n)`.
pub fn gen_bound(inp: &BoundInputs) -> Result<f64> {
    inp.validate()?;
    Ok(inp.c * inp.b_x * inp.b_x / (1.0 - inp.alpha) * inp.complexity(inp.zeta()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestErrorBound {
    /// `C · B_x B_w e^{−L/κ}`.
    pub approx_term: f64,
    pub gen_term: f64,
    pub value: f64,
    /// `1 − (σ_ε / (B_x B_w e^{−L/2κ}))²`, unclamped.
    pub delta: f64,
    /// `delta` clamped to `[0, 1]` for reading as a probability factor.
    pub delta_probability: f64,
}

pub fn test_error_bound(inp: &BoundInputs) -> Result<TestErrorBound> {
    if !(inp.kappa > 0.0) {
        return Err(Error::InvalidBound(format!("kappa = {}", inp.kappa)));
    }
    let gen_term = gen_bound(inp)?;
    let l = inp.l as f64;
    let approx_term = inp.c * inp.b_x * inp.b_w * (-l / inp.kappa).exp();
    let scale = inp.b_x * inp.b_w * (-l / (2.0 * inp.kappa)).exp();
    let delta = 1.0 - (inp.sigma_eps / scale).powi(2);
    Ok(TestErrorBound {
        approx_term,
        gen_term,
        value: approx_term + gen_term,
        delta,
        delta_probability: delta.clamp(0.0, 1.0),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ar1Bound {
    pub noise_term: f64,
    pub approx_term: f64,
    pub gen_term: f64,
    pub value: f64,
}

/// AR(1) specialisation: `C(σ/√(1−δ) + (σ²/B_x) e^{−L/κ} + σ²/(1−α) · √(…))`
/// with `ζ = log(2 + max{B, R, B_x, d})`.
pub fn ar1_bound(inp: &BoundInputs, delta: f64) -> Result<Ar1Bound> {
    inp.validate()?;
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::InvalidBound(format!("delta = {delta} not in [0,1)")));
    }
    if !(inp.kappa > 0.0 && inp.b_x > 0.0) {
        return Err(Error::InvalidBound("kappa and B_x must be positive".into()));
    }
    let s2 = inp.sigma_eps * inp.sigma_eps;
    let zeta = (2.0 + inp.b.max(inp.r).max(inp.b_x).max(inp.d as f64)).ln();
    let noise_term = inp.c * inp.sigma_eps / (1.0 - delta).sqrt();
    let approx_term = inp.c * s2 / inp.b_x * (-(inp.l as f64) / inp.kappa).exp();
    let gen_term = inp.c * s2 / (1.0 - inp.alpha) * inp.complexity(zeta);
    Ok(Ar1Bound {
        noise_term,
        approx_term,
        gen_term,
        value: noise_term + approx_term + gen_term,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn copy_pair() -> DiscreteJoint {
        DiscreteJoint::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.5]).unwrap()
    }

    #[test]
    fn independent_bits_have_zero_influence() {
        let j = DiscreteJoint::product(&[vec![0.5, 0.5], vec![0.5, 0.5]]).unwrap();
        assert_eq!(influence(&j, 0, 1).unwrap().value, 0.0);
        assert_eq!(dobrushin_coeff(&j).unwrap().value, 0.0);
        assert_eq!(alpha_log(&j).unwrap(), 0.0);
    }

    #[test]
    fn deterministic_copy_has_unit_influence() {
        let j = copy_pair();
        assert_eq!(influence(&j, 0, 1).unwrap().value, 1.0);
        assert_eq!(dobrushin_coeff(&j).unwrap().value, 1.0);
        assert!(matches!(log_influence(&j, 0, 1), Err(Error::Positivity(_))));
    }

    #[test]
    fn symmetric_pair_log_influence() {
        let j = DiscreteJoint::new(vec![2, 2], vec![0.4, 0.1, 0.1, 0.4]).unwrap();
        assert!((log_influence(&j, 0, 1).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    /// `X1 → X2 → X3`, each bit flipping its parent with probability 0.1.
    fn flip_chain() -> DiscreteJoint {
        let f = |a: usize, b: usize| if a == b { 0.9 } else { 0.1 };
        let prob = (0..8)
            .map(|k| {
                let (x1, x2, x3) = (k >> 2, (k >> 1) & 1, k & 1);
                0.5 * f(x1, x2) * f(x2, x3)
            })
            .collect();
        DiscreteJoint::new(vec![2, 2, 2], prob).unwrap()
    }

    #[test]
    fn flip_chain_influence_conditions_on_the_far_end() {
        // Given X3 = 0: P(X2 = 0 | X1 = 0) = 0.81/0.82 and P(X2 = 0 | X1 = 1)
        // = 0.09/0.18, so the distance is 20/41. The unconditioned channel
        // distance |0.9 − 0.1| = 0.8 ignores X3.
        let j = flip_chain();
        let i12 = influence(&j, 0, 1).unwrap().value;
        assert!((i12 - 20.0 / 41.0).abs() < 1e-15, "{i12}");
        assert!(dobrushin_coeff(&j).unwrap().value < 1.0);
    }

    #[test]
    fn rejects_unnormalised_tables() {
        assert!(DiscreteJoint::new(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]).is_err());
        assert!(DiscreteJoint::new(vec![1000, 1001], vec![0.0; 1_001_000]).is_err());
    }

    #[test]
    fn ar1_clauses() {
        let rep = ar1_condition_check(&[1.2], 1.0, 0.5, 0.5).unwrap();
        let st = rep.clauses.iter().find(|c| c.name == "stationarity").unwrap();
        assert!(!st.pass);
        assert!((st.margin + 0.2).abs() < 1e-15);
        let bw = rep.clauses.iter().find(|c| c.name == "potential_bw_bx").unwrap();
        assert!(bw.pass);
    }

    #[test]
    fn alpha_at_one_is_a_condition_error() {
        let inp = BoundInputs {
            b_x: 2.0,
            b: 2.0,
            r: 2.0,
            b_w: 1.0,
            sigma_eps: 0.0,
            alpha: 1.0,
            kappa: 1.0,
            l: 1,
            m: 1,
            d_model: 2,
            d_hidden: 2,
            n: 100,
            t: 2,
            d: 2,
            epsilon: 0.5,
            c: 1.0,
        };
        assert!(matches!(gen_bound(&inp), Err(Error::Condition(_))));
    }
}
