//! Mean-field control problems whose first-order conditions are the
//! equilibrium systems, and the thresholds above which the zero control
//! stops being optimal.

use serde::{Deserialize, Serialize};

use crate::dynamics::sgn;
use crate::integrate::{dopri5, OdeOptions, StepControl};
use crate::model::{a_bar, ModelParams};
use crate::value::ControlFlow;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MfcMode {
    Discounted,
    Ergodic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MfcCostReport {
    /// Total for DISCOUNTED, per-time rate for ERGODIC.
    pub cost: f64,
    pub mode: MfcMode,
    pub control: String,
    pub zero_control_baseline: f64,
    pub horizon: f64,
    /// Bound on the discarded discounted tail.
    pub tail_bound: Option<f64>,
}

/// Running cost of the control problem at gap `a` and centered law `q`.
pub fn mfc_integrand(params: &ModelParams, a: f64, q: f64) -> f64 {
    a * a - sgn(a) * a * a * q - params.kappa * q * q
}

/// Shortest horizon accepted in ERGODIC mode.
pub fn ergodic_horizon(params: &ModelParams) -> f64 {
    200.0 / params.sigma2
}

/// Horizon at which the discounted tail bound drops below `1e-13`.
pub fn discounted_horizon(params: &ModelParams) -> f64 {
    ((params.kappa / params.beta).max(1.0).ln() + 13.0 * std::f64::consts::LN_10) / params.beta
}

fn describe(c: &ControlFlow) -> String {
    if c.a.iter().all(|x| *x == c.a[0]) {
        format!("constant a = {}", c.a[0])
    } else {
        format!("flow on [{}, {}] with {} samples", c.times[0], c.t_end(), c.times.len())
    }
}

pub fn mfc_cost(params: &ModelParams, control: &ControlFlow, q0: f64, mode: MfcMode) -> Result<MfcCostReport> {
    params.validate()?;
    if !(q0.abs() <= 1.0) {
        return Err(Error::Domain(format!("q0 = {q0} outside [-1, 1]")));
    }
    let t0 = control.times[0];
    let horizon = control.t_end() - t0;
    let (beta, s2, k) = (params.beta, params.sigma2, params.kappa);
    match mode {
        MfcMode::Discounted if !(beta > 0.0) => {
            return Err(Error::Precondition("DISCOUNTED mode needs beta > 0".into()))
        }
        MfcMode::Ergodic if beta != 0.0 => return Err(Error::Precondition("ERGODIC mode needs beta = 0".into())),
        MfcMode::Ergodic if horizon < ergodic_horizon(params) * (1.0 - 1e-12) => {
            return Err(Error::Precondition(format!(
                "ERGODIC mode needs a control over at least {} time units, got {horizon}",
                ergodic_horizon(params)
            )))
        }
        _ => {}
    }
    let half = t0 + 0.5 * horizon;
    let rhs = |average: bool| {
        move |t: f64, y: &[f64; 3]| {
            let a = control.eval(t);
            let q = y[0];
            let l = mfc_integrand(params, a, q);
            [a - (2.0 * s2 + a.abs()) * q, (-beta * (t - t0)).exp() * l, if average { l } else { 0.0 }]
        }
    };
    let opts = OdeOptions { rtol: 1e-11, atol: 1e-13, h_max: Some(1.0), ..Default::default() };
    // the running average only accumulates on the second leg
    let mid = dopri5(rhs(false), t0, [q0, 0.0, 0.0], half, &opts, |_, _| StepControl::Continue)?;
    let end = dopri5(rhs(true), half, mid.y, t0 + horizon, &opts, |_, _| StepControl::Continue)?;
    Ok(match mode {
        MfcMode::Discounted => MfcCostReport {
            cost: end.y[1],
            mode,
            control: describe(control),
            zero_control_baseline: -k * q0 * q0 * (1.0 - (-(beta + 4.0 * s2) * horizon).exp()) / (beta + 4.0 * s2),
            horizon,
            tail_bound: Some((k + control.sup_abs().powi(2) * 2.0) * (-beta * horizon).exp() / beta),
        },
        MfcMode::Ergodic => MfcCostReport {
            cost: end.y[2] / (0.5 * horizon),
            mode,
            control: describe(control),
            zero_control_baseline: 0.0,
            horizon,
            tail_bound: None,
        },
    })
}

/// Uniform grid on `[0, t_end]` carrying a constant gap.
pub fn constant_control(a: f64, t_end: f64) -> Result<ControlFlow> {
    let n = ((t_end / 0.5).ceil() as usize + 1).max(2);
    let times: Vec<f64> = (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect();
    ControlFlow::constant(a, &times)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ZeroControlVerdict {
    ZeroOptimal,
    ZeroSuboptimal,
    /// Below the discounted threshold no witness exists and no optimality claim is made.
    Undetermined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub kappa_tilde: Option<f64>,
    pub kappa_c: f64,
    pub verdict: ZeroControlVerdict,
    /// Constant gap with negative cost from `q0 = 0`.
    pub witness: Option<f64>,
    pub witness_cost: Option<f64>,
}

/// Cost from `q0 = 0` of holding the gap at `a`, in the mode fixed by beta.
pub fn constant_control_cost(params: &ModelParams, a: f64) -> Result<f64> {
    if params.is_ergodic() {
        mfc_cost(params, &constant_control(a, ergodic_horizon(params))?, 0.0, MfcMode::Ergodic).map(|r| r.cost)
    } else {
        mfc_cost(params, &constant_control(a, discounted_horizon(params))?, 0.0, MfcMode::Discounted).map(|r| r.cost)
    }
}

pub fn suboptimality_thresholds(params: &ModelParams) -> Result<ThresholdReport> {
    params.validate()?;
    let kc = params.kappa_c();
    if params.is_ergodic() {
        if params.kappa < kc || !params.is_supercritical() {
            return Ok(ThresholdReport {
                kappa_tilde: None,
                kappa_c: kc,
                verdict: ZeroControlVerdict::ZeroOptimal,
                witness: None,
                witness_cost: None,
            });
        }
        let w = a_bar(params);
        let c = constant_control_cost(params, w)?;
        return Ok(ThresholdReport {
            kappa_tilde: None,
            kappa_c: kc,
            verdict: if c < 0.0 { ZeroControlVerdict::ZeroSuboptimal } else { ZeroControlVerdict::Undetermined },
            witness: Some(w),
            witness_cost: Some(c),
        });
    }
    let kt = params.kappa_tilde();
    if params.kappa <= kt {
        return Ok(ThresholdReport {
            kappa_tilde: Some(kt),
            kappa_c: kc,
            verdict: ZeroControlVerdict::Undetermined,
            witness: None,
            witness_cost: None,
        });
    }
    let w = 0.5 * (params.kappa - kt) / (params.beta + 2.0 * params.sigma2);
    let c = constant_control_cost(params, w)?;
    Ok(ThresholdReport {
        kappa_tilde: Some(kt),
        kappa_c: kc,
        verdict: if c < 0.0 { ZeroControlVerdict::ZeroSuboptimal } else { ZeroControlVerdict::Undetermined },
        witness: Some(w),
        witness_cost: Some(c),
    })
}
