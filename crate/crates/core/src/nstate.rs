//! Equidistant discretization of the circle into N states: running cost,
//! forward-backward field and a damped Picard solver.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::dynamics::{neg, pos, sgn};
use crate::integrate::rk4_step;
use crate::model::ModelParams;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NStateModel {
    pub n_states: usize,
    pub params: ModelParams,
    /// Phases `2 pi i / N`.
    pub grid: Vec<f64>,
}

impl NStateModel {
    pub fn new(n_states: usize, params: ModelParams) -> Result<Self> {
        params.validate()?;
        if n_states < 2 {
            return Err(Error::ParamDomain(format!("need at least 2 states, got {n_states}")));
        }
        let grid = (0..n_states).map(|i| 2.0 * PI * i as f64 / n_states as f64).collect();
        Ok(Self { n_states, params, grid })
    }

    fn check_len(&self, v: &[f64], what: &str) -> Result<()> {
        if v.len() != self.n_states {
            return Err(Error::Precondition(format!(
                "{what} has {} entries, model has {} states",
                v.len(),
                self.n_states
            )));
        }
        Ok(())
    }

    fn costs(&self, p: &[f64]) -> Vec<f64> {
        self.grid.iter().map(|&x| running_cost_unchecked(x, &self.grid, p)).collect()
    }

    /// `H_i` for potentials `v`.
    fn hamiltonians(&self, v: &[f64], p: &[f64]) -> Vec<f64> {
        let n = self.n_states;
        let n2 = (n * n) as f64;
        let s2 = self.params.sigma2;
        let l = self.costs(p);
        (0..n)
            .map(|i| {
                let a_i = v[i] - v[(i + 1) % n];
                let a_im = v[(i + n - 1) % n] - v[i];
                let (up, dn) = (pos(a_i), neg(a_im));
                n2 * s2 * (a_im - a_i) - 0.5 * n2 * (up * up + dn * dn) + self.params.kappa * l[i]
            })
            .collect()
    }
}

fn running_cost_unchecked(x: f64, grid: &[f64], mu: &[f64]) -> f64 {
    2.0 * grid.iter().zip(mu).map(|(&y, &m)| ((x - y) / 2.0).sin().powi(2) * m).sum::<f64>()
}

fn check_probability(mu: &[f64]) -> Result<()> {
    if mu.iter().any(|&m| !(m >= -1e-12)) {
        return Err(Error::Precondition("probability vector has negative entries".into()));
    }
    let s: f64 = mu.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(Error::Precondition(format!("probability vector sums to {s}")));
    }
    Ok(())
}

/// `l(x, mu) = 2 sum_y sin^2((x - y)/2) mu(y)` on the model grid.
pub fn nstate_running_cost(model: &NStateModel, x: f64, mu: &[f64]) -> Result<f64> {
    model.check_len(mu, "mu")?;
    check_probability(mu)?;
    Ok(running_cost_unchecked(x, &model.grid, mu))
}

/// Time derivatives of the gaps `a_i = v_i - v_{i+1}` and of the law.
pub fn nstate_field(model: &NStateModel, a: &[f64], p: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    model.check_len(a, "a")?;
    model.check_len(p, "p")?;
    Ok(field_unchecked(model, a, p))
}

fn field_unchecked(model: &NStateModel, a: &[f64], p: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let n = model.n_states;
    let n2 = (n * n) as f64;
    let (beta, s2, k) = (model.params.beta, model.params.sigma2, model.params.kappa);
    let l = model.costs(p);
    let da = (0..n)
        .map(|i| {
            let (am, ai, ap) = (a[(i + n - 1) % n], a[i], a[(i + 1) % n]);
            beta * ai - k * (l[i] - l[(i + 1) % n]) - n2 * s2 * (am - 2.0 * ai + ap)
                + 0.5 * n2 * (neg(am).powi(2) - pos(ap).powi(2) + sgn(ai) * ai * ai)
        })
        .collect();
    (da, forward_rhs(n, s2, a, p))
}

/// Kolmogorov equation: right moves at `N^2 (sigma2 + a_i^+)`, left moves at
/// `N^2 (sigma2 + a_{i-1}^-)`.
fn forward_rhs(n: usize, s2: f64, a: &[f64], p: &[f64]) -> Vec<f64> {
    let n2 = (n * n) as f64;
    let right = |i: usize| n2 * (s2 + pos(a[i]));
    let left = |i: usize| n2 * (s2 + neg(a[(i + n - 1) % n]));
    (0..n)
        .map(|i| {
            let (im, ip) = ((i + n - 1) % n, (i + 1) % n);
            right(im) * p[im] + left(ip) * p[ip] - (right(i) + left(i)) * p[i]
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NStateFlow {
    pub times: Vec<f64>,
    pub p: Vec<Vec<f64>>,
    pub a: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NStateReport {
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm change of the law per iteration.
    pub history: Vec<f64>,
    pub final_damping: f64,
    /// Sup-norm defect of the gaps recomputed from the returned law.
    pub residual_a: f64,
    /// Sup-norm defect of the law recomputed from the returned gaps.
    pub residual_p: f64,
    /// Largest `|sum p - 1|` and `|sum a|` seen over all iterates.
    pub conservation: f64,
}

pub const NSTATE_TOL: f64 = 1e-8;
pub const NSTATE_MAX_ITER: usize = 500;
pub const NSTATE_DT: f64 = 0.01;

fn lerp(x: &[f64], y: &[f64], w: f64) -> Vec<f64> {
    x.iter().zip(y).map(|(a, b)| a + w * (b - a)).collect()
}

/// Backward sweep with zero terminal value; returns gaps on the grid.
fn backward(model: &NStateModel, times: &[f64], p: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = model.n_states;
    let m = times.len();
    let mut v = vec![0.0; n];
    let mut gaps = vec![vec![0.0; n]; m];
    let gap = |v: &[f64]| (0..n).map(|i| v[i] - v[(i + 1) % n]).collect::<Vec<f64>>();
    gaps[m - 1] = gap(&v);
    for j in (0..m - 1).rev() {
        let (t1, t0) = (times[j + 1], times[j]);
        let mut rhs = |t: f64, v: &[f64]| {
            let w = (t - t0) / (t1 - t0);
            let pt = lerp(&p[j], &p[j + 1], w);
            let h = model.hamiltonians(v, &pt);
            (0..n).map(|i| model.params.beta * v[i] - h[i]).collect::<Vec<f64>>()
        };
        v = rk4_step(&mut rhs, t1, &v, t0 - t1);
        if v.iter().any(|x| !x.is_finite() || x.abs() > 1e12) {
            return Err(Error::Stiffness { t: t0, state: v });
        }
        gaps[j] = gap(&v);
    }
    Ok(gaps)
}

fn forward(model: &NStateModel, times: &[f64], a: &[Vec<f64>], p0: &[f64]) -> Vec<Vec<f64>> {
    let n = model.n_states;
    let s2 = model.params.sigma2;
    let mut p = vec![p0.to_vec()];
    for j in 0..times.len() - 1 {
        let (t0, t1) = (times[j], times[j + 1]);
        let mut rhs = |t: f64, x: &[f64]| {
            let w = (t - t0) / (t1 - t0);
            forward_rhs(n, s2, &lerp(&a[j], &a[j + 1], w), x)
        };
        let next = rk4_step(&mut rhs, t0, &p[j], t1 - t0);
        p.push(next);
    }
    p
}

fn sup_diff(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
    x.iter()
        .zip(y)
        .flat_map(|(u, v)| u.iter().zip(v).map(|(a, b)| (a - b).abs()))
        .fold(0.0, f64::max)
}

/// Damped Picard iteration on the finite-horizon problem with zero terminal value.
pub fn solve_nstate(model: &NStateModel, p0: &[f64], horizon: f64, damping: f64) -> Result<(NStateFlow, NStateReport)> {
    model.check_len(p0, "p0")?;
    check_probability(p0)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Precondition(format!("horizon must be positive, got {horizon}")));
    }
    if !(damping > 0.0 && damping <= 1.0) {
        return Err(Error::Precondition(format!("damping must lie in (0, 1], got {damping}")));
    }
    let steps = (horizon / NSTATE_DT).ceil() as usize;
    let times: Vec<f64> = (0..=steps).map(|j| horizon * j as f64 / steps as f64).collect();
    let mut p = vec![p0.to_vec(); times.len()];
    let mut theta = damping;
    let mut history = Vec::new();
    let mut conservation: f64 = 0.0;
    let mut converged = false;
    let mut a = backward(model, &times, &p)?;
    let audit = |p: &[Vec<f64>], a: &[Vec<f64>]| {
        let mut c: f64 = 0.0;
        for (x, y) in p.iter().zip(a) {
            c = c.max((x.iter().sum::<f64>() - 1.0).abs()).max(y.iter().sum::<f64>().abs());
        }
        c
    };
    for _ in 0..NSTATE_MAX_ITER {
        let p_new = forward(model, &times, &a, p0);
        let change = sup_diff(&p_new, &p);
        if let Some(&prev) = history.last() {
            if change > prev {
                theta *= 0.5;
            }
        }
        history.push(change);
        if change < NSTATE_TOL {
            p = p_new;
            converged = true;
            a = backward(model, &times, &p)?;
            conservation = conservation.max(audit(&p, &a));
            break;
        }
        p = p.iter().zip(&p_new).map(|(old, new)| lerp(old, new, theta)).collect();
        a = backward(model, &times, &p)?;
        conservation = conservation.max(audit(&p, &a));
    }
    let residual_a = sup_diff(&backward(model, &times, &p)?, &a);
    let residual_p = sup_diff(&forward(model, &times, &a, p0), &p);
    let report = NStateReport {
        converged,
        iterations: history.len(),
        history,
        final_damping: theta,
        residual_a,
        residual_p,
        conservation,
    };
    Ok((NStateFlow { times, p, a }, report))
}

/// Parameters and gap of the two-state system equivalent to `N = 2`.
pub fn two_state_map(params: &ModelParams) -> ModelParams {
    ModelParams { beta: params.beta, sigma2: 8.0 * params.sigma2, kappa: 16.0 * params.kappa }
}

/// Two-state phase point `(8 a_0, p_1 - p_0)` of an `N = 2` state.
pub fn two_state_point(a: &[f64], p: &[f64]) -> (f64, f64) {
    (8.0 * a[0], p[1] - p[0])
}
