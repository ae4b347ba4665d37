//! Planar vector field, Hamiltonian, first integral and control conversions.

use serde::{Deserialize, Serialize};

use crate::model::ModelParams;
use crate::{Error, Result};

/// Slack allowed on `|q| <= 1` before a point counts as outside the strip.
pub const Q_TOL: f64 = 1e-9;

/// Sign with `sgn(0) = 0`.
#[inline]
pub fn sgn(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[inline]
pub fn pos(x: f64) -> f64 {
    x.max(0.0)
}

#[inline]
pub fn neg(x: f64) -> f64 {
    (-x).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePoint {
    pub a: f64,
    pub q: f64,
}

impl PhasePoint {
    pub fn new(a: f64, q: f64) -> Self {
        Self { a, q }
    }

    pub fn p(&self) -> f64 {
        (self.q + 1.0) / 2.0
    }

    pub fn to_array(self) -> [f64; 2] {
        [self.a, self.q]
    }

    pub fn from_array(x: [f64; 2]) -> Self {
        Self { a: x[0], q: x[1] }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.a.is_finite() && self.q.is_finite()) || self.q.abs() > 1.0 + Q_TOL {
            return Err(Error::Domain(format!("point ({}, {}) outside the strip |q| <= 1", self.a, self.q)));
        }
        Ok(())
    }
}

/// Unchecked field evaluation used by the integrators.
#[inline]
pub fn field(params: &ModelParams, a: f64, q: f64) -> [f64; 2] {
    let s2 = params.sigma2;
    [
        (params.beta + 2.0 * s2) * a + 0.5 * sgn(a) * a * a - params.kappa * q,
        a - (2.0 * s2 + a.abs()) * q,
    ]
}

pub fn vector_field(params: &ModelParams, point: PhasePoint) -> Result<(f64, f64)> {
    point.check()?;
    let f = field(params, point.a, point.q);
    Ok((f[0], f[1]))
}

fn check_state(x: u8) -> Result<()> {
    if x > 1 {
        return Err(Error::Domain(format!("state must be 0 or 1, got {x}")));
    }
    Ok(())
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// Running cost without the coupling factor: mass of the other state.
#[inline]
pub fn ell(x: u8, p: f64) -> f64 {
    if x == 0 {
        p
    } else {
        1.0 - p
    }
}

#[inline]
pub(crate) fn ham(x: u8, a: f64, p: f64, params: &ModelParams) -> f64 {
    let m = neg(a);
    params.sigma2 * a - 0.5 * m * m + params.kappa * ell(x, p)
}

/// `H(x, a, p) = sigma2 a - (a^-)^2 / 2 + kappa l(x, p)`.
pub fn hamiltonian(x: u8, a: f64, p: f64, params: &ModelParams) -> Result<f64> {
    check_state(x)?;
    check_p(p)?;
    Ok(ham(x, a, p, params))
}

#[inline]
pub(crate) fn energy_unchecked(params: &ModelParams, a: f64, q: f64) -> f64 {
    params.kappa * q * q / 2.0 + a * a / 2.0 - 2.0 * params.sigma2 * a * q - 0.5 * a * a * sgn(a) * q
}

/// First integral of the ergodic system.
pub fn energy(params: &ModelParams, point: PhasePoint) -> Result<f64> {
    if !params.is_ergodic() {
        return Err(Error::ModelMismatch(format!(
            "energy is conserved only for beta = 0 (beta = {})",
            params.beta
        )));
    }
    Ok(energy_unchecked(params, point.a, point.q))
}

pub(crate) fn energy_gradient(params: &ModelParams, a: f64, q: f64) -> [f64; 2] {
    [
        a - 2.0 * params.sigma2 * q - a.abs() * q,
        params.kappa * q - 2.0 * params.sigma2 * a - 0.5 * a * a * sgn(a),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeedbackPair {
    pub alpha0: f64,
    pub alpha1: f64,
}

impl FeedbackPair {
    pub fn new(alpha0: f64, alpha1: f64) -> Self {
        Self { alpha0, alpha1 }
    }

    /// The special control attached to a gap `a`: `(a^+, a^-)`.
    pub fn from_gap(a: f64) -> Self {
        Self { alpha0: pos(a), alpha1: neg(a) }
    }

    pub fn is_special(&self) -> bool {
        self.alpha0 * self.alpha1 == 0.0
    }
}

/// Time-sampled law of the representative agent, `p = P(X = 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityFlow {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    /// Optional exact time derivative; switches interpolation to cubic Hermite.
    pub dp: Option<Vec<f64>>,
    pub period: Option<f64>,
}

impl ProbabilityFlow {
    pub fn new(times: Vec<f64>, p: Vec<f64>, period: Option<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != p.len() {
            return Err(Error::Precondition(format!(
                "flow needs matching nonempty grids ({} times, {} values)",
                times.len(),
                p.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("flow times must be strictly increasing".into()));
        }
        for (t, &v) in times.iter().zip(&p) {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Domain(format!("p = {v} outside [0, 1] at t = {t}")));
            }
        }
        if let Some(tau) = period {
            if !(tau > 0.0) {
                return Err(Error::Precondition(format!("period must be positive, got {tau}")));
            }
        }
        Ok(Self { times, p, dp: None, period })
    }

    pub fn constant(p: f64, t_end: f64) -> Result<Self> {
        let n = 2usize.max((t_end / 0.01).ceil() as usize + 1).min(100_001);
        let times: Vec<f64> = (0..n).map(|i| t_end * i as f64 / (n - 1) as f64).collect();
        let mut f = Self::new(times, vec![p; n], None)?;
        f.dp = Some(vec![0.0; n]);
        Ok(f)
    }

    pub fn with_derivative(mut self, dp: Vec<f64>) -> Result<Self> {
        if dp.len() != self.times.len() {
            return Err(Error::Precondition("derivative length mismatch".into()));
        }
        self.dp = Some(dp);
        Ok(self)
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn last(&self) -> f64 {
        *self.p.last().unwrap()
    }

    /// Interpolated value; held constant outside the grid.
    pub fn eval(&self, t: f64) -> f64 {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.p[0];
        }
        if t >= self.times[n - 1] {
            return self.p[n - 1];
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let h = t1 - t0;
        let s = (t - t0) / h;
        let v = match &self.dp {
            Some(d) => {
                let (h00, h10, h01, h11) = hermite_basis(s);
                h00 * self.p[i] + h10 * h * d[i] + h01 * self.p[i + 1] + h11 * h * d[i + 1]
            }
            None => self.p[i] + s * (self.p[i + 1] - self.p[i]),
        };
        v.clamp(0.0, 1.0)
    }

    /// Second-order finite-difference derivative on the grid.
    pub fn fd_derivative(&self) -> Vec<f64> {
        fd_derivative(&self.times, &self.p)
    }
}

#[inline]
pub(crate) fn hermite_basis(s: f64) -> (f64, f64, f64, f64) {
    let s2 = s * s;
    let s3 = s2 * s;
    (2.0 * s3 - 3.0 * s2 + 1.0, s3 - 2.0 * s2 + s, -2.0 * s3 + 3.0 * s2, s3 - s2)
}

/// Three-point derivative on a possibly nonuniform grid, one-sided at the ends.
pub fn fd_derivative(t: &[f64], y: &[f64]) -> Vec<f64> {
    let n = t.len();
    if n < 2 {
        return vec![0.0; n];
    }
    if n == 2 {
        let d = (y[1] - y[0]) / (t[1] - t[0]);
        return vec![d, d];
    }
    let three = |i0: usize, at: usize| {
        let (x0, x1, x2) = (t[i0], t[i0 + 1], t[i0 + 2]);
        let x = t[at];
        let w0 = (2.0 * x - x1 - x2) / ((x0 - x1) * (x0 - x2));
        let w1 = (2.0 * x - x0 - x2) / ((x1 - x0) * (x1 - x2));
        let w2 = (2.0 * x - x0 - x1) / ((x2 - x0) * (x2 - x1));
        w0 * y[i0] + w1 * y[i0 + 1] + w2 * y[i0 + 2]
    };
    let mut d = Vec::with_capacity(n);
    d.push(three(0, 0));
    for i in 1..n - 1 {
        d.push(three(i - 1, i));
    }
    d.push(three(n - 3, n - 1));
    d
}

/// Minimal special control reproducing the flow.
pub fn control_from_flow(flow: &ProbabilityFlow, sigma2: f64) -> Result<Vec<FeedbackPair>> {
    let dp = flow.fd_derivative();
    flow.times
        .iter()
        .zip(&flow.p)
        .zip(&dp)
        .map(|((&t, &p), &d)| {
            if p <= 0.0 || p >= 1.0 {
                return Err(Error::Domain(format!("p = {p} at t = {t}; control undefined on the boundary")));
            }
            let g = d + sigma2 * (2.0 * p - 1.0);
            Ok(FeedbackPair { alpha0: pos(g) / (1.0 - p), alpha1: neg(g) / p })
        })
        .collect()
}

/// Replaces each pair by the special pair with the same drift.
pub fn specialize_control(alpha: &[FeedbackPair], flow: &ProbabilityFlow) -> Result<Vec<FeedbackPair>> {
    if alpha.len() != flow.p.len() {
        return Err(Error::Precondition(format!(
            "control has {} samples, flow has {}",
            alpha.len(),
            flow.p.len()
        )));
    }
    alpha
        .iter()
        .zip(&flow.p)
        .zip(&flow.times)
        .map(|((al, &p), &t)| {
            if al.alpha0 < 0.0 || al.alpha1 < 0.0 {
                return Err(Error::Domain(format!("negative rate increment at t = {t}")));
            }
            if p <= 0.0 || p >= 1.0 {
                return Err(Error::Domain(format!("p = {p} at t = {t}; specialization undefined")));
            }
            if al.is_special() {
                return Ok(*al);
            }
            let r = al.alpha0 / al.alpha1 - p / (1.0 - p);
            Ok(if r > 0.0 {
                FeedbackPair { alpha0: al.alpha0 - al.alpha1 * p / (1.0 - p), alpha1: 0.0 }
            } else {
                FeedbackPair { alpha0: 0.0, alpha1: al.alpha1 - al.alpha0 * (1.0 - p) / p }
            })
        })
        .collect()
}

pub fn kolmogorov_rhs(p: f64, alpha: FeedbackPair, sigma2: f64) -> Result<f64> {
    check_p(p)?;
    Ok((sigma2 + alpha.alpha0) * (1.0 - p) - (sigma2 + alpha.alpha1) * p)
}
