//! Backward dynamic programming for the representative player, cost
//! evaluation and residual checks of candidate equilibria.

use serde::{Deserialize, Serialize};

use crate::dynamics::{field, ham, neg, pos, ProbabilityFlow};
use crate::integrate::{dopri5, DenseSolution, OdeOptions, StepControl, Trajectory};
use crate::model::ModelParams;
use crate::{Error, Result};

/// Gap control `a(t)` sampled on a grid, Hermite-interpolated when the
/// derivative is known.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlFlow {
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub da: Option<Vec<f64>>,
}

impl ControlFlow {
    pub fn new(times: Vec<f64>, a: Vec<f64>) -> Result<Self> {
        if times.is_empty() || times.len() != a.len() {
            return Err(Error::Precondition(format!(
                "control needs matching nonempty grids ({} times, {} values)",
                times.len(),
                a.len()
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Precondition("control times must be strictly increasing".into()));
        }
        if let Some(i) = a.iter().position(|x| !x.is_finite()) {
            return Err(Error::Precondition(format!("control not finite at t = {}", times[i])));
        }
        Ok(Self { times, a, da: None })
    }

    pub fn constant(a: f64, times: &[f64]) -> Result<Self> {
        let mut c = Self::new(times.to_vec(), vec![a; times.len()])?;
        c.da = Some(vec![0.0; times.len()]);
        Ok(c)
    }

    pub fn with_derivative(mut self, da: Vec<f64>) -> Result<Self> {
        if da.len() != self.times.len() {
            return Err(Error::Precondition("derivative length mismatch".into()));
        }
        self.da = Some(da);
        Ok(self)
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn sup_abs(&self) -> f64 {
        self.a.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.a[0];
        }
        if t >= self.times[n - 1] {
            return self.a[n - 1];
        }
        let i = self.times.partition_point(|&s| s <= t) - 1;
        let h = self.times[i + 1] - self.times[i];
        let s = (t - self.times[i]) / h;
        match &self.da {
            Some(d) => {
                let (h00, h10, h01, h11) = crate::dynamics::hermite_basis(s);
                h00 * self.a[i] + h10 * h * d[i] + h01 * self.a[i + 1] + h11 * h * d[i + 1]
            }
            None => self.a[i] + s * (self.a[i + 1] - self.a[i]),
        }
    }
}

/// Control and probability flows of a phase-plane trajectory on a uniform grid
/// starting at 0.
pub fn flows_from_trajectory(params: &ModelParams, traj: &Trajectory, dt: f64) -> Result<(ControlFlow, ProbabilityFlow)> {
    let span = traj.t_end() - traj.t_start();
    let n = ((span / dt).ceil() as usize + 1).max(2);
    let (times, pts) = traj.resample(n);
    let times: Vec<f64> = times.iter().map(|t| t - traj.t_start()).collect();
    let f: Vec<[f64; 2]> = pts.iter().map(|x| field(params, x.a, x.q)).collect();
    let a = ControlFlow::new(times.clone(), pts.iter().map(|x| x.a).collect())?
        .with_derivative(f.iter().map(|d| d[0]).collect())?;
    let p = ProbabilityFlow::new(times, pts.iter().map(|x| ((x.q + 1.0) / 2.0).clamp(0.0, 1.0)).collect(), None)?
        .with_derivative(f.iter().map(|d| d[1] / 2.0).collect())?;
    Ok((a, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE", tag = "kind")]
pub enum TailMode {
    /// Terminal value from the stationary problem at frozen `p_inf`
    /// (the terminal flow value when absent).
    StationaryTail { p_inf: Option<f64> },
    ZeroTail,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValueFunction {
    pub times: Vec<f64>,
    pub v0: Vec<f64>,
    pub v1: Vec<f64>,
    pub lambda_bar: Option<f64>,
    /// Bound on the discounted cost beyond the horizon, `kappa e^{-beta T} / beta`.
    pub tail_bound: Option<f64>,
    /// Time derivative of the gap on the grid.
    pub da: Vec<f64>,
}

impl ValueFunction {
    pub fn a(&self) -> Vec<f64> {
        self.v0.iter().zip(&self.v1).map(|(x, y)| x - y).collect()
    }

    pub fn control(&self) -> Result<ControlFlow> {
        ControlFlow::new(self.times.clone(), self.a())?.with_derivative(self.da.clone())
    }

    pub fn sup_abs_a(&self) -> f64 {
        self.a().iter().fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// Solution of `beta v = H(x, Dv, p)` at a frozen distribution.
pub fn stationary_value(params: &ModelParams, p: f64) -> Result<[f64; 2]> {
    if !(params.beta > 0.0) {
        return Err(Error::ModelMismatch("the stationary value needs beta > 0".into()));
    }
    let q = 2.0 * p - 1.0;
    let b = params.beta + 2.0 * params.sigma2;
    let a = q.signum() * (-b + (b * b + 2.0 * params.kappa * q.abs()).sqrt());
    let a = if q == 0.0 { 0.0 } else { a };
    let v1 = ham(1, a, p, params) / params.beta;
    Ok([v1 + a, v1])
}

fn value_rhs(params: &ModelParams, lambda: f64, p: f64, v: &[f64; 2]) -> [f64; 2] {
    let a = v[0] - v[1];
    [
        params.beta * v[0] + lambda - ham(0, -a, p, params),
        params.beta * v[1] + lambda - ham(1, a, p, params),
    ]
}

const BLOWUP: f64 = 1e12;

/// Integrates a two-dimensional system from `t_from` to `t_to`, keeping the dense output.
fn solve2<F>(f: F, t_from: f64, y: [f64; 2], t_to: f64, opts: &OdeOptions) -> Result<DenseSolution<2>>
where
    F: FnMut(f64, &[f64; 2]) -> [f64; 2],
{
    let mut dense = DenseSolution::new();
    let mut blown = None;
    dopri5(f, t_from, y, t_to, opts, |seg, y| {
        dense.push(*seg);
        if y.iter().any(|x| !x.is_finite() || x.abs() > BLOWUP) {
            blown = Some((seg.t1(), y.to_vec()));
            return StepControl::Stop;
        }
        StepControl::Continue
    })?;
    if let Some((t, state)) = blown {
        return Err(Error::Stiffness { t, state });
    }
    dense.finish();
    Ok(dense)
}

fn value_opts() -> OdeOptions {
    OdeOptions { rtol: 1e-11, atol: 1e-12, h_max: Some(1.0), ..Default::default() }
}

fn sample_value(
    params: &ModelParams,
    flow: &ProbabilityFlow,
    lambda: f64,
    times: Vec<f64>,
    dense: &DenseSolution<2>,
    terminal: [f64; 2],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut v0 = Vec::with_capacity(times.len());
    let mut v1 = Vec::with_capacity(times.len());
    let mut da = Vec::with_capacity(times.len());
    for &t in &times {
        let v = if dense.is_empty() { terminal } else { dense.eval(t) };
        let d = value_rhs(params, lambda, flow.eval(t), &v);
        v0.push(v[0]);
        v1.push(v[1]);
        da.push(d[0] - d[1]);
    }
    (times, v0, v1, da)
}

fn grid_on(flow: &ProbabilityFlow, t0: f64, t1: f64) -> Vec<f64> {
    let tol = 1e-12 * t1.abs().max(1.0);
    let mut g = vec![t0];
    g.extend(flow.times.iter().copied().filter(|&t| t > t0 + tol && t < t1 - tol));
    if t1 > t0 {
        g.push(t1);
    }
    g
}

pub fn solve_value_backward(
    params: &ModelParams,
    flow: &ProbabilityFlow,
    horizon: f64,
    tail: TailMode,
) -> Result<ValueFunction> {
    if !(horizon >= 0.0) {
        return Err(Error::Precondition(format!("horizon must be nonnegative, got {horizon}")));
    }
    let tol = 1e-9 * horizon.max(1.0);
    if flow.t_start() > tol || flow.t_end() < horizon - tol {
        return Err(Error::Precondition(format!(
            "flow covers [{}, {}], horizon is {horizon}",
            flow.t_start(),
            flow.t_end()
        )));
    }
    let terminal = match tail {
        TailMode::StationaryTail { p_inf } => stationary_value(params, p_inf.unwrap_or_else(|| flow.eval(horizon)))?,
        TailMode::ZeroTail => [0.0, 0.0],
    };
    let dense = solve2(|t, v| value_rhs(params, 0.0, flow.eval(t), v), horizon, terminal, 0.0, &value_opts())?;
    let (times, v0, v1, da) = sample_value(params, flow, 0.0, grid_on(flow, 0.0, horizon), &dense, terminal);
    Ok(ValueFunction {
        times,
        v0,
        v1,
        lambda_bar: None,
        tail_bound: (params.beta > 0.0).then(|| params.kappa * (-params.beta * horizon).exp() / params.beta),
        da,
    })
}

fn check_periodic(flow: &ProbabilityFlow) -> Result<f64> {
    let tau = flow
        .period
        .ok_or_else(|| Error::Precondition("flow carries no period".into()))?;
    if flow.t_start().abs() > 1e-12 || flow.t_end() < tau * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!("flow does not cover one period [0, {tau}]")));
    }
    if (flow.eval(tau) - flow.eval(0.0)).abs() > 1e-6 {
        return Err(Error::NotPeriodic(format!(
            "p(0) = {} but p(tau) = {}",
            flow.eval(0.0),
            flow.eval(tau)
        )));
    }
    Ok(tau)
}

/// Periodic solution of the discounted equation on a periodic flow.
pub fn periodic_discounted_value(params: &ModelParams, flow: &ProbabilityFlow) -> Result<ValueFunction> {
    let tau = check_periodic(flow)?;
    let mean_p = {
        let n = 200;
        (0..n).map(|i| flow.eval(tau * i as f64 / n as f64)).sum::<f64>() / n as f64
    };
    let mut x = stationary_value(params, mean_p)?;
    let opts = value_opts();
    let map = |x: [f64; 2]| -> Result<[f64; 2]> {
        let d = solve2(|t, v| value_rhs(params, 0.0, flow.eval(t), v), tau, x, 0.0, &opts)?;
        let y = d.eval(0.0);
        Ok([y[0] - x[0], y[1] - x[1]])
    };
    let mut g = map(x)?;
    for _ in 0..60 {
        let scale = 1.0 + x[0].abs().max(x[1].abs());
        if g[0].abs().max(g[1].abs()) < 1e-11 * scale {
            break;
        }
        let mut j = [[0.0; 2]; 2];
        for k in 0..2 {
            let h = 1e-6 * scale;
            let mut xp = x;
            xp[k] += h;
            let gp = map(xp)?;
            j[0][k] = (gp[0] - g[0]) / h;
            j[1][k] = (gp[1] - g[1]) / h;
        }
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == 0.0 || !det.is_finite() {
            return Err(Error::Numerical("singular periodicity Jacobian".into()));
        }
        let dx = [
            -(j[1][1] * g[0] - j[0][1] * g[1]) / det,
            -(-j[1][0] * g[0] + j[0][0] * g[1]) / det,
        ];
        x = [x[0] + dx[0], x[1] + dx[1]];
        g = map(x)?;
    }
    let scale = 1.0 + x[0].abs().max(x[1].abs());
    if g[0].abs().max(g[1].abs()) > 1e-8 * scale {
        return Err(Error::Numerical(format!("periodic value did not converge (defect {g:?})")));
    }
    let dense = solve2(|t, v| value_rhs(params, 0.0, flow.eval(t), v), tau, x, 0.0, &opts)?;
    let (times, v0, v1, da) = sample_value(params, flow, 0.0, grid_on(flow, 0.0, tau), &dense, x);
    Ok(ValueFunction { times, v0, v1, lambda_bar: None, tail_bound: None, da })
}

/// Periodic solution of the ergodic equation `lambda - v' = H(x, Dv, p)` on a
/// periodic flow, normalized by `v(anchor, 1) = 0`.
pub fn solve_ergodic_value(params: &ModelParams, flow: &ProbabilityFlow, anchor: f64) -> Result<ValueFunction> {
    if !params.is_ergodic() {
        return Err(Error::ModelMismatch("the ergodic value needs beta = 0".into()));
    }
    let tau = check_periodic(flow)?;
    let opts = value_opts();
    // periodic gap: fixed point of the backward one-period map of the gap equation
    let gap_rhs = |t: f64, y: &[f64; 2]| {
        let p = flow.eval(t);
        let a = y[0];
        [
            2.0 * params.sigma2 * a + 0.5 * a * a.abs() - params.kappa * (2.0 * p - 1.0),
            ham(1, a, p, params),
        ]
    };
    let back = |x: f64| -> Result<[f64; 2]> {
        let d = solve2(gap_rhs, tau, [x, 0.0], 0.0, &opts)?;
        Ok(d.eval(0.0))
    };
    let mut x = 0.0;
    let mut g = back(x)?[0] - x;
    for _ in 0..80 {
        if g.abs() < 1e-12 * (1.0 + x.abs()) {
            break;
        }
        let h = 1e-7 * (1.0 + x.abs());
        let gp = back(x + h)?[0] - (x + h);
        let slope = (gp - g) / h;
        if slope == 0.0 || !slope.is_finite() {
            return Err(Error::Numerical("flat periodicity map for the gap".into()));
        }
        let mut step = -g / slope;
        let mut accepted = false;
        for _ in 0..30 {
            if let Ok(y) = back(x + step) {
                let gn = y[0] - (x + step);
                if gn.abs() < g.abs() {
                    x += step;
                    g = gn;
                    accepted = true;
                    break;
                }
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if g.abs() > 1e-8 * (1.0 + x.abs()) {
        return Err(Error::Numerical(format!("periodic gap did not converge (defect {g:e})")));
    }
    // backward integral of H(1, a, p) over one period, sign from reversed time
    let lambda = -back(x)?[1] / tau;
    let dense = solve2(|t, v| value_rhs(params, lambda, flow.eval(t), v), tau, [x, 0.0], 0.0, &opts)?;
    let anchor = anchor.rem_euclid(tau);
    let shift = dense.eval(anchor)[1];
    let (times, mut v0, mut v1, da) = sample_value(params, flow, lambda, grid_on(flow, 0.0, tau), &dense, [x, 0.0]);
    v0.iter_mut().for_each(|v| *v -= shift);
    v1.iter_mut().for_each(|v| *v -= shift);
    Ok(ValueFunction { times, v0, v1, lambda_bar: Some(lambda), tail_bound: None, da })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum CostTail {
    /// Adds `e^{-beta T} E[v_inf(X_T)]` with the stationary value at `p(T)`.
    Stationary,
    Truncated,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub cost: f64,
    pub horizon: f64,
    /// `kappa e^{-beta T} / beta`; bounds whatever lies beyond the horizon.
    pub tail_bound: f64,
    pub tail: CostTail,
    /// Law of the player's own state at the horizon, `P(X_T = 1)`.
    pub terminal_p: f64,
}

/// Expected discounted cost of a player using the gap control `a` against the
/// population flow `p`, starting from centered law `q0`.
pub fn cost_discounted(
    a: &ControlFlow,
    flow: &ProbabilityFlow,
    q0: f64,
    params: &ModelParams,
    tail: CostTail,
) -> Result<CostReport> {
    if !(params.beta > 0.0) {
        return Err(Error::ModelMismatch("the discounted cost needs beta > 0".into()));
    }
    if !(q0.abs() <= 1.0) {
        return Err(Error::Domain(format!("q0 = {q0} outside [-1, 1]")));
    }
    if a.times.len() != flow.times.len()
        || a.times.iter().zip(&flow.times).any(|(x, y)| (x - y).abs() > 1e-12 * x.abs().max(1.0))
    {
        return Err(Error::Precondition("control and flow grids differ".into()));
    }
    let (t0, t1) = (flow.t_start(), flow.t_end());
    let (beta, s2, k) = (params.beta, params.sigma2, params.kappa);
    let rhs = |t: f64, y: &[f64; 2]| {
        let g = a.eval(t);
        let p = flow.eval(t);
        let r = y[0];
        let (up, dn) = (pos(g), neg(g));
        let run0 = 0.5 * up * up + k * p;
        let run1 = 0.5 * dn * dn + k * (1.0 - p);
        [
            (s2 + up) * (1.0 - r) - (s2 + dn) * r,
            (-beta * (t - t0)).exp() * ((1.0 - r) * run0 + r * run1),
        ]
    };
    let dense = solve2(rhs, t0, [(1.0 + q0) / 2.0, 0.0], t1, &value_opts())?;
    let end = if dense.is_empty() { [(1.0 + q0) / 2.0, 0.0] } else { dense.eval(t1) };
    let horizon = t1 - t0;
    let disc = (-beta * horizon).exp();
    let mut cost = end[1];
    if tail == CostTail::Stationary {
        let v = stationary_value(params, flow.eval(t1))?;
        cost += disc * ((1.0 - end[0]) * v[0] + end[0] * v[1]);
    }
    Ok(CostReport { cost, horizon, tail_bound: k * disc / beta, tail, terminal_p: end[0] })
}

/// First-derivative weights at `x0` for the nodes `xs`.
pub(crate) fn fd_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    // Fornberg's recursion, derivative orders 0 and 1
    let n = xs.len();
    let mut c = vec![[0.0f64; 2]; n];
    c[0][0] = 1.0;
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    for i in 1..n {
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                c[i][1] = c1 * (c[i - 1][0] - c5 * c[i - 1][1]) / c2;
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            c[j][1] = (c4 * c[j][1] - c[j][0]) / c3;
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|w| w[1]).collect()
}

/// Five-point derivative on a grid, choosing stencils that do not straddle a
/// sign change of `guard`.
pub(crate) fn derivative5(t: &[f64], y: &[f64], guard: &[f64]) -> Vec<f64> {
    let n = t.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(4);
            let hi = i.min(n - 5);
            let clean = |s: usize| {
                let w = &guard[s..s + 5];
                !(w.iter().any(|&g| g > 0.0) && w.iter().any(|&g| g < 0.0))
            };
            let centred = |s: usize| (s as i64 + 2 - i as i64).abs();
            let s = (lo..=hi)
                .filter(|&s| clean(s))
                .min_by_key(|&s| centred(s))
                .unwrap_or_else(|| (lo..=hi).min_by_key(|&s| centred(s)).unwrap());
            let w = fd_weights(t[i], &t[s..s + 5]);
            (0..5).map(|k| w[k] * y[s + k]).sum()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    /// Sup-norm defect of the gap equation.
    pub a_residual: f64,
    /// Sup-norm defect of the distribution equation.
    pub q_residual: f64,
    /// Sup-norm of `a - (v0 - v1)` for the independently reconstructed value.
    pub reconstruction: f64,
    pub lambda: Option<f64>,
}

/// Checks that sampled `(a, q)` solve the forward-backward system.
pub fn mfg_residual(times: &[f64], a: &[f64], q: &[f64], params: &ModelParams) -> Result<ResidualReport> {
    let n = times.len();
    if a.len() != n || q.len() != n {
        return Err(Error::Precondition("flows must share one grid".into()));
    }
    if n < 5 {
        return Err(Error::Precondition("residual checks need at least 5 samples".into()));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Precondition("times must be strictly increasing".into()));
    }
    let da = derivative5(times, a, a);
    let dq = derivative5(times, q, a);
    let mut ra = 0.0f64;
    let mut rq = 0.0f64;
    for i in 0..n {
        let f = field(params, a[i], q[i]);
        ra = ra.max((da[i] - f[0]).abs());
        rq = rq.max((dq[i] - f[1]).abs());
    }
    let t0 = times[0];
    let shifted: Vec<f64> = times.iter().map(|t| t - t0).collect();
    let p: Vec<f64> = q.iter().map(|x| ((x + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
    let (reconstruction, lambda) = if params.beta > 0.0 {
        let flow = ProbabilityFlow::new(shifted.clone(), p, None)?.with_derivative(dq.iter().map(|d| d / 2.0).collect())?;
        let v = solve_value_backward(params, &flow, shifted[n - 1], TailMode::StationaryTail { p_inf: None })?;
        let rec = v
            .a()
            .iter()
            .zip(&v.times)
            .map(|(va, &t)| (va - interp(&shifted, a, t)).abs())
            .fold(0.0, f64::max);
        (rec, None)
    } else {
        // v1' = lambda - H(1, a, p), v0' = lambda - H(0, -a, p), lambda = mean H(1, a, p)
        let h1: Vec<f64> = (0..n).map(|i| ham(1, a[i], p[i], params)).collect();
        let h0: Vec<f64> = (0..n).map(|i| ham(0, -a[i], p[i], params)).collect();
        let i1 = cumulative(&shifted, &h1, a);
        let i0 = cumulative(&shifted, &h0, a);
        let lambda = i1[n - 1] / shifted[n - 1];
        let rec = (0..n)
            .map(|i| {
                let v0 = a[0] + lambda * shifted[i] - i0[i];
                let v1 = lambda * shifted[i] - i1[i];
                (a[i] - (v0 - v1)).abs()
            })
            .fold(0.0, f64::max);
        (rec, Some(lambda))
    };
    Ok(ResidualReport { a_residual: ra, q_residual: rq, reconstruction, lambda })
}

fn interp(t: &[f64], y: &[f64], s: f64) -> f64 {
    let i = t.partition_point(|&x| x < s);
    if i < t.len() && (t[i] - s).abs() <= 1e-12 * s.abs().max(1.0) {
        return y[i];
    }
    let i = i.clamp(1, t.len() - 1);
    let w = (s - t[i - 1]) / (t[i] - t[i - 1]);
    y[i - 1] + w * (y[i] - y[i - 1])
}

/// Cumulative integral by the end-corrected trapezoid rule.
fn cumulative(t: &[f64], f: &[f64], guard: &[f64]) -> Vec<f64> {
    let df = derivative5(t, f, guard);
    let mut out = vec![0.0; t.len()];
    for i in 1..t.len() {
        let h = t[i] - t[i - 1];
        out[i] = out[i - 1] + 0.5 * h * (f[i - 1] + f[i]) + h * h / 12.0 * (df[i - 1] - df[i]);
    }
    out
}
