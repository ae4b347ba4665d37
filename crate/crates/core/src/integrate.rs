//! Dormand-Prince 5(4) integration with dense output, and the planar
//! trajectory driver with boundary, section, escape and convergence events.

use serde::{Deserialize, Serialize};

use crate::dynamics::{energy_gradient, energy_unchecked, field, PhasePoint, Q_TOL};
use crate::model::{stationary_equilibria, FixedPointId, LocalType, ModelParams, StationaryPoint};
use crate::{Error, Result};

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

#[derive(Debug, Clone, Copy)]
pub struct OdeOptions {
    pub rtol: f64,
    pub atol: f64,
    pub h_init: Option<f64>,
    pub h_max: Option<f64>,
    pub max_steps: usize,
}

impl Default for OdeOptions {
    fn default() -> Self {
        Self { rtol: 1e-10, atol: 1e-12, h_init: None, h_max: None, max_steps: 2_000_000 }
    }
}

/// One accepted step with its continuous extension.
#[derive(Debug, Clone, Copy)]
pub struct Segment<const N: usize> {
    pub t0: f64,
    pub h: f64,
    r: [[f64; N]; 5],
}

impl<const N: usize> Segment<N> {
    pub fn t1(&self) -> f64 {
        self.t0 + self.h
    }

    pub fn lo(&self) -> f64 {
        self.t0.min(self.t0 + self.h)
    }

    pub fn hi(&self) -> f64 {
        self.t0.max(self.t0 + self.h)
    }

    pub fn start(&self) -> [f64; N] {
        self.r[0]
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        let th = (t - self.t0) / self.h;
        let th1 = 1.0 - th;
        let mut y = [0.0; N];
        for i in 0..N {
            let r = &self.r;
            y[i] = r[0][i] + th * (r[1][i] + th1 * (r[2][i] + th * (r[3][i] + th1 * r[4][i])));
        }
        y
    }

    /// Same curve with the time axis moved by `dt`.
    pub fn shifted(mut self, dt: f64) -> Self {
        self.t0 += dt;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepControl {
    Continue,
    Stop,
}

#[derive(Debug, Clone, Copy)]
pub struct OdeOutcome<const N: usize> {
    pub t: f64,
    pub y: [f64; N],
    pub accepted: usize,
    pub rejected: usize,
    pub stopped: bool,
}

fn err_norm<const N: usize>(e: &[f64; N], y0: &[f64; N], y1: &[f64; N], o: &OdeOptions) -> f64 {
    let mut s = 0.0;
    for i in 0..N {
        let sc = o.atol + o.rtol * y0[i].abs().max(y1[i].abs());
        s += (e[i] / sc).powi(2);
    }
    (s / N as f64).sqrt()
}

fn axpy<const N: usize>(y: &[f64; N], h: f64, terms: &[(f64, &[f64; N])]) -> [f64; N] {
    let mut out = *y;
    for i in 0..N {
        let mut acc = 0.0;
        for (c, k) in terms {
            acc += c * k[i];
        }
        out[i] += h * acc;
    }
    out
}

/// Adaptive Dormand-Prince 5(4) from `t0` to `t1` (either direction).
///
/// The observer sees every accepted step and may adjust the new state or stop.
pub fn dopri5<const N: usize, F, O>(
    mut f: F,
    t0: f64,
    y0: [f64; N],
    t1: f64,
    opts: &OdeOptions,
    mut observer: O,
) -> Result<OdeOutcome<N>>
where
    F: FnMut(f64, &[f64; N]) -> [f64; N],
    O: FnMut(&Segment<N>, &mut [f64; N]) -> StepControl,
{
    let span = t1 - t0;
    let mut out = OdeOutcome { t: t0, y: y0, accepted: 0, rejected: 0, stopped: false };
    if span == 0.0 {
        return Ok(out);
    }
    let dir = span.signum();
    let h_max = opts.h_max.unwrap_or(span.abs()).min(span.abs());
    let mut t = t0;
    let mut y = y0;
    let mut k1 = f(t, &y);

    let mut h = match opts.h_init {
        Some(h) => h.abs().min(h_max),
        None => {
            let sc: Vec<f64> = y.iter().map(|v| opts.atol + opts.rtol * v.abs()).collect();
            let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / N as f64).sqrt();
            let d1 = (k1.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / N as f64).sqrt();
            let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
            let h0 = h0.min(h_max);
            let y1 = axpy(&y, dir * h0, &[(1.0, &k1)]);
            let f1 = f(t + dir * h0, &y1);
            let d2 = (f1
                .iter()
                .zip(&k1)
                .zip(&sc)
                .map(|((a, b), s)| ((a - b) / s).powi(2))
                .sum::<f64>()
                / N as f64)
                .sqrt()
                / h0;
            let m = d1.max(d2);
            let h1 = if m <= 1e-15 { (h0 * 1e-3).max(1e-6) } else { (0.01 / m).powf(0.2) };
            (100.0 * h0).min(h1).min(h_max)
        }
    };
    let mut err_old: f64 = 1e-4;
    let mut last_rejected = false;
    loop {
        if out.accepted + out.rejected >= opts.max_steps {
            return Err(Error::Numerical(format!("step budget exhausted at t = {t}")));
        }
        let remaining = (t1 - t) * dir;
        if remaining <= 0.0 {
            break;
        }
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Stiffness { t, state: y.to_vec() });
        }
        let mut final_step = false;
        // stretch to the end rather than leave a sliver below the step floor,
        // but never undo the shrink that follows a rejection
        if h >= remaining || (!last_rejected && h >= remaining - 1e-12 * t.abs().max(1.0)) {
            h = remaining;
            final_step = true;
        }
        let hs = dir * h;
        let k2 = f(t + C2 * hs, &axpy(&y, hs, &[(A21, &k1)]));
        let k3 = f(t + C3 * hs, &axpy(&y, hs, &[(A31, &k1), (A32, &k2)]));
        let k4 = f(t + C4 * hs, &axpy(&y, hs, &[(A41, &k1), (A42, &k2), (A43, &k3)]));
        let k5 = f(t + C5 * hs, &axpy(&y, hs, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)]));
        let k6 = f(
            t + hs,
            &axpy(&y, hs, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)]),
        );
        let y_new = axpy(&y, hs, &[(A71, &k1), (A73, &k3), (A74, &k4), (A75, &k5), (A76, &k6)]);
        let t_new = if final_step { t1 } else { t + hs };
        let k7 = f(t_new, &y_new);
        let mut e = [0.0; N];
        for i in 0..N {
            e[i] = hs * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
        }
        let err = err_norm(&e, &y, &y_new, opts);
        if !err.is_finite() {
            out.rejected += 1;
            h *= 0.2;
            last_rejected = true;
            continue;
        }
        if err <= 1.0 {
            let mut r = [[0.0; N]; 5];
            for i in 0..N {
                let ydiff = y_new[i] - y[i];
                let bspl = hs * k1[i] - ydiff;
                r[0][i] = y[i];
                r[1][i] = ydiff;
                r[2][i] = bspl;
                r[3][i] = ydiff - hs * k7[i] - bspl;
                r[4][i] = hs
                    * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
            }
            let seg = Segment { t0: t, h: t_new - t, r };
            let mut y_acc = y_new;
            out.accepted += 1;
            let ctl = observer(&seg, &mut y_acc);
            t = t_new;
            k1 = if y_acc == y_new { k7 } else { f(t, &y_acc) };
            y = y_acc;
            out.t = t;
            out.y = y;
            if ctl == StepControl::Stop {
                out.stopped = true;
                return Ok(out);
            }
            if final_step {
                break;
            }
            let err_c = err.max(1e-10);
            let mut fac = 0.9 * err_c.powf(-0.7 / 5.0) * err_old.powf(0.4 / 5.0);
            fac = fac.clamp(0.2, 10.0);
            if last_rejected {
                fac = fac.min(1.0);
            }
            h = (h * fac).min(h_max);
            err_old = err_c;
            last_rejected = false;
        } else {
            out.rejected += 1;
            let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 0.9);
            h *= fac;
            last_rejected = true;
        }
    }
    Ok(out)
}

/// Piecewise dense representation assembled from accepted steps.
#[derive(Debug, Clone, Default)]
pub struct DenseSolution<const N: usize> {
    segs: Vec<Segment<N>>,
}

impl<const N: usize> DenseSolution<N> {
    pub fn new() -> Self {
        Self { segs: Vec::new() }
    }

    pub fn push(&mut self, s: Segment<N>) {
        self.segs.push(s);
    }

    /// Orders segments by time so that lookup works for reversed integrations.
    pub fn finish(&mut self) {
        self.segs.sort_by(|a, b| a.lo().partial_cmp(&b.lo()).unwrap());
    }

    pub fn is_empty(&self) -> bool {
        self.segs.is_empty()
    }

    pub fn shifted(&self, dt: f64) -> Self {
        Self { segs: self.segs.iter().map(|s| s.shifted(dt)).collect() }
    }

    pub fn append(&mut self, other: &Self) {
        self.segs.extend_from_slice(&other.segs);
        self.finish();
    }

    pub fn range(&self) -> (f64, f64) {
        (self.segs.first().map_or(0.0, |s| s.lo()), self.segs.last().map_or(0.0, |s| s.hi()))
    }

    pub fn eval(&self, t: f64) -> [f64; N] {
        let i = self.segs.partition_point(|s| s.hi() < t).min(self.segs.len() - 1);
        self.segs[i].eval(t)
    }
}

/// Classical fixed-step RK4 step on a vector state.
pub fn rk4_step<F>(f: &mut F, t: f64, y: &[f64], h: f64) -> Vec<f64>
where
    F: FnMut(f64, &[f64]) -> Vec<f64>,
{
    let n = y.len();
    let k1 = f(t, y);
    let y2: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k1[i]).collect();
    let k2 = f(t + 0.5 * h, &y2);
    let y3: Vec<f64> = (0..n).map(|i| y[i] + 0.5 * h * k2[i]).collect();
    let k3 = f(t + 0.5 * h, &y3);
    let y4: Vec<f64> = (0..n).map(|i| y[i] + h * k3[i]).collect();
    let k4 = f(t + h, &y4);
    (0..n).map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])).collect()
}

/// Local chart of a hyperbolic saddle with its second-order stable manifold.
#[derive(Debug, Clone, Copy)]
pub struct SaddleChart {
    pub id: FixedPointId,
    pub center: [f64; 2],
    pub lambda_u: f64,
    pub lambda_s: f64,
    pub v_u: [f64; 2],
    pub v_s: [f64; 2],
    inv: [[f64; 2]; 2],
    /// Manifold curvature `u = c s^2` for `s > 0` and `s < 0`.
    pub curvature: [f64; 2],
}

impl SaddleChart {
    pub fn new(params: &ModelParams, sp: &StationaryPoint) -> Option<Self> {
        if sp.local_type != LocalType::Saddle {
            return None;
        }
        let vecs = sp.eigenvectors?;
        let (lu, ls) = (sp.eigenvalues[0].re, sp.eigenvalues[1].re);
        let (vu, vs) = (vecs[0], vecs[1]);
        // columns (vs, vu)
        let det = vs[0] * vu[1] - vu[0] * vs[1];
        let inv = [[vu[1] / det, -vu[0] / det], [-vs[1] / det, vs[0] / det]];
        let c = sp.point();
        let j = crate::model::jacobian(params, c[0], c[1]);
        let mut curvature = [0.0; 2];
        for (k, s) in [1e-2, -1e-2].into_iter().enumerate() {
            let x = [c[0] + s * vs[0], c[1] + s * vs[1]];
            let fx = field(params, x[0], x[1]);
            let lin = [
                j[0][0] * s * vs[0] + j[0][1] * s * vs[1],
                j[1][0] * s * vs[0] + j[1][1] * s * vs[1],
            ];
            let n = [(fx[0] - lin[0]) / (s * s), (fx[1] - lin[1]) / (s * s)];
            let nu = inv[1][0] * n[0] + inv[1][1] * n[1];
            curvature[k] = nu / (2.0 * ls - lu);
        }
        Some(Self { id: sp.id, center: c, lambda_u: lu, lambda_s: ls, v_u: vu, v_s: vs, inv, curvature })
    }

    /// Stable and unstable coordinates of `x`.
    pub fn coords(&self, x: [f64; 2]) -> (f64, f64) {
        let d = [x[0] - self.center[0], x[1] - self.center[1]];
        (self.inv[0][0] * d[0] + self.inv[0][1] * d[1], self.inv[1][0] * d[0] + self.inv[1][1] * d[1])
    }

    /// Distance, in the unstable coordinate, from the local stable manifold.
    pub fn manifold_offset(&self, x: [f64; 2]) -> f64 {
        let (s, u) = self.coords(x);
        let c = if s >= 0.0 { self.curvature[0] } else { self.curvature[1] };
        u - c * s * s
    }

    pub fn captured(&self, x: [f64; 2], fx: [f64; 2], radius: f64, tol: f64) -> bool {
        let d = (x[0] - self.center[0]).hypot(x[1] - self.center[1]);
        if d >= radius {
            return false;
        }
        let (s, _) = self.coords(x);
        let sdot = self.inv[0][0] * fx[0] + self.inv[0][1] * fx[1];
        self.manifold_offset(x).abs() < tol && s * sdot <= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StopReason {
    MaxTime,
    Converged { point: FixedPointId },
    BoundaryHit { side: i8, time: f64 },
    SectionReturn { count: usize },
    Escaped { side: i8, time: f64 },
}

#[derive(Debug, Clone, Copy)]
pub struct IntegrateOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Ball radius and capture tolerance for convergence.
    pub conv_tol: f64,
    pub conv_steps: usize,
    pub capture_radius: f64,
    pub convergence: bool,
    /// Stop at this positive-direction return to `{q = 0, a > 0}`.
    pub section_returns: Option<usize>,
    pub escape: bool,
    /// Stop as soon as the path enters this ball around a stationary point.
    pub stop_ball: Option<(FixedPointId, f64)>,
    pub clamp: bool,
    /// Ergodic only: pull each accepted state back onto the initial energy
    /// level. The reported drift is then the largest per-step defect.
    pub project_energy: bool,
    pub keep_dense: bool,
    pub max_steps: usize,
}

impl Default for IntegrateOptions {
    fn default() -> Self {
        Self {
            rtol: 1e-10,
            atol: 1e-12,
            conv_tol: 1e-8,
            conv_steps: 5,
            capture_radius: 1e-3,
            convergence: true,
            section_returns: None,
            escape: true,
            stop_ball: None,
            project_energy: false,
            clamp: true,
            keep_dense: true,
            max_steps: 2_000_000,
        }
    }
}

impl IntegrateOptions {
    pub fn plain() -> Self {
        Self { convergence: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    /// Strictly increasing.
    pub times: Vec<f64>,
    pub points: Vec<PhasePoint>,
    pub stop: StopReason,
    pub energy_drift: Option<f64>,
    /// Positive-direction section crossing times.
    pub section_times: Vec<f64>,
    /// True when integrated backward; the start point is then the last sample.
    pub reversed: bool,
    #[serde(skip)]
    pub dense: Option<DenseSolution<2>>,
}

impl Trajectory {
    pub fn constant(point: PhasePoint, t0: f64, t1: f64, stop: StopReason) -> Self {
        let (lo, hi) = (t0.min(t1), t0.max(t1));
        let times = if hi > lo { vec![lo, hi] } else { vec![lo] };
        let points = vec![point; times.len()];
        Self { times, points, stop, energy_drift: None, section_times: vec![], reversed: t1 < t0, dense: None }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn first(&self) -> PhasePoint {
        self.points[0]
    }

    pub fn last(&self) -> PhasePoint {
        *self.points.last().unwrap()
    }

    pub fn t_start(&self) -> f64 {
        self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Point at time `t`, from the dense output when available.
    pub fn eval(&self, t: f64) -> PhasePoint {
        let t = t.clamp(self.t_start(), self.t_end());
        if let Some(d) = &self.dense {
            if !d.is_empty() {
                let (lo, hi) = d.range();
                if t >= lo - 1e-12 && t <= hi + 1e-12 {
                    return PhasePoint::from_array(d.eval(t));
                }
            }
        }
        let n = self.times.len();
        if n == 1 {
            return self.points[0];
        }
        let i = (self.times.partition_point(|&s| s <= t).max(1) - 1).min(n - 2);
        let (t0, t1) = (self.times[i], self.times[i + 1]);
        let s = (t - t0) / (t1 - t0);
        let (p0, p1) = (self.points[i], self.points[i + 1]);
        PhasePoint::new(p0.a + s * (p1.a - p0.a), p0.q + s * (p1.q - p0.q))
    }

    pub fn resample(&self, n: usize) -> (Vec<f64>, Vec<PhasePoint>) {
        let (t0, t1) = (self.t_start(), self.t_end());
        let n = n.max(2);
        let times: Vec<f64> = (0..n).map(|i| t0 + (t1 - t0) * i as f64 / (n - 1) as f64).collect();
        let pts = times.iter().map(|&t| self.eval(t)).collect();
        (times, pts)
    }

    /// The law `p = (q + 1)/2` on a uniform grid of step about `dt`, with the
    /// exact derivative from the field for Hermite interpolation.
    pub fn probability_flow(&self, params: &ModelParams, dt: f64) -> Result<crate::dynamics::ProbabilityFlow> {
        let span = self.t_end() - self.t_start();
        let n = ((span / dt).ceil() as usize + 1).max(2);
        let (times, pts) = self.resample(n);
        let times: Vec<f64> = times.iter().map(|t| t - self.t_start()).collect();
        let p: Vec<f64> = pts.iter().map(|x| ((x.q + 1.0) / 2.0).clamp(0.0, 1.0)).collect();
        let dp: Vec<f64> = pts.iter().map(|x| field(params, x.a, x.q)[1] / 2.0).collect();
        crate::dynamics::ProbabilityFlow::new(times, p, None)?.with_derivative(dp)
    }
}

fn bisect_event<F: Fn(f64) -> f64>(g: F, mut lo: f64, mut hi: f64) -> f64 {
    let glo = g(lo);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi || (hi - lo).abs() < 1e-15 * mid.abs().max(1.0) {
            break;
        }
        if (g(mid) > 0.0) == (glo > 0.0) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Stationary points and saddle charts used for convergence detection.
#[derive(Debug, Clone)]
pub struct Targets {
    pub points: Vec<StationaryPoint>,
    pub charts: Vec<SaddleChart>,
}

impl Targets {
    pub fn new(params: &ModelParams) -> Result<Self> {
        let points = stationary_equilibria(params)?;
        let charts = points.iter().filter_map(|sp| SaddleChart::new(params, sp)).collect();
        Ok(Self { points, charts })
    }

    pub fn chart(&self, id: FixedPointId) -> Option<&SaddleChart> {
        self.charts.iter().find(|c| c.id == id)
    }

    pub fn point(&self, id: FixedPointId) -> Option<&StationaryPoint> {
        self.points.iter().find(|p| p.id == id)
    }
}

/// Integrates the planar system from `start` over `t_span`.
pub fn integrate(
    params: &ModelParams,
    start: PhasePoint,
    t_span: (f64, f64),
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    let targets = Targets::new(params)?;
    integrate_with(params, &targets, start, t_span, opts)
}

pub fn integrate_with(
    params: &ModelParams,
    targets: &Targets,
    start: PhasePoint,
    t_span: (f64, f64),
    opts: &IntegrateOptions,
) -> Result<Trajectory> {
    params.validate()?;
    start.check()?;
    let (t0, t1) = t_span;
    if !(t0.is_finite() && t1.is_finite()) {
        return Err(Error::Precondition("time span must be finite".into()));
    }
    let forward = t1 >= t0;
    let ergodic = params.is_ergodic();
    let e0 = energy_unchecked(params, start.a, start.q);
    let esc = if forward { 1.5 * params.a_crit() + 1.0 } else { 1e6 };

    let mut times = vec![t0];
    let mut pts = vec![start];
    let mut dense = DenseSolution::new();
    let mut drift: f64 = 0.0;
    let mut stop = StopReason::MaxTime;
    let mut ball_count = 0usize;
    let mut section_times = Vec::new();
    let mut returns = 0usize;

    let ode = OdeOptions { rtol: opts.rtol, atol: opts.atol, max_steps: opts.max_steps, ..Default::default() };
    let pr = *params;
    dopri5(
        move |_, y: &[f64; 2]| field(&pr, y[0], y[1]),
        t0,
        start.to_array(),
        t1,
        &ode,
        |seg, y| {
            if opts.keep_dense {
                dense.push(*seg);
            }
            let t = seg.t1();
            if opts.clamp && y[1].abs() > 1.0 && y[1].abs() <= 1.0 + 1e-12 {
                y[1] = y[1].signum();
            }
            if ergodic && opts.project_energy {
                let e = energy_unchecked(params, y[0], y[1]) - e0;
                drift = drift.max(e.abs());
                let g = energy_gradient(params, y[0], y[1]);
                let g2 = g[0] * g[0] + g[1] * g[1];
                if g2 > 0.0 {
                    y[0] -= e * g[0] / g2;
                    y[1] -= e * g[1] / g2;
                }
            }
            if y[1].abs() > 1.0 {
                let side = y[1].signum();
                let tc = bisect_event(|s| seg.eval(s)[1].abs() - 1.0, seg.t0, t);
                let mut x = seg.eval(tc);
                x[1] = side;
                times.push(tc);
                pts.push(PhasePoint::from_array(x));
                stop = StopReason::BoundaryHit { side: side as i8, time: tc };
                return StepControl::Stop;
            }
            if opts.escape && y[0].abs() > esc {
                times.push(t);
                pts.push(PhasePoint::from_array(*y));
                stop = StopReason::Escaped { side: y[0].signum() as i8, time: t };
                return StepControl::Stop;
            }
            if let Some(target) = opts.section_returns {
                let y0 = seg.start();
                if forward && y0[1] < 0.0 && y[1] >= 0.0 {
                    let tc = bisect_event(|s| seg.eval(s)[1], seg.t0, t);
                    let x = seg.eval(tc);
                    if x[0] > 0.0 {
                        returns += 1;
                        section_times.push(tc);
                        if returns >= target {
                            times.push(tc);
                            pts.push(PhasePoint::new(x[0], 0.0));
                            if ergodic {
                                drift = drift.max((energy_unchecked(params, x[0], 0.0) - e0).abs());
                            }
                            stop = StopReason::SectionReturn { count: returns };
                            return StepControl::Stop;
                        }
                    }
                }
            }
            if ergodic {
                drift = drift.max((energy_unchecked(params, y[0], y[1]) - e0).abs());
            }
            times.push(t);
            pts.push(PhasePoint::from_array(*y));
            if let Some((id, r)) = opts.stop_ball {
                if let Some(sp) = targets.point(id) {
                    if (y[0] - sp.a_bar).hypot(y[1] - sp.q_bar) < r {
                        stop = StopReason::Converged { point: id };
                        return StepControl::Stop;
                    }
                }
            }
            if opts.convergence {
                let near = targets
                    .points
                    .iter()
                    .find(|sp| (y[0] - sp.a_bar).hypot(y[1] - sp.q_bar) < opts.conv_tol);
                match near {
                    Some(sp) => {
                        ball_count += 1;
                        if ball_count >= opts.conv_steps {
                            stop = StopReason::Converged { point: sp.id };
                            return StepControl::Stop;
                        }
                    }
                    None => ball_count = 0,
                }
                if forward {
                    let fx = field(params, y[0], y[1]);
                    for ch in &targets.charts {
                        if ch.captured(*y, fx, opts.capture_radius, opts.conv_tol) {
                            stop = StopReason::Converged { point: ch.id };
                            return StepControl::Stop;
                        }
                    }
                }
            }
            StepControl::Continue
        },
    )?;
    // a start exactly at a fixed point never moves
    if opts.convergence && stop == StopReason::MaxTime {
        if let Some(sp) = targets.points.iter().find(|sp| sp.a_bar == start.a && sp.q_bar == start.q) {
            if pts.iter().all(|p| *p == start) {
                stop = StopReason::Converged { point: sp.id };
            }
        }
    }
    for p in pts.iter_mut() {
        if p.q.abs() > 1.0 && p.q.abs() <= 1.0 + Q_TOL {
            p.q = p.q.signum();
        }
    }
    if !forward {
        times.reverse();
        pts.reverse();
        section_times.reverse();
    }
    dense.finish();
    Ok(Trajectory {
        times,
        points: pts,
        stop,
        energy_drift: ergodic.then_some(drift),
        section_times,
        reversed: !forward,
        dense: opts.keep_dense.then_some(dense),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::linearize;
    use proptest::prelude::*;

    fn p(b: f64, s: f64, k: f64) -> ModelParams {
        ModelParams::new(b, s, k).unwrap()
    }

    #[test]
    fn dopri_exponential_and_dense() {
        let mut dense = DenseSolution::<1>::new();
        let out = dopri5(|_, y: &[f64; 1]| [-y[0]], 0.0, [1.0], 5.0, &OdeOptions::default(), |s, _| {
            dense.push(*s);
            StepControl::Continue
        })
        .unwrap();
        assert!((out.y[0] - (-5f64).exp()).abs() < 1e-11);
        dense.finish();
        for k in 0..100 {
            let t = 0.05 * k as f64;
            assert!((dense.eval(t)[0] - (-t).exp()).abs() < 1e-9);
        }
    }

    #[test]
    fn dopri_reverse_time() {
        let out = dopri5(|_, y: &[f64; 2]| [y[1], -y[0]], 0.0, [0.0, 1.0], -3.0, &OdeOptions::default(), |_, _| {
            StepControl::Continue
        })
        .unwrap();
        assert!((out.y[0] - (-3f64).sin()).abs() < 1e-10);
        assert!((out.y[1] - (-3f64).cos()).abs() < 1e-10);
    }

    #[test]
    fn origin_stays_put() {
        let tr = integrate(&p(1.0, 1.0, 6.0), PhasePoint::new(0.0, 0.0), (0.0, 10.0), &IntegrateOptions::plain()).unwrap();
        assert_eq!(tr.stop, StopReason::MaxTime);
        assert!(tr.points.iter().all(|x| x.a == 0.0 && x.q == 0.0));
    }

    #[test]
    fn ergodic_energy_drift() {
        let tr = integrate(&p(0.0, 1.0, 8.0), PhasePoint::new(0.1, 0.0), (0.0, 50.0), &IntegrateOptions::plain()).unwrap();
        assert!(tr.energy_drift.unwrap() < 1e-8, "{:?}", tr.energy_drift);
    }

    #[test]
    fn stable_eigenvector_start_converges() {
        let pr = p(1.0, 1.0, 5.0);
        let o = linearize(&pr, 0.0, 0.0).unwrap();
        let vs = o.eigenvectors.unwrap()[1];
        for sgn in [1.0, -1.0] {
            let st = PhasePoint::new(sgn * 1e-4 * vs[0], sgn * 1e-4 * vs[1]);
            let tr = integrate(&pr, st, (0.0, 100.0), &IntegrateOptions::default()).unwrap();
            assert_eq!(tr.stop, StopReason::Converged { point: FixedPointId::Origin });
        }
    }

    #[test]
    fn saddle_curvature_matches_reference() {
        let pr = p(1.0, 1.0, 5.0);
        let t = Targets::new(&pr).unwrap();
        let c = t.chart(FixedPointId::Origin).unwrap();
        assert!((c.curvature[0].abs() - 0.579).abs() < 2e-3, "{:?}", c.curvature);
        assert!((c.curvature[0] + c.curvature[1]).abs() < 1e-9);
    }

    #[test]
    fn unstable_start_does_not_converge() {
        let pr = p(1.0, 1.0, 5.0);
        let o = linearize(&pr, 0.0, 0.0).unwrap();
        let vu = o.eigenvectors.unwrap()[0];
        let st = PhasePoint::new(1e-4 * vu[0], 1e-4 * vu[1]);
        let tr = integrate(&pr, st, (0.0, 100.0), &IntegrateOptions::default()).unwrap();
        assert!(matches!(tr.stop, StopReason::Escaped { side: 1, .. }), "{:?}", tr.stop);
    }

    #[test]
    fn reverse_time_hits_boundary() {
        let pr = p(1.0, 1.0, 5.0);
        let tr = integrate(&pr, PhasePoint::new(0.0, 0.5), (0.0, -50.0), &IntegrateOptions::default()).unwrap();
        match tr.stop {
            StopReason::BoundaryHit { side, time } => {
                assert!(time < 0.0);
                assert_eq!(tr.first().q, side as f64);
                assert_eq!(tr.t_start(), time);
            }
            other => panic!("{other:?}"),
        }
        assert!(tr.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(tr.last(), PhasePoint::new(0.0, 0.5));
    }

    #[test]
    fn forward_never_leaves_strip() {
        let pr = p(1.0, 1.0, 10.0);
        for a in [-3.0, -1.0, 0.0, 1.0, 3.0] {
            for q in [-1.0, 1.0] {
                let tr = integrate(&pr, PhasePoint::new(a, q), (0.0, 20.0), &IntegrateOptions::default()).unwrap();
                assert!(!matches!(tr.stop, StopReason::BoundaryHit { .. }));
                assert!(tr.points.iter().all(|x| x.q.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn section_return_gives_small_period() {
        let pr = p(0.0, 1.0, 8.0);
        let opts = IntegrateOptions { section_returns: Some(1), convergence: false, ..Default::default() };
        let tr = integrate(&pr, PhasePoint::new(1e-3, 0.0), (0.0, 100.0), &opts).unwrap();
        assert_eq!(tr.stop, StopReason::SectionReturn { count: 1 });
        let per = tr.t_end();
        assert!((per / std::f64::consts::PI - 1.0).abs() < 1e-3, "{per}");
        assert!((tr.last().a - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn reverse_then_forward_returns() {
        let pr = p(1.0, 1.0, 5.0);
        let st = PhasePoint::new(0.3, 0.2);
        let opts = IntegrateOptions::plain();
        let back = integrate(&pr, st, (0.0, -3.0), &opts).unwrap();
        let mid = back.first();
        let fwd = integrate(&pr, mid, (back.t_start(), 0.0), &opts).unwrap();
        let e = fwd.last();
        assert!((e.a - st.a).hypot(e.q - st.q) < 1e-7);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn symmetric_integration(a in -1.0f64..1.0, q in -0.9f64..0.9, k in 2.0f64..12.0) {
            let pr = p(1.0, 1.0, k);
            let opts = IntegrateOptions::plain();
            let t1 = integrate(&pr, PhasePoint::new(a, q), (0.0, 2.0), &opts).unwrap();
            let t2 = integrate(&pr, PhasePoint::new(-a, -q), (0.0, 2.0), &opts).unwrap();
            let t_end = t1.t_end().min(t2.t_end());
            for k in 0..=20 {
                let t = t_end * k as f64 / 20.0;
                let x = t1.eval(t);
                let y = t2.eval(t);
                prop_assert!((x.a + y.a).abs() < 1e-9 * (1.0 + x.a.abs()));
                prop_assert!((x.q + y.q).abs() < 1e-9);
            }
        }

        #[test]
        fn round_trip_subcritical(a in -0.5f64..0.5, q in -0.5f64..0.5, span in 0.5f64..20.0) {
            let pr = p(1.0, 1.0, 5.0);
            let opts = IntegrateOptions { rtol: 1e-13, atol: 1e-15, ..IntegrateOptions::plain() };
            let st = PhasePoint::new(a, q);
            let back = integrate(&pr, st, (0.0, -span), &opts).unwrap();
            prop_assume!(back.stop == StopReason::MaxTime);
            let fwd = integrate(&pr, back.first(), (-span, 0.0), &opts).unwrap();
            let e = fwd.last();
            prop_assert!((e.a - a).hypot(e.q - q) < 1e-7, "{:?} vs {:?}", e, st);
        }
    }
}
