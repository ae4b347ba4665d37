//! The conservative system with ergodic cost: periodic orbits, the lens,
//! finite-horizon equilibria and the ergodic constant.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::{energy_unchecked, field, ham, PhasePoint, ProbabilityFlow};
use crate::integrate::{
    dopri5, integrate_with, DenseSolution, IntegrateOptions, OdeOptions, StepControl, StopReason, Targets, Trajectory,
};
use crate::model::{a_bar, jacobian, q_bar, FixedPointId, ModelParams};
use crate::value::{periodic_discounted_value, ControlFlow};
use crate::{Error, Result};

fn require_ergodic(params: &ModelParams) -> Result<()> {
    params.validate()?;
    if !params.is_ergodic() {
        return Err(Error::ModelMismatch(format!("needs beta = 0 (beta = {})", params.beta)));
    }
    Ok(())
}

fn require_super(params: &ModelParams) -> Result<()> {
    require_ergodic(params)?;
    if !params.is_supercritical() {
        return Err(Error::Regime(format!(
            "needs kappa > kappa_c = {} (kappa = {})",
            params.kappa_c(),
            params.kappa
        )));
    }
    Ok(())
}

/// Energy of the self-organizing equilibria; the level of the lens boundary.
pub fn lens_energy(params: &ModelParams) -> Result<f64> {
    require_super(params)?;
    Ok(energy_unchecked(params, a_bar(params), q_bar(params)))
}

/// Where the lens boundary meets the section `{q = 0, a > 0}`.
pub fn lens_section_crossing(params: &ModelParams) -> Result<f64> {
    Ok((2.0 * lens_energy(params)?).sqrt())
}

/// Strict interior of the lens.
pub fn in_lens(params: &ModelParams, point: PhasePoint) -> Result<bool> {
    let e = lens_energy(params)?;
    Ok(energy_unchecked(params, point.a, point.q) < e && point.q.abs() < q_bar(params))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PeriodicOrbit {
    pub seed: PhasePoint,
    pub period: f64,
    pub energy: f64,
    /// Distance between the seed and the point after one period.
    pub closure: f64,
    pub orbit: Trajectory,
}

impl PeriodicOrbit {
    pub fn probability_flow(&self, params: &ModelParams, dt: f64) -> Result<ProbabilityFlow> {
        let mut f = self.orbit.probability_flow(params, dt)?;
        f.period = Some(self.period);
        Ok(f)
    }

    /// Mean of `q` over one period.
    pub fn mean_q(&self) -> f64 {
        let n = 4000;
        let h = self.period / n as f64;
        let t0 = self.orbit.t_start();
        simpson(n, h, |i| self.orbit.eval(t0 + i as f64 * h).q) / self.period
    }
}

fn orbit_opts() -> IntegrateOptions {
    IntegrateOptions {
        rtol: 1e-12,
        atol: 1e-14,
        convergence: false,
        section_returns: Some(1),
        project_energy: true,
        ..Default::default()
    }
}

pub fn periodic_orbit(params: &ModelParams, a0: f64) -> Result<PeriodicOrbit> {
    require_super(params)?;
    let seed = PhasePoint::new(a0, 0.0);
    if !(a0 > 0.0) || !in_lens(params, seed)? {
        return Err(Error::Domain(format!(
            "section seed a0 = {a0} must lie in (0, {})",
            lens_section_crossing(params)?
        )));
    }
    let t_max = 100.0 * 2.0 * std::f64::consts::PI / (params.kappa - params.kappa_c()).sqrt();
    let targets = Targets::new(params)?;
    let tr = integrate_with(params, &targets, seed, (0.0, t_max), &orbit_opts())?;
    match tr.stop {
        StopReason::SectionReturn { .. } => {}
        other => {
            return Err(Error::NotPeriodic(format!("no section return from a0 = {a0} within {t_max} ({other:?})")))
        }
    }
    let end = tr.last();
    let closure = (end.a - a0).hypot(end.q);
    Ok(PeriodicOrbit { seed, period: tr.t_end(), energy: a0 * a0 / 2.0, closure, orbit: tr })
}

/// Section-return search: seeds on `{q = 0, a > 0}` whose forward solution
/// returns to within `tol` of the seed before `t_max`.
pub fn find_periodic_orbits(params: &ModelParams, seeds: &[f64], t_max: f64, tol: f64) -> Result<Vec<PeriodicOrbit>> {
    require_ergodic(params)?;
    let targets = Targets::new(params)?;
    let found: Vec<Option<PeriodicOrbit>> = seeds
        .par_iter()
        .map(|&a0| {
            let seed = PhasePoint::new(a0, 0.0);
            let tr = integrate_with(params, &targets, seed, (0.0, t_max), &orbit_opts()).ok()?;
            if !matches!(tr.stop, StopReason::SectionReturn { .. }) {
                return None;
            }
            let end = tr.last();
            let closure = (end.a - a0).hypot(end.q);
            (closure < tol).then(|| PeriodicOrbit { seed, period: tr.t_end(), energy: a0 * a0 / 2.0, closure, orbit: tr })
        })
        .collect();
    Ok(found.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LensReport {
    pub energy_level: f64,
    /// Heteroclinic connection leaving the positive saddle.
    pub upper: Vec<PhasePoint>,
    /// Heteroclinic connection leaving the negative saddle.
    pub lower: Vec<PhasePoint>,
    pub saddles: [PhasePoint; 2],
    /// Largest `|E - energy_level|` over both boundary polylines.
    pub level_defect: f64,
    /// Distance of each connection's far end from the target saddle.
    pub end_gap: f64,
}

fn heteroclinic(params: &ModelParams, targets: &Targets, from: FixedPointId, to: FixedPointId) -> Result<(Vec<PhasePoint>, f64)> {
    let ch = targets
        .chart(from)
        .ok_or_else(|| Error::Numerical(format!("{from:?} is not a saddle")))?;
    let c = ch.center;
    // unstable direction pointing towards the origin
    let s = if ch.v_u[0] * c[0] + ch.v_u[1] * c[1] < 0.0 { 1.0 } else { -1.0 };
    let d = 1e-7 * s;
    let seed = PhasePoint::new(c[0] + d * ch.v_u[0], c[1] + d * ch.v_u[1]);
    let opts = IntegrateOptions {
        rtol: 1e-12,
        atol: 1e-14,
        convergence: false,
        stop_ball: Some((to, 1e-6)),
        ..Default::default()
    };
    let tr = integrate_with(params, targets, seed, (0.0, 200.0), &opts)?;
    let goal = targets.point(to).unwrap().point();
    let dist = |p: &PhasePoint| (p.a - goal[0]).hypot(p.q - goal[1]);
    let k = (0..tr.len())
        .min_by(|&i, &j| dist(&tr.points[i]).partial_cmp(&dist(&tr.points[j])).unwrap())
        .unwrap();
    let gap = dist(&tr.points[k]);
    let mut pts = vec![PhasePoint::new(c[0], c[1])];
    pts.extend_from_slice(&tr.points[..=k]);
    pts.push(PhasePoint::new(goal[0], goal[1]));
    Ok((pts, gap))
}

pub fn lens(params: &ModelParams) -> Result<LensReport> {
    let level = lens_energy(params)?;
    let targets = Targets::new(params)?;
    let (upper, g1) = heteroclinic(params, &targets, FixedPointId::Positive, FixedPointId::Negative)?;
    let (lower, g2) = heteroclinic(params, &targets, FixedPointId::Negative, FixedPointId::Positive)?;
    let level_defect = upper
        .iter()
        .chain(&lower)
        .map(|p| (energy_unchecked(params, p.a, p.q) - level).abs())
        .fold(0.0, f64::max);
    let (a, q) = (a_bar(params), q_bar(params));
    Ok(LensReport {
        energy_level: level,
        upper,
        lower,
        saddles: [PhasePoint::new(a, q), PhasePoint::new(-a, -q)],
        level_defect,
        end_gap: g1.max(g2),
    })
}

/// Closed-form stable manifold of the origin below the critical coupling.
pub fn subcritical_manifold_graph(params: &ModelParams, a: f64) -> Result<f64> {
    require_ergodic(params)?;
    let kc = params.kappa_c();
    if params.kappa >= kc {
        return Err(Error::Regime(format!("needs kappa < kappa_c = {kc} (kappa = {})", params.kappa)));
    }
    let s2 = params.sigma2;
    let root = (a * a + 8.0 * s2 * a.abs() + 4.0 * (kc - params.kappa)).sqrt();
    Ok((a.signum() * a * a + 4.0 * s2 * a + a * root) / (2.0 * params.kappa))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FiniteHorizonSolution {
    pub a0: f64,
    pub terminal_a: f64,
    /// Largest continuity defect between shooting segments (0 for single shooting).
    pub max_defect: f64,
    pub trajectory: Trajectory,
}

const FH_GRID: usize = 2001;
const FH_ACCEPT: f64 = 1e-8;

fn fh_opts() -> IntegrateOptions {
    IntegrateOptions { convergence: false, keep_dense: false, ..Default::default() }
}

/// Terminal gap of the forward solution; escapes count as infinite.
fn shoot(params: &ModelParams, targets: &Targets, a: f64, q0: f64, t: f64) -> f64 {
    match integrate_with(params, targets, PhasePoint::new(a, q0), (0.0, t), &fh_opts()) {
        Ok(tr) => match tr.stop {
            StopReason::Escaped { side, .. } => side as f64 * f64::INFINITY,
            _ => tr.last().a,
        },
        Err(_) => f64::NAN,
    }
}

fn full_trajectory(params: &ModelParams, targets: &Targets, a: f64, q0: f64, t: f64) -> Result<Trajectory> {
    let opts = IntegrateOptions { convergence: false, ..Default::default() };
    integrate_with(params, targets, PhasePoint::new(a, q0), (0.0, t), &opts)
}

/// Crossings of `q = q0` by the stable manifolds of the saddles, traced backwards.
fn manifold_crossings(params: &ModelParams, targets: &Targets, q0: f64) -> Vec<f64> {
    let mut out = Vec::new();
    for ch in &targets.charts {
        if ch.center[1] == q0 {
            out.push(ch.center[0]);
        }
        for dir in [1.0, -1.0] {
            let d = 1e-7 * dir;
            let seed = PhasePoint::new(ch.center[0] + d * ch.v_s[0], ch.center[1] + d * ch.v_s[1]);
            let opts = IntegrateOptions { convergence: false, ..Default::default() };
            let Ok(tr) = integrate_with(params, targets, seed, (0.0, -60.0), &opts) else {
                continue;
            };
            for w in tr.points.windows(2) {
                let (g0, g1) = (w[0].q - q0, w[1].q - q0);
                if g0 == 0.0 {
                    out.push(w[0].a);
                } else if g0 * g1 < 0.0 {
                    let s = g0 / (g0 - g1);
                    out.push(w[0].a + s * (w[1].a - w[0].a));
                }
            }
        }
    }
    out
}

fn sgn_class(x: f64) -> i8 {
    if x > 0.0 {
        1
    } else if x < 0.0 {
        -1
    } else {
        0
    }
}

/// Bisection on the sign of the terminal gap; returns the bracket.
fn bisect_shoot(params: &ModelParams, targets: &Targets, q0: f64, t: f64, mut lo: f64, mut hi: f64, slo: f64) -> (f64, f64, f64, f64) {
    let mut s_lo = slo;
    let mut s_hi = shoot(params, targets, hi, q0, t);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let sm = shoot(params, targets, mid, q0, t);
        if sm.is_nan() {
            break;
        }
        if sm.abs() < 1e-13 {
            return (mid, mid, sm, sm);
        }
        if sgn_class(sm) == sgn_class(s_lo) {
            lo = mid;
            s_lo = sm;
        } else {
            hi = mid;
            s_hi = sm;
        }
    }
    (lo, hi, s_lo, s_hi)
}

/// Flow map over `[t0, t1]` with its Jacobian.
fn flow_jac(params: &ModelParams, x: [f64; 2], t0: f64, t1: f64) -> Result<([f64; 2], [[f64; 2]; 2])> {
    let esc = 1.5 * params.a_crit() + 1.0;
    let mut escaped = false;
    let opts = OdeOptions { rtol: 1e-12, atol: 1e-14, ..Default::default() };
    let out = dopri5(
        |_, y: &[f64; 6]| {
            let f = field(params, y[0], y[1]);
            let j = jacobian(params, y[0], y[1]);
            [
                f[0],
                f[1],
                j[0][0] * y[2] + j[0][1] * y[4],
                j[0][0] * y[3] + j[0][1] * y[5],
                j[1][0] * y[2] + j[1][1] * y[4],
                j[1][0] * y[3] + j[1][1] * y[5],
            ]
        },
        t0,
        [x[0], x[1], 1.0, 0.0, 0.0, 1.0],
        t1,
        &opts,
        |_, y| {
            if y[0].abs() > esc || !y.iter().all(|v| v.is_finite()) {
                escaped = true;
                return StepControl::Stop;
            }
            StepControl::Continue
        },
    )?;
    if escaped {
        return Err(Error::Numerical("shooting segment escaped".into()));
    }
    let y = out.y;
    Ok(([y[0], y[1]], [[y[2], y[3]], [y[4], y[5]]]))
}

struct MultiShoot<'a> {
    params: &'a ModelParams,
    q0: f64,
    nodes: Vec<f64>,
}

impl MultiShoot<'_> {
    fn segments(&self) -> usize {
        self.nodes.len() - 1
    }

    fn state(&self, z: &[f64], k: usize) -> [f64; 2] {
        if k == 0 {
            [z[0], self.q0]
        } else {
            [z[2 * k - 1], z[2 * k]]
        }
    }

    /// Residual and, when asked, its Jacobian.
    fn eval(&self, z: &[f64], want_jac: bool) -> Result<(DVector<f64>, Option<DMatrix<f64>>)> {
        let m = self.segments();
        let n = 2 * m - 1;
        let mut f = DVector::zeros(n);
        let mut jm = want_jac.then(|| DMatrix::zeros(n, n));
        for k in 0..m {
            let x = self.state(z, k);
            let (y, phi) = flow_jac(self.params, x, self.nodes[k], self.nodes[k + 1])?;
            let col = |c: usize| if k == 0 { 0 } else { 2 * k - 1 + c };
            if k + 1 < m {
                let nx = self.state(z, k + 1);
                f[2 * k] = y[0] - nx[0];
                f[2 * k + 1] = y[1] - nx[1];
                if let Some(j) = jm.as_mut() {
                    for r in 0..2 {
                        j[(2 * k + r, col(0))] = phi[r][0];
                        if k > 0 {
                            j[(2 * k + r, col(1))] = phi[r][1];
                        }
                        j[(2 * k + r, 2 * k + 1 + r)] = -1.0;
                    }
                }
            } else {
                f[2 * k] = y[0];
                if let Some(j) = jm.as_mut() {
                    j[(2 * k, col(0))] = phi[0][0];
                    if k > 0 {
                        j[(2 * k, col(1))] = phi[0][1];
                    }
                }
            }
        }
        Ok((f, jm))
    }

    fn solve(&self, guess: impl Fn(f64) -> [f64; 2]) -> Option<Vec<f64>> {
        let m = self.segments();
        let mut z = vec![0.0; 2 * m - 1];
        z[0] = guess(0.0)[0];
        for k in 1..m {
            let x = guess(self.nodes[k]);
            z[2 * k - 1] = x[0];
            z[2 * k] = x[1].clamp(-1.0, 1.0);
        }
        let norm = |v: &DVector<f64>| v.amax();
        let (mut f, _) = self.eval(&z, false).ok()?;
        for _ in 0..60 {
            if norm(&f) < 1e-13 {
                break;
            }
            let (_, j) = self.eval(&z, true).ok()?;
            let dz = j?.lu().solve(&(-&f))?;
            let mut lam = 1.0;
            let mut improved = false;
            for _ in 0..40 {
                let trial: Vec<f64> = z.iter().zip(dz.iter()).map(|(a, b)| a + lam * b).collect();
                if let Ok((ft, _)) = self.eval(&trial, false) {
                    if norm(&ft) < (1.0 - 1e-4 * lam) * norm(&f) {
                        z = trial;
                        f = ft;
                        improved = true;
                        break;
                    }
                }
                lam *= 0.5;
            }
            if !improved {
                break;
            }
        }
        (norm(&f) < FH_ACCEPT).then_some(z)
    }

    fn assemble(&self, targets: &Targets, z: &[f64]) -> Result<FiniteHorizonSolution> {
        let opts = IntegrateOptions { convergence: false, ..Default::default() };
        let mut times = Vec::new();
        let mut points = Vec::new();
        let mut dense = DenseSolution::new();
        let mut defect: f64 = 0.0;
        let m = self.segments();
        for k in 0..m {
            let x = self.state(z, k);
            let tr = integrate_with(self.params, targets, PhasePoint::from_array(x), (self.nodes[k], self.nodes[k + 1]), &opts)?;
            if k + 1 < m {
                let nx = self.state(z, k + 1);
                let e = tr.last();
                defect = defect.max((e.a - nx[0]).abs().max((e.q - nx[1]).abs()));
            }
            let skip = usize::from(k > 0);
            times.extend_from_slice(&tr.times[skip..]);
            points.extend_from_slice(&tr.points[skip..]);
            if let Some(d) = &tr.dense {
                dense.append(d);
            }
        }
        let terminal_a = points.last().unwrap().a;
        Ok(FiniteHorizonSolution {
            a0: z[0],
            terminal_a,
            max_defect: defect,
            trajectory: Trajectory {
                times,
                points,
                stop: StopReason::MaxTime,
                energy_drift: None,
                section_times: vec![],
                reversed: false,
                dense: Some(dense),
            },
        })
    }
}

fn shooting_nodes(t: f64) -> Vec<f64> {
    let m = (t / 1.0).ceil().max(1.0) as usize;
    (0..=m).map(|k| t * k as f64 / m as f64).collect()
}

/// Guesses that hold a near-saddle passage longer so that a later zero of `a`
/// lands on the horizon.
fn dwell_guesses(targets: &Targets, tr: &Trajectory, t: f64) -> Vec<Box<dyn Fn(f64) -> [f64; 2] + Send + Sync>> {
    let mut out: Vec<Box<dyn Fn(f64) -> [f64; 2] + Send + Sync>> = Vec::new();
    let mut best = (f64::INFINITY, 0.0, [0.0; 2]);
    for (tt, p) in tr.times.iter().zip(&tr.points) {
        for ch in &targets.charts {
            let d = (p.a - ch.center[0]).hypot(p.q - ch.center[1]);
            if d < best.0 {
                best = (d, *tt, ch.center);
            }
        }
    }
    let (d, t_star, centre) = best;
    if d > 0.1 {
        return out;
    }
    let mut zeros = Vec::new();
    for i in 0..tr.len().saturating_sub(1) {
        let (t0, t1) = (tr.times[i], tr.times[i + 1]);
        if t0 < t_star {
            continue;
        }
        let (a0, a1) = (tr.points[i].a, tr.points[i + 1].a);
        if a0 != 0.0 && a0 * a1 <= 0.0 {
            let (mut lo, mut hi) = (t0, t1);
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if (tr.eval(mid).a > 0.0) == (a0 > 0.0) {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            zeros.push(0.5 * (lo + hi));
        }
    }
    for tz in zeros {
        let extra = t - tz;
        if extra <= 0.0 {
            continue;
        }
        let tr = tr.clone();
        out.push(Box::new(move |s: f64| {
            if s <= t_star {
                tr.eval(s).to_array()
            } else if s < t_star + extra {
                centre
            } else {
                tr.eval(s - extra).to_array()
            }
        }));
    }
    out
}

fn distinct(a: &FiniteHorizonSolution, b: &FiniteHorizonSolution, t: f64) -> bool {
    (0..=100).any(|i| {
        let s = t * i as f64 / 100.0;
        let (x, y) = (a.trajectory.eval(s), b.trajectory.eval(s));
        (x.a - y.a).abs().max((x.q - y.q).abs()) > 1e-6
    })
}

/// Finite-horizon equilibria: forward solutions from `q0` with `a(T) = 0`.
pub fn solve_finite_horizon(params: &ModelParams, q0: f64, t: f64) -> Result<Vec<FiniteHorizonSolution>> {
    require_ergodic(params)?;
    if !(t > 0.0) || !t.is_finite() {
        return Err(Error::Precondition(format!("horizon must be positive, got {t}")));
    }
    if !(q0.abs() <= 1.0) {
        return Err(Error::Domain(format!("q0 = {q0} outside [-1, 1]")));
    }
    let targets = Targets::new(params)?;
    let r = if params.is_supercritical() { (a_bar(params) + 1.0).min(params.a_crit()) } else { 1.0f64.min(params.a_crit()) };
    let mut seeds: Vec<f64> = (0..FH_GRID).map(|i| -r + 2.0 * r * i as f64 / (FH_GRID - 1) as f64).collect();
    for c in manifold_crossings(params, &targets, q0) {
        seeds.push(c);
        for k in 1..=16 {
            let h = 10f64.powi(-k) * c.abs().max(1.0);
            seeds.push(c + h);
            seeds.push(c - h);
        }
        seeds.push(c.next_up());
        seeds.push(c.next_down());
    }
    seeds.retain(|x| x.is_finite() && x.abs() <= params.a_crit());
    seeds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    seeds.dedup();
    let vals: Vec<f64> = seeds.par_iter().map(|&a| shoot(params, &targets, a, q0, t)).collect();

    let mut starts: Vec<f64> = Vec::new();
    let mut brackets: Vec<(f64, f64, f64)> = Vec::new();
    for i in 0..seeds.len() {
        if vals[i] == 0.0 {
            starts.push(seeds[i]);
        }
        if i + 1 < seeds.len() {
            let (s0, s1) = (sgn_class(vals[i]), sgn_class(vals[i + 1]));
            if s0 != 0 && s1 != 0 && s0 != s1 && !vals[i].is_nan() && !vals[i + 1].is_nan() {
                brackets.push((seeds[i], seeds[i + 1], vals[i]));
            }
        }
    }
    let ms = MultiShoot { params, q0, nodes: shooting_nodes(t) };
    let found: Vec<Vec<FiniteHorizonSolution>> = brackets
        .par_iter()
        .map(|&(lo, hi, slo)| {
            let mut out = Vec::new();
            let (lo, hi, s_lo, s_hi) = bisect_shoot(params, &targets, q0, t, lo, hi, slo);
            let mut ends = vec![(lo, s_lo), (hi, s_hi)];
            ends.sort_by(|x, y| x.1.abs().partial_cmp(&y.1.abs()).unwrap());
            let (a_best, s_best) = ends[0];
            if s_best.abs() < 1e-12 {
                if let Ok(tr) = full_trajectory(params, &targets, a_best, q0, t) {
                    out.push(FiniteHorizonSolution { a0: a_best, terminal_a: tr.last().a, max_defect: 0.0, trajectory: tr });
                    return out;
                }
            }
            let mut guesses: Vec<Box<dyn Fn(f64) -> [f64; 2] + Send + Sync>> = Vec::new();
            for &(a, s) in &ends {
                if let Ok(tr) = full_trajectory(params, &targets, a, q0, t) {
                    if s.is_finite() {
                        let tr2 = tr.clone();
                        guesses.push(Box::new(move |x: f64| tr2.eval(x).to_array()));
                    }
                    if hi - lo <= 4.0 * f64::EPSILON * lo.abs().max(hi.abs()).max(1e-300) {
                        guesses.extend(dwell_guesses(&targets, &tr, t));
                    }
                }
            }
            for g in guesses {
                if let Some(z) = ms.solve(g) {
                    if let Ok(sol) = ms.assemble(&targets, &z) {
                        if sol.terminal_a.abs() < FH_ACCEPT && sol.max_defect < FH_ACCEPT {
                            out.push(sol);
                        }
                    }
                }
            }
            out
        })
        .collect();
    let mut all: Vec<FiniteHorizonSolution> = Vec::new();
    for a in starts {
        let tr = full_trajectory(params, &targets, a, q0, t)?;
        all.push(FiniteHorizonSolution { a0: a, terminal_a: tr.last().a, max_defect: 0.0, trajectory: tr });
    }
    all.extend(found.into_iter().flatten());
    all.retain(|s| s.terminal_a.abs() < FH_ACCEPT);
    all.sort_by(|x, y| x.a0.partial_cmp(&y.a0).unwrap());
    let mut uniq: Vec<FiniteHorizonSolution> = Vec::new();
    for s in all {
        if uniq.iter().all(|u| distinct(u, &s, t)) {
            uniq.push(s);
        }
    }
    if uniq.is_empty() {
        return Err(Error::SearchFailure(format!("no finite-horizon equilibrium from q0 = {q0} with T = {t}")));
    }
    Ok(uniq)
}

/// Fraction of the time span spent within `delta` of a self-organizing equilibrium.
pub fn turnpike_fraction(params: &ModelParams, traj: &Trajectory, delta: f64) -> f64 {
    if traj.is_empty() || !params.is_supercritical() {
        return 0.0;
    }
    let (a, q) = (a_bar(params), q_bar(params));
    let near = |p: PhasePoint| (p.a - a).hypot(p.q - q) < delta || (p.a + a).hypot(p.q + q) < delta;
    if traj.t_end() <= traj.t_start() {
        return if near(traj.first()) { 1.0 } else { 0.0 };
    }
    let n = 20_000;
    let (_, pts) = traj.resample(n + 1);
    // midpoint rule on the uniform resampling
    let hits = pts.windows(2).filter(|w| near(PhasePoint::new(0.5 * (w[0].a + w[1].a), 0.5 * (w[0].q + w[1].q)))).count();
    hits as f64 / n as f64
}

fn simpson<F: Fn(usize) -> f64>(n: usize, h: f64, f: F) -> f64 {
    let n = n + n % 2;
    let mut s = f(0) + f(n);
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(i);
    }
    s * h / 3.0
}

/// Period average of `H(1, a, p)` over a periodic pair.
pub fn ergodic_lambda(a: &ControlFlow, p: &ProbabilityFlow, params: &ModelParams) -> Result<f64> {
    let tau = p
        .period
        .ok_or_else(|| Error::Precondition("the flow carries no period".into()))?;
    if a.t_end() < tau * (1.0 - 1e-12) || p.t_end() < tau * (1.0 - 1e-12) {
        return Err(Error::Precondition(format!("flows do not cover one period {tau}")));
    }
    let (da, dp) = ((a.eval(tau) - a.eval(0.0)).abs(), (p.eval(tau) - p.eval(0.0)).abs());
    if da > 1e-6 || dp > 1e-6 {
        return Err(Error::Precondition(format!("flows are not {tau}-periodic (gaps {da:e}, {dp:e})")));
    }
    let n = 2 * ((tau / 1e-3).ceil() as usize).max(50);
    let h = tau / n as f64;
    Ok(simpson(n, h, |i| {
        let s = i as f64 * h;
        ham(1, a.eval(s), p.eval(s), params)
    }) / tau)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VanishingDiscountReport {
    pub betas: Vec<f64>,
    /// `beta v_beta(0, 0)` per discount rate.
    pub scaled_values: Vec<f64>,
    pub lambda: f64,
    pub min_beta_v: f64,
    pub max_beta_v: f64,
    pub sup_a: Vec<f64>,
    /// `0 <= beta v <= kappa` and `|a_beta| <= 2 sqrt(kappa)` for every rate.
    pub bounds_hold: bool,
}

pub fn vanishing_discount(params: &ModelParams, flow: &ProbabilityFlow, betas: &[f64]) -> Result<VanishingDiscountReport> {
    require_ergodic(params)?;
    if betas.len() < 2 || betas.iter().any(|b| !(*b > 0.0)) || betas.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::Precondition("discount rates must be positive and strictly decreasing (at least two)".into()));
    }
    let sols: Vec<Result<crate::value::ValueFunction>> =
        betas.par_iter().map(|&b| periodic_discounted_value(&params.with_beta(b), flow)).collect();
    let mut scaled = Vec::new();
    let mut sup_a = Vec::new();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for (b, v) in betas.iter().zip(sols) {
        let v = v?;
        scaled.push(b * v.v0[0]);
        for x in v.v0.iter().chain(&v.v1) {
            lo = lo.min(b * x);
            hi = hi.max(b * x);
        }
        sup_a.push(v.sup_abs_a());
    }
    let n = betas.len();
    let (b1, b2) = (betas[n - 2], betas[n - 1]);
    let (l1, l2) = (scaled[n - 2], scaled[n - 1]);
    let lambda = (b1 * l2 - b2 * l1) / (b1 - b2);
    let tol = 1e-9 * params.kappa;
    let bounds_hold = lo >= -tol && hi <= params.kappa + tol && sup_a.iter().all(|s| *s <= 2.0 * params.kappa.sqrt() + tol);
    Ok(VanishingDiscountReport {
        betas: betas.to_vec(),
        scaled_values: scaled,
        lambda,
        min_beta_v: lo,
        max_beta_v: hi,
        sup_a,
        bounds_hold,
    })
}
