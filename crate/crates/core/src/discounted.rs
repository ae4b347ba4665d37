//! Equilibrium curve of the discounted game and the Nash equilibria starting
//! from a given distribution.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::PhasePoint;
use crate::integrate::{integrate_with, IntegrateOptions, StopReason, Targets, Trajectory};
use crate::model::{critical_coupling, FixedPointId, ModelParams, Regime, Threshold};
use crate::{Error, Result};

/// Offset of the manifold seed along the stable eigenvector.
pub const SEED_OFFSET: f64 = 1e-7;
/// Radius at which an inward branch is considered to have reached the origin.
pub const ORIGIN_BALL: f64 = 1e-6;
const TRACE_SPAN: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BranchEnd {
    Boundary,
    Origin,
}

/// One reverse-time branch of a saddle's stable manifold.
#[derive(Debug, Clone)]
pub struct ManifoldBranch {
    pub saddle: FixedPointId,
    /// Sign of the seed offset along the stable eigenvector.
    pub direction: i8,
    pub end: BranchEnd,
    /// Reverse-time solution; the seed is the last sample.
    pub trajectory: Trajectory,
}

impl ManifoldBranch {
    /// Path from the far end to the seed.
    fn points_to_seed(&self) -> std::slice::Iter<'_, PhasePoint> {
        self.trajectory.points.iter()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EquilibriumCurve {
    /// Polyline from the `q = -1` end to the `q = +1` end.
    pub branch_points: Vec<PhasePoint>,
    pub regime: Regime,
    pub monotone: bool,
    /// Sign changes of `q` along the inward branch of the positive saddle.
    pub winding_count: usize,
    /// For `|q0|` above this value the line `q = q0` meets the curve once.
    pub uniqueness_threshold: f64,
    /// Largest shift of a boundary hit when the seed offset drops to 1e-8.
    pub seed_sensitivity: f64,
    #[serde(skip)]
    pub branches: Vec<ManifoldBranch>,
}

fn trace_branch(
    params: &ModelParams,
    targets: &Targets,
    saddle: FixedPointId,
    direction: i8,
    offset: f64,
) -> Result<ManifoldBranch> {
    let chart = targets
        .chart(saddle)
        .ok_or_else(|| Error::Numerical(format!("{saddle:?} is not a saddle")))?;
    let d = direction as f64 * offset;
    let seed = PhasePoint::new(chart.center[0] + d * chart.v_s[0], chart.center[1] + d * chart.v_s[1]);
    let opts = IntegrateOptions {
        convergence: false,
        stop_ball: (saddle != FixedPointId::Origin).then_some((FixedPointId::Origin, ORIGIN_BALL)),
        ..Default::default()
    };
    let tr = integrate_with(params, targets, seed, (0.0, -TRACE_SPAN), &opts)?;
    let end = match tr.stop {
        StopReason::BoundaryHit { .. } => BranchEnd::Boundary,
        StopReason::Converged { point: FixedPointId::Origin } => BranchEnd::Origin,
        other => {
            return Err(Error::Numerical(format!(
                "manifold branch of {saddle:?} left the strip without a boundary hit ({other:?})"
            )))
        }
    };
    Ok(ManifoldBranch { saddle, direction, end, trajectory: tr })
}

fn sign_changes(pts: &[PhasePoint]) -> usize {
    let mut last = 0.0;
    let mut n = 0;
    for p in pts {
        if p.q != 0.0 {
            let s = p.q.signum();
            if last != 0.0 && s != last {
                n += 1;
            }
            last = s;
        }
    }
    n
}

fn boundary_a(b: &ManifoldBranch) -> Option<f64> {
    (b.end == BranchEnd::Boundary).then(|| b.trajectory.first().a)
}

pub fn trace_equilibrium_curve(params: &ModelParams) -> Result<EquilibriumCurve> {
    let report = critical_coupling(params)?;
    if params.is_ergodic() {
        return Err(Error::ModelMismatch("the equilibrium curve needs beta > 0".into()));
    }
    if report.boundary == Some(Threshold::KappaC) {
        return Err(Error::Regime("the origin is degenerate at kappa = kappa_c".into()));
    }
    let targets = Targets::new(params)?;
    let saddles: Vec<FixedPointId> = if report.regime == Regime::Subcritical {
        vec![FixedPointId::Origin]
    } else {
        vec![FixedPointId::Negative, FixedPointId::Positive]
    };
    let jobs: Vec<(FixedPointId, i8, f64)> = saddles
        .iter()
        .flat_map(|&s| [(s, 1, SEED_OFFSET), (s, -1, SEED_OFFSET), (s, 1, 1e-8), (s, -1, 1e-8)])
        .collect();
    let traced: Vec<Result<ManifoldBranch>> = jobs
        .par_iter()
        .map(|&(s, d, off)| trace_branch(params, &targets, s, d, off))
        .collect();
    let traced: Vec<ManifoldBranch> = traced.into_iter().collect::<Result<_>>()?;
    let (main, fine): (Vec<_>, Vec<_>) = traced.into_iter().enumerate().partition(|(i, _)| i % 4 < 2);
    let branches: Vec<ManifoldBranch> = main.into_iter().map(|(_, b)| b).collect();
    let fine: Vec<ManifoldBranch> = fine.into_iter().map(|(_, b)| b).collect();

    let mut seed_sensitivity: f64 = 0.0;
    for (b, f) in branches.iter().zip(&fine) {
        if let (Some(x), Some(y)) = (boundary_a(b), boundary_a(f)) {
            seed_sensitivity = seed_sensitivity.max((x - y).abs());
        }
    }

    let find = |s: FixedPointId, end: BranchEnd, side: Option<f64>| -> Result<&ManifoldBranch> {
        branches
            .iter()
            .find(|b| {
                b.saddle == s
                    && b.end == end
                    && side.is_none_or(|sd| b.trajectory.first().q.signum() == sd)
            })
            .ok_or_else(|| Error::Numerical(format!("missing {end:?} branch of {s:?}")))
    };
    let origin = PhasePoint::new(0.0, 0.0);
    let mut poly: Vec<PhasePoint> = Vec::new();
    let mut winding_count = 0;
    if report.regime == Regime::Subcritical {
        let lower = find(FixedPointId::Origin, BranchEnd::Boundary, Some(-1.0))?;
        let upper = find(FixedPointId::Origin, BranchEnd::Boundary, Some(1.0))?;
        poly.extend(lower.points_to_seed());
        poly.push(origin);
        poly.extend(upper.points_to_seed().rev());
    } else {
        let out_n = find(FixedPointId::Negative, BranchEnd::Boundary, None)?;
        let in_n = find(FixedPointId::Negative, BranchEnd::Origin, None)?;
        let in_p = find(FixedPointId::Positive, BranchEnd::Origin, None)?;
        let out_p = find(FixedPointId::Positive, BranchEnd::Boundary, None)?;
        let pn = targets.point(FixedPointId::Negative).unwrap();
        let pp = targets.point(FixedPointId::Positive).unwrap();
        poly.extend(out_n.points_to_seed());
        poly.push(PhasePoint::new(pn.a_bar, pn.q_bar));
        poly.extend(in_n.points_to_seed().rev());
        poly.push(origin);
        poly.extend(in_p.points_to_seed());
        poly.push(PhasePoint::new(pp.a_bar, pp.q_bar));
        poly.extend(out_p.points_to_seed().rev());
        winding_count = sign_changes(&in_p.trajectory.points);
    }
    let monotone = poly.windows(2).all(|w| {
        let (dq, da) = (w[1].q - w[0].q, w[1].a - w[0].a);
        dq > -1e-12 && da > -1e-12
    });
    // walk back from the q = +1 end while q decreases
    let mut k = poly.len() - 1;
    while k > 0 && poly[k - 1].q < poly[k].q {
        k -= 1;
    }
    let uniqueness_threshold = poly[..k].iter().map(|p| p.q).fold(0.0f64, f64::max);
    Ok(EquilibriumCurve {
        branch_points: poly,
        regime: report.regime,
        monotone,
        winding_count,
        uniqueness_threshold,
        seed_sensitivity,
        branches,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NashSolution {
    pub a_star: f64,
    /// Forward solution from `(a_star, q0)`; stops CONVERGED.
    pub trajectory: Trajectory,
    pub limit: FixedPointId,
    /// Sign changes of `q` along the trajectory.
    pub windings: usize,
    /// Independent forward-shooting estimate of `a_star`, when bracketed.
    pub a_star_shooting: Option<f64>,
}

/// Crossing of `q = q0` on a branch: reverse time and gap.
fn branch_crossings(b: &ManifoldBranch, q0: f64) -> Vec<(f64, f64)> {
    let tr = &b.trajectory;
    let dense = tr.dense.as_ref();
    let mut out = Vec::new();
    for i in 0..tr.len() {
        let g = tr.points[i].q - q0;
        if g == 0.0 {
            out.push((tr.times[i], tr.points[i].a));
            continue;
        }
        if i + 1 < tr.len() {
            let g1 = tr.points[i + 1].q - q0;
            if g1 != 0.0 && (g > 0.0) != (g1 > 0.0) {
                let (mut lo, mut hi) = (tr.times[i], tr.times[i + 1]);
                let eval = |t: f64| match dense {
                    Some(d) => d.eval(t),
                    None => tr.eval(t).to_array(),
                };
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if mid <= lo || mid >= hi {
                        break;
                    }
                    if (eval(mid)[1] - q0 > 0.0) == (g > 0.0) {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                let tc = 0.5 * (lo + hi);
                out.push((tc, eval(tc)[0]));
            }
        }
    }
    out
}

fn ne_from_branch(b: &ManifoldBranch, tc: f64, a: f64, q0: f64) -> NashSolution {
    let tr = &b.trajectory;
    let mut times = vec![0.0];
    let mut points = vec![PhasePoint::new(a, q0)];
    for (t, p) in tr.times.iter().zip(&tr.points) {
        if *t > tc {
            times.push(t - tc);
            points.push(*p);
        }
    }
    let dense = tr.dense.as_ref().map(|d| d.shifted(-tc));
    let windings = sign_changes(&points);
    NashSolution {
        a_star: a,
        trajectory: Trajectory {
            times,
            points,
            stop: StopReason::Converged { point: b.saddle },
            energy_drift: None,
            section_times: vec![],
            reversed: false,
            dense,
        },
        limit: b.saddle,
        windings,
        a_star_shooting: None,
    }
}

/// Escape side of the forward solution from `(a, q0)`; 0 when it converges.
fn escape_side(params: &ModelParams, targets: &Targets, a: f64, q0: f64) -> i8 {
    let opts = IntegrateOptions { keep_dense: false, ..Default::default() };
    match integrate_with(params, targets, PhasePoint::new(a, q0), (0.0, 400.0), &opts) {
        Ok(tr) => match tr.stop {
            StopReason::Escaped { side, .. } => side,
            StopReason::Converged { .. } => 0,
            _ => tr.last().a.signum() as i8,
        },
        Err(_) => 0,
    }
}

fn shoot_confirm(params: &ModelParams, targets: &Targets, a: f64, q0: f64, half: f64) -> Option<f64> {
    let (mut lo, mut hi) = (a - half, a + half);
    let (slo, shi) = (escape_side(params, targets, lo, q0), escape_side(params, targets, hi, q0));
    if slo == 0 || shi == 0 || slo == shi {
        return None;
    }
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let s = escape_side(params, targets, mid, q0);
        if s == 0 {
            return Some(mid);
        }
        if s == slo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

pub fn solve_ne(params: &ModelParams, q0: f64) -> Result<Vec<NashSolution>> {
    let curve = trace_equilibrium_curve(params)?;
    solve_ne_on(params, &curve, q0)
}

/// Nash equilibria from `q0` on a precomputed curve.
pub fn solve_ne_on(params: &ModelParams, curve: &EquilibriumCurve, q0: f64) -> Result<Vec<NashSolution>> {
    if params.is_ergodic() {
        return Err(Error::ModelMismatch("solve_ne needs beta > 0".into()));
    }
    if !(q0.abs() <= 1.0) {
        return Err(Error::Domain(format!("q0 = {q0} outside [-1, 1]")));
    }
    let targets = Targets::new(params)?;
    let mut sols: Vec<NashSolution> = Vec::new();
    for sp in &targets.points {
        if sp.q_bar == q0 {
            let pt = PhasePoint::new(sp.a_bar, sp.q_bar);
            sols.push(NashSolution {
                a_star: sp.a_bar,
                trajectory: Trajectory::constant(pt, 0.0, 1.0, StopReason::Converged { point: sp.id }),
                limit: sp.id,
                windings: 0,
                a_star_shooting: Some(sp.a_bar),
            });
        }
    }
    for b in &curve.branches {
        for (tc, a) in branch_crossings(b, q0) {
            if tc == 0.0 {
                continue;
            }
            sols.push(ne_from_branch(b, tc, a, q0));
        }
    }
    sols.sort_by(|x, y| x.a_star.partial_cmp(&y.a_star).unwrap());
    sols.dedup_by(|x, y| (x.a_star - y.a_star).abs() < 1e-9);
    if sols.is_empty() {
        return Err(Error::Numerical(format!("no intersection of the equilibrium curve with q = {q0}")));
    }
    if q0.abs() < 1.0 {
        let gaps: Vec<f64> = (0..sols.len())
            .map(|i| {
                let mut g = f64::INFINITY;
                if i > 0 {
                    g = g.min(sols[i].a_star - sols[i - 1].a_star);
                }
                if i + 1 < sols.len() {
                    g = g.min(sols[i + 1].a_star - sols[i].a_star);
                }
                g
            })
            .collect();
        let shots: Vec<Option<f64>> = sols
            .par_iter()
            .zip(&gaps)
            .map(|(s, &g)| {
                if s.a_star_shooting.is_some() {
                    return s.a_star_shooting;
                }
                shoot_confirm(params, &targets, s.a_star, q0, (0.5 * g).min(5e-4))
            })
            .collect();
        for (s, a) in sols.iter_mut().zip(shots) {
            s.a_star_shooting = a;
        }
    }
    Ok(sols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{a_bar, q_bar, stationary_equilibria};

    fn p(b: f64, s: f64, k: f64) -> ModelParams {
        ModelParams::new(b, s, k).unwrap()
    }

    #[test]
    fn subcritical_curve() {
        let c = trace_equilibrium_curve(&p(1.0, 1.0, 5.0)).unwrap();
        assert!(c.monotone);
        assert_eq!(c.winding_count, 0);
        assert_eq!(c.regime, Regime::Subcritical);
        assert_eq!(c.branch_points.first().unwrap().q, -1.0);
        assert_eq!(c.branch_points.last().unwrap().q, 1.0);
        assert!(c.branch_points.iter().any(|x| x.a == 0.0 && x.q == 0.0));
        assert!(c.seed_sensitivity < 1e-6, "{}", c.seed_sensitivity);
    }

    #[test]
    fn regime_a_curve_contains_equilibria() {
        let pr = p(1.0, 1.0, 6.2);
        let c = trace_equilibrium_curve(&pr).unwrap();
        assert!(c.monotone);
        for sp in stationary_equilibria(&pr).unwrap() {
            let d = c
                .branch_points
                .iter()
                .map(|x| (x.a - sp.a_bar).hypot(x.q - sp.q_bar))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6);
        }
    }

    #[test]
    fn regime_b_curve_winds() {
        let c = trace_equilibrium_curve(&p(1.0, 1.0, 10.0)).unwrap();
        assert!(!c.monotone);
        assert!(c.winding_count >= 3, "{}", c.winding_count);
        assert!(c.uniqueness_threshold > 0.0 && c.uniqueness_threshold < 0.9);
    }

    #[test]
    fn curve_is_antisymmetric() {
        let c = trace_equilibrium_curve(&p(1.0, 1.0, 6.2)).unwrap();
        let pts = &c.branch_points;
        // every point has a mirror image on the polyline
        for x in pts.iter().step_by(7) {
            let d = pts
                .windows(2)
                .map(|w| seg_dist([-x.a, -x.q], w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            assert!(d < 1e-6, "{x:?} {d}");
        }
    }

    fn seg_dist(x: [f64; 2], a: PhasePoint, b: PhasePoint) -> f64 {
        let (dx, dy) = (b.a - a.a, b.q - a.q);
        let l2 = dx * dx + dy * dy;
        let t = if l2 == 0.0 { 0.0 } else { (((x[0] - a.a) * dx + (x[1] - a.q) * dy) / l2).clamp(0.0, 1.0) };
        (x[0] - a.a - t * dx).hypot(x[1] - a.q - t * dy)
    }

    #[test]
    fn subcritical_ne_at_zero() {
        let s = solve_ne(&p(1.0, 1.0, 5.0), 0.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].a_star, 0.0);
        assert_eq!(s[0].limit, FixedPointId::Origin);
    }

    #[test]
    fn regime_a_single_ne() {
        let pr = p(1.0, 1.0, 6.2);
        let s = solve_ne(&pr, 0.5).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].limit, FixedPointId::Positive);
        let end = s[0].trajectory.last();
        assert!((end.a - a_bar(&pr)).hypot(end.q - q_bar(&pr)) < 1e-6);
        let sh = s[0].a_star_shooting.expect("shooting bracket");
        assert!((sh - s[0].a_star).abs() < 1e-6, "{sh} {}", s[0].a_star);
    }

    #[test]
    fn regime_b_multiplicity() {
        let pr = p(1.0, 1.0, 10.0);
        let curve = trace_equilibrium_curve(&pr).unwrap();
        let s = solve_ne_on(&pr, &curve, 0.01).unwrap();
        assert!(s.len() >= 3, "{}", s.len());
        let mut w: Vec<usize> = s.iter().map(|x| x.windings).collect();
        w.sort();
        w.dedup();
        assert!(w.len() >= 2);
        assert_eq!(solve_ne_on(&pr, &curve, 0.9).unwrap().len(), 1);
    }

    #[test]
    fn ne_symmetry() {
        let pr = p(1.0, 1.0, 10.0);
        let curve = trace_equilibrium_curve(&pr).unwrap();
        let a = solve_ne_on(&pr, &curve, 0.3).unwrap();
        let b = solve_ne_on(&pr, &curve, -0.3).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b.iter().rev()) {
            assert!((x.a_star + y.a_star).abs() < 1e-6);
        }
    }

    #[test]
    fn boundary_start_uses_curve_end() {
        let pr = p(1.0, 1.0, 5.0);
        let s = solve_ne(&pr, 1.0).unwrap();
        assert_eq!(s.len(), 1);
        assert_eq!(s[0].trajectory.first().q, 1.0);
    }

    #[test]
    fn subcritical_a_star_increasing() {
        let pr = p(1.0, 1.0, 5.0);
        let curve = trace_equilibrium_curve(&pr).unwrap();
        let mut prev = f64::NEG_INFINITY;
        for i in 0..=100 {
            let q0 = -1.0 + 0.02 * i as f64;
            let s = solve_ne_on(&pr, &curve, q0).unwrap();
            assert_eq!(s.len(), 1);
            assert!(s[0].a_star > prev);
            prev = s[0].a_star;
        }
    }
}
