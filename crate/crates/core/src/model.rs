//! Model parameters, critical couplings, stationary equilibria and their
//! linear classification.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::dynamics::sgn;
use crate::{Error, Result};

/// Relative tolerance under which a coupling is considered equal to a threshold.
pub const BOUNDARY_RTOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Discount rate; zero selects the ergodic model.
    pub beta: f64,
    /// Thermal noise rate.
    pub sigma2: f64,
    /// Coupling strength.
    pub kappa: f64,
}

impl ModelParams {
    pub fn new(beta: f64, sigma2: f64, kappa: f64) -> Result<Self> {
        let p = Self { beta, sigma2, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma2.is_finite() && self.sigma2 > 0.0) {
            return Err(Error::ParamDomain(format!("sigma2 must be > 0, got {}", self.sigma2)));
        }
        if !(self.kappa.is_finite() && self.kappa > 0.0) {
            return Err(Error::ParamDomain(format!("kappa must be > 0, got {}", self.kappa)));
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::ParamDomain(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    pub fn is_ergodic(&self) -> bool {
        self.beta == 0.0
    }

    pub fn with_beta(&self, beta: f64) -> Self {
        Self { beta, ..*self }
    }

    pub fn kappa_c(&self) -> f64 {
        2.0 * self.beta * self.sigma2 + 4.0 * self.sigma2 * self.sigma2
    }

    pub fn kappa_spiral(&self) -> f64 {
        self.kappa_c() + self.beta * self.beta / 4.0
    }

    /// Coupling above which a small constant control beats zero control in
    /// the discounted control problem.
    pub fn kappa_tilde(&self) -> f64 {
        self.kappa_c() + self.beta * self.beta / 2.0 + self.beta * self.sigma2
    }

    /// Any solution with `|a|` above this value grows without bound.
    pub fn a_crit(&self) -> f64 {
        let b = self.beta + 2.0 * self.sigma2;
        2.0 * self.kappa / (b + (b * b + 2.0 * self.kappa).sqrt())
    }

    pub fn is_supercritical(&self) -> bool {
        self.kappa > self.kappa_c() && !ties(self.kappa, self.kappa_c())
    }
}

fn ties(x: f64, threshold: f64) -> bool {
    (x - threshold).abs() <= BOUNDARY_RTOL * threshold.abs().max(f64::MIN_POSITIVE)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Regime {
    Subcritical,
    SupercriticalA,
    SupercriticalB,
    ErgodicSub,
    ErgodicSuper,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Threshold {
    KappaC,
    KappaSpiral,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegimeReport {
    pub kappa_c: f64,
    pub kappa_spiral: f64,
    pub kappa_tilde: Option<f64>,
    /// On a tie this is the regime just below the threshold.
    pub regime: Regime,
    pub boundary: Option<Threshold>,
}

pub fn critical_coupling(params: &ModelParams) -> Result<RegimeReport> {
    params.validate()?;
    let kc = params.kappa_c();
    let ks = params.kappa_spiral();
    let k = params.kappa;
    let mut boundary = None;
    let regime = if params.is_ergodic() {
        if ties(k, kc) {
            boundary = Some(Threshold::KappaC);
            Regime::ErgodicSub
        } else if k < kc {
            Regime::ErgodicSub
        } else {
            Regime::ErgodicSuper
        }
    } else if ties(k, kc) {
        boundary = Some(Threshold::KappaC);
        Regime::Subcritical
    } else if k < kc {
        Regime::Subcritical
    } else if ties(k, ks) {
        boundary = Some(Threshold::KappaSpiral);
        Regime::SupercriticalA
    } else if k < ks {
        Regime::SupercriticalA
    } else {
        Regime::SupercriticalB
    };
    Ok(RegimeReport {
        kappa_c: kc,
        kappa_spiral: ks,
        kappa_tilde: (!params.is_ergodic()).then(|| params.kappa_tilde()),
        regime,
        boundary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum FixedPointId {
    Negative,
    Origin,
    Positive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum LocalType {
    Saddle,
    UnstableNode,
    SpiralSource,
    Center,
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StationaryPoint {
    pub id: FixedPointId,
    pub a_bar: f64,
    pub q_bar: f64,
    /// Larger real part first.
    pub eigenvalues: [Complex64; 2],
    /// Unit eigenvectors matching `eigenvalues` when both are real.
    pub eigenvectors: Option<[[f64; 2]; 2]>,
    pub local_type: LocalType,
}

impl StationaryPoint {
    pub fn point(&self) -> [f64; 2] {
        [self.a_bar, self.q_bar]
    }
}

/// Non-trivial equilibrium gap; zero unless supercritical.
pub fn a_bar(params: &ModelParams) -> f64 {
    if !params.is_supercritical() {
        return 0.0;
    }
    let b = params.beta + 3.0 * params.sigma2;
    let d = params.kappa - params.kappa_c();
    2.0 * d / (b + (b * b + 2.0 * d).sqrt())
}

pub fn q_bar(params: &ModelParams) -> f64 {
    let a = a_bar(params);
    a / (a + 2.0 * params.sigma2)
}

pub fn stationary_equilibria(params: &ModelParams) -> Result<Vec<StationaryPoint>> {
    params.validate()?;
    let origin = linearize(params, 0.0, 0.0)?;
    if !params.is_supercritical() {
        return Ok(vec![origin]);
    }
    let (a, q) = (a_bar(params), q_bar(params));
    let pos = linearize(params, a, q)?;
    let neg = linearize(params, -a, -q)?;
    Ok(vec![neg, origin, pos])
}

/// Relative residuals of the two nullcline equations at `(a, q)`.
pub fn nullcline_residuals(params: &ModelParams, a: f64, q: f64) -> (f64, f64) {
    let b = params.beta + 2.0 * params.sigma2;
    let sa = [b * a, 0.5 * sgn(a) * a * a, -params.kappa * q];
    let sq = [a, -2.0 * params.sigma2 * q, -a.abs() * q];
    let rel = |t: &[f64]| {
        let s: f64 = t.iter().sum();
        let m: f64 = t.iter().map(|x| x.abs()).sum();
        if m == 0.0 {
            0.0
        } else {
            s.abs() / m
        }
    };
    (rel(&sa), rel(&sq))
}

pub fn jacobian(params: &ModelParams, a: f64, q: f64) -> [[f64; 2]; 2] {
    let s = sgn(a);
    [
        [params.beta + 2.0 * params.sigma2 + a.abs(), -params.kappa],
        [1.0 - s * q, -(2.0 * params.sigma2 + a.abs())],
    ]
}

/// Closed-form eigen-decomposition of a real 2x2 matrix.
pub fn eigen2(j: &[[f64; 2]; 2]) -> ([Complex64; 2], Option<[[f64; 2]; 2]>) {
    let tr = j[0][0] + j[1][1];
    let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
    let half = tr / 2.0;
    let disc = half * half - det;
    if disc < 0.0 {
        let w = (-disc).sqrt();
        return ([Complex64::new(half, w), Complex64::new(half, -w)], None);
    }
    let s = disc.sqrt();
    let (l1, l2) = if half >= 0.0 {
        let l1 = half + s;
        (l1, if l1 != 0.0 { det / l1 } else { half - s })
    } else {
        let l2 = half - s;
        (if l2 != 0.0 { det / l2 } else { half + s }, l2)
    };
    let vec_for = |l: f64| {
        let r0 = [j[0][1], l - j[0][0]];
        let r1 = [l - j[1][1], j[1][0]];
        let n0 = r0[0].hypot(r0[1]);
        let n1 = r1[0].hypot(r1[1]);
        let (v, n) = if n0 >= n1 { (r0, n0) } else { (r1, n1) };
        if n == 0.0 {
            return [1.0, 0.0];
        }
        let mut v = [v[0] / n, v[1] / n];
        let lead = if v[0] != 0.0 { v[0] } else { v[1] };
        if lead < 0.0 {
            v = [-v[0], -v[1]];
        }
        v
    };
    (
        [Complex64::new(l1, 0.0), Complex64::new(l2, 0.0)],
        Some([vec_for(l1), vec_for(l2)]),
    )
}

/// Fills eigen-data for a stationary point.
pub fn linearize(params: &ModelParams, a: f64, q: f64) -> Result<StationaryPoint> {
    params.validate()?;
    let (ra, rq) = nullcline_residuals(params, a, q);
    if ra > 1e-9 || rq > 1e-9 {
        return Err(Error::Precondition(format!(
            "({a}, {q}) is not stationary: residuals {ra:e}, {rq:e}"
        )));
    }
    let j = jacobian(params, a, q);
    let (eigenvalues, eigenvectors) = eigen2(&j);
    let id = if a == 0.0 && q == 0.0 {
        FixedPointId::Origin
    } else if q > 0.0 {
        FixedPointId::Positive
    } else {
        FixedPointId::Negative
    };
    let local_type = if id == FixedPointId::Origin {
        let report = critical_coupling(params)?;
        if report.boundary == Some(Threshold::KappaC) {
            LocalType::Degenerate
        } else {
            match report.regime {
                Regime::Subcritical | Regime::ErgodicSub => LocalType::Saddle,
                Regime::SupercriticalA => LocalType::UnstableNode,
                Regime::SupercriticalB => LocalType::SpiralSource,
                Regime::ErgodicSuper => LocalType::Center,
            }
        }
    } else {
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det < 0.0 {
            LocalType::Saddle
        } else {
            return Err(Error::Numerical(format!(
                "non-trivial stationary point with det {det} >= 0"
            )));
        }
    };
    Ok(StationaryPoint { id, a_bar: a, q_bar: q, eigenvalues, eigenvectors, local_type })
}
