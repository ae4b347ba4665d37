//! Exact simulation of n players switching between the two states under a
//! common feedback control, and empirical checks of the mean-field limit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::discounted::NashSolution;
use crate::dynamics::{neg, pos, ProbabilityFlow};
use crate::model::ModelParams;
use crate::value::{cost_discounted, flows_from_trajectory, solve_value_backward, ControlFlow, CostTail, TailMode};
use crate::{Error, Result};

pub const DEFAULT_SEED: u64 = 0x5EED_2024;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub seed: u64,
    pub horizon: f64,
    pub control: ControlFlow,
    pub record_dt: f64,
    /// Probability that a player starts in state 1.
    pub p0: f64,
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Precondition("need at least one player".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Precondition(format!("horizon must be positive, got {}", self.horizon)));
        }
        if !(self.record_dt > 0.0) {
            return Err(Error::Precondition(format!("record_dt must be positive, got {}", self.record_dt)));
        }
        if !(0.0..=1.0).contains(&self.p0) {
            return Err(Error::Domain(format!("p0 = {} outside [0, 1]", self.p0)));
        }
        if self.control.t_end() < self.horizon * (1.0 - 1e-12) || self.control.times[0] > 0.0 {
            return Err(Error::Precondition(format!(
                "control covers [{}, {}], horizon is {}",
                self.control.times[0],
                self.control.t_end(),
                self.horizon
            )));
        }
        Ok(())
    }

    /// Recording grid: uniform on `[0, horizon]` with step at most `record_dt`.
    pub fn record_times(&self) -> Vec<f64> {
        let m = (self.horizon / self.record_dt).ceil().max(1.0) as usize;
        (0..=m).map(|i| self.horizon * i as f64 / m as f64).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalFlow {
    pub times: Vec<f64>,
    /// Fraction of players in state 1.
    pub fraction: Vec<f64>,
    pub seed: u64,
    pub n: usize,
}

impl EmpiricalFlow {
    pub fn to_probability_flow(&self) -> Result<ProbabilityFlow> {
        ProbabilityFlow::new(self.times.clone(), self.fraction.clone(), None)
    }
}

/// One player's path: initial state and jump times.
#[derive(Debug, Clone, PartialEq)]
pub struct PlayerPath {
    pub initial: u8,
    pub jumps: Vec<f64>,
    /// Candidate events drawn from the bounding process.
    pub proposals: usize,
}

impl PlayerPath {
    pub fn state_at(&self, t: f64) -> u8 {
        let k = self.jumps.partition_point(|&s| s <= t);
        self.initial ^ (k % 2) as u8
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of replica `r` derived from a master seed.
pub fn replica_seed(master: u64, r: u64) -> u64 {
    splitmix64(master ^ splitmix64(r))
}

/// Simulates player `idx` by thinning against the constant rate `sigma2 + sup|a|`.
pub fn simulate_player(cfg: &SimConfig, params: &ModelParams, idx: u64) -> PlayerPath {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(idx);
    let initial = u8::from(rng.gen::<f64>() < cfg.p0);
    let bound = params.sigma2 + cfg.control.sup_abs();
    let mut state = initial;
    let mut t = 0.0;
    let mut jumps = Vec::new();
    let mut proposals = 0;
    loop {
        let u: f64 = rng.gen();
        t += -(1.0 - u).ln() / bound;
        if t > cfg.horizon {
            break;
        }
        proposals += 1;
        let a = cfg.control.eval(t);
        let rate = params.sigma2 + if state == 0 { pos(a) } else { neg(a) };
        if rng.gen::<f64>() * bound < rate {
            state ^= 1;
            jumps.push(t);
        }
    }
    PlayerPath { initial, jumps, proposals }
}

fn occupancy(path: &PlayerPath, times: &[f64], counts: &mut [u32]) {
    let mut state = path.initial;
    let mut k = 0;
    for (i, &t) in times.iter().enumerate() {
        while k < path.jumps.len() && path.jumps[k] <= t {
            state ^= 1;
            k += 1;
        }
        counts[i] += u32::from(state);
    }
}

fn count_players(cfg: &SimConfig, params: &ModelParams, times: &[f64], skip: Option<u64>) -> Vec<u32> {
    (0..cfg.n as u64)
        .into_par_iter()
        .filter(|i| Some(*i) != skip)
        .fold(
            || vec![0u32; times.len()],
            |mut acc, i| {
                occupancy(&simulate_player(cfg, params, i), times, &mut acc);
                acc
            },
        )
        .reduce(
            || vec![0u32; times.len()],
            |mut a, b| {
                a.iter_mut().zip(&b).for_each(|(x, y)| *x += y);
                a
            },
        )
}

pub fn simulate_nplayer(cfg: &SimConfig, params: &ModelParams) -> Result<EmpiricalFlow> {
    cfg.validate()?;
    params.validate()?;
    let times = cfg.record_times();
    let counts = count_players(cfg, params, &times, None);
    let fraction = counts.iter().map(|&c| c as f64 / cfg.n as f64).collect();
    Ok(EmpiricalFlow { times, fraction, seed: cfg.seed, n: cfg.n })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub rms_sup: f64,
    pub sup_devs: Vec<f64>,
}

/// Sup-norm deviations of replica flows from the mean-field flow.
pub fn replica_deviations(cfg: &SimConfig, params: &ModelParams, flow: &ProbabilityFlow, replicas: usize) -> Result<DeviationReport> {
    cfg.validate()?;
    let sup_devs: Vec<f64> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let c = SimConfig { seed: replica_seed(cfg.seed, r), ..cfg.clone() };
            let times = c.record_times();
            let counts = count_players(&c, params, &times, None);
            times
                .iter()
                .zip(&counts)
                .map(|(&t, &k)| (k as f64 / c.n as f64 - flow.eval(t)).abs())
                .fold(0.0, f64::max)
        })
        .collect();
    let rms_sup = (sup_devs.iter().map(|d| d * d).sum::<f64>() / replicas.max(1) as f64).sqrt();
    Ok(DeviationReport { rms_sup, sup_devs })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainEstimate {
    /// Mean of `J(best response) - J(equilibrium control)`; nonpositive up to solver error.
    pub mean: f64,
    pub std_err: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub gains: Vec<f64>,
}

/// Gain of the best response over the equilibrium control against a given flow.
pub fn deviation_gain_against(params: &ModelParams, ne_control: &ControlFlow, flow: &ProbabilityFlow, q0: f64) -> Result<f64> {
    let v = solve_value_backward(params, flow, flow.t_end(), TailMode::StationaryTail { p_inf: None })?;
    let br = v.control()?;
    let j_br = cost_discounted(&br, flow, q0, params, CostTail::Stationary)?.cost;
    let j_ne = cost_discounted(ne_control, flow, q0, params, CostTail::Stationary)?.cost;
    Ok(j_br - j_ne)
}

pub fn deviation_gain(params: &ModelParams, ne: &NashSolution, n: usize, seed: u64, replicas: usize) -> Result<GainEstimate> {
    if !(params.beta > 0.0) {
        return Err(Error::ModelMismatch("deviation gain needs beta > 0".into()));
    }
    if n == 0 || replicas == 0 {
        return Err(Error::Precondition("need at least one player and one replica".into()));
    }
    let dt = 0.01;
    let (control, _) = flows_from_trajectory(params, &ne.trajectory, dt)?;
    let q0 = ne.trajectory.first().q;
    let horizon = control.t_end();
    let base = SimConfig { n, seed, horizon, control: control.clone(), record_dt: dt, p0: (1.0 + q0) / 2.0 };
    base.validate()?;
    let gains: Vec<Result<f64>> = (0..replicas as u64)
        .into_par_iter()
        .map(|r| {
            let cfg = SimConfig { seed: replica_seed(seed, r), ..base.clone() };
            let times = cfg.record_times();
            // the deviating player is index 0; the others form the flow
            let (counts, others) = if n == 1 {
                (vec![0u32; times.len()], 0usize)
            } else {
                (count_players(&cfg, params, &times, Some(0)), n - 1)
            };
            let frac: Vec<f64> = if others == 0 {
                times.iter().map(|&t| ne_flow_at(params, ne, t)).collect()
            } else {
                counts.iter().map(|&c| c as f64 / others as f64).collect()
            };
            let flow = ProbabilityFlow::new(times, frac, None)?;
            deviation_gain_against(params, &control, &flow, q0)
        })
        .collect();
    let gains: Vec<f64> = gains.into_iter().collect::<Result<_>>()?;
    let m = gains.len() as f64;
    let mean = gains.iter().sum::<f64>() / m;
    let var = if gains.len() > 1 { gains.iter().map(|g| (g - mean).powi(2)).sum::<f64>() / (m - 1.0) } else { 0.0 };
    let std_err = (var / m).sqrt();
    Ok(GainEstimate { mean, std_err, ci_low: mean - 1.96 * std_err, ci_high: mean + 1.96 * std_err, gains })
}

fn ne_flow_at(_params: &ModelParams, ne: &NashSolution, t: f64) -> f64 {
    ((ne.trajectory.eval(t).q + 1.0) / 2.0).clamp(0.0, 1.0)
}
