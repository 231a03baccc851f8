//! Dilemma-zone risk at yellow onset.
//!
//! A vehicle is in the dilemma zone when it can neither stop before the stop
//! line (`d < d_stop(v)`) nor clear the conflict zone before the intergreen
//! ends (`t_clr > T_y + T_ar`). The risk of a termination is the probability
//! that at least one relevant vehicle is in that state under the kinematic
//! belief.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::belief::{Belief, KinematicBelief};
use crate::model::{Intersection, PhaseState, TimingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DzParams {
    /// Comfortable deceleration, m/s^2.
    pub a_max: f64,
    /// Driver reaction time, s.
    pub reaction_time: f64,
    /// Speed floor in the clearing time, m/s.
    pub v_min: f64,
    /// Conflict-zone width, m.
    pub intersection_width: f64,
    pub vehicle_margin: f64,
    pub yellow: f64,
    pub all_red: f64,
    /// Only vehicles within this distance of the stop line are relevant, m.
    pub lookahead: f64,
}

impl Default for DzParams {
    fn default() -> Self {
        Self {
            a_max: 3.0,
            reaction_time: 1.0,
            v_min: 1.0,
            intersection_width: 20.0,
            vehicle_margin: 5.0,
            yellow: 3.0,
            all_red: 2.0,
            lookahead: 120.0,
        }
    }
}

impl DzParams {
    pub fn with_timing(self, timing: &TimingConfig) -> Self {
        Self {
            yellow: timing.yellow,
            all_red: timing.all_red,
            ..self
        }
    }

    pub fn intergreen(&self) -> f64 {
        self.yellow + self.all_red
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.a_max > 0.0) {
            out.push(format!("a_max {} must be positive", self.a_max));
        }
        if !(self.reaction_time >= 0.0) {
            out.push(format!("reaction time {} must be nonnegative", self.reaction_time));
        }
        if !(self.v_min > 0.0) {
            out.push(format!("v_min {} must be positive", self.v_min));
        }
        if !(self.intersection_width >= 0.0 && self.vehicle_margin >= 0.0 && self.lookahead >= 0.0) {
            out.push("intersection width, vehicle margin and lookahead must be nonnegative".into());
        }
        out
    }
}

pub fn stopping_distance(v: f64, p: &DzParams) -> f64 {
    v * p.reaction_time + v * v / (2.0 * p.a_max)
}

/// Time to clear `d + width + margin` at `max(v, v_min)`.
pub fn clearing_time(d: f64, v: f64, vehicle_margin: f64, p: &DzParams) -> f64 {
    (d + p.intersection_width + vehicle_margin) / v.max(p.v_min)
}

/// Dilemma indicator at a point, with speed and distance clamped at zero.
pub fn in_dilemma(v: f64, d: f64, p: &DzParams) -> bool {
    let (v, d) = (v.max(0.0), d.max(0.0));
    d < stopping_distance(v, p) && clearing_time(d, v, p.vehicle_margin, p) > p.intergreen()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DzMethod {
    IndependenceBound,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub risk: f64,
    pub per_vehicle: Vec<(u64, f64)>,
    pub method: DzMethod,
    pub mc_samples: Option<usize>,
}

impl RiskReport {
    pub fn zero(method: DzMethod) -> Self {
        Self {
            risk: 0.0,
            per_vehicle: Vec::new(),
            method,
            mc_samples: None,
        }
    }
}

/// Lower-triangular factor of a 2x2 covariance; tolerates singular input.
fn cholesky(cov: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    let a = cov[0][0].max(0.0);
    let l11 = a.sqrt();
    let l21 = if l11 > 0.0 { cov[1][0] / l11 } else { 0.0 };
    let l22 = (cov[1][1] - l21 * l21).max(0.0).sqrt();
    [[l11, 0.0], [l21, l22]]
}

struct Sampler {
    mean: (f64, f64),
    l: [[f64; 2]; 2],
}

impl Sampler {
    fn new(k: &KinematicBelief) -> Self {
        Self {
            mean: (k.speed, k.distance),
            l: cholesky(&k.cov),
        }
    }

    fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let z1: f64 = rng.sample(StandardNormal);
        let z2: f64 = rng.sample(StandardNormal);
        (
            self.mean.0 + self.l[0][0] * z1,
            self.mean.1 + self.l[1][0] * z1 + self.l[1][1] * z2,
        )
    }
}

/// Monte Carlo estimate of the dilemma probability of one vehicle.
///
/// A degenerate covariance is evaluated at the point mass.
pub fn dilemma_probability<R: Rng + ?Sized>(k: &KinematicBelief, p: &DzParams, samples: usize, rng: &mut R) -> f64 {
    if k.is_degenerate() {
        return f64::from(u8::from(in_dilemma(k.speed, k.distance, p)));
    }
    let s = Sampler::new(k);
    let n = samples.max(1);
    let hits = (0..n)
        .filter(|_| {
            let (v, d) = s.draw(rng);
            in_dilemma(v, d, p)
        })
        .count();
    hits as f64 / n as f64
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// P(clamped (v, d) in dilemma | v) when `d | v ~ N(mu, sigma^2)`.
fn conditional_dilemma(v: f64, mu: f64, sigma: f64, p: &DzParams) -> f64 {
    let v = v.max(0.0);
    let hi = stopping_distance(v, p);
    let lo = p.intergreen() * v.max(p.v_min) - p.intersection_width - p.vehicle_margin;
    if hi <= 0.0 || lo >= hi {
        return 0.0;
    }
    if sigma <= 1e-12 {
        return f64::from(u8::from(in_dilemma(v, mu, p)));
    }
    let cdf = |x: f64| normal_cdf((x - mu) / sigma);
    // Mass below zero is clamped onto d = 0, which is inside when lo < 0.
    let interior = (cdf(hi) - cdf(lo.max(0.0))).max(0.0);
    let clamped = if lo < 0.0 { cdf(0.0) } else { 0.0 };
    interior + clamped
}

/// Dilemma probability by quadrature over speed; deterministic.
pub fn dilemma_probability_exact(k: &KinematicBelief, p: &DzParams) -> f64 {
    let [[svv, svd], [_, sdd]] = k.cov;
    if svv <= 1e-18 {
        return conditional_dilemma(k.speed, k.distance, sdd.max(0.0).sqrt(), p);
    }
    let sv = svv.sqrt();
    let slope = svd / svv;
    let sigma = (sdd - svd * svd / svv).max(0.0).sqrt();
    let lo = (k.speed - 8.0 * sv).max(0.0);
    let hi = k.speed + 8.0 * sv;
    if hi <= lo {
        return 0.0;
    }
    // Composite Simpson on the speed density.
    let n = 2000;
    let h = (hi - lo) / n as f64;
    let f = |v: f64| {
        let z = (v - k.speed) / sv;
        let dens = (-0.5 * z * z).exp() / (sv * (2.0 * std::f64::consts::PI).sqrt());
        dens * conditional_dilemma(v, k.distance + slope * (v - k.speed), sigma, p)
    };
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + i as f64 * h);
    }
    (acc * h / 3.0).clamp(0.0, 1.0)
}

/// Risk over an explicit set of (already relevant) vehicles.
pub fn risk_of<R: Rng + ?Sized>(vehicles: &[KinematicBelief], p: &DzParams, method: DzMethod, mc_samples: usize, rng: &mut R) -> RiskReport {
    if vehicles.is_empty() {
        return RiskReport::zero(method);
    }
    match method {
        DzMethod::IndependenceBound => {
            let per: Vec<(u64, f64)> = vehicles
                .iter()
                .map(|k| (k.vehicle_id, dilemma_probability_exact(k, p)))
                .collect();
            let survive: f64 = per.iter().map(|(_, q)| 1.0 - q).product();
            RiskReport {
                risk: (1.0 - survive).clamp(0.0, 1.0),
                per_vehicle: per,
                method,
                mc_samples: None,
            }
        }
        DzMethod::MonteCarlo => {
            let n = mc_samples.max(1);
            let samplers: Vec<Sampler> = vehicles.iter().map(Sampler::new).collect();
            let mut hits = vec![0usize; vehicles.len()];
            let mut joint = 0usize;
            for _ in 0..n {
                let mut any = false;
                for (i, s) in samplers.iter().enumerate() {
                    let (v, d) = s.draw(rng);
                    if in_dilemma(v, d, p) {
                        hits[i] += 1;
                        any = true;
                    }
                }
                joint += usize::from(any);
            }
            RiskReport {
                risk: joint as f64 / n as f64,
                per_vehicle: vehicles
                    .iter()
                    .zip(&hits)
                    .map(|(k, &h)| (k.vehicle_id, h as f64 / n as f64))
                    .collect(),
                method,
                mc_samples: Some(n),
            }
        }
    }
}

/// Vehicles that matter for terminating the phase shown in `state`, predicted
/// `lead` seconds ahead by constant velocity.
pub fn relevant_vehicles(belief: &Belief, state: &PhaseState, ix: &Intersection, p: &DzParams, lead: f64) -> Vec<KinematicBelief> {
    let phase = ix.phase(state.active);
    belief
        .kinematics
        .iter()
        .filter(|k| phase.serves(k.movement))
        .map(|k| if lead > 0.0 { k.advanced(lead) } else { k.clone() })
        .filter(|k| k.distance >= 0.0 && k.distance <= p.lookahead)
        .collect()
}

/// Dilemma-zone risk of a yellow onset for the phase active in `state`.
pub fn dz_risk<R: Rng + ?Sized>(
    belief: &Belief,
    state: &PhaseState,
    ix: &Intersection,
    p: &DzParams,
    method: DzMethod,
    mc_samples: usize,
    lead: f64,
    rng: &mut R,
) -> RiskReport {
    let vehicles = relevant_vehicles(belief, state, ix, p, lead);
    risk_of(&vehicles, p, method, mc_samples, rng)
}
