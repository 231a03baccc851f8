//! Reduced movement-level belief: particles over queue length, a conjugate
//! Gamma posterior over arrival intensity, the service age, and Gaussian
//! kinematic beliefs for tracked approach vehicles.

use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{contract, Result};
use crate::microsim::{poisson, service_capacity};
use crate::model::{Intersection, MovementId, PhaseState};
use crate::rng::SimRng;
use crate::sensor::{NoisyTrack, Observation};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BeliefConfig {
    /// Queue particles per movement.
    pub particles: usize,
    /// Prior mean arrival rate, veh/min.
    pub prior_rate_vpm: f64,
    /// Prior Gamma shape.
    pub prior_shape: f64,
    /// Saturation flow assumed by the queue model, veh/s.
    pub saturation_flow: f64,
    /// Drift bound on the arrival rate, veh/s per s. Inflates the rate
    /// posterior variance by `(drift_bound * dt)^2` per step.
    pub drift_bound: f64,
    /// Temporal smoothing factor for the detection probability and counts.
    pub ema_factor: f64,
    /// Reweight on stopped counts (queued vehicles) rather than all detections.
    pub motion_aware: bool,
    /// Resample when the effective sample size drops below this fraction of N.
    pub resample_fraction: f64,
    /// Missed frames a kinematic belief survives on constant-velocity prediction.
    pub coast_frames: u32,
    /// Queue length treated as spillback, vehicles.
    pub storage_capacity: u32,
}

impl Default for BeliefConfig {
    fn default() -> Self {
        Self {
            particles: 256,
            prior_rate_vpm: 2.0,
            prior_shape: 2.0,
            saturation_flow: 0.5,
            drift_bound: 1e-4,
            ema_factor: 0.3,
            motion_aware: true,
            resample_fraction: 0.5,
            coast_frames: 2,
            storage_capacity: 25,
        }
    }
}

impl BeliefConfig {
    /// Prior Gamma rate parameter β₀ = α₀ / mean, in seconds.
    pub fn prior_rate_param(&self) -> f64 {
        self.prior_shape / (self.prior_rate_vpm / 60.0)
    }
}

/// `rho * previous + (1 - rho) * observed`.
pub fn ema_smooth(previous: f64, observed: f64, rho: f64) -> f64 {
    rho * previous + (1.0 - rho) * observed
}

/// Service age after one step: reset on service, otherwise aged by `dt`.
pub fn update_service_age(tau: f64, served: bool, dt: f64) -> f64 {
    if served {
        0.0
    } else {
        tau + dt
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MovementBelief {
    pub particles: Vec<u32>,
    pub weights: Vec<f64>,
    /// Gamma shape over λ.
    pub alpha: f64,
    /// Gamma rate over λ, seconds.
    pub beta: f64,
    /// Service age, s.
    pub tau: f64,
    pub ema_count: f64,
    /// Fractional service carried between steps; mirrors the plant's accumulator.
    pub carry: f64,
}

impl MovementBelief {
    pub fn new(n: usize, alpha: f64, beta: f64) -> Self {
        Self {
            particles: vec![0; n],
            weights: vec![1.0 / n as f64; n],
            alpha,
            beta,
            tau: 0.0,
            ema_count: 0.0,
            carry: 0.0,
        }
    }

    pub fn expected_queue(&self) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(&q, &w)| w * f64::from(q))
            .sum()
    }

    pub fn queue_variance(&self) -> f64 {
        let mean = self.expected_queue();
        self.particles
            .iter()
            .zip(&self.weights)
            .map(|(&q, &w)| w * (f64::from(q) - mean).powi(2))
            .sum()
    }

    pub fn lambda_mean(&self) -> f64 {
        self.alpha / self.beta
    }

    pub fn lambda_variance(&self) -> f64 {
        self.alpha / (self.beta * self.beta)
    }

    /// P(Q <= q).
    pub fn cdf(&self, q: u32) -> f64 {
        self.particles
            .iter()
            .zip(&self.weights)
            .filter(|(&p, _)| p <= q)
            .map(|(_, &w)| w)
            .sum()
    }

    /// Smallest q with P(Q <= q) >= `level`.
    pub fn quantile(&self, level: f64) -> u32 {
        let mut pairs: Vec<(u32, f64)> = self.particles.iter().copied().zip(self.weights.iter().copied()).collect();
        pairs.sort_by_key(|p| p.0);
        let mut acc = 0.0;
        for (q, w) in &pairs {
            acc += w;
            if acc >= level - 1e-12 {
                return *q;
            }
        }
        pairs.last().map_or(0, |p| p.0)
    }

    /// Central credible interval holding `mass` of the queue posterior.
    pub fn credible_interval(&self, mass: f64) -> (u32, u32) {
        let tail = 0.5 * (1.0 - mass);
        (self.quantile(tail), self.quantile(1.0 - tail))
    }

    /// Randomized probability integral transform of `q` under the queue
    /// posterior; `u` is a uniform draw that spreads the point mass at `q`.
    pub fn randomized_pit(&self, q: u32, u: f64) -> f64 {
        let below = if q == 0 { 0.0 } else { self.cdf(q - 1) };
        let at = self.cdf(q) - below;
        below + u * at
    }

    pub fn effective_sample_size(&self) -> f64 {
        1.0 / self.weights.iter().map(|w| w * w).sum::<f64>()
    }

    fn inflate_rate_variance(&mut self, extra: f64) {
        if extra <= 0.0 {
            return;
        }
        let mean = self.lambda_mean();
        let var = self.lambda_variance() + extra;
        self.alpha = mean * mean / var;
        self.beta = mean / var;
    }
}

/// One-step open-loop propagation of a queue belief.
///
/// Each particle draws its own λ from the Gamma posterior, then
/// `A ~ Poisson(λ dt)` and `Q' = max(0, Q + A - S)` with `S` the whole
/// vehicles of service available this step.
pub fn propagate_queue_belief(
    mb: &MovementBelief,
    served: bool,
    mu: f64,
    dt: f64,
    rng: &mut SimRng,
) -> MovementBelief {
    let mut out = mb.clone();
    propagate_in_place(&mut out, served, mu, dt, rng);
    out
}

fn propagate_in_place(mb: &mut MovementBelief, served: bool, mu: f64, dt: f64, rng: &mut SimRng) {
    let cap = service_capacity(served, mu, dt, &mut mb.carry);
    let gamma = Gamma::new(mb.alpha, 1.0 / mb.beta).ok();
    for q in &mut mb.particles {
        let lambda = gamma.as_ref().map_or(0.0, |g| g.sample(rng));
        let a = poisson(lambda * dt, rng);
        let s = (*q).min(cap);
        *q = *q + a - s;
    }
    mb.tau = update_service_age(mb.tau, served, dt);
}

/// Gaussian belief over one approach vehicle's speed and distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KinematicBelief {
    pub vehicle_id: u64,
    pub movement: MovementId,
    /// Mean speed, m/s.
    pub speed: f64,
    /// Mean distance to the stop line, m.
    pub distance: f64,
    /// Covariance over (speed, distance).
    pub cov: [[f64; 2]; 2],
    pub missed_frames: u32,
}

impl KinematicBelief {
    pub fn from_track(t: &NoisyTrack) -> Self {
        Self {
            vehicle_id: t.vehicle_id,
            movement: t.movement,
            speed: t.speed,
            distance: t.distance,
            cov: [[t.sigma_v * t.sigma_v, 0.0], [0.0, t.sigma_d * t.sigma_d]],
            missed_frames: 0,
        }
    }

    pub fn point(vehicle_id: u64, movement: MovementId, speed: f64, distance: f64) -> Self {
        Self {
            vehicle_id,
            movement,
            speed,
            distance,
            cov: [[0.0; 2]; 2],
            missed_frames: 0,
        }
    }

    /// Constant-velocity prediction `lead` seconds ahead.
    ///
    /// `d' = d - v t`, so the covariance maps through `[[1, 0], [-t, 1]]`.
    pub fn advanced(&self, lead: f64) -> Self {
        let [[svv, svd], [_, sdd]] = self.cov;
        let t = lead;
        let nvd = svd - t * svv;
        let ndd = sdd - 2.0 * t * svd + t * t * svv;
        Self {
            distance: self.distance - self.speed * t,
            cov: [[svv, nvd], [nvd, ndd]],
            ..self.clone()
        }
    }

    pub fn is_degenerate(&self) -> bool {
        self.cov[0][0] <= 1e-18 && self.cov[1][1] <= 1e-18
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Belief {
    pub movements: Vec<MovementBelief>,
    /// Sorted by vehicle id.
    pub kinematics: Vec<KinematicBelief>,
    pub time: f64,
    /// Smoothed detection probability used in the likelihood.
    pub p_det: f64,
    /// Vehicle id to last time it was seen; feeds arrival counting.
    seen: HashMap<u64, f64>,
    initialized: bool,
}

/// Per-movement quantities the validity monitor needs from one update.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateReport {
    /// `|observed - p E[Q]|` under the predicted belief.
    pub residuals: Vec<f64>,
    pub new_arrivals: Vec<u32>,
    pub resampled: Vec<bool>,
    /// Particles were regenerated because the observation ruled them all out.
    pub rejuvenated: Vec<bool>,
}

/// Fresh belief: empty queues, Gamma prior on λ with the configured mean.
pub fn init_belief(movement_count: usize, cfg: &BeliefConfig) -> Belief {
    let beta = cfg.prior_rate_param();
    Belief {
        movements: (0..movement_count)
            .map(|_| MovementBelief::new(cfg.particles, cfg.prior_shape, beta))
            .collect(),
        kinematics: Vec::new(),
        time: 0.0,
        p_det: 1.0,
        seen: HashMap::new(),
        initialized: false,
    }
}

fn binomial_ln_pmf(k: u32, n: u32, p: f64) -> f64 {
    if k > n {
        return f64::NEG_INFINITY;
    }
    if p <= 0.0 {
        return if k == 0 { 0.0 } else { f64::NEG_INFINITY };
    }
    if p >= 1.0 {
        return if k == n { 0.0 } else { f64::NEG_INFINITY };
    }
    let (k, n) = (f64::from(k), f64::from(n));
    ln_gamma(n + 1.0) - ln_gamma(k + 1.0) - ln_gamma(n - k + 1.0) + k * p.ln() + (n - k) * (1.0 - p).ln()
}

fn systematic_resample(mb: &mut MovementBelief, rng: &mut SimRng) {
    let n = mb.particles.len();
    let step = 1.0 / n as f64;
    let mut u = rng.random::<f64>() * step;
    let mut out = Vec::with_capacity(n);
    let mut acc = mb.weights[0];
    let mut i = 0;
    for _ in 0..n {
        while u > acc && i + 1 < n {
            i += 1;
            acc += mb.weights[i];
        }
        out.push(mb.particles[i]);
        u += step;
    }
    mb.particles = out;
    mb.weights.fill(step);
}

/// Draws `Q = y + NB(y + 1, p)`, the queue posterior under a flat prior after
/// observing `y` detections at detection probability `p`.
fn rejuvenate(mb: &mut MovementBelief, y: u32, p: f64, rng: &mut SimRng) {
    let n = mb.particles.len();
    let p = p.clamp(1e-6, 1.0);
    let scale = (1.0 - p) / p;
    let gamma = Gamma::new(f64::from(y) + 1.0, scale.max(1e-12)).ok();
    for q in &mut mb.particles {
        let extra = match (&gamma, scale > 0.0) {
            (Some(g), true) => poisson(g.sample(rng), rng),
            _ => 0,
        };
        *q = y + extra;
    }
    mb.weights.fill(1.0 / n as f64);
}

impl Belief {
    pub fn movement_count(&self) -> usize {
        self.movements.len()
    }

    pub fn expected_queue(&self, m: MovementId) -> f64 {
        self.movements[m.0].expected_queue()
    }

    /// Sum of expected queues.
    pub fn delay_surrogate(&self) -> f64 {
        self.movements.iter().map(MovementBelief::expected_queue).sum()
    }

    pub fn tau(&self, m: MovementId) -> f64 {
        self.movements[m.0].tau
    }

    /// True when any movement's queue exceeds storage with probability ≥ 1/2.
    pub fn spillback_likely(&self, capacity: u32) -> bool {
        self.movements.iter().any(|mb| mb.cdf(capacity) <= 0.5)
    }

    /// Predict step: advance every queue particle through one step of the
    /// queue recursion under the service of `display`.
    pub fn predict(&mut self, display: &PhaseState, ix: &Intersection, cfg: &BeliefConfig, dt: f64, rng: &mut SimRng) {
        let served = ix.served_mask(display);
        let extra = (cfg.drift_bound * dt).powi(2);
        for (mb, &s) in self.movements.iter_mut().zip(&served) {
            propagate_in_place(mb, s, cfg.saturation_flow, dt, rng);
            mb.inflate_rate_variance(extra);
        }
        self.time += dt;
    }

    /// Full filter step for observation `z`.
    ///
    /// `display` is the signal shown since the previous observation. The
    /// first call only conditions on `z` (nothing has elapsed).
    pub fn update(
        &mut self,
        z: &Observation,
        display: &PhaseState,
        ix: &Intersection,
        cfg: &BeliefConfig,
        rng: &mut SimRng,
    ) -> Result<UpdateReport> {
        let n = self.movements.len();
        if z.detected_count.len() != n || z.stopped_count.len() != n {
            return Err(contract(format!(
                "observation has {} movements, belief has {n}",
                z.detected_count.len()
            )));
        }
        if !(0.0..=1.0).contains(&z.p_det) {
            return Err(contract(format!("detection probability {} outside [0, 1]", z.p_det)));
        }
        if z.p_det == 0.0 && z.detected_count.iter().any(|&c| c > 0) {
            return Err(contract("detections reported with zero detection probability"));
        }
        let dt = z.timestamp - self.time;
        if self.initialized && dt > 1e-9 {
            self.predict(display, ix, cfg, dt, rng);
        }
        self.time = z.timestamp;

        self.p_det = if self.initialized {
            ema_smooth(self.p_det, z.p_det, cfg.ema_factor)
        } else {
            z.p_det
        };
        let p = self.p_det;

        let mut report = UpdateReport {
            residuals: vec![0.0; n],
            new_arrivals: vec![0; n],
            resampled: vec![false; n],
            rejuvenated: vec![false; n],
        };

        for m in 0..n {
            let y = if cfg.motion_aware {
                z.stopped_count[m]
            } else {
                z.detected_count[m]
            };
            let mb = &mut self.movements[m];
            report.residuals[m] = (f64::from(y) - p * mb.expected_queue()).abs();

            let log_w: Vec<f64> = mb
                .particles
                .iter()
                .zip(&mb.weights)
                .map(|(&q, &w)| w.ln() + binomial_ln_pmf(y, q, p))
                .collect();
            let max = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                rejuvenate(mb, y, p, rng);
                report.rejuvenated[m] = true;
            } else {
                let mut total = 0.0;
                for (w, lw) in mb.weights.iter_mut().zip(&log_w) {
                    *w = (lw - max).exp();
                    total += *w;
                }
                for w in &mut mb.weights {
                    *w /= total;
                }
                if mb.effective_sample_size() < cfg.resample_fraction * mb.particles.len() as f64 {
                    systematic_resample(mb, rng);
                    report.resampled[m] = true;
                }
            }
            mb.ema_count = if self.initialized {
                ema_smooth(mb.ema_count, f64::from(z.detected_count[m]), cfg.ema_factor)
            } else {
                f64::from(z.detected_count[m])
            };
        }

        // Conjugate rate update on first sightings.
        for t in &z.detected_tracks {
            if self.seen.insert(t.vehicle_id, z.timestamp).is_none() {
                report.new_arrivals[t.movement.0] += 1;
            }
        }
        if self.initialized {
            for (mb, &a) in self.movements.iter_mut().zip(&report.new_arrivals) {
                mb.alpha += f64::from(a);
                mb.beta += dt.max(0.0);
            }
        }
        let horizon = z.timestamp - 120.0;
        self.seen.retain(|_, &mut last| last >= horizon);

        self.update_kinematics(z, cfg, dt.max(0.0));
        self.initialized = true;
        Ok(report)
    }

    fn update_kinematics(&mut self, z: &Observation, cfg: &BeliefConfig, dt: f64) {
        let mut next: Vec<KinematicBelief> = z.detected_tracks.iter().map(KinematicBelief::from_track).collect();
        let observed: std::collections::HashSet<u64> = next.iter().map(|k| k.vehicle_id).collect();
        for k in &self.kinematics {
            if observed.contains(&k.vehicle_id) || k.missed_frames >= cfg.coast_frames {
                continue;
            }
            let mut coasted = k.advanced(dt);
            coasted.missed_frames += 1;
            if coasted.distance > 0.0 {
                next.push(coasted);
            }
        }
        next.sort_by_key(|k| k.vehicle_id);
        self.kinematics = next;
    }
}

/// Functional form of [`Belief::update`].
pub fn update_belief(
    b: &Belief,
    z: &Observation,
    display: &PhaseState,
    ix: &Intersection,
    cfg: &BeliefConfig,
    rng: &mut SimRng,
) -> Result<Belief> {
    let mut out = b.clone();
    out.update(z, display, ix, cfg, rng)?;
    Ok(out)
}
