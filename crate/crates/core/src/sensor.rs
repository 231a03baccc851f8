//! Synthetic vision measurement model.
//!
//! Missed detections only: every queued or tracked vehicle is detected
//! independently with one per-step probability that falls with scene density
//! and occlusion severity. Detected tracks carry Gaussian speed and distance
//! errors whose scale grows linearly with distance.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::microsim::TrueState;
use crate::model::MovementId;
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioClass {
    S1,
    S2,
    S3,
    S4,
}

impl ScenarioClass {
    pub const ALL: [ScenarioClass; 4] = [Self::S1, Self::S2, Self::S3, Self::S4];

    pub fn label(self) -> &'static str {
        match self {
            Self::S1 => "S1",
            Self::S2 => "S2",
            Self::S3 => "S3",
            Self::S4 => "S4",
        }
    }
}

/// Occlusion episode generator parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionParams {
    /// Episode start probability per second while clear.
    pub episode_rate: f64,
    /// Mean episode duration, s (geometric).
    pub mean_duration: f64,
    pub base_severity: f64,
    /// Severity added per queued vehicle.
    pub density_severity: f64,
}

impl OcclusionParams {
    pub fn for_class(class: ScenarioClass) -> Option<Self> {
        match class {
            ScenarioClass::S1 | ScenarioClass::S4 => None,
            ScenarioClass::S2 => Some(Self {
                episode_rate: 0.01,
                mean_duration: 20.0,
                base_severity: 0.06,
                density_severity: 0.004,
            }),
            ScenarioClass::S3 => Some(Self {
                episode_rate: 0.01,
                mean_duration: 120.0,
                base_severity: 0.02,
                density_severity: 0.004,
            }),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    /// Detection probability of an empty, unoccluded scene.
    pub p0: f64,
    /// Detection-probability loss per vehicle in view.
    pub kappa_density: f64,
    /// Detection-probability loss per unit occlusion severity.
    pub kappa_occlusion: f64,
    pub p_floor: f64,
    /// Speed noise at the reference distance, m/s.
    pub sigma_v: f64,
    /// Distance noise at the reference distance, m.
    pub sigma_d: f64,
    pub reference_distance: f64,
    /// Noise never drops below this fraction of its reference value.
    pub min_noise_fraction: f64,
    /// Detected vehicles slower than this count as stopped, m/s.
    pub stop_speed: f64,
    /// Per-class occlusion overrides; `None` uses the built-in defaults.
    pub occlusion: Option<OcclusionParams>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            p0: 0.98,
            kappa_density: 0.0005,
            kappa_occlusion: 0.5,
            p_floor: 0.3,
            sigma_v: 1.0,
            sigma_d: 3.0,
            reference_distance: 100.0,
            min_noise_fraction: 0.1,
            stop_speed: 1.5,
            occlusion: None,
        }
    }
}

impl SensorConfig {
    /// A perfect sensor: every vehicle detected with exact kinematics.
    pub fn noiseless() -> Self {
        Self {
            p0: 1.0,
            kappa_density: 0.0,
            kappa_occlusion: 0.0,
            p_floor: 1.0,
            sigma_v: 0.0,
            sigma_d: 0.0,
            ..Self::default()
        }
    }

    fn noise_scale(&self, distance: f64) -> f64 {
        distance.max(self.min_noise_fraction * self.reference_distance) / self.reference_distance
    }

    pub fn sigma_v_at(&self, distance: f64) -> f64 {
        self.sigma_v * self.noise_scale(distance)
    }

    pub fn sigma_d_at(&self, distance: f64) -> f64 {
        self.sigma_d * self.noise_scale(distance)
    }
}

/// Reported standard deviations never drop below this value.
pub const MIN_REPORTED_SIGMA: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OcclusionMode {
    Clear,
    Intermittent,
    Sustained,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OcclusionState {
    pub mode: OcclusionMode,
    /// Seconds left in the current episode.
    pub episode_remaining: f64,
    pub severity: f64,
}

impl OcclusionState {
    pub fn clear() -> Self {
        Self {
            mode: OcclusionMode::Clear,
            episode_remaining: 0.0,
            severity: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoisyTrack {
    pub vehicle_id: u64,
    pub movement: MovementId,
    pub speed: f64,
    pub distance: f64,
    pub sigma_v: f64,
    pub sigma_d: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub timestamp: f64,
    pub detected_count: Vec<u32>,
    pub stopped_count: Vec<u32>,
    pub detected_tracks: Vec<NoisyTrack>,
    /// Detection probability in effect for this frame.
    pub p_det: f64,
}

impl Observation {
    pub fn occlusion_proxy(&self) -> f64 {
        1.0 - self.p_det
    }

    /// Detected tracks per movement.
    pub fn tracks_on(&self, m: MovementId) -> impl Iterator<Item = &NoisyTrack> {
        self.detected_tracks.iter().filter(move |t| t.movement == m)
    }
}

/// Per-frame detection probability.
pub fn detection_probability(zone_count: usize, occlusion: &OcclusionState, cfg: &SensorConfig) -> f64 {
    let p = cfg.p0 - cfg.kappa_density * zone_count as f64 - cfg.kappa_occlusion * occlusion.severity;
    p.clamp(cfg.p_floor.min(1.0), 1.0)
}

fn gaussian<R: Rng + ?Sized>(mean: f64, sigma: f64, rng: &mut R) -> f64 {
    if sigma <= 0.0 {
        return mean;
    }
    Normal::new(mean, sigma).map_or(mean, |n| n.sample(rng))
}

/// Draws one noisy observation of `x`.
pub fn observe(x: &TrueState, occlusion: &OcclusionState, cfg: &SensorConfig, rng: &mut SimRng) -> Observation {
    let n = x.queues.len();
    let p = detection_probability(x.vehicle_count(), occlusion, cfg);
    let mut detected_count = vec![0u32; n];
    let mut stopped_count = vec![0u32; n];

    for m in 0..n {
        for j in 0..x.queues[m] {
            if rng.random::<f64>() >= p {
                continue;
            }
            let distance = f64::from(j) * x.queue_spacing;
            let speed = gaussian(0.0, cfg.sigma_v_at(distance), rng).max(0.0);
            detected_count[m] += 1;
            if speed < cfg.stop_speed {
                stopped_count[m] += 1;
            }
        }
    }

    let mut tracks = Vec::new();
    for v in &x.approach_vehicles {
        if rng.random::<f64>() >= p {
            continue;
        }
        let sv = cfg.sigma_v_at(v.distance);
        let sd = cfg.sigma_d_at(v.distance);
        let speed = gaussian(v.speed, sv, rng).max(0.0);
        let distance = gaussian(v.distance, sd, rng).max(0.0);
        let m = v.movement.0;
        detected_count[m] += 1;
        if speed < cfg.stop_speed {
            stopped_count[m] += 1;
        }
        tracks.push(NoisyTrack {
            vehicle_id: v.id,
            movement: v.movement,
            speed,
            distance,
            sigma_v: sv.max(MIN_REPORTED_SIGMA),
            sigma_d: sd.max(MIN_REPORTED_SIGMA),
            confidence: p,
        });
    }

    Observation {
        timestamp: x.sim_time,
        detected_count,
        stopped_count,
        detected_tracks: tracks,
        p_det: p,
    }
}

/// Advances the occlusion process by one step.
///
/// `density` is the number of queued vehicles; during an episode severity
/// grows with it.
pub fn step_occlusion(
    occlusion: &OcclusionState,
    class: ScenarioClass,
    density: u32,
    params: Option<&OcclusionParams>,
    dt: f64,
    rng: &mut SimRng,
) -> OcclusionState {
    let mode = match class {
        ScenarioClass::S1 | ScenarioClass::S4 => return OcclusionState::clear(),
        ScenarioClass::S2 => OcclusionMode::Intermittent,
        ScenarioClass::S3 => OcclusionMode::Sustained,
    };
    let defaults = OcclusionParams::for_class(class);
    let Some(params) = params.or(defaults.as_ref()) else {
        return OcclusionState::clear();
    };
    let severity = (params.base_severity + params.density_severity * f64::from(density)).clamp(0.0, 1.0);

    if occlusion.mode != OcclusionMode::Clear {
        let remaining = occlusion.episode_remaining - dt;
        if remaining <= 1e-9 {
            return OcclusionState::clear();
        }
        return OcclusionState {
            mode: occlusion.mode,
            episode_remaining: remaining,
            severity: severity.max(f64::MIN_POSITIVE),
        };
    }

    if rng.random::<f64>() < params.episode_rate * dt {
        // Geometric number of steps with mean `mean_duration / dt`.
        let end_prob = (dt / params.mean_duration).clamp(1e-9, 1.0);
        let mut steps = 1u32;
        while rng.random::<f64>() >= end_prob {
            steps += 1;
        }
        OcclusionState {
            mode,
            episode_remaining: f64::from(steps) * dt,
            severity: severity.max(f64::MIN_POSITIVE),
        }
    } else {
        OcclusionState::clear()
    }
}
