#![allow(dead_code)]

use sigctl_core::belief::{Belief, BeliefConfig};
use sigctl_core::model::{Intersection, MovementId};
use sigctl_core::sensor::{NoisyTrack, Observation};

pub fn empty_observation(m: usize, t: f64, p_det: f64) -> Observation {
    Observation {
        timestamp: t,
        detected_count: vec![0; m],
        stopped_count: vec![0; m],
        detected_tracks: Vec::new(),
        p_det,
    }
}

pub fn track(id: u64, movement: usize, speed: f64, distance: f64) -> NoisyTrack {
    NoisyTrack {
        vehicle_id: id,
        movement: MovementId(movement),
        speed,
        distance,
        sigma_v: 0.5,
        sigma_d: 1.0,
        confidence: 0.9,
    }
}

/// Belief config with rate drift disabled so conjugate updates are exact.
pub fn exact_belief_config() -> BeliefConfig {
    BeliefConfig {
        drift_bound: 0.0,
        ..BeliefConfig::default()
    }
}

/// Sets every particle of movement `m` to `q`.
pub fn pin_queue(b: &mut Belief, m: usize, q: u32) {
    let mb = &mut b.movements[m];
    mb.particles.fill(q);
    let n = mb.weights.len() as f64;
    mb.weights.fill(1.0 / n);
}

pub fn cross() -> Intersection {
    Intersection::standard_cross()
}
