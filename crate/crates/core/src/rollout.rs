//! Open-loop counterfactual propagation of the belief under a candidate action.
//!
//! The candidate is applied at step 0; later steps follow a fixed
//! continuation policy. No synthetic observations are folded in, so the
//! belief only spreads. Candidates compared at one decision share an
//! [`ArrivalScenario`], so their traces differ only through the signal.

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::belief::{update_service_age, Belief};
use crate::error::Result;
use crate::microsim::{poisson, service_capacity};
use crate::model::{Intersection, PhaseState, SignalAction};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HorizonConfig {
    /// Horizon length H in control steps.
    pub steps: usize,
    /// Discount γ in (0, 1].
    pub gamma: f64,
}

impl Default for HorizonConfig {
    fn default() -> Self {
        Self { steps: 10, gamma: 1.0 }
    }
}

/// Action taken after the first step of a rollout: extend while legal, then
/// terminate to the next phase in cycle order.
pub fn continuation_action(state: &PhaseState, ix: &Intersection) -> Result<SignalAction> {
    let adm = ix.admissible_actions(state)?;
    if adm.contains(&SignalAction::Extend) {
        Ok(SignalAction::Extend)
    } else {
        Ok(SignalAction::TerminateTo(ix.next_in_cycle(state.active)))
    }
}

/// Arrival draws shared by every candidate of one decision, indexed
/// `[step][movement][particle]`. Each particle keeps one λ draw for the whole
/// horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct ArrivalScenario {
    steps: usize,
    movements: usize,
    particles: usize,
    counts: Vec<u32>,
}

impl ArrivalScenario {
    pub fn sample(b: &Belief, steps: usize, dt: f64, rng: &mut SimRng) -> Self {
        let movements = b.movements.len();
        let particles = b.movements.first().map_or(0, |mb| mb.particles.len());
        let mut counts = vec![0u32; steps * movements * particles];
        for (m, mb) in b.movements.iter().enumerate() {
            let gamma = Gamma::new(mb.alpha, 1.0 / mb.beta).ok();
            for i in 0..particles {
                let lambda = gamma.as_ref().map_or(0.0, |g| g.sample(rng));
                for k in 0..steps {
                    counts[(k * movements + m) * particles + i] = poisson(lambda * dt, rng);
                }
            }
        }
        Self {
            steps,
            movements,
            particles,
            counts,
        }
    }

    /// A scenario with no arrivals.
    pub fn empty(b: &Belief, steps: usize) -> Self {
        let movements = b.movements.len();
        let particles = b.movements.first().map_or(0, |mb| mb.particles.len());
        Self {
            steps,
            movements,
            particles,
            counts: vec![0; steps * movements * particles],
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn arrivals(&self, k: usize, m: usize) -> &[u32] {
        let start = (k * self.movements + m) * self.particles;
        &self.counts[start..start + self.particles]
    }
}

/// Belief moments at one instant of a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedStep {
    pub expected_queue: Vec<f64>,
    pub queue_variance: Vec<f64>,
    pub tau: Vec<f64>,
}

impl PredictedStep {
    fn from_parts(particles: &[Vec<u32>], weights: &[Vec<f64>], tau: &[f64]) -> Self {
        let mut expected_queue = Vec::with_capacity(particles.len());
        let mut queue_variance = Vec::with_capacity(particles.len());
        for (ps, ws) in particles.iter().zip(weights) {
            let mean: f64 = ps.iter().zip(ws).map(|(&q, &w)| w * f64::from(q)).sum();
            let var: f64 = ps.iter().zip(ws).map(|(&q, &w)| w * (f64::from(q) - mean).powi(2)).sum();
            expected_queue.push(mean);
            queue_variance.push(var);
        }
        Self {
            expected_queue,
            queue_variance,
            tau: tau.to_vec(),
        }
    }

    /// Sum of expected queues.
    pub fn delay(&self) -> f64 {
        self.expected_queue.iter().sum()
    }
}

/// Predicted belief sequence under one candidate.
///
/// `steps[k]` and `phase_states[k]` describe instant `t + k` for
/// `k = 0..=H`; `actions[k]` is applied at that instant and `terminal` is the
/// signal state at `t + H + 1`. `yellow_onsets` lists instants (up to and
/// including `H + 1`) where a yellow interval begins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutTrace {
    pub action: SignalAction,
    pub actions: Vec<SignalAction>,
    pub phase_states: Vec<PhaseState>,
    pub terminal: PhaseState,
    pub steps: Vec<PredictedStep>,
    pub yellow_onsets: Vec<usize>,
}

impl RolloutTrace {
    pub fn horizon(&self) -> usize {
        self.steps.len() - 1
    }

    /// Signal state at instant `k`, including the terminal instant `H + 1`.
    pub fn state_at(&self, k: usize) -> &PhaseState {
        self.phase_states.get(k).unwrap_or(&self.terminal)
    }
}

/// Rolls `b` forward under `u` then the continuation policy, drawing
/// arrivals from `scenario`.
pub fn rollout(
    b: &Belief,
    u: SignalAction,
    state: &PhaseState,
    ix: &Intersection,
    horizon: &HorizonConfig,
    saturation_flow: f64,
    scenario: &ArrivalScenario,
) -> Result<RolloutTrace> {
    let h = horizon.steps;
    let dt = ix.timing.step;
    let mut particles: Vec<Vec<u32>> = b.movements.iter().map(|mb| mb.particles.clone()).collect();
    let weights: Vec<Vec<f64>> = b.movements.iter().map(|mb| mb.weights.clone()).collect();
    let mut carry: Vec<f64> = b.movements.iter().map(|mb| mb.carry).collect();
    let mut tau: Vec<f64> = b.movements.iter().map(|mb| mb.tau).collect();

    let mut steps = Vec::with_capacity(h + 1);
    let mut phase_states = Vec::with_capacity(h + 1);
    let mut actions = Vec::with_capacity(h + 1);
    let mut yellow_onsets = Vec::new();
    let mut ps = *state;
    steps.push(PredictedStep::from_parts(&particles, &weights, &tau));

    for k in 0..=h {
        let action = if k == 0 { u } else { continuation_action(&ps, ix)? };
        let next = ix.apply_action(&ps, action)?;
        phase_states.push(ps);
        actions.push(action);
        if next.is_yellow_onset() {
            yellow_onsets.push(k + 1);
        }
        if k < h {
            let served = ix.served_mask(&ps);
            for (m, qs) in particles.iter_mut().enumerate() {
                let cap = service_capacity(served[m], saturation_flow, dt, &mut carry[m]);
                let arrivals = if k < scenario.steps() {
                    scenario.arrivals(k, m)
                } else {
                    &[]
                };
                for (i, q) in qs.iter_mut().enumerate() {
                    let a = arrivals.get(i).copied().unwrap_or(0);
                    *q = *q + a - (*q).min(cap);
                }
                tau[m] = update_service_age(tau[m], served[m], dt);
            }
            steps.push(PredictedStep::from_parts(&particles, &weights, &tau));
        }
        ps = next;
    }

    Ok(RolloutTrace {
        action: u,
        actions,
        phase_states,
        terminal: ps,
        steps,
        yellow_onsets,
    })
}

/// Convenience wrapper that draws a fresh scenario from `rng`.
pub fn rollout_seeded(
    b: &Belief,
    u: SignalAction,
    state: &PhaseState,
    ix: &Intersection,
    horizon: &HorizonConfig,
    saturation_flow: f64,
    rng: &mut SimRng,
) -> Result<RolloutTrace> {
    let scenario = ArrivalScenario::sample(b, horizon.steps, ix.timing.step, rng);
    rollout(b, u, state, ix, horizon, saturation_flow, &scenario)
}
