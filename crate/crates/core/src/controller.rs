//! Action selection: the belief-space constrained MPC, its validity monitor
//! and fallback, and the baseline controllers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::belief::{init_belief, Belief, BeliefConfig, UpdateReport};
use crate::error::{contract, Error, Result};
use crate::model::{Intersection, MovementId, PhaseId, PhaseState, SignalAction};
use crate::rng::{stream, SimRng, Stream};
use crate::rollout::{rollout, ArrivalScenario, HorizonConfig, RolloutTrace};
use crate::safety::{dz_risk, DzMethod, DzParams, RiskReport};
use crate::sensor::Observation;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    pub no_ema: bool,
    pub no_hold: bool,
    pub no_motion: bool,
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.no_ema, self.no_hold, self.no_motion) {
            (false, false, false) => "full",
            (true, false, false) => "no_ema",
            (false, true, false) => "no_hold",
            (false, false, true) => "no_motion",
            _ => "mixed",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ValidityConfig {
    pub enabled: bool,
    /// Steps per evaluation window.
    pub window: usize,
    /// Perception envelope δ_s, vehicles.
    pub delta_s: f64,
    /// Tolerated fraction of steps outside the envelope.
    pub eta: f64,
    /// Arrival-rate drift bound L_λ, veh/s per s.
    pub drift_bound: f64,
    /// Service-change bound L_S, vehicles per step.
    pub service_bound: f64,
    /// Tolerated spillback frequency ρ.
    pub rho: f64,
    /// Consecutive clean windows required to leave the fallback.
    pub clean_windows: usize,
}

impl Default for ValidityConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            window: 60,
            delta_s: 4.0,
            eta: 0.1,
            drift_bound: 1e-4,
            service_bound: 3.0,
            rho: 0.2,
            clean_windows: 2,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    /// Dilemma-zone risk budget ε.
    pub epsilon: f64,
    /// Starvation bound τ_max, s.
    pub tau_max: f64,
    pub horizon: HorizonConfig,
    /// Soft risk weight α.
    pub alpha: f64,
    /// Soft starvation weight β.
    pub beta: f64,
    /// Hinge start of the soft starvation term as a fraction of τ_max.
    pub tau_soft_fraction: f64,
    pub dz_method: DzMethod,
    pub mc_samples: usize,
    pub dz: DzParams,
    pub belief: BeliefConfig,
    pub validity: ValidityConfig,
    /// Split of the fixed-time fallback, s.
    pub fallback_split: f64,
    pub ablation: Ablation,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            tau_max: 120.0,
            horizon: HorizonConfig::default(),
            alpha: 0.0,
            beta: 0.0,
            tau_soft_fraction: 0.8,
            dz_method: DzMethod::MonteCarlo,
            mc_samples: 512,
            dz: DzParams::default(),
            belief: BeliefConfig::default(),
            validity: ValidityConfig::default(),
            fallback_split: 30.0,
            ablation: Ablation::default(),
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self, ix: &Intersection) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            out.push(format!("epsilon {} must lie in (0, 1)", self.epsilon));
        }
        if !(self.tau_max > ix.timing.g_max) {
            out.push(format!("tau_max {} must exceed g_max {}", self.tau_max, ix.timing.g_max));
        }
        if !(self.horizon.gamma > 0.0 && self.horizon.gamma <= 1.0) {
            out.push(format!("discount {} must lie in (0, 1]", self.horizon.gamma));
        }
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            out.push("soft weights must be nonnegative".into());
        }
        if self.mc_samples == 0 {
            out.push("mc_samples must be at least 1".into());
        }
        if self.belief.particles == 0 {
            out.push("belief needs at least one particle".into());
        }
        if !(0.0..=1.0).contains(&self.belief.ema_factor) {
            out.push(format!("ema factor {} must lie in [0, 1]", self.belief.ema_factor));
        }
        if self.validity.window == 0 {
            out.push("validity window must be positive".into());
        }
        out.extend(self.dz.validate());
        out
    }

    /// Belief configuration with the ablation switches applied.
    pub fn effective_belief(&self) -> BeliefConfig {
        let mut b = self.belief.clone();
        if self.ablation.no_ema {
            b.ema_factor = 0.0;
        }
        if self.ablation.no_motion {
            b.motion_aware = false;
        }
        b
    }
}

/// Per-step cost and constraint outcome of one candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeasibilityReport {
    pub c1: bool,
    pub c2: bool,
    pub c3: bool,
    pub c4: bool,
    /// (instant, risk) pairs above ε.
    pub c2_violations: Vec<(usize, f64)>,
    /// (instant, movement, τ) triples above τ_max.
    pub c3_violations: Vec<(usize, MovementId, f64)>,
}

impl FeasibilityReport {
    pub fn feasible(&self) -> bool {
        self.c1 && self.c2 && self.c3 && self.c4
    }
}

/// Discounted rollout cost `Σ γ^k [D_k + α R_k + β L_k]`.
///
/// `risks` holds the dilemma-zone risk at yellow-onset instants; instants
/// without an entry contribute no risk.
pub fn rollout_cost(trace: &RolloutTrace, risks: &[(usize, f64)], cfg: &ControllerConfig) -> f64 {
    let tau_soft = cfg.tau_soft_fraction * cfg.tau_max;
    let mut discount = 1.0;
    let mut total = 0.0;
    for (k, step) in trace.steps.iter().enumerate() {
        let mut c = step.delay();
        if cfg.alpha > 0.0 {
            c += cfg.alpha * risks.iter().filter(|(i, _)| *i == k).map(|(_, r)| r).sum::<f64>();
        }
        if cfg.beta > 0.0 {
            let starvation: f64 = step.tau.iter().map(|t| (t - tau_soft).max(0.0) / cfg.tau_max).sum();
            c += cfg.beta * starvation;
        }
        total += discount * c;
        discount *= cfg.horizon.gamma;
    }
    total
}

/// Checks the safety and starvation constraints along a trace.
pub fn check_constraints(trace: &RolloutTrace, risks: &[(usize, f64)], cfg: &ControllerConfig) -> FeasibilityReport {
    let c2_violations: Vec<(usize, f64)> = trace
        .yellow_onsets
        .iter()
        .filter_map(|&k| {
            let r = risks.iter().find(|(i, _)| *i == k).map_or(0.0, |(_, r)| *r);
            (r > cfg.epsilon).then_some((k, r))
        })
        .collect();
    let mut c3_violations = Vec::new();
    for (k, step) in trace.steps.iter().enumerate() {
        for (m, &t) in step.tau.iter().enumerate() {
            if t > cfg.tau_max + 1e-9 {
                c3_violations.push((k, MovementId(m), t));
            }
        }
    }
    // Service bounds and queue nonnegativity hold by construction of the
    // propagation; the moments are checked as a guard.
    let c4 = trace
        .steps
        .iter()
        .all(|s| s.expected_queue.iter().chain(&s.queue_variance).all(|v| *v >= -1e-9));
    FeasibilityReport {
        c1: true,
        c2: c2_violations.is_empty(),
        c3: c3_violations.is_empty(),
        c4,
        c2_violations,
        c3_violations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateEval {
    pub action: SignalAction,
    pub cost: f64,
    pub feasibility: FeasibilityReport,
    /// Risk reports at the yellow-onset instants of the trace.
    pub risks: Vec<(usize, RiskReport)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Overall {
    Nominal,
    Degraded,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidityStatus {
    pub perception_ok: bool,
    pub drift_ok: bool,
    pub service_ok: bool,
    pub spillback_ok: bool,
    pub overall: Overall,
}

impl ValidityStatus {
    pub fn nominal() -> Self {
        Self {
            perception_ok: true,
            drift_ok: true,
            service_ok: true,
            spillback_ok: true,
            overall: Overall::Nominal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTrace {
    pub time: f64,
    pub phase_state: PhaseState,
    pub candidates: Vec<CandidateEval>,
    pub chosen: SignalAction,
    /// Only one action was admissible; no rollouts were run.
    pub forced: bool,
    /// C3 was relaxed because no candidate satisfied both C2 and C3.
    pub fairness_override: bool,
    /// A termination above the risk budget was executed at maximum green.
    pub safety_override: bool,
    /// Extend was kept although its continuation breaks C2 later in the horizon.
    pub safety_hold: bool,
    /// The fixed-time fallback acted instead of the optimizer.
    pub fallback: bool,
    pub validity: ValidityStatus,
    /// Risk of the yellow onset the chosen action starts, if it terminates.
    pub chosen_risk: Option<f64>,
}

impl DecisionTrace {
    fn bare(time: f64, state: &PhaseState, chosen: SignalAction, validity: ValidityStatus) -> Self {
        Self {
            time,
            phase_state: *state,
            candidates: Vec::new(),
            chosen,
            forced: false,
            fairness_override: false,
            safety_override: false,
            safety_hold: false,
            fallback: false,
            validity,
            chosen_risk: None,
        }
    }
}

fn tie_rank(a: SignalAction) -> usize {
    match a {
        SignalAction::Extend => 0,
        SignalAction::TerminateTo(q) => q.0 + 1,
    }
}

/// Index of the minimum-cost entry among `pool`.
///
/// Ties go to Extend, then to the lowest target phase; without the hold
/// preference they are broken uniformly at random.
fn argmin(evals: &[CandidateEval], pool: &[usize], prefer_extend: bool, rng: &mut SimRng) -> usize {
    let best = pool.iter().map(|&i| evals[i].cost).fold(f64::INFINITY, f64::min);
    let tol = 1e-9 * best.abs().max(1.0);
    let tied: Vec<usize> = pool.iter().copied().filter(|&i| evals[i].cost <= best + tol).collect();
    if prefer_extend || tied.len() == 1 {
        *tied.iter().min_by_key(|&&i| tie_rank(evals[i].action)).expect("nonempty pool")
    } else {
        tied[rng.random_range(0..tied.len())]
    }
}

/// Phase whose most-starved movement has waited longest.
pub fn most_starved_phase(b: &Belief, ix: &Intersection, exclude: PhaseId) -> PhaseId {
    ix.phases
        .iter()
        .filter(|p| p.id != exclude)
        .map(|p| {
            let worst = p.movements.iter().map(|&m| b.tau(m)).fold(0.0, f64::max);
            (p.id, worst)
        })
        .fold(None, |acc: Option<(PhaseId, f64)>, (id, w)| match acc {
            Some((_, bw)) if bw >= w => acc,
            _ => Some((id, w)),
        })
        .map_or(ix.next_in_cycle(exclude), |(id, _)| id)
}

/// Risk of starting yellow `lead` seconds ahead on the phase active in `state`.
fn onset_risk(b: &Belief, state: &PhaseState, ix: &Intersection, cfg: &ControllerConfig, lead: f64, rng: &mut SimRng) -> RiskReport {
    let params = cfg.dz.with_timing(&ix.timing);
    dz_risk(b, state, ix, &params, cfg.dz_method, cfg.mc_samples, lead, rng)
}

/// Outcome of the precedence rules over evaluated candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub action: SignalAction,
    pub fairness_override: bool,
    pub safety_hold: bool,
    pub safety_override: bool,
}

/// Picks among evaluated candidates with precedence C1 > C2 > C3.
///
/// Feasible candidates win by cost. Otherwise C3 is relaxed with the least
/// starvation overshoot, then Extend is held if legal, and only at maximum
/// green is a C2-violating termination to the most-starved phase allowed.
pub fn resolve(
    evals: &[CandidateEval],
    ix: &Intersection,
    b: &Belief,
    state: &PhaseState,
    prefer_extend: bool,
    rng: &mut SimRng,
) -> Resolution {
    let mut res = Resolution {
        action: SignalAction::Extend,
        fairness_override: false,
        safety_hold: false,
        safety_override: false,
    };
    let all: Vec<usize> = (0..evals.len()).collect();
    let feasible: Vec<usize> = all.iter().copied().filter(|&i| evals[i].feasibility.feasible()).collect();
    let safe: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| evals[i].feasibility.c1 && evals[i].feasibility.c2)
        .collect();
    if !feasible.is_empty() {
        res.action = evals[argmin(evals, &feasible, prefer_extend, rng)].action;
    } else if !safe.is_empty() {
        res.fairness_override = true;
        let peak = |i: usize| evals[i].feasibility.c3_violations.iter().map(|v| v.2).fold(0.0, f64::max);
        let least = safe.iter().map(|&i| peak(i)).fold(f64::INFINITY, f64::min);
        let pool: Vec<usize> = safe.iter().copied().filter(|&i| peak(i) <= least + 1e-9).collect();
        res.action = evals[argmin(evals, &pool, prefer_extend, rng)].action;
    } else if evals.iter().any(|e| e.action == SignalAction::Extend && e.feasibility.c1) {
        res.safety_hold = true;
    } else {
        res.safety_override = true;
        res.action = SignalAction::TerminateTo(most_starved_phase(b, ix, state.active));
    }
    res
}

/// One receding-horizon decision.
pub fn select_action(
    b: &Belief,
    state: &PhaseState,
    ix: &Intersection,
    cfg: &ControllerConfig,
    rng: &mut SimRng,
) -> Result<(SignalAction, DecisionTrace)> {
    let adm = ix.admissible_actions(state)?;
    if adm.is_empty() {
        return Err(contract("empty admissible action set"));
    }
    let validity = ValidityStatus::nominal();
    let dt = ix.timing.step;

    if adm.len() == 1 {
        let action = adm[0];
        let mut trace = DecisionTrace::bare(b.time, state, action, validity);
        trace.forced = true;
        if let SignalAction::TerminateTo(_) = action {
            let r = onset_risk(b, state, ix, cfg, dt, rng).risk;
            trace.chosen_risk = Some(r);
            trace.safety_override = r > cfg.epsilon;
        }
        return Ok((action, trace));
    }

    let scenario = ArrivalScenario::sample(b, cfg.horizon.steps, dt, rng);
    let mut risk_cache: HashMap<(usize, PhaseId), RiskReport> = HashMap::new();
    let mut evals = Vec::with_capacity(adm.len());
    for &u in &adm {
        let tr = rollout(b, u, state, ix, &cfg.horizon, cfg.belief.saturation_flow, &scenario)?;
        let mut risks = Vec::new();
        for &k in &tr.yellow_onsets {
            let onset = tr.state_at(k);
            let key = (k, onset.active);
            if !risk_cache.contains_key(&key) {
                let r = onset_risk(b, onset, ix, cfg, k as f64 * dt, rng);
                risk_cache.insert(key, r);
            }
            risks.push((k, risk_cache[&key].clone()));
        }
        let scalar: Vec<(usize, f64)> = risks.iter().map(|(k, r)| (*k, r.risk)).collect();
        evals.push(CandidateEval {
            action: u,
            cost: rollout_cost(&tr, &scalar, cfg),
            feasibility: check_constraints(&tr, &scalar, cfg),
            risks,
        });
    }

    let res = resolve(&evals, ix, b, state, !cfg.ablation.no_hold, rng);
    let mut trace = DecisionTrace::bare(b.time, state, res.action, validity);
    trace.fairness_override = res.fairness_override;
    trace.safety_hold = res.safety_hold;
    trace.safety_override = res.safety_override;
    let chosen = res.action;
    if let SignalAction::TerminateTo(_) = chosen {
        trace.chosen_risk = evals
            .iter()
            .find(|e| e.action == chosen)
            .and_then(|e| e.risks.iter().find(|(k, _)| *k == 1))
            .map(|(_, r)| r.risk);
    }
    trace.candidates = evals;
    Ok((chosen, trace))
}

/// One step of evidence for the validity monitor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValiditySample {
    /// Largest per-movement innovation this step, vehicles.
    pub perception_residual: f64,
    pub new_arrivals: Vec<u32>,
    /// Estimated discharge per movement this step.
    pub service: Vec<f64>,
    pub spillback: bool,
}

/// Empirical checks of the operating assumptions over one window.
pub fn check_validity(window: &[ValiditySample], cfg: &ValidityConfig, dt: f64) -> Result<ValidityStatus> {
    if window.len() < cfg.window.max(2) {
        return Err(contract(format!(
            "validity window has {} samples, needs {}",
            window.len(),
            cfg.window.max(2)
        )));
    }
    let n = window.len() as f64;
    let frac = |count: usize| count as f64 / n;

    let perception_ok = frac(window.iter().filter(|s| s.perception_residual > cfg.delta_s).count()) <= cfg.eta;

    // Rate change between the two half-windows against the drift bound plus a
    // four-sigma Poisson allowance.
    let half = window.len() / 2;
    let span = half as f64 * dt;
    let movements = window[0].new_arrivals.len();
    let drift_ok = (0..movements).all(|m| {
        let n1: u32 = window[..half].iter().map(|s| s.new_arrivals[m]).sum();
        let n2: u32 = window[half..2 * half].iter().map(|s| s.new_arrivals[m]).sum();
        let diff = (f64::from(n2) - f64::from(n1)).abs() / span;
        let slack = 4.0 * (f64::from(n1 + n2) + 1.0).sqrt() / span;
        diff <= cfg.drift_bound * span + slack
    });

    let jumps = window
        .windows(2)
        .filter(|w| {
            w[0].service
                .iter()
                .zip(&w[1].service)
                .any(|(a, b)| (b - a).abs() > cfg.service_bound)
        })
        .count();
    let service_ok = jumps as f64 / (n - 1.0) <= cfg.eta;

    let spillback_ok = frac(window.iter().filter(|s| s.spillback).count()) <= cfg.rho;

    let all = perception_ok && drift_ok && service_ok && spillback_ok;
    Ok(ValidityStatus {
        perception_ok,
        drift_ok,
        service_ok,
        spillback_ok,
        overall: if all { Overall::Nominal } else { Overall::Degraded },
    })
}

/// Windowed monitor with hysteresis: one failing window enters the fallback,
/// `clean_windows` consecutive clean windows leave it.
#[derive(Debug, Clone)]
pub struct ValidityMonitor {
    cfg: ValidityConfig,
    buffer: Vec<ValiditySample>,
    clean_streak: usize,
    degraded: bool,
    last: ValidityStatus,
    dt: f64,
}

impl ValidityMonitor {
    pub fn new(cfg: ValidityConfig, dt: f64) -> Self {
        Self {
            cfg,
            buffer: Vec::new(),
            clean_streak: 0,
            degraded: false,
            last: ValidityStatus::nominal(),
            dt,
        }
    }

    pub fn status(&self) -> ValidityStatus {
        self.last
    }

    /// True while the fallback is engaged.
    pub fn in_fallback(&self) -> bool {
        self.degraded
    }

    pub fn push(&mut self, sample: ValiditySample) -> Result<bool> {
        if !self.cfg.enabled {
            return Ok(false);
        }
        self.buffer.push(sample);
        if self.buffer.len() >= self.cfg.window.max(2) {
            let status = check_validity(&self.buffer, &self.cfg, self.dt)?;
            self.buffer.clear();
            self.last = status;
            if status.overall == Overall::Degraded {
                self.degraded = true;
                self.clean_streak = 0;
            } else if self.degraded {
                self.clean_streak += 1;
                if self.clean_streak >= self.cfg.clean_windows {
                    self.degraded = false;
                    self.clean_streak = 0;
                }
            }
        }
        Ok(self.degraded)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    FixedTime,
    Occupancy,
    QueueProxy,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Green split of the fixed-time plan, s.
    pub split: f64,
    /// Gap-out threshold of the occupancy controller, s.
    pub gap: f64,
    /// Detection zone length upstream of the stop line, m.
    pub detection_zone: f64,
    /// Per-movement weights of the queue proxy; `None` means all 1.
    pub zone_weights: Option<Vec<f64>>,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            split: 30.0,
            gap: 3.0,
            detection_zone: 40.0,
            zone_weights: None,
        }
    }
}

/// Raw-observation inputs of a baseline decision.
#[derive(Debug, Clone, Copy)]
pub struct BaselineInputs<'a> {
    pub observation: &'a Observation,
    /// Seconds since presence was last detected on the served movements.
    pub gap_elapsed: f64,
}

/// Detected presence on the movements of the phase active in `state`.
pub fn served_presence(z: &Observation, state: &PhaseState, ix: &Intersection, zone: f64) -> bool {
    let phase = ix.phase(state.active);
    phase.movements.iter().any(|&m| z.stopped_count[m.0] > 0)
        || z
            .detected_tracks
            .iter()
            .any(|t| phase.serves(t.movement) && t.distance <= zone)
}

/// Weighted detected count per phase.
pub fn phase_scores(z: &Observation, ix: &Intersection, weights: Option<&[f64]>) -> Vec<f64> {
    ix.phases
        .iter()
        .map(|p| {
            p.movements
                .iter()
                .map(|&m| weights.map_or(1.0, |w| w[m.0]) * f64::from(z.detected_count[m.0]))
                .sum()
        })
        .collect()
}

pub fn baseline_policy(
    kind: BaselineKind,
    inputs: BaselineInputs<'_>,
    state: &PhaseState,
    ix: &Intersection,
    cfg: &BaselineConfig,
) -> Result<SignalAction> {
    let adm = ix.admissible_actions(state)?;
    if !state.is_green() {
        return Ok(SignalAction::Extend);
    }
    let t = &ix.timing;
    let at_max = !adm.contains(&SignalAction::Extend);
    let can_end = state.elapsed + 1e-9 >= t.g_min;
    let next = SignalAction::TerminateTo(ix.next_in_cycle(state.active));
    let action = match kind {
        BaselineKind::FixedTime => {
            let split = cfg.split.clamp(t.g_min, t.g_max);
            if at_max || state.elapsed + 1e-9 >= split {
                next
            } else {
                SignalAction::Extend
            }
        }
        BaselineKind::Occupancy => {
            if at_max || (can_end && inputs.gap_elapsed + 1e-9 >= cfg.gap) {
                next
            } else {
                SignalAction::Extend
            }
        }
        BaselineKind::QueueProxy => {
            let scores = phase_scores(inputs.observation, ix, cfg.zone_weights.as_deref());
            let best_other = scores
                .iter()
                .enumerate()
                .filter(|(p, _)| *p != state.active.0)
                .fold(None, |acc: Option<(usize, f64)>, (p, &s)| match acc {
                    Some((_, bs)) if bs >= s => acc,
                    _ => Some((p, s)),
                });
            match best_other {
                Some((p, s)) if at_max || (can_end && s > scores[state.active.0]) => {
                    SignalAction::TerminateTo(PhaseId(p))
                }
                _ => SignalAction::Extend,
            }
        }
    };
    if adm.contains(&action) {
        Ok(action)
    } else {
        Err(Error::Inadmissible {
            action,
            state: *state,
            reason: "baseline proposed an illegal action".into(),
        })
    }
}

/// Output of one controller call.
#[derive(Debug, Clone)]
pub struct Decision {
    pub action: SignalAction,
    pub trace: Option<DecisionTrace>,
}

/// A closed-loop signal controller fed one observation per step.
pub trait Controller {
    fn decide(&mut self, z: &Observation, state: &PhaseState, ix: &Intersection) -> Result<Decision>;

    fn belief(&self) -> Option<&Belief> {
        None
    }

    /// Largest filter innovation of the last update, for belief-based controllers.
    fn perception_residual(&self) -> Option<f64> {
        None
    }
}

pub struct BaselineController {
    kind: BaselineKind,
    cfg: BaselineConfig,
    gap_elapsed: f64,
}

impl BaselineController {
    pub fn new(kind: BaselineKind, cfg: BaselineConfig) -> Self {
        Self {
            kind,
            cfg,
            gap_elapsed: 0.0,
        }
    }
}

impl Controller for BaselineController {
    fn decide(&mut self, z: &Observation, state: &PhaseState, ix: &Intersection) -> Result<Decision> {
        if state.is_green_onset() || served_presence(z, state, ix, self.cfg.detection_zone) {
            self.gap_elapsed = 0.0;
        } else {
            self.gap_elapsed += ix.timing.step;
        }
        let inputs = BaselineInputs {
            observation: z,
            gap_elapsed: self.gap_elapsed,
        };
        Ok(Decision {
            action: baseline_policy(self.kind, inputs, state, ix, &self.cfg)?,
            trace: None,
        })
    }
}

/// The belief-space constrained MPC controller with its filter, validity
/// monitor and fixed-time fallback.
pub struct UcatscController {
    cfg: ControllerConfig,
    belief_cfg: BeliefConfig,
    belief: Belief,
    monitor: ValidityMonitor,
    filter_rng: SimRng,
    decision_rng: SimRng,
    prev_display: Option<PhaseState>,
    prev_stopped: Vec<u32>,
    last_report: UpdateReport,
}

impl UcatscController {
    pub fn new(ix: &Intersection, cfg: ControllerConfig, seed: u64) -> Self {
        let belief_cfg = cfg.effective_belief();
        Self {
            belief: init_belief(ix.movement_count(), &belief_cfg),
            monitor: ValidityMonitor::new(cfg.validity.clone(), ix.timing.step),
            belief_cfg,
            cfg,
            filter_rng: stream(seed, Stream::Filter),
            decision_rng: stream(seed, Stream::Rollout),
            prev_display: None,
            prev_stopped: vec![0; ix.movement_count()],
            last_report: UpdateReport::default(),
        }
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    pub fn last_update(&self) -> &UpdateReport {
        &self.last_report
    }

    fn fallback(&mut self, z: &Observation, state: &PhaseState, ix: &Intersection, validity: ValidityStatus) -> Result<Decision> {
        let split_cfg = BaselineConfig {
            split: self.cfg.fallback_split,
            ..BaselineConfig::default()
        };
        let inputs = BaselineInputs {
            observation: z,
            gap_elapsed: 0.0,
        };
        let proposed = baseline_policy(BaselineKind::FixedTime, inputs, state, ix, &split_cfg)?;
        let mut trace = DecisionTrace::bare(self.belief.time, state, proposed, validity);
        trace.fallback = true;
        let mut action = proposed;
        if let SignalAction::TerminateTo(_) = proposed {
            let r = onset_risk(&self.belief, state, ix, &self.cfg, ix.timing.step, &mut self.decision_rng).risk;
            let can_hold = ix.admissible_actions(state)?.contains(&SignalAction::Extend);
            if r > self.cfg.epsilon && can_hold {
                action = SignalAction::Extend;
                trace.safety_hold = true;
            } else {
                trace.chosen_risk = Some(r);
                trace.safety_override = r > self.cfg.epsilon;
            }
        }
        trace.chosen = action;
        Ok(Decision {
            action,
            trace: Some(trace),
        })
    }
}

impl Controller for UcatscController {
    fn decide(&mut self, z: &Observation, state: &PhaseState, ix: &Intersection) -> Result<Decision> {
        let display = self.prev_display.unwrap_or(*state);
        let served = ix.served_mask(&display);
        let report = self
            .belief
            .update(z, &display, ix, &self.belief_cfg, &mut self.filter_rng)?;
        let service = (0..ix.movement_count())
            .map(|m| {
                if served[m] {
                    f64::from(self.prev_stopped[m].saturating_sub(z.stopped_count[m]))
                } else {
                    0.0
                }
            })
            .collect();
        let sample = ValiditySample {
            perception_residual: report.residuals.iter().copied().fold(0.0, f64::max),
            new_arrivals: report.new_arrivals.clone(),
            service,
            spillback: self.belief.spillback_likely(self.belief_cfg.storage_capacity),
        };
        self.prev_stopped.clone_from(&z.stopped_count);
        self.last_report = report;
        self.prev_display = Some(*state);

        let degraded = self.monitor.push(sample)?;
        let validity = self.monitor.status();
        if degraded {
            return self.fallback(z, state, ix, validity);
        }
        let (action, mut trace) = select_action(&self.belief, state, ix, &self.cfg, &mut self.decision_rng)?;
        trace.validity = validity;
        Ok(Decision {
            action,
            trace: Some(trace),
        })
    }

    fn belief(&self) -> Option<&Belief> {
        Some(&self.belief)
    }

    fn perception_residual(&self) -> Option<f64> {
        Some(self.last_report.residuals.iter().copied().fold(0.0, f64::max))
    }
}
