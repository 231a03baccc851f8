//! Scenario generation, seeded closed-loop episodes, experiment sweeps,
//! post-hoc auditing and report emission.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::belief::update_service_age;
use crate::controller::{
    Ablation, BaselineConfig, BaselineController, BaselineKind, Controller, ControllerConfig, DecisionTrace,
    UcatscController,
};
use crate::error::{Error, Result};
use crate::evalkit::{
    bootstrap_interval, confidence_interval, cumulative_emission, emission_proxies, five_number_summary, mean,
    moving_average, percentile, relative_change, step_metrics, EmissionSummary, FiveNumber, Interval95, MetricConfig,
    MetricRecord, StepContext,
};
use crate::microsim::{DemandProfile, MicrosimConfig, SimStreams, StepLog, TrueState};
use crate::model::{Intersection, PhaseState, SignalAction};
use crate::rng::{derive_seed, hash_label, stream, Stream};
use crate::sensor::{observe, step_occlusion, OcclusionParams, OcclusionState, ScenarioClass, SensorConfig};

/// Label of the controller that relative changes are measured against.
pub const REFERENCE_CONTROLLER: &str = "queue_proxy";

/// Smoothing window of the reported series, s.
pub const SMOOTHING_WINDOW_S: f64 = 30.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub class: ScenarioClass,
    /// Label used in file names and seeds; defaults to the class label.
    #[serde(default)]
    pub name: Option<String>,
    /// Episode horizon T, s.
    #[serde(default = "default_horizon")]
    pub horizon: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
    /// Demand override; the class default applies when absent.
    #[serde(default)]
    pub demand: Option<DemandProfile>,
    /// Sensor override; the class default applies when absent.
    #[serde(default)]
    pub sensor: Option<SensorConfig>,
}

fn default_horizon() -> f64 {
    900.0
}

fn default_trials() -> usize {
    20
}

impl ScenarioSpec {
    pub fn new(class: ScenarioClass) -> Self {
        Self {
            class,
            name: None,
            horizon: default_horizon(),
            trials: default_trials(),
            demand: None,
            sensor: None,
        }
    }

    pub fn label(&self) -> String {
        self.name.clone().unwrap_or_else(|| self.class.label().to_string())
    }

    pub fn demand_for(&self, ix: &Intersection) -> DemandProfile {
        self.demand
            .clone()
            .unwrap_or_else(|| default_demand(self.class, ix.movement_count()))
    }

    pub fn sensor_config(&self) -> SensorConfig {
        self.sensor.clone().unwrap_or_else(|| SensorConfig {
            occlusion: OcclusionParams::for_class(self.class),
            ..SensorConfig::default()
        })
    }

    pub fn steps(&self, dt: f64) -> usize {
        (self.horizon / dt + 1e-9).floor() as usize
    }
}

/// Mean arrival rate per movement for each scenario class, veh/min.
pub fn class_rate_vpm(class: ScenarioClass) -> f64 {
    match class {
        ScenarioClass::S1 => 2.0,
        ScenarioClass::S2 | ScenarioClass::S3 => 3.0,
        ScenarioClass::S4 => 4.5,
    }
}

/// Class default demand: uniform base rate skewed toward through movements.
pub fn default_demand(class: ScenarioClass, movements: usize) -> DemandProfile {
    DemandProfile {
        turning: Some([0.3, 0.6, 0.1]),
        ..DemandProfile::uniform(movements, class_rate_vpm(class))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerKind {
    Ucatsc {
        #[serde(default)]
        ablation: Ablation,
    },
    FixedTime,
    Occupancy,
    QueueProxy,
}

impl ControllerKind {
    pub fn full() -> Self {
        Self::Ucatsc {
            ablation: Ablation::default(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            Self::Ucatsc { ablation } => match ablation.label() {
                "full" => "ucatsc".to_string(),
                other => format!("ucatsc_{other}"),
            },
            Self::FixedTime => "fixed_time".into(),
            Self::Occupancy => "occupancy".into(),
            Self::QueueProxy => "queue_proxy".into(),
        }
    }

    pub fn parse(label: &str) -> Option<Self> {
        let ablation = |a: Ablation| Some(Self::Ucatsc { ablation: a });
        match label {
            "ucatsc" | "full" => ablation(Ablation::default()),
            "ucatsc_no_ema" | "no_ema" => ablation(Ablation {
                no_ema: true,
                ..Ablation::default()
            }),
            "ucatsc_no_hold" | "no_hold" => ablation(Ablation {
                no_hold: true,
                ..Ablation::default()
            }),
            "ucatsc_no_motion" | "no_motion" => ablation(Ablation {
                no_motion: true,
                ..Ablation::default()
            }),
            "fixed_time" => Some(Self::FixedTime),
            "occupancy" => Some(Self::Occupancy),
            "queue_proxy" => Some(Self::QueueProxy),
            _ => None,
        }
    }

    fn ablation(&self) -> Option<Ablation> {
        match self {
            Self::Ucatsc { ablation } => Some(*ablation),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Intersection JSON file; the standard four-phase cross when absent.
    /// Relative paths resolve against the config file's directory.
    pub intersection: Option<PathBuf>,
    pub controllers: Vec<ControllerKind>,
    pub scenarios: Vec<ScenarioSpec>,
    pub output_dir: Option<PathBuf>,
    pub master_seed: u64,
    pub controller: ControllerConfig,
    pub baseline: BaselineConfig,
    pub metrics: MetricConfig,
    pub microsim: MicrosimConfig,
    /// Dump per-step decision traces next to the episode CSVs.
    pub write_traces: bool,
    /// Parallel episode limit; all cores when absent.
    pub workers: Option<usize>,
    /// Resamples of the bootstrap intervals in the summary.
    pub bootstrap_resamples: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            intersection: None,
            controllers: vec![
                ControllerKind::full(),
                ControllerKind::FixedTime,
                ControllerKind::Occupancy,
                ControllerKind::QueueProxy,
            ],
            scenarios: [ScenarioClass::S1, ScenarioClass::S2, ScenarioClass::S3, ScenarioClass::S4]
                .into_iter()
                .map(ScenarioSpec::new)
                .collect(),
            output_dir: None,
            master_seed: 2024,
            controller: ControllerConfig::default(),
            baseline: BaselineConfig::default(),
            metrics: MetricConfig::default(),
            microsim: MicrosimConfig::default(),
            write_traces: false,
            workers: None,
            bootstrap_resamples: 2000,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json_str(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Loads a config and resolves its intersection path against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json_str(&fs::read_to_string(path)?)?;
        if let (Some(rel), Some(dir)) = (cfg.intersection.as_ref(), path.parent()) {
            if rel.is_relative() {
                cfg.intersection = Some(dir.join(rel));
            }
        }
        Ok(cfg)
    }

    pub fn intersection(&self) -> Result<Intersection> {
        match &self.intersection {
            Some(p) => Intersection::load(p),
            None => Ok(Intersection::standard_cross()),
        }
    }

    /// Every violation found, in one list.
    pub fn validate(&self, ix: &Intersection) -> Vec<String> {
        let mut out = Vec::new();
        if self.controllers.is_empty() {
            out.push("at least one controller is required".into());
        }
        if self.scenarios.is_empty() {
            out.push("at least one scenario is required".into());
        }
        for s in &self.scenarios {
            let tag = s.label();
            if !(s.horizon > 0.0) {
                out.push(format!("{tag}: horizon must be positive"));
            }
            if s.trials == 0 {
                out.push(format!("{tag}: trials must be at least 1"));
            }
            out.extend(s.demand_for(ix).validate(ix).into_iter().map(|e| format!("{tag}: {e}")));
            let sensor = s.sensor_config();
            if !(sensor.p0 > 0.0 && sensor.p0 <= 1.0) {
                out.push(format!("{tag}: p0 must lie in (0, 1]"));
            }
        }
        out.extend(self.controller.validate(ix));
        if let Some(w) = &self.metrics.weights {
            if w.len() != ix.movement_count() || w.iter().any(|x| !(*x >= 0.0)) {
                out.push("metric weights must list one nonnegative value per movement".into());
            }
        }
        if self.workers == Some(0) {
            out.push("workers must be at least 1".into());
        }
        out
    }

    pub fn ensure_valid(&self, ix: &Intersection) -> Result<()> {
        let v = self.validate(ix);
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

/// Seed of the simulated environment, shared by every controller.
pub fn environment_seed(master: u64, scenario: &str, trial: usize) -> u64 {
    derive_seed(&[master, hash_label(scenario), trial as u64])
}

/// Seed of one (controller, scenario, trial) cell.
pub fn cell_seed(master: u64, controller: &str, scenario: &str, trial: usize) -> u64 {
    derive_seed(&[master, hash_label(controller), hash_label(scenario), trial as u64])
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DecisionFlags {
    pub forced: bool,
    pub fairness_override: bool,
    pub safety_override: bool,
    pub safety_hold: bool,
    pub fallback: bool,
}

impl DecisionFlags {
    fn from_trace(t: &DecisionTrace) -> Self {
        Self {
            forced: t.forced,
            fairness_override: t.fairness_override,
            safety_override: t.safety_override,
            safety_hold: t.safety_hold,
            fallback: t.fallback,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRow {
    pub state: PhaseState,
    pub action: SignalAction,
    /// True queues at the start of the step.
    pub q_true: Vec<u32>,
    pub q_mean: Option<Vec<f64>>,
    pub q_var: Option<Vec<f64>>,
    /// Service age at the start of the step.
    pub tau: Vec<f64>,
    pub metrics: MetricRecord,
    pub flags: DecisionFlags,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeStats {
    pub steps: usize,
    pub switches: usize,
    pub forced_decisions: usize,
    pub fairness_overrides: usize,
    pub safety_overrides: usize,
    pub safety_holds: usize,
    pub fallback_steps: usize,
    /// Executed terminations above the risk budget without an override flag.
    pub unlogged_c2: usize,
    pub max_tau: f64,
    pub mean_occlusion: f64,
    /// Peak of the smoothed occlusion series.
    pub peak_occlusion: f64,
    pub conflict_events: u64,
    pub dilemma_vehicles: u64,
    /// Fraction of steps whose filter innovation exceeded δ_s.
    pub envelope_fraction: Option<f64>,
    pub mean_latency_ms: f64,
    pub max_latency_ms: f64,
}

#[derive(Debug, Clone)]
pub struct EpisodeResult {
    pub controller: String,
    pub scenario: String,
    pub trial: usize,
    pub seed: u64,
    pub rows: Vec<EpisodeRow>,
    pub sim: Vec<StepLog>,
    pub traces: Vec<DecisionTrace>,
    pub summary: EmissionSummary,
    pub stats: EpisodeStats,
    pub ix: Intersection,
}

impl EpisodeResult {
    pub fn file_stem(&self) -> String {
        format!("{}_{}_{:03}", self.controller, self.scenario, self.trial)
    }

    pub fn records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.rows.iter().map(|r| &r.metrics)
    }
}

fn build_controller(
    kind: ControllerKind,
    ix: &Intersection,
    cfg: &ExperimentConfig,
    seed: u64,
) -> Box<dyn Controller + Send> {
    match kind {
        ControllerKind::Ucatsc { ablation } => {
            let ccfg = ControllerConfig {
                ablation,
                ..cfg.controller.clone()
            };
            Box::new(UcatscController::new(ix, ccfg, seed))
        }
        ControllerKind::FixedTime => Box::new(BaselineController::new(BaselineKind::FixedTime, cfg.baseline.clone())),
        ControllerKind::Occupancy => Box::new(BaselineController::new(BaselineKind::Occupancy, cfg.baseline.clone())),
        ControllerKind::QueueProxy => Box::new(BaselineController::new(BaselineKind::QueueProxy, cfg.baseline.clone())),
    }
}

/// Runs one closed-loop episode.
///
/// Per step: occlusion and observation of the current true state, controller
/// decision at the current signal state, plant advance under the displayed
/// interval, then the signal transition.
pub fn run_episode(
    ix: &Intersection,
    scenario: &ScenarioSpec,
    kind: ControllerKind,
    trial: usize,
    cfg: &ExperimentConfig,
    keep_traces: bool,
) -> Result<EpisodeResult> {
    ix.ensure_valid()?;
    cfg.ensure_valid(ix)?;
    let label = kind.label();
    let scen = scenario.label();
    let env_seed = environment_seed(cfg.master_seed, &scen, trial);
    let seed = cell_seed(cfg.master_seed, &label, &scen, trial);

    let ix = if kind.ablation().is_some_and(|a| a.no_hold) {
        Intersection {
            timing: ix.timing.without_min_green(),
            ..ix.clone()
        }
    } else {
        ix.clone()
    };
    let dt = ix.timing.step;
    let n = ix.movement_count();
    let demand = scenario.demand_for(&ix);
    let sensor_cfg = scenario.sensor_config();
    let mut streams = SimStreams {
        arrivals: stream(env_seed, Stream::Arrivals),
        speeds: stream(env_seed, Stream::Speeds),
    };
    let mut sensor_rng = stream(env_seed, Stream::Sensor);
    let mut occ_rng = stream(env_seed, Stream::Occlusion);
    let mut controller = build_controller(kind, &ix, cfg, seed);

    let mut x = TrueState::new(&ix, &demand, &cfg.microsim);
    let mut occ = OcclusionState::clear();
    let mut ps = PhaseState::green(ix.phases[0].id);
    let mut tau = vec![0.0; n];
    let steps = scenario.steps(dt);
    let mut rows = Vec::with_capacity(steps);
    let mut sim = Vec::with_capacity(steps);
    let mut traces = Vec::new();
    let mut stats = EpisodeStats {
        steps,
        ..EpisodeStats::default()
    };
    let mut outside_envelope = 0usize;

    for k in 0..steps {
        let time = k as f64 * dt;
        occ = step_occlusion(&occ, scenario.class, x.total_queue(), sensor_cfg.occlusion.as_ref(), dt, &mut occ_rng);
        let z = observe(&x, &occ, &sensor_cfg, &mut sensor_rng);

        let started = Instant::now();
        let decision = controller.decide(&z, &ps, &ix)?;
        let latency_ms = started.elapsed().as_secs_f64() * 1e3;

        let next_ps = ix.apply_action(&ps, decision.action)?;
        let (q_mean, q_var) = match controller.belief() {
            Some(b) => (
                Some(b.movements.iter().map(|mb| mb.expected_queue()).collect()),
                Some(b.movements.iter().map(|mb| mb.queue_variance()).collect()),
            ),
            None => (None, None),
        };
        if let Some(r) = controller.perception_residual() {
            outside_envelope += usize::from(r > cfg.controller.validity.delta_s);
        }
        let q_true = x.queues.clone();
        let log = x.step(&ps, &ix, &demand, &cfg.microsim, dt, &mut streams);

        let flags = decision.trace.as_ref().map(DecisionFlags::from_trace).unwrap_or_default();
        let controller_risk = decision.trace.as_ref().and_then(|t| t.chosen_risk);
        let metrics = step_metrics(
            &StepContext {
                time,
                observation: &z,
                executed: decision.action,
                active: ps.active,
                controller_risk,
                conflict_events: log.conflict_events,
                next_state: &x,
                latency_ms,
            },
            &ix,
            &cfg.metrics,
        );

        if let SignalAction::TerminateTo(_) = decision.action {
            stats.switches += 1;
            if controller_risk.is_some_and(|r| r > cfg.controller.epsilon) && !flags.safety_override {
                stats.unlogged_c2 += 1;
            }
        }
        stats.forced_decisions += usize::from(flags.forced);
        stats.fairness_overrides += usize::from(flags.fairness_override);
        stats.safety_overrides += usize::from(flags.safety_override);
        stats.safety_holds += usize::from(flags.safety_hold);
        stats.fallback_steps += usize::from(flags.fallback);
        stats.max_tau = tau.iter().copied().fold(stats.max_tau, f64::max);

        rows.push(EpisodeRow {
            state: ps,
            action: decision.action,
            q_true,
            q_mean,
            q_var,
            tau: tau.clone(),
            metrics,
            flags,
        });
        let served = ix.served_mask(&ps);
        for (t, s) in tau.iter_mut().zip(served) {
            *t = update_service_age(*t, s, dt);
        }
        sim.push(log);
        if keep_traces {
            if let Some(t) = decision.trace {
                traces.push(t);
            }
        }
        ps = next_ps;
    }

    let records: Vec<MetricRecord> = rows.iter().map(|r| r.metrics.clone()).collect();
    let summary = emission_proxies(&records, cfg.controller.epsilon, dt);
    let occlusion: Vec<f64> = records.iter().map(|r| r.occlusion_proxy).collect();
    let window = (SMOOTHING_WINDOW_S / dt).round() as usize;
    stats.mean_occlusion = mean(&occlusion);
    stats.peak_occlusion = moving_average(&occlusion, window).into_iter().fold(0.0, f64::max);
    stats.conflict_events = records.iter().map(|r| u64::from(r.gt_conflicts)).sum();
    stats.dilemma_vehicles = records.iter().map(|r| u64::from(r.gt_dilemma)).sum();
    let latencies: Vec<f64> = records.iter().map(|r| r.latency_ms).collect();
    stats.mean_latency_ms = mean(&latencies);
    stats.max_latency_ms = latencies.iter().copied().fold(0.0, f64::max);
    if kind.ablation().is_some() && steps > 0 {
        stats.envelope_fraction = Some(outside_envelope as f64 / steps as f64);
    }

    Ok(EpisodeResult {
        controller: label,
        scenario: scen,
        trial,
        seed,
        rows,
        sim,
        traces,
        summary,
        stats,
        ix,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Column names of the episode CSV; latency is always last.
pub fn episode_header(movements: usize) -> Vec<String> {
    let mut h: Vec<String> = ["time", "phase", "interval", "elapsed", "action"].map(String::from).to_vec();
    for prefix in ["q_true", "q_mean", "q_var", "tau"] {
        h.extend((0..movements).map(|m| format!("{prefix}_{m}")));
    }
    h.extend(
        [
            "queue_proxy",
            "stopped_proxy",
            "risk_proxy",
            "risk_controller",
            "gt_dilemma",
            "gt_conflicts",
            "occlusion_proxy",
            "p_det",
            "forced",
            "fairness_override",
            "safety_override",
            "safety_hold",
            "fallback",
            "latency_ms",
        ]
        .map(String::from),
    );
    h
}

pub fn write_episode_csv<W: Write>(ep: &EpisodeResult, w: W) -> Result<()> {
    let n = ep.ix.movement_count();
    let mut out = csv::Writer::from_writer(w);
    out.write_record(episode_header(n))?;
    for r in &ep.rows {
        let mut rec: Vec<String> = vec![
            r.metrics.time.to_string(),
            r.state.active.to_string(),
            serde_json::to_value(r.state.interval)?.as_str().unwrap_or_default().to_string(),
            r.state.elapsed.to_string(),
            r.action.to_string(),
        ];
        rec.extend(r.q_true.iter().map(u32::to_string));
        for col in [&r.q_mean, &r.q_var] {
            match col {
                Some(v) => rec.extend(v.iter().map(f64::to_string)),
                None => rec.extend(std::iter::repeat_n(String::new(), n)),
            }
        }
        rec.extend(r.tau.iter().map(f64::to_string));
        let m = &r.metrics;
        rec.extend([
            m.queue_proxy.to_string(),
            m.stopped_proxy.to_string(),
            m.risk_proxy.to_string(),
            fmt_opt(m.risk_controller),
            m.gt_dilemma.to_string(),
            m.gt_conflicts.to_string(),
            m.occlusion_proxy.to_string(),
            m.p_det.to_string(),
        ]);
        let f = r.flags;
        rec.extend(
            [f.forced, f.fairness_override, f.safety_override, f.safety_hold, f.fallback]
                .map(|b| u8::from(b).to_string()),
        );
        rec.push(format!("{:.3}", m.latency_ms));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Episode CSV as a string.
pub fn episode_csv_string(ep: &EpisodeResult) -> Result<String> {
    let mut buf = Vec::new();
    write_episode_csv(ep, &mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Contract(e.to_string()))
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub queue_recursion_ok: bool,
    pub c1_ok: bool,
    pub tau_ok: bool,
    pub additivity_ok: bool,
    pub issues: Vec<String>,
}

impl AuditReport {
    pub fn passed(&self) -> bool {
        self.queue_recursion_ok && self.c1_ok && self.tau_ok && self.additivity_ok
    }
}

/// Replays an episode log and checks its internal consistency.
pub fn audit_episode(ep: &EpisodeResult) -> AuditReport {
    let ix = &ep.ix;
    let dt = ix.timing.step;
    let mut issues = Vec::new();

    let mut queue_ok = true;
    for (k, log) in ep.sim.iter().enumerate() {
        for (m, s) in log.movements.iter().enumerate() {
            if i64::from(s.queue_after) != i64::from(s.queue_before) + i64::from(s.arrivals) - i64::from(s.served)
                || s.served > s.queue_before
            {
                queue_ok = false;
                issues.push(format!("step {k} movement {m}: queue recursion broken"));
            }
            if let Some(next) = ep.sim.get(k + 1) {
                if next.movements[m].queue_before != s.queue_after {
                    queue_ok = false;
                    issues.push(format!("step {k} movement {m}: queue not carried over"));
                }
            }
            if ep.rows.get(k).is_some_and(|r| r.q_true[m] != s.queue_before) {
                queue_ok = false;
                issues.push(format!("step {k} movement {m}: logged queue differs from plant"));
            }
        }
    }

    let mut c1_ok = true;
    for (k, w) in ep.rows.windows(2).enumerate() {
        match ix.apply_action(&w[0].state, w[0].action) {
            Ok(next) if next == w[1].state => {}
            Ok(_) => {
                c1_ok = false;
                issues.push(format!("step {k}: logged transition differs from the interval machine"));
            }
            Err(e) => {
                c1_ok = false;
                issues.push(format!("step {k}: {e}"));
            }
        }
    }
    if let Some(last) = ep.rows.last() {
        if let Err(e) = ix.apply_action(&last.state, last.action) {
            c1_ok = false;
            issues.push(format!("final step: {e}"));
        }
    }

    let mut tau_ok = true;
    let mut tau = vec![0.0; ix.movement_count()];
    for (k, r) in ep.rows.iter().enumerate() {
        if tau.iter().zip(&r.tau).any(|(a, b)| (a - b).abs() > 1e-9) {
            tau_ok = false;
            issues.push(format!("step {k}: service age bookkeeping mismatch"));
        }
        for (t, s) in tau.iter_mut().zip(ix.served_mask(&r.state)) {
            *t = update_service_age(*t, s, dt);
        }
    }

    let additivity_ok = ep.summary.additivity_gap() <= 1e-9;
    if !additivity_ok {
        issues.push(format!("emission additivity gap {}", ep.summary.additivity_gap()));
    }
    AuditReport {
        queue_recursion_ok: queue_ok,
        c1_ok,
        tau_ok,
        additivity_ok,
        issues,
    }
}

/// Per-episode data kept after the full log is written and dropped.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellSummary {
    pub controller: String,
    pub scenario: String,
    pub trial: usize,
    pub seed: u64,
    pub emission: Option<EmissionSummary>,
    pub stats: Option<EpisodeStats>,
    pub audit_passed: Option<bool>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesSet {
    pub controller: String,
    pub scenario: String,
    pub dt: f64,
    /// Trial means per step.
    pub p_det: Vec<f64>,
    pub occlusion: Vec<f64>,
    pub cumulative_total: Vec<f64>,
    pub gt_risk: FiveNumber,
    pub gt_risk_p99: f64,
    pub risk_proxy: FiveNumber,
    pub risk_proxy_p99: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateRow {
    pub controller: String,
    pub scenario: String,
    pub trials: usize,
    pub failures: usize,
    pub total: Option<Interval95>,
    pub total_bootstrap80: Option<Interval95>,
    pub idle: Option<Interval95>,
    pub queue: Option<Interval95>,
    pub risk_spike: Option<Interval95>,
    /// Change of the mean total versus the reference controller; positive is
    /// a reduction.
    pub relative_change: Option<f64>,
    pub mean_occlusion: f64,
    pub worst_occlusion: f64,
    pub mean_switches: f64,
    pub safety_overrides: usize,
    pub fairness_overrides: usize,
    pub fallback_steps: usize,
    pub mean_latency_ms: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub master_seed: u64,
    pub cells: Vec<CellSummary>,
    pub aggregates: Vec<AggregateRow>,
    pub series: Vec<SeriesSet>,
}

struct Digest {
    cell: CellSummary,
    p_det: Vec<f64>,
    occlusion: Vec<f64>,
    cumulative: Vec<f64>,
    gt_risk: Vec<f64>,
    risk_proxy: Vec<f64>,
}

fn digest(ep: &EpisodeResult, epsilon: f64) -> Digest {
    let records: Vec<MetricRecord> = ep.records().cloned().collect();
    let dt = ep.ix.timing.step;
    Digest {
        cell: CellSummary {
            controller: ep.controller.clone(),
            scenario: ep.scenario.clone(),
            trial: ep.trial,
            seed: ep.seed,
            emission: Some(ep.summary),
            stats: Some(ep.stats.clone()),
            audit_passed: Some(audit_episode(ep).passed()),
            error: None,
        },
        p_det: records.iter().map(|r| r.p_det).collect(),
        occlusion: records.iter().map(|r| r.occlusion_proxy).collect(),
        cumulative: cumulative_emission(&records, epsilon, dt),
        gt_risk: records.iter().map(MetricRecord::gt_risk).collect(),
        risk_proxy: records.iter().map(|r| r.risk_proxy).collect(),
    }
}

fn write_episode_files(ep: &EpisodeResult, dir: &Path, traces: bool) -> Result<()> {
    let episodes = dir.join("episodes");
    fs::create_dir_all(&episodes)?;
    write_episode_csv(ep, fs::File::create(episodes.join(format!("{}.csv", ep.file_stem())))?)?;
    if traces && !ep.traces.is_empty() {
        let f = fs::File::create(episodes.join(format!("{}.trace.json", ep.file_stem())))?;
        serde_json::to_writer(std::io::BufWriter::new(f), &ep.traces)?;
    }
    Ok(())
}

fn column_mean(rows: &[&Vec<f64>]) -> Vec<f64> {
    let len = rows.iter().map(|r| r.len()).min().unwrap_or(0);
    (0..len).map(|k| mean(&rows.iter().map(|r| r[k]).collect::<Vec<_>>())).collect()
}

fn interval(xs: &[f64]) -> Option<Interval95> {
    confidence_interval(xs).ok()
}

/// Runs every (controller × scenario × trial) cell and aggregates the results.
///
/// Episodes run in parallel; each cell's randomness derives from its own seed,
/// so the summary is independent of scheduling. When `out` is given, episode
/// logs are written as they finish.
pub fn run_experiment(cfg: &ExperimentConfig, ix: &Intersection, out: Option<&Path>) -> Result<ExperimentSummary> {
    ix.ensure_valid()?;
    cfg.ensure_valid(ix)?;
    let mut cells = Vec::new();
    for s in &cfg.scenarios {
        for &c in &cfg.controllers {
            for trial in 0..s.trials {
                cells.push((c, s, trial));
            }
        }
    }
    let work = || -> Vec<Digest> {
        cells
            .par_iter()
            .map(|&(kind, spec, trial)| {
                let outcome = run_episode(ix, spec, kind, trial, cfg, cfg.write_traces).and_then(|ep| {
                    if let Some(dir) = out {
                        write_episode_files(&ep, dir, cfg.write_traces)?;
                    }
                    Ok(digest(&ep, cfg.controller.epsilon))
                });
                outcome.unwrap_or_else(|e| {
                    let label = kind.label();
                    let scen = spec.label();
                    Digest {
                        cell: CellSummary {
                            seed: cell_seed(cfg.master_seed, &label, &scen, trial),
                            controller: label,
                            scenario: scen,
                            trial,
                            emission: None,
                            stats: None,
                            audit_passed: None,
                            error: Some(e.to_string()),
                        },
                        p_det: Vec::new(),
                        occlusion: Vec::new(),
                        cumulative: Vec::new(),
                        gt_risk: Vec::new(),
                        risk_proxy: Vec::new(),
                    }
                })
            })
            .collect()
    };
    let digests = match cfg.workers {
        Some(w) => rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build()
            .map_err(|e| Error::Contract(e.to_string()))?
            .install(work),
        None => work(),
    };
    Ok(aggregate(cfg, ix.timing.step, digests))
}

fn aggregate(cfg: &ExperimentConfig, dt: f64, digests: Vec<Digest>) -> ExperimentSummary {
    let mut aggregates = Vec::new();
    let mut series = Vec::new();
    for s in &cfg.scenarios {
        let scen = s.label();
        let reference: Vec<f64> = digests
            .iter()
            .filter(|d| d.cell.scenario == scen && d.cell.controller == REFERENCE_CONTROLLER)
            .filter_map(|d| d.cell.emission.map(|e| e.total_proxy))
            .collect();
        for c in &cfg.controllers {
            let label = c.label();
            let group: Vec<&Digest> = digests
                .iter()
                .filter(|d| d.cell.scenario == scen && d.cell.controller == label)
                .collect();
            let ok: Vec<&Digest> = group.iter().copied().filter(|d| d.cell.error.is_none()).collect();
            let em: Vec<EmissionSummary> = ok.iter().filter_map(|d| d.cell.emission).collect();
            let st: Vec<&EpisodeStats> = ok.iter().filter_map(|d| d.cell.stats.as_ref()).collect();
            let pick = |f: fn(&EmissionSummary) -> f64| em.iter().map(f).collect::<Vec<f64>>();
            let totals = pick(|e| e.total_proxy);
            let mut boot_rng = stream(derive_seed(&[cfg.master_seed, hash_label(&label), hash_label(&scen)]), Stream::Bootstrap);
            let relative = if reference.is_empty() || totals.is_empty() {
                None
            } else {
                relative_change(mean(&totals), mean(&reference))
            };
            aggregates.push(AggregateRow {
                controller: label.clone(),
                scenario: scen.clone(),
                trials: group.len(),
                failures: group.len() - ok.len(),
                total: interval(&totals),
                total_bootstrap80: bootstrap_interval(&totals, 0.8, cfg.bootstrap_resamples, &mut boot_rng).ok(),
                idle: interval(&pick(|e| e.idle_proxy)),
                queue: interval(&pick(|e| e.queue_emission_proxy)),
                risk_spike: interval(&pick(|e| e.risk_spike_proxy)),
                relative_change: relative,
                mean_occlusion: mean(&st.iter().map(|s| s.mean_occlusion).collect::<Vec<_>>()),
                worst_occlusion: mean(&st.iter().map(|s| s.peak_occlusion).collect::<Vec<_>>()),
                mean_switches: mean(&st.iter().map(|s| s.switches as f64).collect::<Vec<_>>()),
                safety_overrides: st.iter().map(|s| s.safety_overrides).sum(),
                fairness_overrides: st.iter().map(|s| s.fairness_overrides).sum(),
                fallback_steps: st.iter().map(|s| s.fallback_steps).sum(),
                mean_latency_ms: mean(&st.iter().map(|s| s.mean_latency_ms).collect::<Vec<_>>()),
            });
            if !ok.is_empty() {
                let pooled = |f: fn(&Digest) -> &Vec<f64>| ok.iter().flat_map(|d| f(d).iter().copied()).collect::<Vec<f64>>();
                let gt = pooled(|d| &d.gt_risk);
                let proxy = pooled(|d| &d.risk_proxy);
                let empty = FiveNumber {
                    min: 0.0,
                    q1: 0.0,
                    median: 0.0,
                    q3: 0.0,
                    max: 0.0,
                };
                series.push(SeriesSet {
                    controller: label.clone(),
                    scenario: scen.clone(),
                    dt,
                    p_det: column_mean(&ok.iter().map(|d| &d.p_det).collect::<Vec<_>>()),
                    occlusion: column_mean(&ok.iter().map(|d| &d.occlusion).collect::<Vec<_>>()),
                    cumulative_total: column_mean(&ok.iter().map(|d| &d.cumulative).collect::<Vec<_>>()),
                    gt_risk: five_number_summary(&gt).unwrap_or(empty),
                    gt_risk_p99: percentile(&gt, 0.99),
                    risk_proxy: five_number_summary(&proxy).unwrap_or(empty),
                    risk_proxy_p99: percentile(&proxy, 0.99),
                });
            }
        }
    }
    ExperimentSummary {
        master_seed: cfg.master_seed,
        cells: digests.into_iter().map(|d| d.cell).collect(),
        aggregates,
        series,
    }
}

fn fmt_ci(ci: &Option<Interval95>) -> String {
    match ci {
        Some(c) => format!("{:>9.2} [{:.2}, {:.2}]", c.mean, c.lower, c.upper),
        None => format!("{:>9}", "n/a"),
    }
}

/// Text tables of an experiment summary.
pub fn report_text(summary: &ExperimentSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "master seed {}", summary.master_seed);
    let failed = summary.cells.iter().filter(|c| c.error.is_some()).count();
    let audit_fail = summary.cells.iter().filter(|c| c.audit_passed == Some(false)).count();
    let _ = writeln!(s, "cells {}  failed {}  audit failures {}", summary.cells.len(), failed, audit_fail);

    let _ = writeln!(s, "\nOperational metrics");
    let _ = writeln!(
        s,
        "{:<20} {:<6} {:>9} {:>9} {:>9} {:>8} {:>8} {:>9} {:>9}",
        "controller", "scen", "occl", "occl_pk", "switches", "s_ovr", "f_ovr", "fallback", "lat_ms"
    );
    for a in &summary.aggregates {
        let _ = writeln!(
            s,
            "{:<20} {:<6} {:>9.4} {:>9.4} {:>9.1} {:>8} {:>8} {:>9} {:>9.2}",
            a.controller,
            a.scenario,
            a.mean_occlusion,
            a.worst_occlusion,
            a.mean_switches,
            a.safety_overrides,
            a.fairness_overrides,
            a.fallback_steps,
            a.mean_latency_ms
        );
    }

    let _ = writeln!(s, "\nEmission proxies (mean [95% CI], proxy-units x s)");
    let _ = writeln!(
        s,
        "{:<20} {:<6} {:>28} {:>28} {:>28} {:>28} {:>8}",
        "controller", "scen", "idle", "queue", "risk_spike", "total", "change"
    );
    for a in &summary.aggregates {
        let change = a.relative_change.map_or("n/a".to_string(), |c| format!("{c:+.1}%"));
        let _ = writeln!(
            s,
            "{:<20} {:<6} {:>28} {:>28} {:>28} {:>28} {:>8}",
            a.controller,
            a.scenario,
            fmt_ci(&a.idle),
            fmt_ci(&a.queue),
            fmt_ci(&a.risk_spike),
            fmt_ci(&a.total),
            change
        );
    }

    let _ = writeln!(s, "\nRisk distribution (ground truth per step)");
    let _ = writeln!(
        s,
        "{:<20} {:<6} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "controller", "scen", "median", "q3", "p99", "max", "proxy99"
    );
    for r in &summary.series {
        let _ = writeln!(
            s,
            "{:<20} {:<6} {:>8.3} {:>8.3} {:>8.3} {:>8.3} {:>8.4}",
            r.controller, r.scenario, r.gt_risk.median, r.gt_risk.q3, r.gt_risk_p99, r.gt_risk.max, r.risk_proxy_p99
        );
    }
    s
}

/// Writes `report.txt` and the plot-ready series under `dir`.
pub fn write_report(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("series"))?;
    fs::write(dir.join("report.txt"), report_text(summary))?;
    for set in &summary.series {
        let window = (SMOOTHING_WINDOW_S / set.dt).round() as usize;
        let occ_smooth = moving_average(&set.occlusion, window);
        let pdet_smooth = moving_average(&set.p_det, window);
        let mut w = csv::Writer::from_path(dir.join("series").join(format!("{}_{}.csv", set.controller, set.scenario)))?;
        w.write_record(["time", "p_det", "p_det_30s", "occlusion", "occlusion_30s", "cumulative_total"])?;
        for k in 0..set.p_det.len() {
            w.write_record([
                (k as f64 * set.dt).to_string(),
                set.p_det[k].to_string(),
                pdet_smooth[k].to_string(),
                set.occlusion[k].to_string(),
                occ_smooth[k].to_string(),
                set.cumulative_total.get(k).copied().unwrap_or_default().to_string(),
            ])?;
        }
        w.flush()?;
    }
    let mut w = csv::Writer::from_path(dir.join("series").join("risk_distribution.csv"))?;
    w.write_record(["controller", "scenario", "signal", "min", "q1", "median", "q3", "max", "p99"])?;
    for set in &summary.series {
        for (name, f, p99) in [("gt_risk", &set.gt_risk, set.gt_risk_p99), ("risk_proxy", &set.risk_proxy, set.risk_proxy_p99)] {
            w.write_record([
                set.controller.clone(),
                set.scenario.clone(),
                name.to_string(),
                f.min.to_string(),
                f.q1.to_string(),
                f.median.to_string(),
                f.q3.to_string(),
                f.max.to_string(),
                p99.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary(summary: &ExperimentSummary, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    Ok(())
}

pub fn read_summary(dir: &Path) -> Result<ExperimentSummary> {
    Ok(serde_json::from_str(&fs::read_to_string(dir.join("summary.json"))?)?)
}
