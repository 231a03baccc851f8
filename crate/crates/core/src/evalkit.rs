//! Per-step proxy metrics, integrated emission proxies and summary statistics.

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::belief::KinematicBelief;
use crate::error::{contract, Result};
use crate::microsim::TrueState;
use crate::model::{Intersection, PhaseId, SignalAction};
use crate::safety::{dilemma_probability_exact, in_dilemma, DzParams};
use crate::sensor::Observation;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub time: f64,
    pub queue_proxy: f64,
    pub stopped_proxy: f64,
    /// Dilemma-zone risk of the executed termination, estimated the same way
    /// for every controller from the raw observation; 0 on other steps.
    pub risk_proxy: f64,
    /// The controller's own risk estimate for the executed termination.
    pub risk_controller: Option<f64>,
    /// Vehicles truly inside the dilemma band at the yellow onset.
    pub gt_dilemma: u32,
    /// Conflict-zone events from the simulator.
    pub gt_conflicts: u32,
    pub occlusion_proxy: f64,
    pub p_det: f64,
    pub latency_ms: f64,
}

impl MetricRecord {
    /// Ground-truth risk indicator: dilemma-band vehicles plus conflict events.
    pub fn gt_risk(&self) -> f64 {
        f64::from(self.gt_dilemma + self.gt_conflicts)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Zone weights per movement; `None` means all 1.
    pub weights: Option<Vec<f64>>,
    pub dz: DzParams,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            weights: None,
            dz: DzParams::default(),
        }
    }
}

/// Everything recorded about one control step.
#[derive(Debug, Clone, Copy)]
pub struct StepContext<'a> {
    pub time: f64,
    pub observation: &'a Observation,
    pub executed: SignalAction,
    /// Phase whose green the executed action would end.
    pub active: PhaseId,
    pub controller_risk: Option<f64>,
    pub conflict_events: u32,
    /// True state one step later, at the instant yellow would begin.
    pub next_state: &'a TrueState,
    pub latency_ms: f64,
}

fn weighted(counts: &[u32], weights: Option<&[f64]>) -> f64 {
    counts
        .iter()
        .enumerate()
        .map(|(m, &c)| weights.map_or(1.0, |w| w[m]) * f64::from(c))
        .sum()
}

/// Risk of starting yellow one step ahead, treating each observed track as an
/// independent Gaussian.
pub fn observed_onset_risk(z: &Observation, active: PhaseId, ix: &Intersection, p: &DzParams) -> f64 {
    let phase = ix.phase(active);
    let dt = ix.timing.step;
    let survive: f64 = z
        .detected_tracks
        .iter()
        .filter(|t| phase.serves(t.movement))
        .map(|t| KinematicBelief::from_track(t).advanced(dt))
        .filter(|k| k.distance >= 0.0 && k.distance <= p.lookahead)
        .map(|k| 1.0 - dilemma_probability_exact(&k, p))
        .product();
    (1.0 - survive).clamp(0.0, 1.0)
}

/// True approach vehicles of `active` inside the dilemma band.
pub fn true_dilemma_count(x: &TrueState, active: PhaseId, ix: &Intersection, p: &DzParams) -> u32 {
    let phase = ix.phase(active);
    x.approach_vehicles
        .iter()
        .filter(|v| phase.serves(v.movement) && in_dilemma(v.speed, v.distance, p))
        .count() as u32
}

pub fn step_metrics(ctx: &StepContext<'_>, ix: &Intersection, cfg: &MetricConfig) -> MetricRecord {
    let z = ctx.observation;
    let w = cfg.weights.as_deref();
    let dz = cfg.dz.with_timing(&ix.timing);
    let (risk_proxy, gt_dilemma) = match ctx.executed {
        SignalAction::TerminateTo(_) => (
            observed_onset_risk(z, ctx.active, ix, &dz),
            true_dilemma_count(ctx.next_state, ctx.active, ix, &dz),
        ),
        SignalAction::Extend => (0.0, 0),
    };
    MetricRecord {
        time: ctx.time,
        queue_proxy: weighted(&z.detected_count, w),
        stopped_proxy: weighted(&z.stopped_count, w),
        risk_proxy,
        risk_controller: ctx.controller_risk,
        gt_dilemma,
        gt_conflicts: ctx.conflict_events,
        occlusion_proxy: z.occlusion_proxy(),
        p_det: z.p_det,
        latency_ms: ctx.latency_ms,
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EmissionSummary {
    pub idle_proxy: f64,
    pub queue_emission_proxy: f64,
    pub risk_spike_proxy: f64,
    pub total_proxy: f64,
}

impl EmissionSummary {
    pub fn additivity_gap(&self) -> f64 {
        (self.idle_proxy + self.queue_emission_proxy + self.risk_spike_proxy - self.total_proxy).abs()
    }
}

/// Integrates the proxies over a uniformly sampled series.
pub fn emission_proxies(records: &[MetricRecord], risk_threshold: f64, dt: f64) -> EmissionSummary {
    let idle_proxy: f64 = records.iter().map(|r| r.stopped_proxy * dt).sum();
    let queue_emission_proxy: f64 = records.iter().map(|r| r.queue_proxy * dt).sum();
    let risk_spike_proxy: f64 = records
        .iter()
        .map(|r| (r.risk_proxy - risk_threshold).max(0.0) * dt)
        .sum();
    EmissionSummary {
        idle_proxy,
        queue_emission_proxy,
        risk_spike_proxy,
        total_proxy: idle_proxy + queue_emission_proxy + risk_spike_proxy,
    }
}

/// Running total of the emission proxy, one value per step.
pub fn cumulative_emission(records: &[MetricRecord], risk_threshold: f64, dt: f64) -> Vec<f64> {
    records
        .iter()
        .scan(0.0, |acc, r| {
            *acc += (r.stopped_proxy + r.queue_proxy + (r.risk_proxy - risk_threshold).max(0.0)) * dt;
            Some(*acc)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval95 {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

/// Two-sided Student-t interval at the given level.
pub fn t_interval(xs: &[f64], level: f64) -> Result<Interval95> {
    if xs.len() < 2 {
        return Err(contract(format!("t interval needs at least 2 samples, got {}", xs.len())));
    }
    let n = xs.len() as f64;
    let m = mean(xs);
    let s = sample_std(xs);
    let t = StudentsT::new(0.0, 1.0, n - 1.0)
        .map_err(|e| contract(e.to_string()))?
        .inverse_cdf(0.5 + level / 2.0);
    let half = t * s / n.sqrt();
    Ok(Interval95 {
        mean: m,
        lower: m - half,
        upper: m + half,
    })
}

/// 95% Student-t confidence interval of the mean.
pub fn confidence_interval(xs: &[f64]) -> Result<Interval95> {
    t_interval(xs, 0.95)
}

/// Linearly interpolated quantile of unsorted data (`level` in [0, 1]).
pub fn percentile(xs: &[f64], level: f64) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, level)
}

fn quantile_sorted(v: &[f64], level: f64) -> f64 {
    let pos = level.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

pub fn five_number_summary(xs: &[f64]) -> Option<FiveNumber> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    Some(FiveNumber {
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
    })
}

/// Percentile bootstrap interval of the mean.
pub fn bootstrap_interval<R: Rng + ?Sized>(xs: &[f64], level: f64, resamples: usize, rng: &mut R) -> Result<Interval95> {
    if xs.len() < 2 || resamples == 0 {
        return Err(contract("bootstrap needs at least 2 samples and 1 resample"));
    }
    let n = xs.len();
    let means: Vec<f64> = (0..resamples)
        .map(|_| (0..n).map(|_| xs[rng.random_range(0..n)]).sum::<f64>() / n as f64)
        .collect();
    let tail = (1.0 - level) / 2.0;
    Ok(Interval95 {
        mean: mean(xs),
        lower: percentile(&means, tail),
        upper: percentile(&means, 1.0 - tail),
    })
}

/// Trailing moving average over `window` samples; the first values average
/// what is available.
pub fn moving_average(xs: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(xs.len());
    let mut sum = 0.0;
    for (i, &x) in xs.iter().enumerate() {
        sum += x;
        if i >= w {
            sum -= xs[i - w];
        }
        out.push(sum / (i + 1).min(w) as f64);
    }
    out
}

/// Percentage change versus a baseline; positive means a reduction.
pub fn relative_change(candidate: f64, baseline: f64) -> Option<f64> {
    (baseline != 0.0).then(|| 100.0 * (baseline - candidate) / baseline)
}
