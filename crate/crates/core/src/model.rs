//! Intersection geometry, phases, and the signal interval machine.
//!
//! A [`PhaseState`] describes the display at a control instant: the interval
//! currently shown and how long it has been shown. The display holds for the
//! following control step; [`apply_action`] returns the state at the next
//! instant. Yellow and all-red progress automatically, so the only legal
//! command during an intergreen is [`SignalAction::Extend`].

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};

/// Slack for comparing times that are integer multiples of the control step.
pub const TIME_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MovementId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PhaseId(pub usize);

impl fmt::Display for PhaseId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    North,
    East,
    South,
    West,
}

impl Approach {
    pub const ALL: [Approach; 4] = [Approach::North, Approach::East, Approach::South, Approach::West];

    fn index(self) -> usize {
        match self {
            Approach::North => 0,
            Approach::East => 1,
            Approach::South => 2,
            Approach::West => 3,
        }
    }

    pub fn is_opposing(self, other: Approach) -> bool {
        (self.index() + 2) % 4 == other.index()
    }

    pub fn is_perpendicular(self, other: Approach) -> bool {
        self.index() % 2 != other.index() % 2
    }
}

/// Turn kind. Right turns are normally merged into the through movement.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Turn {
    Left,
    Through,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Movement {
    pub id: MovementId,
    pub approach: Approach,
    pub turn: Turn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub id: PhaseId,
    pub movements: Vec<MovementId>,
}

impl Phase {
    pub fn serves(&self, m: MovementId) -> bool {
        self.movements.contains(&m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingConfig {
    /// Minimum green, seconds.
    pub g_min: f64,
    /// Maximum green, seconds.
    pub g_max: f64,
    /// Yellow duration, seconds.
    pub yellow: f64,
    /// All-red clearance, seconds.
    pub all_red: f64,
    /// Control step, seconds.
    pub step: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        Self {
            g_min: 5.0,
            g_max: 60.0,
            yellow: 3.0,
            all_red: 2.0,
            step: 1.0,
        }
    }
}

impl TimingConfig {
    /// Intergreen (yellow + all-red) duration.
    pub fn intergreen(&self) -> f64 {
        self.yellow + self.all_red
    }

    /// Same timing with the minimum-green floor collapsed to one step.
    pub fn without_min_green(&self) -> Self {
        Self {
            g_min: self.step,
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    Green,
    Yellow,
    AllRed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub active: PhaseId,
    pub interval: Interval,
    /// Seconds the current interval has been displayed.
    pub elapsed: f64,
    /// Phase that receives green after the intergreen. Set iff not green.
    pub next: Option<PhaseId>,
}

impl PhaseState {
    pub fn green(active: PhaseId) -> Self {
        Self {
            active,
            interval: Interval::Green,
            elapsed: 0.0,
            next: None,
        }
    }

    pub fn is_green(&self) -> bool {
        self.interval == Interval::Green
    }

    /// True at the first instant of a yellow interval.
    pub fn is_yellow_onset(&self) -> bool {
        self.interval == Interval::Yellow && self.elapsed.abs() < TIME_EPS
    }

    /// True at the first instant of a green interval.
    pub fn is_green_onset(&self) -> bool {
        self.interval == Interval::Green && self.elapsed.abs() < TIME_EPS
    }

    fn check(&self, timing: &TimingConfig, phase_count: usize) -> Result<()> {
        if !(self.elapsed >= 0.0) {
            return Err(contract(format!("negative interval timer {}", self.elapsed)));
        }
        if self.active.0 >= phase_count {
            return Err(contract(format!("unknown active phase {}", self.active)));
        }
        match self.interval {
            Interval::Green => {
                if self.next.is_some() {
                    return Err(contract("next phase set during green"));
                }
                if self.elapsed > timing.g_max + TIME_EPS {
                    return Err(contract(format!(
                        "green elapsed {} exceeds g_max {}",
                        self.elapsed, timing.g_max
                    )));
                }
            }
            Interval::Yellow | Interval::AllRed => {
                let limit = if self.interval == Interval::Yellow {
                    timing.yellow
                } else {
                    timing.all_red
                };
                match self.next {
                    None => return Err(contract("next phase missing during intergreen")),
                    Some(q) if q.0 >= phase_count => {
                        return Err(contract(format!("unknown next phase {q}")))
                    }
                    _ => {}
                }
                if self.elapsed > limit - timing.step + TIME_EPS {
                    return Err(contract(format!(
                        "{:?} elapsed {} beyond its duration {}",
                        self.interval, self.elapsed, limit
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalAction {
    Extend,
    TerminateTo(PhaseId),
}

impl fmt::Display for SignalAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalAction::Extend => write!(f, "extend"),
            SignalAction::TerminateTo(q) => write!(f, "terminate_to_{q}"),
        }
    }
}

/// Legally admissible commands at `state`.
pub fn admissible_actions(
    state: &PhaseState,
    timing: &TimingConfig,
    phase_count: usize,
) -> Result<Vec<SignalAction>> {
    state.check(timing, phase_count)?;
    if state.interval != Interval::Green {
        return Ok(vec![SignalAction::Extend]);
    }
    let terminations = (0..phase_count)
        .map(PhaseId)
        .filter(|q| *q != state.active)
        .map(SignalAction::TerminateTo);
    if state.elapsed + TIME_EPS < timing.g_min {
        Ok(vec![SignalAction::Extend])
    } else if state.elapsed + TIME_EPS < timing.g_max {
        Ok(std::iter::once(SignalAction::Extend).chain(terminations).collect())
    } else {
        Ok(terminations.collect())
    }
}

/// Advances the interval machine by one control step under `action`.
pub fn apply_action(
    state: &PhaseState,
    action: SignalAction,
    timing: &TimingConfig,
    phase_count: usize,
) -> Result<PhaseState> {
    let allowed = admissible_actions(state, timing, phase_count)?;
    if !allowed.contains(&action) {
        let reason = match (state.interval, action) {
            (Interval::Yellow | Interval::AllRed, _) => {
                "intergreen in progress; only automatic progression is legal".to_string()
            }
            (Interval::Green, SignalAction::TerminateTo(q)) if q == state.active => {
                "cannot terminate to the active phase".to_string()
            }
            (Interval::Green, SignalAction::TerminateTo(q)) if q.0 >= phase_count => {
                format!("phase {q} does not exist")
            }
            (Interval::Green, SignalAction::TerminateTo(_)) => format!(
                "minimum green not served ({} < {})",
                state.elapsed, timing.g_min
            ),
            (Interval::Green, SignalAction::Extend) => format!(
                "maximum green reached ({} >= {})",
                state.elapsed, timing.g_max
            ),
        };
        return Err(Error::Inadmissible {
            action,
            state: *state,
            reason,
        });
    }

    let dt = timing.step;
    let next = match (state.interval, action) {
        (Interval::Green, SignalAction::Extend) => PhaseState {
            elapsed: state.elapsed + dt,
            ..*state
        },
        (Interval::Green, SignalAction::TerminateTo(q)) => PhaseState {
            active: state.active,
            interval: Interval::Yellow,
            elapsed: 0.0,
            next: Some(q),
        },
        (Interval::Yellow, _) => {
            let elapsed = state.elapsed + dt;
            if elapsed + TIME_EPS < timing.yellow {
                PhaseState { elapsed, ..*state }
            } else if timing.all_red > TIME_EPS {
                PhaseState {
                    interval: Interval::AllRed,
                    elapsed: 0.0,
                    ..*state
                }
            } else {
                PhaseState::green(state.next.expect("checked"))
            }
        }
        (Interval::AllRed, _) => {
            let elapsed = state.elapsed + dt;
            if elapsed + TIME_EPS < timing.all_red {
                PhaseState { elapsed, ..*state }
            } else {
                PhaseState::green(state.next.expect("checked"))
            }
        }
    };
    Ok(next)
}

/// A single intersection: movements, phases, conflict graph and timing.
///
/// Loaded from JSON; see `configs/cross_4phase.json` for the schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intersection {
    pub movements: Vec<Movement>,
    pub phases: Vec<Phase>,
    /// Unordered pairs of movements that may not share green.
    pub conflicts: Vec<(MovementId, MovementId)>,
    pub timing: TimingConfig,
}

impl Intersection {
    /// Four-approach cross with a through (right merged) and a left movement
    /// per approach, served by four protected phases.
    pub fn standard_cross() -> Self {
        let movements = cross_movements();
        let conflicts = cross_conflicts(&movements, true);
        let phase = |id: usize, ms: [usize; 2]| Phase {
            id: PhaseId(id),
            movements: ms.iter().copied().map(MovementId).collect(),
        };
        Self {
            movements,
            // N/S through, N/S left, E/W through, E/W left.
            phases: vec![
                phase(0, [0, 4]),
                phase(1, [1, 5]),
                phase(2, [2, 6]),
                phase(3, [3, 7]),
            ],
            conflicts,
            timing: TimingConfig::default(),
        }
    }

    /// Same geometry with two phases and permissive lefts (a left does not
    /// conflict with the opposing through).
    pub fn standard_cross_two_phase() -> Self {
        let movements = cross_movements();
        let conflicts = cross_conflicts(&movements, false);
        Self {
            movements,
            phases: vec![
                Phase {
                    id: PhaseId(0),
                    movements: [0, 1, 4, 5].into_iter().map(MovementId).collect(),
                },
                Phase {
                    id: PhaseId(1),
                    movements: [2, 3, 6, 7].into_iter().map(MovementId).collect(),
                },
            ],
            conflicts,
            timing: TimingConfig::default(),
        }
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let ix: Self = serde_json::from_str(s)?;
        ix.ensure_valid()?;
        Ok(ix)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json_str(&std::fs::read_to_string(path)?)
    }

    pub fn movement_count(&self) -> usize {
        self.movements.len()
    }

    pub fn phase_count(&self) -> usize {
        self.phases.len()
    }

    pub fn phase(&self, id: PhaseId) -> &Phase {
        &self.phases[id.0]
    }

    pub fn conflicting(&self, a: MovementId, b: MovementId) -> bool {
        self.conflicts
            .iter()
            .any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    }

    pub fn ensure_valid(&self) -> Result<()> {
        let violations = validate_config(&self.movements, &self.phases, &self.conflicts, &self.timing);
        if violations.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(violations.iter().map(|v| v.to_string()).collect()))
        }
    }

    /// Per-movement flag: true when the movement is displayed green in `state`.
    pub fn served_mask(&self, state: &PhaseState) -> Vec<bool> {
        let mut mask = vec![false; self.movements.len()];
        if state.is_green() {
            for m in &self.phase(state.active).movements {
                mask[m.0] = true;
            }
        }
        mask
    }

    /// Next phase in fixed cycle order.
    pub fn next_in_cycle(&self, p: PhaseId) -> PhaseId {
        PhaseId((p.0 + 1) % self.phases.len())
    }

    /// Lowest-id phase that serves `m`.
    pub fn phase_serving(&self, m: MovementId) -> Option<PhaseId> {
        self.phases.iter().find(|p| p.serves(m)).map(|p| p.id)
    }

    pub fn admissible_actions(&self, state: &PhaseState) -> Result<Vec<SignalAction>> {
        admissible_actions(state, &self.timing, self.phases.len())
    }

    pub fn apply_action(&self, state: &PhaseState, action: SignalAction) -> Result<PhaseState> {
        apply_action(state, action, &self.timing, self.phases.len())
    }
}

fn cross_movements() -> Vec<Movement> {
    let mut movements = Vec::with_capacity(8);
    for approach in Approach::ALL {
        for turn in [Turn::Through, Turn::Left] {
            movements.push(Movement {
                id: MovementId(movements.len()),
                approach,
                turn,
            });
        }
    }
    movements
}

fn cross_conflicts(movements: &[Movement], protected_lefts: bool) -> Vec<(MovementId, MovementId)> {
    let mut out = Vec::new();
    for (i, a) in movements.iter().enumerate() {
        for b in &movements[i + 1..] {
            let conflict = if a.approach == b.approach {
                false
            } else if a.approach.is_perpendicular(b.approach) {
                true
            } else {
                // Opposing approaches: a left crosses the opposing through.
                protected_lefts && (a.turn == Turn::Left) != (b.turn == Turn::Left)
            };
            if conflict {
                out.push((a.id, b.id));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub enum ConfigViolation {
    TooFewMovements(usize),
    MovementIdMismatch { index: usize, id: MovementId },
    PhaseIdMismatch { index: usize, id: PhaseId },
    NoPhases,
    UnknownMovement { phase: PhaseId, movement: MovementId },
    ConflictWithinPhase { phase: PhaseId, a: MovementId, b: MovementId },
    UnservedMovement(MovementId),
    BadConflictPair(MovementId, MovementId),
    Timing(String),
}

impl fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::TooFewMovements(n) => write!(f, "need at least 2 movements, got {n}"),
            Self::MovementIdMismatch { index, id } => {
                write!(f, "movement at index {index} has id {}", id.0)
            }
            Self::PhaseIdMismatch { index, id } => write!(f, "phase at index {index} has id {id}"),
            Self::NoPhases => write!(f, "no phases defined"),
            Self::UnknownMovement { phase, movement } => {
                write!(f, "phase {phase} references unknown movement {}", movement.0)
            }
            Self::ConflictWithinPhase { phase, a, b } => write!(
                f,
                "conflict within phase {phase}: movements {} and {}",
                a.0, b.0
            ),
            Self::UnservedMovement(m) => write!(f, "movement {} is served by no phase", m.0),
            Self::BadConflictPair(a, b) => {
                write!(f, "conflict pair ({}, {}) is invalid", a.0, b.0)
            }
            Self::Timing(msg) => write!(f, "timing: {msg}"),
        }
    }
}

fn is_step_multiple(value: f64, step: f64) -> bool {
    let k = (value / step).round();
    (value - k * step).abs() < 1e-6
}

/// Collects every violated invariant of the phase plan and timing block.
pub fn validate_config(
    movements: &[Movement],
    phases: &[Phase],
    conflicts: &[(MovementId, MovementId)],
    timing: &TimingConfig,
) -> Vec<ConfigViolation> {
    let mut out = Vec::new();
    let n = movements.len();
    if n < 2 {
        out.push(ConfigViolation::TooFewMovements(n));
    }
    for (index, m) in movements.iter().enumerate() {
        if m.id.0 != index {
            out.push(ConfigViolation::MovementIdMismatch { index, id: m.id });
        }
    }
    for &(a, b) in conflicts {
        if a == b || a.0 >= n || b.0 >= n {
            out.push(ConfigViolation::BadConflictPair(a, b));
        }
    }
    if phases.is_empty() {
        out.push(ConfigViolation::NoPhases);
    }
    let conflicting = |a: MovementId, b: MovementId| {
        conflicts
            .iter()
            .any(|&(x, y)| (x == a && y == b) || (x == b && y == a))
    };
    let mut served = vec![false; n];
    for (index, p) in phases.iter().enumerate() {
        if p.id.0 != index {
            out.push(ConfigViolation::PhaseIdMismatch { index, id: p.id });
        }
        for (i, &a) in p.movements.iter().enumerate() {
            if a.0 >= n {
                out.push(ConfigViolation::UnknownMovement {
                    phase: p.id,
                    movement: a,
                });
                continue;
            }
            served[a.0] = true;
            for &b in &p.movements[i + 1..] {
                if conflicting(a, b) {
                    out.push(ConfigViolation::ConflictWithinPhase { phase: p.id, a, b });
                }
            }
        }
    }
    for (i, s) in served.iter().enumerate() {
        if !s {
            out.push(ConfigViolation::UnservedMovement(MovementId(i)));
        }
    }

    let t = timing;
    if !(t.step > 0.0) {
        out.push(ConfigViolation::Timing(format!("step {} must be positive", t.step)));
    }
    if !(t.g_min > 0.0) {
        out.push(ConfigViolation::Timing(format!("g_min {} must be positive", t.g_min)));
    }
    if t.g_min > t.g_max {
        out.push(ConfigViolation::Timing(format!(
            "g_min {} exceeds g_max {}",
            t.g_min, t.g_max
        )));
    }
    if !(t.yellow > 0.0) {
        out.push(ConfigViolation::Timing(format!("yellow {} must be positive", t.yellow)));
    }
    if !(t.all_red >= 0.0) {
        out.push(ConfigViolation::Timing(format!("all-red {} must be nonnegative", t.all_red)));
    }
    if t.step > 0.0 {
        for (name, v) in [
            ("g_min", t.g_min),
            ("g_max", t.g_max),
            ("yellow", t.yellow),
            ("all_red", t.all_red),
        ] {
            if !is_step_multiple(v, t.step) {
                out.push(ConfigViolation::Timing(format!(
                    "{name} {v} is not a multiple of the step {}",
                    t.step
                )));
            }
        }
    }
    out
}
