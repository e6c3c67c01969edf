//! Two-lane highway scenario: sampling, stepping and normalization.
//!
//! The ego car drives in its current lane behind a front car (`front`). The
//! adjacent target lane holds a lead car (`target_front`) and a follower
//! (`target_behind`). All vehicles keep constant speed for the whole episode;
//! the only thing the agent decides is *when* to change lanes, so a `Change`
//! action ends the episode without any lateral motion being simulated.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{compute_indicators, DecisionRecord, IndicatorConfig};
use crate::seed::Rng;

/// Lower bound used to keep normalized values strictly positive.
pub const NORM_FLOOR: f64 = 1e-6;

const MAX_SAMPLE_ATTEMPTS: usize = 1000;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("invalid scenario config: {0}")]
    InvalidConfig(String),
    #[error("invalid scenario state: {0}")]
    InvalidState(String),
    #[error("could not sample a valid initial state after {0} attempts; check gap ranges against behind_relevance_limit")]
    SamplingExhausted(usize),
}

/// The two decisions available to the ego car.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Action {
    Change,
    Keep,
}

impl Action {
    /// Output index in the Q-network: `[Q(s, CHANGE), Q(s, KEEP)]`.
    pub fn index(self) -> usize {
        match self {
            Action::Change => 0,
            Action::Keep => 1,
        }
    }

    pub fn from_index(i: usize) -> Action {
        if i == 0 {
            Action::Change
        } else {
            Action::Keep
        }
    }

    pub fn opposite(self) -> Action {
        match self {
            Action::Change => Action::Keep,
            Action::Keep => Action::Change,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Action::Change => "CHANGE",
            Action::Keep => "KEEP",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Ego,
    Front,
    TargetFront,
    TargetBehind,
}

/// Longitudinal kinematics of one vehicle. Position in meters, speed in m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleState {
    pub x: f64,
    pub v: f64,
}

impl VehicleState {
    pub fn new(x: f64, v: f64) -> Self {
        Self { x, v }
    }

    fn advanced(self, dt: f64) -> Self {
        Self {
            x: self.x + self.v * dt,
            v: self.v,
        }
    }

    fn check(&self, role: Role) -> Result<(), SimError> {
        if !self.x.is_finite() || !self.v.is_finite() {
            return Err(SimError::InvalidState(format!("{role:?} has non-finite kinematics")));
        }
        if self.v < 0.0 {
            return Err(SimError::InvalidState(format!("{role:?} has negative speed {}", self.v)));
        }
        Ok(())
    }
}

/// Full environment state.
///
/// Inside the training domain all three neighbors exist. `target_front` and
/// `target_behind` are optional only so that out-of-domain evaluation states
/// (an empty target lane ahead, no follower) can be represented.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioState {
    pub ego: VehicleState,
    pub front: VehicleState,
    pub target_front: Option<VehicleState>,
    pub target_behind: Option<VehicleState>,
    pub t: f64,
    pub step_index: u32,
}

impl ScenarioState {
    pub fn validate(&self) -> Result<(), SimError> {
        self.ego.check(Role::Ego)?;
        self.front.check(Role::Front)?;
        if self.front.x <= self.ego.x {
            return Err(SimError::InvalidState("front car is not ahead of ego".into()));
        }
        if let Some(nf) = &self.target_front {
            nf.check(Role::TargetFront)?;
            if nf.x <= self.ego.x {
                return Err(SimError::InvalidState("target-lane front car is not ahead of ego".into()));
            }
        }
        if let Some(nb) = &self.target_behind {
            nb.check(Role::TargetBehind)?;
            if nb.x >= self.ego.x {
                return Err(SimError::InvalidState("target-lane behind car is not behind ego".into()));
            }
        }
        if !self.t.is_finite() {
            return Err(SimError::InvalidState("non-finite time".into()));
        }
        Ok(())
    }

    /// Bumper gap to the front car in the current lane.
    pub fn front_gap(&self) -> f64 {
        self.front.x - self.ego.x
    }

    /// Distance from the target-lane follower to ego, if there is one.
    pub fn behind_distance(&self) -> Option<f64> {
        self.target_behind.map(|nb| self.ego.x - nb.x)
    }

    /// Target-lane leader still ahead of ego and follower still behind.
    /// Once a target-lane car draws level the scenario no longer describes a
    /// lane-change opportunity and the episode is cut.
    pub fn target_lane_ordered(&self) -> bool {
        self.target_front.is_none_or(|nf| nf.x > self.ego.x) && self.target_behind.is_none_or(|nb| nb.x < self.ego.x)
    }

    /// True when every neighbor is present and the follower is within the
    /// relevance limit, i.e. the state belongs to the training domain.
    pub fn in_training_domain(&self, config: &ScenarioConfig) -> bool {
        self.target_front.is_some()
            && self
                .behind_distance()
                .is_some_and(|d| d <= config.behind_relevance_limit)
    }
}

/// Scenario generator and stepping parameters. Units are SI throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    /// Decision step period, seconds.
    pub dt: f64,
    /// Speed used to normalize velocities, m/s.
    pub v_max: f64,
    /// Half-width of the ego-centric window used to normalize positions, m.
    pub sensing_range: f64,
    pub ego_speed_range: [f64; 2],
    pub neighbor_speed_range: [f64; 2],
    pub front_gap_range: [f64; 2],
    pub target_front_gap_range: [f64; 2],
    pub target_behind_gap_range: [f64; 2],
    /// A target-lane follower further back than this does not influence the
    /// decision.
    pub behind_relevance_limit: f64,
    /// Episodes are truncated once the front gap falls below this, m.
    pub min_front_gap: f64,
    /// Maximal episode step count.
    pub max_steps: u32,
    pub rng_seed: u64,
    pub indicators: IndicatorConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            dt: 0.1,
            v_max: 30.0,
            sensing_range: 200.0,
            ego_speed_range: [15.0, 27.0],
            neighbor_speed_range: [10.0, 30.0],
            front_gap_range: [10.0, 120.0],
            target_front_gap_range: [10.0, 120.0],
            target_behind_gap_range: [5.0, 100.0],
            behind_relevance_limit: 100.0,
            min_front_gap: 5.0,
            max_steps: 200,
            rng_seed: 2022,
            indicators: IndicatorConfig::default(),
        }
    }
}

fn check_range(name: &str, r: [f64; 2], positive: bool) -> Result<(), SimError> {
    if !r[0].is_finite() || !r[1].is_finite() || r[0] > r[1] {
        return Err(SimError::InvalidConfig(format!("{name} must be a finite [min, max] with min <= max")));
    }
    if positive && r[0] <= 0.0 {
        return Err(SimError::InvalidConfig(format!("{name} must be strictly positive")));
    }
    if r[0] < 0.0 {
        return Err(SimError::InvalidConfig(format!("{name} must be nonnegative")));
    }
    Ok(())
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(SimError::InvalidConfig(format!("{name} must be > 0")))
            }
        };
        positive("dt", self.dt)?;
        positive("v_max", self.v_max)?;
        positive("sensing_range", self.sensing_range)?;
        positive("behind_relevance_limit", self.behind_relevance_limit)?;
        if !(self.min_front_gap.is_finite() && self.min_front_gap >= 0.0) {
            return Err(SimError::InvalidConfig("min_front_gap must be >= 0".into()));
        }
        if self.max_steps == 0 {
            return Err(SimError::InvalidConfig("max_steps must be >= 1".into()));
        }
        check_range("ego_speed_range", self.ego_speed_range, false)?;
        check_range("neighbor_speed_range", self.neighbor_speed_range, false)?;
        check_range("front_gap_range", self.front_gap_range, true)?;
        check_range("target_front_gap_range", self.target_front_gap_range, true)?;
        check_range("target_behind_gap_range", self.target_behind_gap_range, true)?;
        self.indicators
            .validate()
            .map_err(|e| SimError::InvalidConfig(e.to_string()))
    }
}

fn uniform(rng: &mut Rng, r: [f64; 2]) -> f64 {
    // A degenerate range returns its bound exactly.
    r[0] + (r[1] - r[0]) * rng.random::<f64>()
}

/// Draw a random initial state from the training domain.
///
/// Ego sits at `x = 0`. Gaps are drawn uniformly from their configured
/// ranges and neighbor speeds uniformly from `neighbor_speed_range`; draws
/// whose follower lies beyond `behind_relevance_limit` are rejected.
pub fn sample_initial_state(config: &ScenarioConfig, rng: &mut Rng) -> Result<ScenarioState, SimError> {
    config.validate()?;
    for _ in 0..MAX_SAMPLE_ATTEMPTS {
        let ego_v = uniform(rng, config.ego_speed_range);
        let front_gap = uniform(rng, config.front_gap_range);
        let front_v = uniform(rng, config.neighbor_speed_range);
        let nf_gap = uniform(rng, config.target_front_gap_range);
        let nf_v = uniform(rng, config.neighbor_speed_range);
        let nb_gap = uniform(rng, config.target_behind_gap_range);
        let nb_v = uniform(rng, config.neighbor_speed_range);
        if nb_gap > config.behind_relevance_limit {
            continue;
        }
        let state = ScenarioState {
            ego: VehicleState::new(0.0, ego_v),
            front: VehicleState::new(front_gap, front_v),
            target_front: Some(VehicleState::new(nf_gap, nf_v)),
            target_behind: Some(VehicleState::new(-nb_gap, nb_v)),
            t: 0.0,
            step_index: 0,
        };
        if state.validate().is_ok() {
            return Ok(state);
        }
    }
    Err(SimError::SamplingExhausted(MAX_SAMPLE_ATTEMPTS))
}

/// Why an episode ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Changed,
    MaxSteps,
    ForcedStop,
}

impl Termination {
    pub fn as_str(self) -> &'static str {
        match self {
            Termination::Changed => "changed",
            Termination::MaxSteps => "max_steps",
            Termination::ForcedStop => "forced_stop",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepResult {
    pub state: ScenarioState,
    pub terminal: bool,
    pub termination: Option<Termination>,
}

/// Advance the environment by one decision step.
///
/// KEEP moves every car at its constant speed. The episode is force-stopped
/// when the front gap drops below `min_front_gap` or a target-lane car draws
/// level with ego, and truncated at `max_steps`.
pub fn step(state: &ScenarioState, action: Action, config: &ScenarioConfig) -> Result<StepResult, SimError> {
    state.validate()?;
    if action == Action::Change {
        return Ok(StepResult {
            state: *state,
            terminal: true,
            termination: Some(Termination::Changed),
        });
    }
    let dt = config.dt;
    let step_index = state.step_index + 1;
    let next = ScenarioState {
        ego: state.ego.advanced(dt),
        front: state.front.advanced(dt),
        target_front: state.target_front.map(|v| v.advanced(dt)),
        target_behind: state.target_behind.map(|v| v.advanced(dt)),
        t: f64::from(step_index) * dt,
        step_index,
    };
    let termination = if next.front_gap() < config.min_front_gap || !next.target_lane_ordered() {
        Some(Termination::ForcedStop)
    } else if step_index >= config.max_steps {
        Some(Termination::MaxSteps)
    } else {
        None
    };
    Ok(StepResult {
        state: next,
        terminal: termination.is_some(),
        termination,
    })
}

/// Network input: `[v_e, x_e, v_f, x_f, v_nf, x_nf, v_nb, x_nb]`, each in
/// `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalizedState(pub [f64; 8]);

impl NormalizedState {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Map a state into the unit box.
///
/// Speeds become `v / v_max`; positions are ego-centric,
/// `(x - x_e + D) / 2D` with `D` the sensing range, so ego always sits at
/// exactly 0.5. Everything is clamped to `[NORM_FLOOR, 1]`. A missing
/// target-lane leader is encoded as a car at the far edge moving at `v_max`,
/// a missing follower as a stationary car at the far back edge.
pub fn normalize_state(state: &ScenarioState, config: &ScenarioConfig) -> NormalizedState {
    let clamp = |v: f64| {
        if v.is_nan() {
            NORM_FLOOR
        } else {
            v.clamp(NORM_FLOOR, 1.0)
        }
    };
    let d = config.sensing_range;
    let speed = |v: f64| clamp(v / config.v_max);
    let pos = |x: f64| clamp((x - state.ego.x + d) / (2.0 * d));
    let (v_nf, x_nf) = match state.target_front {
        Some(nf) => (speed(nf.v), pos(nf.x)),
        None => (1.0, 1.0),
    };
    let (v_nb, x_nb) = match state.target_behind {
        Some(nb) => (speed(nb.v), pos(nb.x)),
        None => (NORM_FLOOR, NORM_FLOOR),
    };
    NormalizedState([
        speed(state.ego.v),
        pos(state.ego.x),
        speed(state.front.v),
        pos(state.front.x),
        v_nf,
        x_nf,
        v_nb,
        x_nb,
    ])
}

/// One line of an exported episode trace: the state in which `action` was
/// taken, and whether that action ended the episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceRecord {
    pub t: f64,
    pub step: u32,
    pub ego: VehicleState,
    pub f: VehicleState,
    pub nf: Option<VehicleState>,
    pub nb: Option<VehicleState>,
    pub action: Action,
    pub terminal: bool,
}

impl TraceRecord {
    pub fn new(state: &ScenarioState, action: Action, terminal: bool) -> Self {
        Self {
            t: state.t,
            step: state.step_index,
            ego: state.ego,
            f: state.front,
            nf: state.target_front,
            nb: state.target_behind,
            action,
            terminal,
        }
    }

    pub fn state(&self) -> ScenarioState {
        ScenarioState {
            ego: self.ego,
            front: self.f,
            target_front: self.nf,
            target_behind: self.nb,
            t: self.t,
            step_index: self.step,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeOutcome {
    pub termination: Termination,
    pub steps_taken: u32,
    /// One record per decision taken, in order.
    pub records: Vec<DecisionRecord>,
}

#[derive(Debug, Clone)]
pub struct Episode {
    pub outcome: EpisodeOutcome,
    pub trace: Vec<TraceRecord>,
}

impl Episode {
    /// The state in which the episode's lane change was decided, if any.
    pub fn change_state(&self) -> Option<&ScenarioState> {
        match self.outcome.termination {
            Termination::Changed => self.outcome.records.last().map(|r| &r.state),
            _ => None,
        }
    }
}

/// Roll a policy out from `initial` until the episode terminates.
pub fn run_episode<P>(initial: ScenarioState, config: &ScenarioConfig, mut policy: P) -> Result<Episode, SimError>
where
    P: FnMut(&ScenarioState) -> Action,
{
    let mut state = initial;
    let mut records = Vec::new();
    let mut trace = Vec::new();
    loop {
        let action = policy(&state);
        let result = step(&state, action, config)?;
        records.push(DecisionRecord::new(state, compute_indicators(&state, config), action, "sim"));
        trace.push(TraceRecord::new(&state, action, result.terminal));
        if let Some(termination) = result.termination {
            // `step` on CHANGE does not advance, so count decisions instead.
            let steps_taken = result.state.step_index.max(state.step_index) - initial.step_index
                + u32::from(action == Action::Change);
            return Ok(Episode {
                outcome: EpisodeOutcome {
                    termination,
                    steps_taken,
                    records,
                },
                trace,
            });
        }
        state = result.state;
    }
}

/// Outcome of re-stepping a recorded trace.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub episodes: usize,
    pub steps: usize,
    /// Line indices (0-based) whose recorded state or terminal flag differs
    /// from what the simulator produces.
    pub mismatches: Vec<usize>,
}

/// Re-step a trace and compare every state and terminal flag bit-exactly.
///
/// A record with `step == 0` (or following a terminal record) starts a new
/// episode from its own recorded state.
pub fn replay_trace(records: &[TraceRecord], config: &ScenarioConfig) -> Result<ReplayReport, SimError> {
    let mut report = ReplayReport::default();
    let mut expected: Option<ScenarioState> = None;
    for (i, rec) in records.iter().enumerate() {
        let recorded = rec.state();
        let start_new = expected.is_none() || rec.step == 0;
        if start_new {
            report.episodes += 1;
        } else if expected.map(|s| bits(&s)) != Some(bits(&recorded)) {
            report.mismatches.push(i);
        }
        let result = step(&recorded, rec.action, config)?;
        if result.terminal != rec.terminal && !report.mismatches.contains(&i) {
            report.mismatches.push(i);
        }
        report.steps += 1;
        expected = if result.terminal { None } else { Some(result.state) };
    }
    Ok(report)
}

fn bits(s: &ScenarioState) -> Vec<u64> {
    let mut out = vec![s.t.to_bits(), u64::from(s.step_index)];
    for v in [Some(s.ego), Some(s.front), s.target_front, s.target_behind] {
        match v {
            Some(v) => out.extend([1, v.x.to_bits(), v.v.to_bits()]),
            None => out.push(0),
        }
    }
    out
}
