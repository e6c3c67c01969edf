//! Evaluation harness: greedy rollouts, lane-change points, MAE against
//! reference lines and decision agreement between policies.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::thread;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{benchmark_decide, greedy_action};
use crate::indicators::{compute_indicators, IndicatorConfig, IndicatorVector, StyleProfile};
use crate::qnet::Network;
use crate::reward::RewardParams;
use crate::seed;
use crate::sim::{
    normalize_state, run_episode, sample_initial_state, Action, ScenarioConfig, ScenarioState, SimError, Termination,
    TraceRecord, VehicleState,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no lane-change points to evaluate")]
    Empty,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// Anything that maps a scenario state to a decision.
pub trait Policy: Sync {
    fn decide(&self, state: &ScenarioState) -> Action;
}

impl<F> Policy for F
where
    F: Fn(&ScenarioState) -> Action + Sync,
{
    fn decide(&self, state: &ScenarioState) -> Action {
        self(state)
    }
}

/// Greedy (epsilon = 0) policy of a trained Q-network.
pub struct QPolicy {
    pub network: Network,
    pub scenario: ScenarioConfig,
}

impl Policy for QPolicy {
    fn decide(&self, state: &ScenarioState) -> Action {
        self.network
            .q_values(&normalize_state(state, &self.scenario))
            .map(greedy_action)
            .unwrap_or(Action::Keep)
    }
}

/// Greedy one-step-reward benchmark as a policy.
pub struct BenchmarkPolicy {
    pub profile: StyleProfile,
    pub reward: RewardParams,
    pub scenario: ScenarioConfig,
}

impl Policy for BenchmarkPolicy {
    fn decide(&self, state: &ScenarioState) -> Action {
        benchmark_decide(state, &self.profile, &self.reward, &self.scenario).unwrap_or(Action::Keep)
    }
}

/// Synthetic driver who changes lanes exactly when every relevant indicator
/// lies within a tolerance band around the style's reference line.
pub struct ReferenceDriver {
    pub profile: StyleProfile,
    /// Half-widths of the bands for `(t_f, t_nf, dv_nb)`.
    pub tolerances: [f64; 3],
    pub scenario: ScenarioConfig,
}

pub const DEFAULT_TOLERANCES: [f64; 3] = [0.5, 0.5, 1.0];

impl Policy for ReferenceDriver {
    fn decide(&self, state: &ScenarioState) -> Action {
        reference_driver_decide(state, &self.profile, self.tolerances, &self.scenario)
    }
}

/// CHANGE iff every relevant indicator is within its tolerance of the
/// reference. A missing target-lane leader or an irrelevant follower passes.
pub fn reference_driver_decide(
    state: &ScenarioState,
    profile: &StyleProfile,
    tolerances: [f64; 3],
    config: &ScenarioConfig,
) -> Action {
    let ind = compute_indicators(state, config);
    let errors = ind.errors_against(&profile.reference_for(state, &config.indicators));
    if errors.iter().zip(tolerances).all(|(e, tau)| *e <= tau) {
        Action::Change
    } else {
        Action::Keep
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Rl,
    Benchmark,
    ReferenceDriver,
    Human,
}

impl AgentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AgentKind::Rl => "rl",
            AgentKind::Benchmark => "benchmark",
            AgentKind::ReferenceDriver => "reference_driver",
            AgentKind::Human => "human",
        }
    }
}

/// Indicator values at the instant a CHANGE decision was taken.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneChangePoint {
    pub v_e: f64,
    pub indicators: IndicatorVector,
    pub agent_kind: AgentKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Indicator {
    Tf,
    Tnf,
    DvNb,
}

impl Indicator {
    pub const ALL: [Indicator; 3] = [Indicator::Tf, Indicator::Tnf, Indicator::DvNb];

    pub fn index(self) -> usize {
        match self {
            Indicator::Tf => 0,
            Indicator::Tnf => 1,
            Indicator::DvNb => 2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutSummary {
    pub points: Vec<LaneChangePoint>,
    pub episodes: usize,
    pub changed: usize,
    pub max_steps: usize,
    pub forced_stop: usize,
    pub total_steps: u64,
    /// Traces of the first episodes, when requested.
    pub traces: Vec<Vec<TraceRecord>>,
}

struct EpisodeResult {
    point: Option<LaneChangePoint>,
    termination: Termination,
    steps: u32,
    trace: Option<Vec<TraceRecord>>,
}

fn workers() -> usize {
    thread::available_parallelism().map_or(1, |n| n.get())
}

/// Greedy rollouts of `policy` from `episodes` freshly sampled initial states.
///
/// Episode `i` draws its initial state from a stream derived from `(seed, i)`
/// alone, so results do not depend on how episodes are split across worker
/// threads.
pub fn run_rollouts(
    policy: &dyn Policy,
    config: &ScenarioConfig,
    episodes: usize,
    seed: u64,
    kind: AgentKind,
    keep_traces: usize,
) -> Result<RolloutSummary, EvalError> {
    config.validate()?;
    let n_workers = workers().min(episodes.max(1));
    let run_one = |i: usize| -> Result<EpisodeResult, EvalError> {
        let mut rng = seed::rng_indexed(seed, "eval-episode", i as u64);
        let init = sample_initial_state(config, &mut rng)?;
        let ep = run_episode(init, config, |s| policy.decide(s))?;
        let point = ep.change_state().map(|s| LaneChangePoint {
            v_e: s.ego.v,
            indicators: compute_indicators(s, config),
            agent_kind: kind,
        });
        Ok(EpisodeResult {
            point,
            termination: ep.outcome.termination,
            steps: ep.outcome.steps_taken,
            trace: (i < keep_traces).then_some(ep.trace),
        })
    };
    let mut results: Vec<(usize, Result<EpisodeResult, EvalError>)> = thread::scope(|scope| {
        let handles: Vec<_> = (0..n_workers)
            .map(|w| {
                let run_one = &run_one;
                scope.spawn(move || (w..episodes).step_by(n_workers).map(|i| (i, run_one(i))).collect::<Vec<_>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("rollout worker panicked"))
            .collect()
    });
    results.sort_by_key(|(i, _)| *i);

    let mut summary = RolloutSummary {
        episodes,
        ..Default::default()
    };
    for (_, r) in results {
        let r = r?;
        match r.termination {
            Termination::Changed => summary.changed += 1,
            Termination::MaxSteps => summary.max_steps += 1,
            Termination::ForcedStop => summary.forced_stop += 1,
        }
        summary.total_steps += u64::from(r.steps);
        summary.points.extend(r.point);
        summary.traces.extend(r.trace);
    }
    Ok(summary)
}

/// Mean absolute error of lane-change points against the reference line
/// evaluated at each point's own ego speed. Points where the indicator is
/// missing or irrelevant are skipped.
pub fn mae(
    points: &[LaneChangePoint],
    profile: &StyleProfile,
    indicator: Indicator,
    config: &IndicatorConfig,
) -> Result<f64, EvalError> {
    let i = indicator.index();
    let errors: Vec<f64> = points
        .iter()
        .filter(|p| p.indicators.is_relevant(i))
        .map(|p| {
            let reference = profile.reference_values(p.v_e * config.reference_speed_scale);
            (p.indicators.as_array()[i] - reference.as_array()[i]).abs()
        })
        .collect();
    if errors.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(errors.iter().sum::<f64>() / errors.len() as f64)
}

/// Mean value of an indicator over the points where it is relevant.
pub fn mean_indicator(points: &[LaneChangePoint], indicator: Indicator) -> Result<f64, EvalError> {
    let i = indicator.index();
    let vals: Vec<f64> = points
        .iter()
        .filter(|p| p.indicators.is_relevant(i))
        .map(|p| p.indicators.as_array()[i])
        .collect();
    if vals.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Initial states of `n` freshly sampled episodes.
pub fn sample_eval_states(config: &ScenarioConfig, n: usize, seed: u64) -> Result<Vec<ScenarioState>, EvalError> {
    (0..n)
        .map(|i| {
            let mut rng = seed::rng_indexed(seed, "eval-state", i as u64);
            Ok(sample_initial_state(config, &mut rng)?)
        })
        .collect()
}

/// States outside the training domain, derived from sampled ones: even
/// indices get a follower beyond the relevance limit, odd indices lose the
/// target-lane leader.
pub fn out_of_domain_states(config: &ScenarioConfig, n: usize, seed: u64) -> Result<Vec<ScenarioState>, EvalError> {
    let base = sample_eval_states(config, n, seed)?;
    Ok(base
        .into_iter()
        .enumerate()
        .map(|(i, mut s)| {
            if i % 2 == 0 {
                let nb = s.target_behind.unwrap_or(VehicleState::new(0.0, s.ego.v));
                let extra = 1.0 + (i % 97) as f64;
                s.target_behind = Some(VehicleState::new(s.ego.x - config.behind_relevance_limit - extra, nb.v));
            } else {
                s.target_front = None;
            }
            s
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Disagreement {
    /// Index of the state in the evaluated set.
    pub index: usize,
    pub state: ScenarioState,
    pub expected: Action,
    pub actual: Action,
    pub d_nb: Option<f64>,
    pub target_front_present: bool,
    pub in_training_domain: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub total: usize,
    pub agree: usize,
    pub accuracy: f64,
    pub disagreements: Vec<Disagreement>,
}

/// Compare two policies on the same states. `expected` is the ground truth
/// (reference driver, human), `actual` the agent under test.
pub fn agreement(
    expected: &dyn Policy,
    actual: &dyn Policy,
    states: &[ScenarioState],
    config: &ScenarioConfig,
) -> AgreementReport {
    let mut disagreements = Vec::new();
    for (index, s) in states.iter().enumerate() {
        let (e, a) = (expected.decide(s), actual.decide(s));
        if e != a {
            disagreements.push(Disagreement {
                index,
                state: *s,
                expected: e,
                actual: a,
                d_nb: s.behind_distance(),
                target_front_present: s.target_front.is_some(),
                in_training_domain: s.in_training_domain(config),
            });
        }
    }
    let total = states.len();
    let agree = total - disagreements.len();
    AgreementReport {
        total,
        agree,
        accuracy: if total == 0 { 0.0 } else { agree as f64 / total as f64 },
        disagreements,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaeTriple {
    pub tf: Option<f64>,
    pub tnf: Option<f64>,
    pub dvnb: Option<f64>,
}

impl MaeTriple {
    pub fn compute(points: &[LaneChangePoint], profile: &StyleProfile, config: &IndicatorConfig) -> Self {
        let m = |i| mae(points, profile, i, config).ok();
        Self {
            tf: m(Indicator::Tf),
            tnf: m(Indicator::Tnf),
            dvnb: m(Indicator::DvNb),
        }
    }
}

/// One entry of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub style: String,
    pub agent_kind: AgentKind,
    pub mae: MaeTriple,
    pub accuracy: Option<f64>,
    /// Number of lane-change points.
    pub n: usize,
}

/// A lane-change point tagged with the style it was evaluated against.
#[derive(Debug, Clone, PartialEq)]
pub struct StyledPoint {
    pub style: String,
    pub point: LaneChangePoint,
}

pub const POINTS_HEADER: &str = "v_e,t_f,t_nf,dv_nb,agent_kind,style";

pub fn points_csv(points: &[StyledPoint]) -> String {
    let mut out = String::from(POINTS_HEADER);
    out.push('\n');
    for p in points {
        let ind = &p.point.indicators;
        let dv = if ind.dv_nb_relevant { ind.dv_nb.to_string() } else { String::new() };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            p.point.v_e,
            ind.t_f,
            ind.t_nf,
            dv,
            p.point.agent_kind.as_str(),
            p.style
        );
    }
    out
}

/// Write `points.csv` and `summary.json` into `dir`. Output bytes depend
/// only on the inputs.
pub fn export_results(points: &[StyledPoint], summaries: &[EvalSummary], dir: &Path) -> Result<(), EvalError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("points.csv"), points_csv(points))?;
    let mut json = serde_json::to_string_pretty(summaries)?;
    json.push('\n');
    fs::write(dir.join("summary.json"), json)?;
    Ok(())
}

/// Write traces as JSON Lines, one record per decision step.
pub fn write_traces(traces: &[Vec<TraceRecord>], path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for rec in traces.iter().flatten() {
        out.push_str(&serde_json::to_string(rec)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
