//! DQN training and the greedy benchmark agent.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{compute_indicators, IndicatorError, StyleProfile, BUILTIN_STYLES};
use crate::qnet::{Network, Optimizer, OptimizerKind, QNetError, QSample, RngState};
use crate::reward::{reward_pair, total_reward, RewardError, RewardParams};
use crate::seed::{self, Rng};
use crate::sim::{
    normalize_state, sample_initial_state, step, Action, NormalizedState, ScenarioConfig, ScenarioState, SimError,
    Termination,
};

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("replay buffer holds {have} transitions, training needs {need}")]
    InsufficientReplay { have: usize, need: usize },
    #[error("training diverged at episode {episode}: non-finite loss (diagnostic checkpoint: {checkpoint:?})")]
    Diverged { episode: u64, checkpoint: Option<PathBuf> },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Indicator(#[from] IndicatorError),
    #[error(transparent)]
    Network(#[from] QNetError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// One stored experience.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub state: NormalizedState,
    pub action: Action,
    /// Total personalization reward, in `[0, 3]`.
    pub reward: f64,
    pub next_state: NormalizedState,
    /// Lane changes, and optionally forced stops. Episodes cut at the step
    /// cap always bootstrap.
    pub terminal: bool,
}

/// Fixed-capacity FIFO experience store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    next: usize,
    inserted: u64,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity),
            capacity,
            next: 0,
            inserted: 0,
        }
    }

    pub fn push(&mut self, t: Transition) {
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        self.inserted += 1;
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn inserted(&self) -> u64 {
        self.inserted
    }

    /// Stored transitions from oldest to newest.
    pub fn iter_oldest_first(&self) -> impl Iterator<Item = &Transition> {
        let split = if self.items.len() < self.capacity { 0 } else { self.next };
        self.items[split..].iter().chain(&self.items[..split])
    }

    /// Uniform sample with replacement.
    pub fn sample<'a>(&'a self, n: usize, rng: &mut Rng) -> Vec<&'a Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// Style selection inside a training config: a builtin name, a path to a
/// profile JSON file, or an inline profile.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StyleRef {
    Named(String),
    Inline(StyleProfile),
}

impl StyleRef {
    pub fn resolve(&self) -> Result<StyleProfile, AgentError> {
        match self {
            StyleRef::Inline(p) => {
                p.validate()?;
                Ok(p.clone())
            }
            StyleRef::Named(name) if BUILTIN_STYLES.contains(&name.to_ascii_lowercase().as_str()) => {
                Ok(StyleProfile::builtin(name)?)
            }
            StyleRef::Named(path) if Path::new(path).is_file() => Ok(StyleProfile::from_json(&fs::read_to_string(path)?)?),
            StyleRef::Named(name) => Err(IndicatorError::UnknownStyle(name.clone()).into()),
        }
    }
}

/// Training hyperparameters. Missing keys take the defaults below.
/// The maximal episode step count lives in `scenario.max_steps`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub gamma: f64,
    pub replay_capacity: usize,
    /// Transitions collected before the first gradient step.
    pub replay_warmup: usize,
    pub minibatch_size: usize,
    /// Target network is synchronized every this many episodes.
    pub target_update_episodes: u64,
    pub episodes: u64,
    pub seed: u64,
    pub style: StyleRef,
    pub reward: RewardParams,
    pub scenario: ScenarioConfig,
    pub optimizer: OptimizerKind,
    /// Write a periodic checkpoint every this many episodes (0 disables).
    pub checkpoint_every: u64,
    pub terminal_target: TerminalTarget,
    /// Store forced stops as true terminals instead of bootstrapping them.
    pub forced_stop_terminal: bool,
    /// Store step-cap truncations as true terminals instead of bootstrapping.
    pub max_steps_terminal: bool,
}

/// Regression target for transitions that end in a lane change.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminalTarget {
    /// `y = r`: the episode ends and nothing follows.
    Reward,
    /// `y = r / (1 - gamma)`: the lane-change reward is treated as repeating
    /// forever, the value of an absorbing state.
    Absorbing,
}

impl TerminalTarget {
    pub fn value(self, reward: f64, gamma: f64) -> f64 {
        match self {
            TerminalTarget::Reward => reward,
            TerminalTarget::Absorbing => reward / (1.0 - gamma),
        }
    }
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.005,
            epsilon_start: 0.8,
            epsilon_end: 0.1,
            gamma: 0.98,
            replay_capacity: 10_000,
            replay_warmup: 2_000,
            minibatch_size: 32,
            target_update_episodes: 20,
            episodes: 10_000,
            seed: 2022,
            style: StyleRef::Named("normal".into()),
            reward: RewardParams::default(),
            scenario: ScenarioConfig::default(),
            optimizer: OptimizerKind::Adam,
            checkpoint_every: 1_000,
            terminal_target: TerminalTarget::Absorbing,
            forced_stop_terminal: false,
            max_steps_terminal: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), AgentError> {
        let bad = |m: &str| Err(AgentError::InvalidConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.gamma >= 1.0 && self.terminal_target != TerminalTarget::Reward {
            return bad("absorbing terminal targets need gamma < 1");
        }
        if !(0.0..=1.0).contains(&self.epsilon_start) || !(0.0..=1.0).contains(&self.epsilon_end) {
            return bad("epsilons must lie in [0, 1]");
        }
        if self.epsilon_end > self.epsilon_start {
            return bad("epsilon_end must not exceed epsilon_start");
        }
        if self.replay_capacity == 0 || self.minibatch_size == 0 {
            return bad("replay_capacity and minibatch_size must be positive");
        }
        if self.replay_warmup > self.replay_capacity {
            return bad("replay_warmup must not exceed replay_capacity");
        }
        if self.minibatch_size > self.replay_warmup {
            return bad("minibatch_size must not exceed replay_warmup");
        }
        if self.target_update_episodes == 0 {
            return bad("target_update_episodes must be positive");
        }
        self.reward.validate()?;
        self.scenario.validate()?;
        Ok(())
    }
}

/// Linear exploration decay from `start` at episode 0 to `end` at episode
/// `episodes`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSchedule {
    pub start: f64,
    pub end: f64,
    pub episodes: u64,
}

impl EpsilonSchedule {
    pub fn at(&self, episode: u64) -> f64 {
        let frac = if self.episodes == 0 {
            1.0
        } else {
            (episode as f64 / self.episodes as f64).min(1.0)
        };
        self.start + (self.end - self.start) * frac
    }
}

/// Greedy action over Q-values; ties go to KEEP.
pub fn greedy_action(q: [f64; 2]) -> Action {
    if q[Action::Change.index()] > q[Action::Keep.index()] {
        Action::Change
    } else {
        Action::Keep
    }
}

/// Epsilon-greedy selection.
pub fn select_action(net: &Network, state: &NormalizedState, epsilon: f64, rng: &mut Rng) -> Result<Action, AgentError> {
    if rng.random::<f64>() < epsilon {
        return Ok(if rng.random_bool(0.5) { Action::Change } else { Action::Keep });
    }
    Ok(greedy_action(net.q_values(state)?))
}

/// Online and target networks with their optimizer and sampling RNG.
#[derive(Debug, Clone)]
pub struct Agent {
    pub online: Network,
    pub target: Network,
    pub optimizer: Optimizer,
    pub rng: Rng,
}

impl Agent {
    pub fn new(config: &TrainingConfig) -> Self {
        let online = Network::init(seed::derive(config.seed, "network-init"));
        Self {
            target: online.clone(),
            optimizer: Optimizer::new(config.optimizer, config.learning_rate, &online),
            online,
            rng: seed::rng_for(config.seed, "agent"),
        }
    }

    /// Copy the online weights into the target network.
    pub fn sync_target(&mut self) {
        self.target.clone_from(&self.online);
    }

    /// Regression targets for a minibatch: `terminal.value(r, gamma)` for
    /// terminal CHANGE transitions, `r` for other terminals and
    /// `r + gamma * max_a' Q(s', a'; target)` otherwise.
    pub fn targets(
        &self,
        batch: &[&Transition],
        gamma: f64,
        terminal: TerminalTarget,
    ) -> Result<Vec<f64>, AgentError> {
        let bootstrap: Vec<usize> = (0..batch.len())
            .filter(|&i| !batch[i].terminal && gamma != 0.0)
            .collect();
        let mut ys: Vec<f64> = batch
            .iter()
            .map(|t| match (t.terminal, t.action) {
                (true, Action::Change) => terminal.value(t.reward, gamma),
                _ => t.reward,
            })
            .collect();
        if bootstrap.is_empty() {
            return Ok(ys);
        }
        let inputs: Vec<f64> = bootstrap
            .iter()
            .flat_map(|&i| batch[i].next_state.0)
            .collect();
        let q = self.target.forward_batch(&inputs, bootstrap.len())?;
        for (k, &i) in bootstrap.iter().enumerate() {
            ys[i] += gamma * q[2 * k].max(q[2 * k + 1]);
        }
        Ok(ys)
    }

    /// One minibatch gradient step on the online network; returns the loss.
    pub fn train_step(&mut self, buffer: &ReplayBuffer, config: &TrainingConfig) -> Result<f64, AgentError> {
        let need = config.replay_warmup.max(config.minibatch_size);
        if buffer.len() < need {
            return Err(AgentError::InsufficientReplay { have: buffer.len(), need });
        }
        let batch = buffer.sample(config.minibatch_size, &mut self.rng);
        let ys = self.targets(&batch, config.gamma, config.terminal_target)?;
        let samples: Vec<QSample<'_>> = batch
            .iter()
            .zip(&ys)
            .map(|(t, &y)| QSample {
                input: t.state.as_slice(),
                action: t.action.index(),
                target: y,
            })
            .collect();
        let (grads, loss) = self.online.backward(&samples)?;
        self.optimizer.apply_update(&mut self.online, &grads)?;
        Ok(loss)
    }
}

/// Greedy one-step benchmark: pick the action with the larger immediate
/// personalization reward; ties go to KEEP.
pub fn benchmark_decide(
    state: &ScenarioState,
    profile: &StyleProfile,
    params: &RewardParams,
    config: &ScenarioConfig,
) -> Result<Action, AgentError> {
    let ind = compute_indicators(state, config);
    let refs = profile.reference_for(state, &config.indicators);
    let (change, keep) = reward_pair(&ind, &refs, params)?;
    Ok(if change.total > keep.total { Action::Change } else { Action::Keep })
}

/// Per-episode training metrics (one CSV row).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub episode: u64,
    /// Mean total reward of the actions taken in the episode.
    pub step_reward: f64,
    /// Mean minibatch loss over the episode's gradient steps, if any ran.
    pub loss: Option<f64>,
    pub steps: u32,
    pub termination: Termination,
    pub epsilon: f64,
}

pub const METRICS_HEADER: &str = "episode,step_reward,loss,steps,termination,epsilon";

impl EpisodeMetrics {
    pub fn csv_row(&self) -> String {
        let loss = self.loss.map(|l| l.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{}",
            self.episode,
            self.step_reward,
            loss,
            self.steps,
            self.termination.as_str(),
            self.epsilon
        )
    }
}

pub fn metrics_csv(rows: &[EpisodeMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Stateful DQN training loop, one episode at a time.
pub struct Trainer {
    pub config: TrainingConfig,
    pub profile: StyleProfile,
    pub agent: Agent,
    pub buffer: ReplayBuffer,
    pub schedule: EpsilonSchedule,
    env_rng: Rng,
    explore_rng: Rng,
    episode: u64,
}

impl Trainer {
    pub fn new(config: TrainingConfig) -> Result<Self, AgentError> {
        config.validate()?;
        let profile = config.style.resolve()?;
        Ok(Self {
            agent: Agent::new(&config),
            buffer: ReplayBuffer::new(config.replay_capacity),
            schedule: EpsilonSchedule {
                start: config.epsilon_start,
                end: config.epsilon_end,
                episodes: config.episodes,
            },
            env_rng: seed::rng_for(config.seed, "scenario"),
            explore_rng: seed::rng_for(config.seed, "explore"),
            episode: 0,
            profile,
            config,
        })
    }

    pub fn episode(&self) -> u64 {
        self.episode
    }

    pub fn run_episode(&mut self) -> Result<EpisodeMetrics, AgentError> {
        let episode = self.episode;
        if episode % self.config.target_update_episodes == 0 {
            self.agent.sync_target();
        }
        let epsilon = self.schedule.at(episode);
        let scenario = &self.config.scenario;
        let mut state = sample_initial_state(scenario, &mut self.env_rng)?;
        let mut reward_sum = 0.0;
        let mut loss_sum = 0.0;
        let mut loss_count = 0u32;
        let mut steps = 0u32;
        let termination = loop {
            let s = normalize_state(&state, scenario);
            let action = select_action(&self.agent.online, &s, epsilon, &mut self.explore_rng)?;
            let ind = compute_indicators(&state, scenario);
            let refs = self.profile.reference_for(&state, &scenario.indicators);
            let reward = total_reward(&ind, &refs, action, &self.config.reward)?.total;
            let result = step(&state, action, scenario)?;
            self.buffer.push(Transition {
                state: s,
                action,
                reward,
                next_state: normalize_state(&result.state, scenario),
                terminal: match result.termination {
                    Some(Termination::Changed) => true,
                    Some(Termination::ForcedStop) => self.config.forced_stop_terminal,
                    Some(Termination::MaxSteps) => self.config.max_steps_terminal,
                    None => false,
                },
            });
            if self.buffer.len() >= self.config.replay_warmup {
                let loss = self.agent.train_step(&self.buffer, &self.config)?;
                if !loss.is_finite() {
                    return Err(AgentError::Diverged { episode, checkpoint: None });
                }
                loss_sum += loss;
                loss_count += 1;
            }
            steps += 1;
            reward_sum += reward;
            if let Some(t) = result.termination {
                break t;
            }
            state = result.state;
        };
        self.episode += 1;
        Ok(EpisodeMetrics {
            episode,
            step_reward: reward_sum / f64::from(steps),
            loss: (loss_count > 0).then(|| loss_sum / f64::from(loss_count)),
            steps,
            termination,
            epsilon,
        })
    }

    pub fn checkpoint(&self) -> crate::qnet::Checkpoint {
        self.agent.online.to_checkpoint(Some(RngState::capture(&self.agent.rng)))
    }
}

/// Everything a finished training run produced.
#[derive(Debug, Clone)]
pub struct TrainingRun {
    pub network: Network,
    pub metrics: Vec<EpisodeMetrics>,
}

/// Train for `config.episodes` episodes.
///
/// With an output directory, writes `metrics.csv`, periodic
/// `checkpoints/episode_<n>.json` and `checkpoint.json`; on divergence a
/// `diagnostic_checkpoint.json` is written before the error is returned.
pub fn run_training(config: &TrainingConfig, out_dir: Option<&Path>) -> Result<TrainingRun, AgentError> {
    let mut trainer = Trainer::new(config.clone())?;
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir.join("checkpoints"))?;
    }
    let mut metrics = Vec::with_capacity(config.episodes as usize);
    info!(
        "training style {} for {} episodes (seed {})",
        trainer.profile.name, config.episodes, config.seed
    );
    for _ in 0..config.episodes {
        let row = match trainer.run_episode() {
            Ok(row) => row,
            Err(AgentError::Diverged { episode, .. }) => {
                let checkpoint = match out_dir {
                    Some(dir) => {
                        let path = dir.join("diagnostic_checkpoint.json");
                        trainer.checkpoint().save(&path)?;
                        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(AgentError::Diverged { episode, checkpoint });
            }
            Err(e) => return Err(e),
        };
        let episode = row.episode;
        if episode % 500 == 0 {
            debug!("episode {episode}: {}", row.csv_row());
        }
        metrics.push(row);
        if let Some(dir) = out_dir {
            if config.checkpoint_every > 0 && (episode + 1) % config.checkpoint_every == 0 {
                trainer
                    .checkpoint()
                    .save(&dir.join("checkpoints").join(format!("episode_{}.json", episode + 1)))?;
            }
        }
    }
    if let Some(dir) = out_dir {
        fs::write(dir.join("metrics.csv"), metrics_csv(&metrics))?;
        trainer.checkpoint().save(&dir.join("checkpoint.json"))?;
    }
    Ok(TrainingRun {
        network: trainer.agent.online,
        metrics,
    })
}

/// Trailing moving average with the given window (shorter at the start).
pub fn smoothed(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for i in 0..values.len() {
        sum += values[i];
        if i >= window {
            sum -= values[i - window];
        }
        out.push(sum / (i + 1).min(window) as f64);
    }
    out
}
