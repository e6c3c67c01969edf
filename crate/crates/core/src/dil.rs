//! Driver-in-the-loop sessions.
//!
//! [`Session`] is a transport-free state machine: inbound client messages are
//! queued with [`Session::handle_message`] and consumed at tick boundaries by
//! [`Session::advance`]. [`Server`] wraps it in a TCP listener speaking
//! newline-delimited JSON, one session per connection.
//!
//! Attribution rule: a `lane_change` received after tick `k` was produced is
//! applied at the next boundary, after the environment has advanced to tick
//! `k + 1`. The CHANGE record therefore holds the tick `k + 1` snapshot, so
//! keypress-to-tick latency is at most one tick.

use std::collections::VecDeque;
use std::fs;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::indicators::{compute_indicators, DecisionRecord};
use crate::seed;
use crate::sim::{sample_initial_state, step, Action, ScenarioConfig, ScenarioState, SimError, Termination};

pub const DEFAULT_TICK_HZ: f64 = 10.0;

pub const ATTRIBUTION_RULE: &str =
    "a lane_change received after tick k is attributed to tick k+1 (latency bounded by one tick)";

#[derive(Debug, Error)]
pub enum DilError {
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid server config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ClientMessage {
    Start {
        driver_id: String,
        seed: u64,
        episodes: u32,
    },
    LaneChange,
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireVehicle {
    pub x: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WireIndicators {
    pub tf: f64,
    pub tnf: f64,
    /// Absent when the follower is beyond the relevance limit.
    pub dvnb: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Waiting,
    Running,
    Completed,
    Aborted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSummary {
    pub session_id: String,
    pub driver_id: String,
    pub status: SessionStatus,
    pub episodes_completed: u32,
    pub change_records: usize,
    pub keep_records: usize,
    pub attribution_rule: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Tick {
        t: f64,
        episode: u32,
        /// Tick index within the episode.
        tick: u32,
        ego: WireVehicle,
        f: WireVehicle,
        nf: Option<WireVehicle>,
        nb: Option<WireVehicle>,
        indicators: WireIndicators,
    },
    EpisodeEnd {
        episode: u32,
        termination: Termination,
        ticks: u32,
    },
    SessionSummary(SessionSummary),
    Error {
        reason: String,
    },
}

/// Tick message for a state, with positions relative to the ego vehicle.
pub fn tick_payload(state: &ScenarioState, episode: u32, config: &ScenarioConfig) -> ServerMessage {
    let rel = |v: crate::sim::VehicleState| WireVehicle {
        x: v.x - state.ego.x,
        v: v.v,
    };
    let ind = compute_indicators(state, config);
    ServerMessage::Tick {
        t: state.t,
        episode,
        tick: state.step_index,
        ego: rel(state.ego),
        f: rel(state.front),
        nf: state.target_front.map(rel),
        nb: state.target_behind.map(rel),
        indicators: WireIndicators {
            tf: ind.t_f,
            tnf: ind.t_nf,
            dvnb: ind.dv_nb_relevant.then_some(ind.dv_nb),
        },
    }
}

#[derive(Debug)]
enum Pending {
    LaneChange { received_at: Option<String> },
    Stop,
}

/// One driver's session.
#[derive(Debug)]
pub struct Session {
    pub id: String,
    pub config: ScenarioConfig,
    pub driver_id: String,
    pub status: SessionStatus,
    pub records: Vec<DecisionRecord>,
    seed: u64,
    episodes: u32,
    /// 1-based index of the running episode.
    episode: u32,
    episodes_completed: u32,
    state: Option<ScenarioState>,
    queue: VecDeque<Pending>,
}

impl Session {
    pub fn new(id: impl Into<String>, config: ScenarioConfig) -> Self {
        Self {
            id: id.into(),
            config,
            driver_id: String::new(),
            status: SessionStatus::Waiting,
            records: Vec::new(),
            seed: 0,
            episodes: 0,
            episode: 0,
            episodes_completed: 0,
            state: None,
            queue: VecDeque::new(),
        }
    }

    pub fn current_state(&self) -> Option<&ScenarioState> {
        self.state.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        matches!(self.status, SessionStatus::Completed | SessionStatus::Aborted)
    }

    /// Parse and queue one inbound line. `start` takes effect immediately and
    /// returns the first tick; everything else waits for the next boundary.
    /// Malformed input aborts the session.
    pub fn handle_message(&mut self, line: &str, received_at: Option<String>) -> Vec<ServerMessage> {
        if self.is_finished() {
            return Vec::new();
        }
        let msg = match serde_json::from_str::<ClientMessage>(line) {
            Ok(m) => m,
            Err(e) => return self.fail(format!("malformed message: {e}")),
        };
        match (msg, &self.status) {
            (ClientMessage::Start { driver_id, seed, episodes }, SessionStatus::Waiting) => {
                if episodes == 0 {
                    return self.fail("episodes must be positive".into());
                }
                self.driver_id = driver_id;
                self.seed = seed;
                self.episodes = episodes;
                self.status = SessionStatus::Running;
                match self.begin_episode(1) {
                    Ok(tick) => vec![tick],
                    Err(e) => self.fail(e.to_string()),
                }
            }
            (ClientMessage::Start { .. }, _) => self.fail("session already started".into()),
            (ClientMessage::LaneChange, SessionStatus::Running) => {
                self.queue.push_back(Pending::LaneChange { received_at });
                Vec::new()
            }
            (ClientMessage::Stop, SessionStatus::Running) => {
                self.queue.push_back(Pending::Stop);
                Vec::new()
            }
            (_, _) => self.fail("session not started".into()),
        }
    }

    /// Consume queued input and move to the next tick.
    pub fn advance(&mut self) -> Vec<ServerMessage> {
        if self.status != SessionStatus::Running {
            return Vec::new();
        }
        let mut lane_change = None;
        let mut stop = false;
        while let Some(p) = self.queue.pop_front() {
            match p {
                Pending::LaneChange { received_at } => {
                    // Repeated presses within one tick count once.
                    lane_change.get_or_insert(received_at);
                }
                Pending::Stop => stop = true,
            }
        }
        if stop {
            return self.finish(SessionStatus::Completed);
        }
        match self.advance_inner(lane_change) {
            Ok(out) => out,
            Err(e) => self.fail(e.to_string()),
        }
    }

    /// Client went away: keep what was collected, mark the session aborted.
    pub fn disconnect(&mut self) -> Vec<ServerMessage> {
        if self.is_finished() {
            return Vec::new();
        }
        self.finish(SessionStatus::Aborted)
    }

    pub fn summary(&self) -> SessionSummary {
        SessionSummary {
            session_id: self.id.clone(),
            driver_id: self.driver_id.clone(),
            status: self.status.clone(),
            episodes_completed: self.episodes_completed,
            change_records: self.records.iter().filter(|r| r.decision == Action::Change).count(),
            keep_records: self.records.iter().filter(|r| r.decision == Action::Keep).count(),
            attribution_rule: ATTRIBUTION_RULE.to_string(),
        }
    }

    /// DecisionRecord log as JSON Lines.
    pub fn log_jsonl(&self) -> Result<String, DilError> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    fn begin_episode(&mut self, episode: u32) -> Result<ServerMessage, DilError> {
        let mut rng = seed::rng_indexed(self.seed, "dil-episode", u64::from(episode));
        let state = sample_initial_state(&self.config, &mut rng)?;
        self.episode = episode;
        self.state = Some(state);
        Ok(tick_payload(&state, episode, &self.config))
    }

    fn advance_inner(&mut self, lane_change: Option<Option<String>>) -> Result<Vec<ServerMessage>, DilError> {
        let current = self.state.expect("running session has a state");
        let result = step(&current, Action::Keep, &self.config)?;
        let mut out = Vec::new();
        let termination = match result.termination {
            Some(t) => {
                self.records.push(self.record(current, Action::Keep, None));
                Some((t, current.step_index))
            }
            None => {
                let next = result.state;
                self.state = Some(next);
                out.push(tick_payload(&next, self.episode, &self.config));
                lane_change.map(|received_at| {
                    self.records.push(self.record(next, Action::Change, received_at));
                    (Termination::Changed, next.step_index)
                })
            }
        };
        if let Some((termination, last_tick)) = termination {
            out.push(ServerMessage::EpisodeEnd {
                episode: self.episode,
                termination,
                ticks: last_tick + 1,
            });
            self.episodes_completed += 1;
            if self.episode >= self.episodes {
                out.extend(self.finish(SessionStatus::Completed));
            } else {
                out.push(self.begin_episode(self.episode + 1)?);
            }
        }
        Ok(out)
    }

    fn record(&self, state: ScenarioState, decision: Action, wall_time: Option<String>) -> DecisionRecord {
        let mut r = DecisionRecord::new(state, compute_indicators(&state, &self.config), decision, &self.driver_id);
        r.wall_time = wall_time;
        r
    }

    fn finish(&mut self, status: SessionStatus) -> Vec<ServerMessage> {
        self.status = status;
        self.state = None;
        self.queue.clear();
        vec![ServerMessage::SessionSummary(self.summary())]
    }

    fn fail(&mut self, reason: String) -> Vec<ServerMessage> {
        warn!("session {}: {reason}", self.id);
        let mut out = vec![ServerMessage::Error { reason }];
        out.extend(self.finish(SessionStatus::Aborted));
        out
    }
}

/// Drive a session without a transport: `change_ticks[i]` is the tick of
/// episode `i + 1` after which a lane change is pressed (attributed to the
/// following tick), or `None` to never press.
pub fn scripted_session(
    config: &ScenarioConfig,
    driver_id: &str,
    seed: u64,
    change_ticks: &[Option<u32>],
) -> Result<(Session, Vec<ServerMessage>), DilError> {
    let mut session = Session::new(format!("scripted-{seed}"), config.clone());
    let start = ClientMessage::Start {
        driver_id: driver_id.to_string(),
        seed,
        episodes: change_ticks.len() as u32,
    };
    let mut transcript = session.handle_message(&serde_json::to_string(&start)?, None);
    let lane_change = serde_json::to_string(&ClientMessage::LaneChange)?;
    while !session.is_finished() {
        if let Some(ServerMessage::Tick { episode, tick, .. }) = transcript.last() {
            if change_ticks[*episode as usize - 1] == Some(*tick) {
                session.handle_message(&lane_change, None);
            }
        }
        transcript.extend(session.advance());
    }
    Ok((session, transcript))
}

/// Listener settings for [`Server`].
#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub scenario: ScenarioConfig,
    pub log_dir: PathBuf,
    /// Tick rate in Hz. Zero runs ticks back to back.
    pub tick_hz: f64,
}

impl ServerConfig {
    pub fn new(scenario: ScenarioConfig, log_dir: impl Into<PathBuf>) -> Self {
        Self {
            scenario,
            log_dir: log_dir.into(),
            tick_hz: DEFAULT_TICK_HZ,
        }
    }
}

pub struct Server {
    listener: TcpListener,
    config: Arc<ServerConfig>,
}

impl Server {
    pub fn bind(addr: impl std::net::ToSocketAddrs, config: ServerConfig) -> Result<Self, DilError> {
        config.scenario.validate()?;
        if !(config.tick_hz >= 0.0 && config.tick_hz.is_finite()) {
            return Err(DilError::InvalidConfig(format!("tick rate {}", config.tick_hz)));
        }
        fs::create_dir_all(&config.log_dir)?;
        Ok(Self {
            listener: TcpListener::bind(addr)?,
            config: Arc::new(config),
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, DilError> {
        Ok(self.listener.local_addr()?)
    }

    /// Accept connections forever, one thread per session.
    pub fn run(self) -> Result<(), DilError> {
        info!("dil service listening on {}", self.local_addr()?);
        let counter = AtomicU64::new(0);
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    warn!("accept failed: {e}");
                    continue;
                }
            };
            let id = format!("session-{}", counter.fetch_add(1, Ordering::Relaxed));
            let config = Arc::clone(&self.config);
            thread::spawn(move || {
                if let Err(e) = handle_connection(stream, &id, &config) {
                    warn!("{id}: {e}");
                }
            });
        }
        Ok(())
    }
}

enum Inbound {
    Line(String, String),
    Closed,
}

/// Run one session over a connected socket and write its log on exit.
pub fn handle_connection(stream: TcpStream, id: &str, config: &ServerConfig) -> Result<SessionSummary, DilError> {
    stream.set_nodelay(true)?;
    let reader = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(reader).lines() {
            match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => {
                    let now = chrono::Utc::now().to_rfc3339();
                    if tx.send(Inbound::Line(l, now)).is_err() {
                        return;
                    }
                }
                Err(_) => break,
            }
        }
        let _ = tx.send(Inbound::Closed);
    });

    let mut writer = io::BufWriter::new(stream);
    let mut session = Session::new(id, config.scenario.clone());
    let period = (config.tick_hz > 0.0).then(|| Duration::from_secs_f64(1.0 / config.tick_hz));
    let mut next_tick = Instant::now();
    let mut closed = false;

    while !session.is_finished() {
        let mut out = Vec::new();
        if session.status == SessionStatus::Waiting {
            match rx.recv() {
                Ok(Inbound::Line(l, now)) => out.extend(session.handle_message(&l, Some(now))),
                Ok(Inbound::Closed) | Err(_) => {
                    closed = true;
                    out.extend(session.disconnect());
                }
            }
            next_tick = Instant::now() + period.unwrap_or_default();
        } else {
            // Collect input until the boundary, then advance exactly one tick.
            loop {
                let wait = next_tick.saturating_duration_since(Instant::now());
                let msg = if wait.is_zero() {
                    match rx.try_recv() {
                        Ok(m) => Some(m),
                        Err(mpsc::TryRecvError::Empty) => None,
                        Err(mpsc::TryRecvError::Disconnected) => Some(Inbound::Closed),
                    }
                } else {
                    match rx.recv_timeout(wait) {
                        Ok(m) => Some(m),
                        Err(RecvTimeoutError::Timeout) => None,
                        Err(RecvTimeoutError::Disconnected) => Some(Inbound::Closed),
                    }
                };
                match msg {
                    Some(Inbound::Line(l, now)) => out.extend(session.handle_message(&l, Some(now))),
                    Some(Inbound::Closed) => {
                        closed = true;
                        out.extend(session.disconnect());
                        break;
                    }
                    None if Instant::now() >= next_tick => break,
                    None => {}
                }
                if session.is_finished() {
                    break;
                }
            }
            if !session.is_finished() {
                out.extend(session.advance());
            }
            // A slow client stalls the clock instead of losing ticks.
            next_tick = match period {
                Some(p) => (next_tick + p).max(Instant::now()),
                None => Instant::now(),
            };
        }
        if !closed && send_all(&mut writer, &out).is_err() {
            closed = true;
            session.disconnect();
        }
    }
    write_log(&session, &config.log_dir)?;
    Ok(session.summary())
}

fn send_all(writer: &mut impl Write, messages: &[ServerMessage]) -> Result<(), DilError> {
    for m in messages {
        serde_json::to_writer(&mut *writer, m)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Write `<id>.jsonl` (DecisionRecords) and `<id>.summary.json`.
pub fn write_log(session: &Session, dir: &Path) -> Result<(), DilError> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(format!("{}.jsonl", session.id)), session.log_jsonl()?)?;
    let mut summary = serde_json::to_string_pretty(&session.summary())?;
    summary.push('\n');
    fs::write(dir.join(format!("{}.summary.json", session.id)), summary)?;
    Ok(())
}
