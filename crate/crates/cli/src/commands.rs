use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use log::info;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;

use lanechange::agent::{run_training, smoothed, AgentError, StyleRef, TrainingConfig};
use lanechange::dil::{Server, ServerConfig};
use lanechange::eval::{
    agreement, export_results, out_of_domain_states, run_rollouts, sample_eval_states, write_traces, AgentKind,
    AgreementReport, BenchmarkPolicy, EvalError, EvalSummary, MaeTriple, QPolicy, ReferenceDriver, StyledPoint,
    DEFAULT_TOLERANCES,
};
use lanechange::indicators::{
    cluster_styles, fit_profile_ols, pearson_correlation, DecisionRecord, IndicatorError, StyleProfile,
};
use lanechange::qnet::{Network, QNetError};
use lanechange::seed;
use lanechange::sim::{replay_trace, Action, ScenarioConfig, SimError, TraceRecord};

use crate::manifest::RunManifest;
use crate::{CompareArgs, EvalArgs, FitArgs, ReplayArgs, ServeArgs, TrainArgs};

fn indicator_kind(e: &IndicatorError) -> &'static str {
    match e {
        IndicatorError::DegenerateDesign(_) => "degenerate_design",
        IndicatorError::TooFewSamples { .. } => "too_few_samples",
        IndicatorError::InconsistentRecord(_) => "inconsistent_record",
        IndicatorError::InvalidConfig(_) => "invalid_config",
        IndicatorError::UnknownStyle(_) | IndicatorError::Parse(_) => "invalid_style",
        IndicatorError::Sim(e) => sim_kind(e),
        _ => "indicator",
    }
}

fn sim_kind(e: &SimError) -> &'static str {
    match e {
        SimError::InvalidConfig(_) => "invalid_config",
        _ => "simulation",
    }
}

/// Machine-readable category of a failure, from the innermost known cause.
pub fn error_kind(e: &anyhow::Error) -> &'static str {
    for cause in e.chain() {
        if let Some(e) = cause.downcast_ref::<IndicatorError>() {
            return indicator_kind(e);
        }
        if let Some(e) = cause.downcast_ref::<AgentError>() {
            // Transparent variants hide the wrapped error from the source chain.
            match e {
                AgentError::InvalidConfig(_) => return "invalid_config",
                AgentError::Diverged { .. } => return "diverged",
                AgentError::Indicator(e) => return indicator_kind(e),
                AgentError::Sim(e) => return sim_kind(e),
                AgentError::Network(_) => return "checkpoint",
                _ => continue,
            }
        }
        if let Some(e) = cause.downcast_ref::<SimError>() {
            return sim_kind(e);
        }
        if cause.downcast_ref::<QNetError>().is_some() {
            return "checkpoint";
        }
        if cause.downcast_ref::<EvalError>().is_some() {
            return "evaluation";
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return "parse";
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return "io";
        }
        if cause.downcast_ref::<ReplayMismatch>().is_some() {
            return "replay_mismatch";
        }
    }
    "error"
}

#[derive(Debug)]
struct ReplayMismatch(usize);

impl std::fmt::Display for ReplayMismatch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} trace records do not replay", self.0)
    }
}

impl std::error::Error for ReplayMismatch {}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<(T, Vec<u8>)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let value = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    Ok((value, bytes))
}

fn training_config(path: Option<&Path>) -> Result<(TrainingConfig, Option<Vec<u8>>)> {
    match path {
        Some(p) => {
            let (cfg, raw) = read_json::<TrainingConfig>(p)?;
            Ok((cfg, Some(raw)))
        }
        None => Ok((TrainingConfig::default(), None)),
    }
}

/// A scenario config file, or the `scenario` block of a training config.
fn scenario_config(path: Option<&Path>) -> Result<(ScenarioConfig, Option<Vec<u8>>)> {
    let Some(p) = path else {
        return Ok((ScenarioConfig::default(), None));
    };
    let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
    let cfg = match serde_json::from_slice::<ScenarioConfig>(&bytes) {
        Ok(c) => c,
        Err(scenario_err) => match serde_json::from_slice::<TrainingConfig>(&bytes) {
            Ok(t) => t.scenario,
            Err(_) => return Err(anyhow!(scenario_err).context(format!("parsing {}", p.display()))),
        },
    };
    cfg.validate()?;
    Ok((cfg, Some(bytes)))
}

fn resolve_style(style: &str) -> Result<StyleProfile> {
    StyleRef::Named(style.to_string())
        .resolve()
        .with_context(|| format!("resolving style {style:?}"))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

pub fn fit(args: FitArgs) -> Result<()> {
    let (scenario, raw) = scenario_config(args.scenario.as_deref())?;
    let out_dir = match args.out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let manifest = RunManifest::new(
        "fit",
        args.scenario.as_deref(),
        raw.as_deref(),
        json!({ "scenario": scenario, "records": args.records, "name": args.name, "cluster": args.cluster }),
        Some(args.seed),
        &out_dir,
    )?;
    manifest.write()?;

    let text = fs::read_to_string(&args.records).with_context(|| format!("reading {}", args.records.display()))?;
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let r: DecisionRecord =
            serde_json::from_str(line).with_context(|| format!("{}:{}", args.records.display(), i + 1))?;
        r.validate(&scenario)
            .with_context(|| format!("{}:{}", args.records.display(), i + 1))?;
        records.push(r);
    }
    let profile = fit_profile_ols(&records, &scenario.indicators, &args.name)?;
    write_json(&args.out, &profile)?;

    let changes: Vec<&DecisionRecord> = records
        .iter()
        .filter(|r| r.decision == Action::Change && !r.indicators.t_nf_missing())
        .collect();
    let mut correlations = BTreeMap::new();
    for (i, key) in ["tf", "tnf", "dvnb"].iter().enumerate() {
        let (xs, ys): (Vec<f64>, Vec<f64>) = changes
            .iter()
            .filter(|r| r.indicators.is_relevant(i))
            .map(|r| (r.v_e, r.indicators.as_array()[i]))
            .unzip();
        if let Ok(c) = pearson_correlation(&xs, &ys) {
            correlations.insert(*key, json!({ "r": c.r, "p_value": c.p_value, "n": xs.len() }));
        }
    }
    let mut report = json!({ "profile": profile, "records": records.len(), "change_records": changes.len(), "correlation_with_v_e": correlations });

    if let Some(k) = args.cluster {
        let mut per_driver: BTreeMap<&str, [Vec<f64>; 3]> = BTreeMap::new();
        for r in &changes {
            let e = per_driver.entry(r.driver_id.as_str()).or_default();
            for (i, v) in r.indicators.as_array().into_iter().enumerate() {
                if r.indicators.is_relevant(i) {
                    e[i].push(v);
                }
            }
        }
        let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let drivers: Vec<&str> = per_driver.keys().copied().collect();
        let features: Vec<[f64; 3]> = per_driver.values().map(|v| [mean(&v[0]), mean(&v[1]), mean(&v[2])]).collect();
        let mut rng = seed::rng_for(args.seed, "cluster");
        let c = cluster_styles(&features, k, &mut rng)?;
        let assignments: BTreeMap<&str, String> = drivers
            .iter()
            .zip(&c.assignments)
            .map(|(d, &a)| (*d, c.label(a)))
            .collect();
        report["clusters"] = json!({
            "assignments": assignments,
            "centroids": c.centroids,
            "degenerate": c.degenerate,
            "iterations": c.iterations,
        });
    }
    write_json(&out_dir.join("fit_report.json"), &report)?;
    println!("{}", serde_json::to_string(&profile)?);
    manifest.finish()
}

pub fn train(args: TrainArgs) -> Result<()> {
    let (mut cfg, raw) = training_config(args.config.as_deref())?;
    if let Some(style) = args.style {
        cfg.style = StyleRef::Named(style);
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(episodes) = args.episodes {
        cfg.episodes = episodes;
    }
    cfg.validate()?;
    let manifest = RunManifest::new(
        "train",
        args.config.as_deref(),
        raw.as_deref(),
        serde_json::to_value(&cfg)?,
        Some(cfg.seed),
        &args.out,
    )?;
    manifest.write()?;
    let run = run_training(&cfg, Some(&args.out))?;
    let rewards: Vec<f64> = run.metrics.iter().map(|m| m.step_reward).collect();
    let final_reward = smoothed(&rewards, 100).last().copied().unwrap_or(f64::NAN);
    info!("final smoothed step reward {final_reward:.4}");
    println!("{}", json!({ "episodes": run.metrics.len(), "smoothed_step_reward": final_reward }));
    manifest.finish()
}

fn tolerances(tau: &[f64]) -> Result<[f64; 3]> {
    match tau {
        [] => Ok(DEFAULT_TOLERANCES),
        [a, b, c] if tau.iter().all(|t| t.is_finite() && *t >= 0.0) => Ok([*a, *b, *c]),
        _ => bail!("--tau takes three nonnegative values"),
    }
}

struct Agents {
    rl: QPolicy,
    benchmark: BenchmarkPolicy,
    reference: ReferenceDriver,
    profile: StyleProfile,
    cfg: TrainingConfig,
}

fn load_agents(checkpoint: &Path, style: &str, cfg: TrainingConfig, tau: [f64; 3]) -> Result<Agents> {
    let profile = resolve_style(style)?;
    let network = Network::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(Agents {
        rl: QPolicy {
            network,
            scenario: cfg.scenario.clone(),
        },
        benchmark: BenchmarkPolicy {
            profile: profile.clone(),
            reward: cfg.reward.clone(),
            scenario: cfg.scenario.clone(),
        },
        reference: ReferenceDriver {
            profile: profile.clone(),
            tolerances: tau,
            scenario: cfg.scenario.clone(),
        },
        profile,
        cfg,
    })
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let (cfg, raw) = training_config(args.config.as_deref())?;
    cfg.validate()?;
    let tau = tolerances(&args.tau)?;
    let manifest = RunManifest::new(
        "eval",
        args.config.as_deref(),
        raw.as_deref(),
        json!({ "config": cfg, "checkpoint": args.checkpoint, "style": args.style, "episodes": args.episodes,
                "states": args.states, "traces": args.traces, "tau": tau }),
        Some(args.seed),
        &args.out,
    )?;
    manifest.write()?;
    let agents = load_agents(&args.checkpoint, &args.style, cfg, tau)?;
    let scenario = &agents.cfg.scenario;
    let style = agents.profile.name.clone();

    let rl = run_rollouts(&agents.rl, scenario, args.episodes, args.seed, AgentKind::Rl, args.traces)?;
    let bench = run_rollouts(&agents.benchmark, scenario, args.episodes, args.seed, AgentKind::Benchmark, 0)?;
    let states = sample_eval_states(scenario, args.states, args.seed)?;
    let rl_agree = agreement(&agents.reference, &agents.rl, &states, scenario);
    let bench_agree = agreement(&agents.reference, &agents.benchmark, &states, scenario);

    let points: Vec<StyledPoint> = rl
        .points
        .iter()
        .chain(&bench.points)
        .map(|p| StyledPoint {
            style: style.clone(),
            point: *p,
        })
        .collect();
    let summaries = [
        (AgentKind::Rl, &rl, &rl_agree),
        (AgentKind::Benchmark, &bench, &bench_agree),
    ]
    .map(|(kind, r, a)| EvalSummary {
        style: style.clone(),
        agent_kind: kind,
        mae: MaeTriple::compute(&r.points, &agents.profile, &scenario.indicators),
        accuracy: Some(a.accuracy),
        n: r.points.len(),
    });
    export_results(&points, &summaries, &args.out)?;
    write_traces(&rl.traces, &args.out.join("traces.jsonl"))?;
    let outcomes = |r: &lanechange::eval::RolloutSummary| {
        json!({ "episodes": r.episodes, "changed": r.changed, "max_steps": r.max_steps,
                "forced_stop": r.forced_stop, "total_steps": r.total_steps })
    };
    write_json(
        &args.out.join("rollouts.json"),
        &json!({ "rl": outcomes(&rl), "benchmark": outcomes(&bench) }),
    )?;
    println!("{}", serde_json::to_string(&summaries)?);
    manifest.finish()
}

fn agreement_json(r: &AgreementReport) -> serde_json::Value {
    json!({ "total": r.total, "agree": r.agree, "accuracy": r.accuracy, "disagreements": r.disagreements })
}

pub fn compare(args: CompareArgs) -> Result<()> {
    let (cfg, raw) = training_config(args.config.as_deref())?;
    cfg.validate()?;
    let tau = tolerances(&args.tau)?;
    let manifest = RunManifest::new(
        "compare",
        args.config.as_deref(),
        raw.as_deref(),
        json!({ "config": cfg, "checkpoint": args.checkpoint, "style": args.style, "states": args.states,
                "ood": args.ood, "tau": tau }),
        Some(args.seed),
        &args.out,
    )?;
    manifest.write()?;
    let agents = load_agents(&args.checkpoint, &args.style, cfg, tau)?;
    let scenario = &agents.cfg.scenario;
    let states = sample_eval_states(scenario, args.states, args.seed)?;
    let ood = out_of_domain_states(scenario, args.ood, seed::derive(args.seed, "ood"))?;

    let rl = agreement(&agents.reference, &agents.rl, &states, scenario);
    let bench = agreement(&agents.reference, &agents.benchmark, &states, scenario);
    let rl_vs_bench = agreement(&agents.benchmark, &agents.rl, &states, scenario);
    let rl_ood = agreement(&agents.reference, &agents.rl, &ood, scenario);
    let bench_ood = agreement(&agents.reference, &agents.benchmark, &ood, scenario);
    let report = json!({
        "style": agents.profile.name,
        "tau": tau,
        "in_domain": {
            "rl": agreement_json(&rl),
            "benchmark": agreement_json(&bench),
            "rl_vs_benchmark": agreement_json(&rl_vs_bench),
        },
        "out_of_domain": {
            "rl": agreement_json(&rl_ood),
            "benchmark": agreement_json(&bench_ood),
        },
    });
    write_json(&args.out.join("report.json"), &report)?;
    println!(
        "{}",
        json!({ "style": agents.profile.name, "rl_accuracy": rl.accuracy, "benchmark_accuracy": bench.accuracy,
                "ood_rl_disagreements": rl_ood.disagreements.len(),
                "ood_benchmark_disagreements": bench_ood.disagreements.len() })
    );
    manifest.finish()
}

pub fn serve(args: ServeArgs) -> Result<()> {
    let (scenario, raw) = scenario_config(args.scenario.as_deref())?;
    let manifest = RunManifest::new(
        "serve",
        args.scenario.as_deref(),
        raw.as_deref(),
        json!({ "scenario": scenario, "host": args.host, "port": args.port, "tick_hz": args.tick_hz }),
        None,
        &args.log,
    )?;
    manifest.write()?;
    let mut config = ServerConfig::new(scenario, &args.log);
    config.tick_hz = args.tick_hz;
    let server = Server::bind((args.host.as_str(), args.port), config)?;
    println!("{}", json!({ "listening": server.local_addr()?.to_string() }));
    server.run()?;
    manifest.finish()
}

pub fn replay(args: ReplayArgs) -> Result<()> {
    let (scenario, raw) = scenario_config(args.config.as_deref())?;
    let manifest = match &args.out {
        Some(out) => {
            let m = RunManifest::new(
                "replay",
                args.config.as_deref(),
                raw.as_deref(),
                json!({ "scenario": scenario, "trace": args.trace }),
                None,
                out,
            )?;
            m.write()?;
            Some(m)
        }
        None => None,
    };
    let text = fs::read_to_string(&args.trace).with_context(|| format!("reading {}", args.trace.display()))?;
    let records = text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str::<TraceRecord>(l).with_context(|| format!("{}:{}", args.trace.display(), i + 1))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = replay_trace(&records, &scenario)?;
    let body = json!({ "episodes": report.episodes, "steps": report.steps, "mismatches": report.mismatches });
    if let (Some(out), Some(_)) = (&args.out, &manifest) {
        write_json(&out.join("report.json"), &body)?;
    }
    println!("{body}");
    if let Some(m) = manifest {
        m.finish()?;
    }
    if !report.mismatches.is_empty() {
        return Err(ReplayMismatch(report.mismatches.len()).into());
    }
    Ok(())
}
