//! Pipeline commands. Each reads its inputs from the output directory,
//! writes its artifacts into its own stage directory and finishes by writing
//! a manifest there.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use datamix::env::corpus::DomainCorpora;
use datamix::env::eval::EvalSet;
use datamix::mdp::{
    estimate_state_from_counts, kl_divergence, validate_distribution, Field, MixtureDistribution, TrajectoryRecord,
};
use datamix::nn::{decode_checkpoint, encode_checkpoint, NetworkParams};
use datamix::orchestrator::analysis::analyze_trajectories;
use datamix::orchestrator::{guide_training, run_baseline, BaselineMode, GuideEnv, GuideSpace, RunReport};
use datamix::pipeline::{self, Environment, PipelineConfig, START_CURVE_SIZES};
use datamix::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::manifest::{
    hash_differences, hash_files, read_manifest, unix_ms, AgentKind, Invocation, Overrides, Phase, RunManifest,
    Setting, Source, MANIFEST_FILE, MANIFEST_VERSION,
};
use crate::persist::{
    append_trajectory, file_sha256, num, read_json, read_trajectories, record_key, sha256_hex, to_json, write_atomic,
    write_json, write_trajectories, Table,
};

pub const OUT_DIR_VAR: &str = "DATAMIX_OUT_DIR";
pub const WORKERS_VAR: &str = "DATAMIX_WORKERS";
pub const DEFAULT_OUT_DIR: &str = "datamix-out";

/// Resolved output directory and worker count.
#[derive(Clone, Debug, PartialEq)]
pub struct Context {
    pub overrides: Overrides,
}

impl Context {
    /// Flag, then environment variable, then config, then default.
    pub fn resolve(
        out_flag: Option<PathBuf>,
        workers_flag: Option<usize>,
        cfg: Option<&PipelineConfig>,
        env: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self> {
        let out_dir = match (out_flag, env(OUT_DIR_VAR)) {
            (Some(p), _) => Setting {
                value: p,
                source: Source::Flag,
            },
            (None, Some(p)) if !p.is_empty() => Setting {
                value: PathBuf::from(p),
                source: Source::Env,
            },
            _ => Setting {
                value: PathBuf::from(DEFAULT_OUT_DIR),
                source: Source::Default,
            },
        };
        let workers = match (workers_flag, env(WORKERS_VAR), cfg) {
            (Some(w), _, _) => Setting {
                value: w,
                source: Source::Flag,
            },
            (None, Some(w), _) => Setting {
                value: w
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("{WORKERS_VAR} must be a positive integer, got {w:?}")))?,
                source: Source::Env,
            },
            (None, None, Some(c)) => Setting {
                value: c.collect.workers,
                source: Source::Config,
            },
            (None, None, None) => Setting {
                value: 1,
                source: Source::Default,
            },
        };
        if workers.value == 0 {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        Ok(Self {
            overrides: Overrides { out_dir, workers },
        })
    }

    pub fn from_process_env(
        out_flag: Option<PathBuf>,
        workers_flag: Option<usize>,
        cfg: Option<&PipelineConfig>,
    ) -> Result<Self> {
        Self::resolve(out_flag, workers_flag, cfg, &|k| std::env::var(k).ok())
    }

    pub fn out_dir(&self) -> &Path {
        &self.overrides.out_dir.value
    }

    pub fn workers(&self) -> usize {
        self.overrides.workers.value
    }

    pub fn env_dir(&self) -> PathBuf {
        self.out_dir().join("env")
    }

    pub fn sample_dir(&self) -> PathBuf {
        self.out_dir().join("sample")
    }

    pub fn collect_dir(&self) -> PathBuf {
        self.out_dir().join("collect")
    }

    pub fn train_dir(&self, phase: Phase) -> PathBuf {
        self.out_dir().join("train").join(match phase {
            Phase::Sft => "sft",
            Phase::Cql => "cql",
        })
    }

    pub fn guide_dir(&self, agent: AgentKind, space: GuideSpace) -> PathBuf {
        let a = match agent {
            AgentKind::Rl => "rl",
            AgentKind::Sft => "sft",
        };
        let s = match space {
            GuideSpace::Native => "native",
            GuideSpace::Fields => "fields",
        };
        self.out_dir().join("guide").join(format!("{a}-{s}"))
    }

    pub fn baseline_dir(&self, mode: BaselineMode) -> PathBuf {
        self.out_dir().join("baseline").join(enum_name(&mode))
    }

    pub fn analyze_dir(&self, field: usize) -> PathBuf {
        self.out_dir().join("analyze").join(format!("field{field}"))
    }

    pub fn start_dir(&self) -> PathBuf {
        self.out_dir().join("start")
    }
}

/// Serialized name of a unit enum variant.
pub fn enum_name<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .expect("unit variant")
}

/// Parses a unit enum variant from its serialized name.
pub fn parse_enum<T: for<'de> Deserialize<'de>>(s: &str) -> std::result::Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

struct StageOutput {
    dir: PathBuf,
    inputs: Vec<PathBuf>,
    artifacts: Vec<PathBuf>,
    details: serde_json::Value,
}

/// Runs one command and writes its manifest; returns the manifest and the
/// path it was written to.
pub fn run(inv: &Invocation, cfg: Option<&PipelineConfig>, ctx: &Context) -> Result<(RunManifest, PathBuf)> {
    let started = unix_ms();
    let need = || cfg.ok_or_else(|| Error::Config("this command needs a config".into()));
    if let Some(c) = cfg {
        c.validate()?;
    }
    let out = match inv {
        Invocation::GenEnv => gen_env(need()?, ctx)?,
        Invocation::Sample { start } => sample(need()?, start.as_deref(), ctx)?,
        Invocation::Collect { resume } => collect(need()?, *resume, ctx)?,
        Invocation::Train { phase } => train(need()?, *phase, ctx)?,
        Invocation::Guide { agent, space, start } => guide(need()?, *agent, *space, start.as_deref(), ctx)?,
        Invocation::Baseline { mode, start } => baseline(need()?, *mode, start.as_deref(), ctx)?,
        Invocation::Analyze { input, field } => analyze(input, *field, ctx)?,
        Invocation::EstimateStart { input, repeats, seed } => estimate_start(input, *repeats, *seed, ctx)?,
    };
    let cfg = if inv.needs_config() { cfg.cloned() } else { None };
    let manifest = RunManifest {
        manifest_version: MANIFEST_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        command: inv.clone(),
        config_hash: cfg.as_ref().map(PipelineConfig::hash),
        seed: match (&cfg, inv) {
            (Some(c), _) => Some(c.seed),
            (None, Invocation::EstimateStart { seed, .. }) => Some(*seed),
            _ => None,
        },
        config: cfg,
        overrides: ctx.overrides.clone(),
        inputs: hash_files(ctx.out_dir(), &out.inputs)?,
        artifacts: hash_files(ctx.out_dir(), &out.artifacts)?,
        details: out.details,
        started_unix_ms: started,
        finished_unix_ms: unix_ms(),
    };
    let path = out.dir.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    Ok((manifest, path))
}

/// Re-runs the command a manifest records, with its resolved config, and
/// checks that every artifact hash comes out the same. Inputs must still
/// hash as recorded.
pub fn replay(manifest_path: &Path, out_flag: Option<PathBuf>) -> Result<(RunManifest, PathBuf)> {
    let old = read_manifest(manifest_path)?;
    let mut overrides = old.overrides.clone();
    if let Some(p) = out_flag {
        overrides.out_dir = Setting {
            value: p,
            source: Source::Flag,
        };
    }
    let ctx = Context { overrides };
    for (path, hash) in &old.inputs {
        let p = ctx.out_dir().join(path);
        let now = file_sha256(&p)?;
        if &now != hash {
            return Err(Error::Data(format!("input {path} changed since the recorded run")));
        }
    }
    let (new, path) = run(&old.command, old.config.as_ref(), &ctx)?;
    let diff = hash_differences(&old.artifacts, &new.artifacts);
    if !diff.is_empty() {
        return Err(Error::Data(format!("replay diverged on: {}", diff.join(", "))));
    }
    Ok((new, path))
}

fn save_checkpoint(path: &Path, params: &NetworkParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

fn load_checkpoint(path: &Path) -> Result<NetworkParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::Data(format!("{} not found; {hint}", path.display())))
    }
}

fn field_names(eval: &EvalSet) -> Vec<String> {
    eval.fields.iter().map(|f| f.name.clone()).collect()
}

#[derive(Serialize)]
struct EnvironmentFile<'a> {
    spec: &'a datamix::env::corpus::CorpusSpec,
    domains: &'a datamix::mdp::DomainSpace,
    table_seed: u64,
    pool_sizes: &'a [u64],
    /// KL between the domains' token marginals, row ‖ column.
    marginal_kl: Vec<Vec<f64>>,
}

fn gen_env(cfg: &PipelineConfig, ctx: &Context) -> Result<StageOutput> {
    let env = pipeline::build_environment(cfg)?;
    let dir = ctx.env_dir();
    let spec = dir.join("environment.json");
    let eval = dir.join("eval_set.json");
    let c = &env.corpora;
    write_json(
        &spec,
        &EnvironmentFile {
            spec: &c.spec,
            domains: &c.space,
            table_seed: c.table_seed,
            pool_sizes: &c.pool_sizes,
            marginal_kl: c.marginal_kl_matrix(),
        },
    )?;
    write_json(&eval, &env.eval)?;
    Ok(StageOutput {
        dir,
        inputs: vec![],
        artifacts: vec![spec, eval],
        details: json!({ "domains": c.space.dim(), "fields": field_names(&env.eval) }),
    })
}

#[derive(Deserialize)]
#[serde(untagged)]
enum StartFile {
    Bare(Vec<f64>),
    Wrapped { distribution: Vec<f64> },
}

/// A start distribution from a JSON file: a bare weight array or an object
/// with a `distribution` array, such as `estimate-start` writes.
pub fn load_start(path: &Path, env: &Environment) -> Result<MixtureDistribution> {
    let raw = match read_json::<StartFile>(path)? {
        StartFile::Bare(w) | StartFile::Wrapped { distribution: w } => w,
    };
    let start = validate_distribution(raw, env.corpora.space.dim())?;
    if start.mass(&env.corpora.space, Field::Target) > 0.0 {
        return Err(Error::Data(format!(
            "{}: the start state must put no mass on target domains",
            path.display()
        )));
    }
    Ok(start)
}

fn start_of(
    cfg: &PipelineConfig,
    env: &Environment,
    path: Option<&Path>,
) -> Result<(MixtureDistribution, Option<Vec<u64>>)> {
    match path {
        Some(p) => Ok((load_start(p, env)?, None)),
        None => pipeline::start_state(cfg, env),
    }
}

#[derive(Serialize)]
struct TierEntry {
    k: usize,
    trajectories: usize,
    config_hash: String,
}

fn sample(cfg: &PipelineConfig, start_path: Option<&Path>, ctx: &Context) -> Result<StageOutput> {
    let env = pipeline::build_environment(cfg)?;
    let (start, counts) = start_of(cfg, &env, start_path)?;
    let set = pipeline::sample(cfg, &env, &start)?;
    let dir = ctx.sample_dir();
    let traj = dir.join("trajectories.jsonl");
    let tiers = dir.join("tiers.json");
    let start_file = dir.join("start.json");
    write_trajectories(&traj, &set)?;
    let entries: Vec<TierEntry> = cfg
        .sampler
        .tiers
        .iter()
        .map(|&k| {
            let sub = set.tier(k);
            TierEntry {
                k,
                trajectories: sub.len(),
                config_hash: sub
                    .trajectories
                    .first()
                    .map(|t| t.provenance.config_hash.clone())
                    .unwrap_or_default(),
            }
        })
        .collect();
    write_json(&tiers, &json!({ "tiers": entries }))?;
    write_json(&start_file, &json!({ "distribution": start, "counts": counts }))?;
    Ok(StageOutput {
        dir,
        inputs: start_path.map(Path::to_path_buf).into_iter().collect(),
        artifacts: vec![traj, tiers, start_file],
        details: json!({ "trajectories": set.len() }),
    })
}

/// Everything collected feedback depends on besides the trajectory itself.
fn collect_key(cfg: &PipelineConfig) -> String {
    let parts = json!({
        "corpus": pipeline::corpus_spec(cfg),
        "eval": pipeline::eval_spec(cfg),
        "collect": pipeline::collect_config(cfg),
    });
    sha256_hex(&serde_json::to_vec(&parts).expect("serializes"))
}

/// Records collected so far by an unfinished `collect`; named after the
/// collection setup so a changed setup never picks up stale feedback.
pub fn progress_path(cfg: &PipelineConfig, ctx: &Context) -> PathBuf {
    ctx.collect_dir()
        .join(format!("progress-{}.jsonl", &collect_key(cfg)[..16]))
}

/// Feedback already on disk for this collection setup, keyed by record.
fn completed_feedback(cfg: &PipelineConfig, dir: &Path, progress: &Path) -> Result<HashMap<String, TrajectoryRecord>> {
    let mut done = HashMap::new();
    let mut take = |set: datamix::sampler::TrajectorySet| {
        for t in set.trajectories {
            if t.has_feedback() && t.feedback.len() == t.len() {
                done.insert(record_key(&t), t);
            }
        }
    };
    let out = dir.join("trajectories.jsonl");
    let manifest = dir.join(MANIFEST_FILE);
    if out.is_file() && manifest.is_file() {
        let m = read_manifest(&manifest)?;
        let same_setup = m.config.as_ref().map(collect_key) == Some(collect_key(cfg));
        let intact = m.artifacts.get("collect/trajectories.jsonl") == Some(&file_sha256(&out)?);
        if same_setup && intact {
            take(read_trajectories(&out)?);
        }
    }
    if progress.is_file() {
        take(read_trajectories(progress)?);
    }
    Ok(done)
}

fn collect(cfg: &PipelineConfig, resume: bool, ctx: &Context) -> Result<StageOutput> {
    let input = require(ctx.sample_dir().join("trajectories.jsonl"), "run `sample` first")?;
    let mut set = read_trajectories(&input)?;
    let env = pipeline::build_environment(cfg)?;
    for (i, t) in set.trajectories.iter().enumerate() {
        t.check(&env.corpora.space)
            .map_err(|e| Error::Data(format!("{} record {}: {e}", input.display(), i + 1)))?;
    }
    let dir = ctx.collect_dir();
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let progress = progress_path(cfg, ctx);
    let mut reused = 0;
    if resume {
        let done = completed_feedback(cfg, &dir, &progress)?;
        for t in &mut set.trajectories {
            t.feedback.clear();
            if let Some(d) = done.get(&record_key(t)) {
                t.feedback = d.feedback.clone();
                reused += 1;
            }
        }
    } else {
        for t in &mut set.trajectories {
            t.feedback.clear();
        }
        if progress.exists() {
            std::fs::remove_file(&progress).map_err(|e| Error::io(&progress, e))?;
        }
    }
    let lock = Mutex::new(());
    let observe = |_: usize, t: &TrajectoryRecord| -> Result<()> {
        let _g = lock.lock().expect("progress lock");
        append_trajectory(&progress, t)
    };
    let collected = pipeline::collect_observed(cfg, &env, &set, ctx.workers(), &observe)?;
    let out = dir.join("trajectories.jsonl");
    write_trajectories(&out, &collected)?;
    if progress.exists() {
        std::fs::remove_file(&progress).map_err(|e| Error::io(&progress, e))?;
    }
    Ok(StageOutput {
        dir,
        inputs: vec![input],
        artifacts: vec![out],
        details: json!({
            "trajectories": collected.len(),
            "reused": reused,
            "collected": collected.len() - reused,
        }),
    })
}

fn train(cfg: &PipelineConfig, phase: Phase, ctx: &Context) -> Result<StageOutput> {
    let input = require(ctx.collect_dir().join("trajectories.jsonl"), "run `collect` first")?;
    let collected = read_trajectories(&input)?;
    let (standardized, standardizer) = pipeline::standardize(&collected)?;
    let dir = ctx.train_dir(phase);
    let actor = dir.join("actor.ckpt");
    let loss = dir.join("loss.csv");
    match phase {
        Phase::Sft => {
            let out = pipeline::train_agent_sft(cfg, &standardized)?;
            let stand = dir.join("standardizer.json");
            save_checkpoint(&actor, &out.actor)?;
            let mut t = Table::new(["step", "loss"]);
            for (s, l) in &out.curve {
                t.push(vec![s.to_string(), num(*l)]);
            }
            t.write(&loss)?;
            write_json(&stand, &standardizer)?;
            Ok(StageOutput {
                dir,
                inputs: vec![input],
                artifacts: vec![actor, loss, stand],
                details: json!({
                    "tiers_consumed": [1],
                    "trajectories": standardized.tier(1).len(),
                    "initial_loss": out.initial_loss,
                    "final_loss": out.final_loss,
                }),
            })
        }
        Phase::Cql => {
            let sft_ckpt = require(
                ctx.train_dir(Phase::Sft).join("actor.ckpt"),
                "CQL starts from the SFT actor; run `train --phase sft` first",
            )?;
            let sft_actor = load_checkpoint(&sft_ckpt)?;
            let out = pipeline::train_agent_cql(cfg, &standardized, &sft_actor)?;
            let critic = dir.join("critic.ckpt");
            let reward = dir.join("reward_map.json");
            save_checkpoint(&actor, &out.actor)?;
            save_checkpoint(&critic, &out.critic)?;
            let mut t = Table::new(["step", "loss", "bellman", "penalty", "mean_q", "actor_q"]);
            for r in &out.curve {
                t.push(vec![
                    r.step.to_string(),
                    num(r.loss),
                    num(r.bellman),
                    num(r.penalty),
                    num(r.mean_q),
                    num(r.actor_q),
                ]);
            }
            t.write(&loss)?;
            write_json(&reward, &out.reward_map)?;
            Ok(StageOutput {
                dir,
                inputs: vec![input, sft_ckpt],
                artifacts: vec![actor, critic, loss, reward],
                details: json!({ "steps": out.curve.len() }),
            })
        }
    }
}

struct Prepared {
    env: Environment,
    start: MixtureDistribution,
    base: datamix::env::proxy::ProxyLearner,
}

fn prepare(cfg: &PipelineConfig, start_path: Option<&Path>) -> Result<Prepared> {
    let env = pipeline::build_environment(cfg)?;
    let (start, _) = start_of(cfg, &env, start_path)?;
    let base = pipeline::pretrain_target(cfg, &env, &start)?;
    Ok(Prepared { env, start, base })
}

fn guide_env(p: &Prepared) -> GuideEnv<'_> {
    GuideEnv {
        corpora: &p.env.corpora,
        eval: &p.env.eval,
        base: &p.base,
        start: p.start.clone(),
    }
}

fn guide(
    cfg: &PipelineConfig,
    agent: AgentKind,
    space: GuideSpace,
    start_path: Option<&Path>,
    ctx: &Context,
) -> Result<StageOutput> {
    let (phase, hint) = match agent {
        AgentKind::Rl => (Phase::Cql, "run `train --phase cql` first"),
        AgentKind::Sft => (Phase::Sft, "run `train --phase sft` first"),
    };
    let ckpt = require(ctx.train_dir(phase).join("actor.ckpt"), hint)?;
    let actor: NetworkParams = load_checkpoint(&ckpt)?;
    let p = prepare(cfg, start_path)?;
    let report = guide_training(&pipeline::guided_config(cfg, space), &guide_env(&p), &actor)?;
    let mut out = write_report(&ctx.guide_dir(agent, space), &report, &p.env.corpora, &p.env.eval)?;
    out.inputs.push(ckpt);
    out.inputs.extend(start_path.map(Path::to_path_buf));
    Ok(out)
}

fn baseline(cfg: &PipelineConfig, mode: BaselineMode, start_path: Option<&Path>, ctx: &Context) -> Result<StageOutput> {
    let p = prepare(cfg, start_path)?;
    let dir = ctx.baseline_dir(mode);
    let mut extra = Vec::new();
    let fixed = match mode {
        BaselineMode::Naive => None,
        BaselineMode::StaticMixture => Some(p.start.clone()),
        BaselineMode::RegMixLite => {
            let fit = pipeline::fit_regmix(cfg, &p.env, ctx.workers())?;
            let path = dir.join("regmix.json");
            write_json(&path, &fit)?;
            extra.push(path);
            Some(fit.mixture)
        }
    };
    let report = run_baseline(
        mode,
        &pipeline::guided_config(cfg, cfg.guide.space),
        &guide_env(&p),
        fixed.as_ref(),
    )?;
    let mut out = write_report(&dir, &report, &p.env.corpora, &p.env.eval)?;
    out.artifacts.extend(extra);
    out.inputs.extend(start_path.map(Path::to_path_buf));
    Ok(out)
}

/// Per-step table of a run: raw and running-standardized scores per field,
/// the executed field masses and cumulative target sequences drawn.
pub fn timeseries(report: &RunReport, corpora: &DomainCorpora, fields: &[String]) -> Result<Table> {
    let mut header = vec!["step".to_string()];
    header.extend(fields.iter().map(|f| format!("raw_{f}")));
    header.extend(fields.iter().map(|f| format!("std_{f}")));
    header.extend(["mean_raw", "source_mass", "target_mass", "target_samples"].map(String::from));
    let mut t = Table::new(header);
    let standardized = report.running_standardized()?;
    for (s, (raw, st)) in report.trajectory.feedback.iter().zip(&standardized).enumerate() {
        let d = report.trajectory.distribution(s);
        let mut row = vec![s.to_string()];
        row.extend(raw.scores.iter().map(|&x| num(x)));
        row.extend(st.scores.iter().map(|&x| num(x)));
        row.push(num(raw.mean()));
        row.push(num(d.mass(&corpora.space, Field::Source)));
        row.push(num(d.mass(&corpora.space, Field::Target)));
        row.push(if s == 0 { 0 } else { report.coverage[s - 1] }.to_string());
        t.push(row);
    }
    Ok(t)
}

/// Headline numbers of a run, written next to its trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub steps: usize,
    pub early_stop: Option<usize>,
    pub source_samples: u64,
    pub target_samples: u64,
    pub fields: Vec<String>,
    pub start_scores: Vec<f64>,
    pub final_scores: Vec<f64>,
    pub final_mean: f64,
    pub report_hash: String,
}

pub fn summarize(report: &RunReport, fields: &[String]) -> RunSummary {
    let last = report.final_feedback();
    RunSummary {
        steps: report.steps(),
        early_stop: report.early_stop,
        source_samples: report.source_samples,
        target_samples: report.target_samples(),
        fields: fields.to_vec(),
        start_scores: report.trajectory.feedback[0].scores.clone(),
        final_scores: last.scores.clone(),
        final_mean: last.mean(),
        report_hash: report.hash(),
    }
}

fn write_report(dir: &Path, report: &RunReport, corpora: &DomainCorpora, eval: &EvalSet) -> Result<StageOutput> {
    let fields = field_names(eval);
    let traj = dir.join("trajectory.jsonl");
    let series = dir.join("timeseries.csv");
    let learner = dir.join("learner.ckpt");
    let summary = dir.join("summary.json");
    write_trajectories(
        &traj,
        &datamix::sampler::TrajectorySet {
            trajectories: vec![report.trajectory.clone()],
        },
    )?;
    timeseries(report, corpora, &fields)?.write(&series)?;
    save_checkpoint(&learner, &report.final_learner)?;
    write_json(&summary, &summarize(report, &fields))?;
    Ok(StageOutput {
        dir: dir.to_path_buf(),
        inputs: vec![],
        artifacts: vec![traj, series, learner, summary],
        details: json!({ "step_seconds": report.step_seconds }),
    })
}

/// The trajectory file inside a report or corpus directory, or the path
/// itself when it is a file.
fn trajectory_file(input: &Path) -> Result<PathBuf> {
    if input.is_dir() {
        for name in ["trajectory.jsonl", "trajectories.jsonl"] {
            let p = input.join(name);
            if p.is_file() {
                return Ok(p);
            }
        }
        return Err(Error::Data(format!("{} holds no trajectory file", input.display())));
    }
    require(input.to_path_buf(), "expected a trajectory file or report directory")
}

/// Rows `side, domain, weight, steps, empty`: one per domain for each side,
/// or a single row flagged empty when no step fell on that side.
pub fn analysis_table(a: &datamix::orchestrator::analysis::StepAnalysis) -> Table {
    let mut t = Table::new(["side", "domain", "weight", "steps", "empty"]);
    for (side, mean, count) in [
        ("increase", &a.increase, a.increase_count),
        ("decrease", &a.decrease, a.decrease_count),
    ] {
        match mean {
            Some(m) => {
                for (i, w) in m.weights().iter().enumerate() {
                    t.push(vec![
                        side.into(),
                        i.to_string(),
                        num(*w),
                        count.to_string(),
                        "false".into(),
                    ]);
                }
            }
            None => t.push(vec![
                side.into(),
                String::new(),
                String::new(),
                "0".into(),
                "true".into(),
            ]),
        }
    }
    t
}

fn analyze(input: &Path, field: usize, ctx: &Context) -> Result<StageOutput> {
    let file = trajectory_file(input)?;
    let set = read_trajectories(&file)?;
    let a = analyze_trajectories(&set, field)?;
    let dir = ctx.analyze_dir(field);
    let csv = dir.join("analysis.csv");
    analysis_table(&a).write(&csv)?;
    Ok(StageOutput {
        dir,
        inputs: vec![file],
        artifacts: vec![csv],
        details: json!({
            "increase_steps": a.increase_count,
            "decrease_steps": a.decrease_count,
            "unchanged_steps": a.unchanged_count,
        }),
    })
}

/// Input of `estimate-start`: per-domain counts or individual domain labels,
/// optionally with the true distribution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSamples {
    #[serde(default)]
    pub counts: Option<Vec<u64>>,
    #[serde(default)]
    pub labels: Option<Vec<usize>>,
    /// Number of domains for `labels`; defaults to the truth's length, then
    /// to the largest label plus one.
    #[serde(default)]
    pub domains: Option<usize>,
    #[serde(default)]
    pub truth: Option<Vec<f64>>,
}

impl StartSamples {
    pub fn counts(&self) -> Result<Vec<u64>> {
        match (&self.counts, &self.labels) {
            (Some(c), None) => Ok(c.clone()),
            (None, Some(labels)) => {
                let n = self
                    .domains
                    .or(self.truth.as_ref().map(Vec::len))
                    .unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
                let mut c = vec![0u64; n];
                for &l in labels {
                    *c.get_mut(l)
                        .ok_or_else(|| Error::Data(format!("label {l} out of range for {n} domains")))? += 1;
                }
                Ok(c)
            }
            _ => Err(Error::Data("give exactly one of `counts` and `labels`".into())),
        }
    }
}

fn estimate_start(input: &Path, repeats: usize, seed: u64, ctx: &Context) -> Result<StageOutput> {
    let samples: StartSamples = read_json(input)?;
    let counts = samples.counts()?;
    let estimate = estimate_state_from_counts(&counts)?;
    let dir = ctx.start_dir();
    let start = dir.join("start.json");
    write_json(&start, &json!({ "distribution": estimate, "counts": counts }))?;
    let mut artifacts = vec![start];
    let mut details = json!({ "samples": counts.iter().sum::<u64>() });
    if let Some(truth) = &samples.truth {
        let truth = validate_distribution(truth.clone(), counts.len())?;
        details["kl_to_truth"] = json!(kl_divergence(&estimate, &truth)?);
        let curve = pipeline::start_kl_curve(&truth, &START_CURVE_SIZES, repeats, seed)?;
        let mut t = Table::new(["samples", "median_kl"]);
        for (n, kl) in curve {
            t.push(vec![n.to_string(), num(kl)]);
        }
        let path = dir.join("kl_curve.csv");
        t.write(&path)?;
        artifacts.push(path);
    }
    Ok(StageOutput {
        dir,
        inputs: vec![input.to_path_buf()],
        artifacts,
        details,
    })
}

/// Bytes of the resolved config as a manifest would carry it.
pub fn config_bytes(cfg: &PipelineConfig) -> Vec<u8> {
    to_json(cfg)
}
