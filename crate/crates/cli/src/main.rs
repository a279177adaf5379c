use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use datamix::orchestrator::{BaselineMode, GuideSpace};
use datamix::pipeline::PipelineConfig;
use datamix::Result;
use datamix_cli::commands::{parse_enum, Context};
use datamix_cli::manifest::{AgentKind, Phase, RunManifest};
use datamix_cli::{load_config, render_config, Invocation};

#[derive(Parser)]
#[command(name = "datamix", version, about = "Agent-guided data mixing on a synthetic corpus")]
struct Cli {
    /// Output directory [env: DATAMIX_OUT_DIR] [default: datamix-out]
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for feedback collection and RegMix proxies
    /// [env: DATAMIX_WORKERS]
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print a named profile as a complete config document.
    Profile { name: String },
    /// Print the resolved form of a config document.
    Resolve { config: PathBuf },
    /// Write the environment description and evaluation set.
    GenEnv { config: PathBuf },
    /// Sample trajectories for every top-K tier.
    Sample {
        config: PathBuf,
        /// Start distribution to use instead of the configured one.
        #[arg(long)]
        start: Option<PathBuf>,
    },
    /// Attach proxy feedback to the sampled trajectories.
    Collect {
        config: PathBuf,
        /// Keep feedback already collected for identical trajectories.
        #[arg(long)]
        resume: bool,
    },
    /// Train the agent.
    Train {
        config: PathBuf,
        #[arg(long, value_enum)]
        phase: Phase,
    },
    /// Continual training of the target learner guided by a trained agent.
    Guide {
        config: PathBuf,
        #[arg(long, value_enum, default_value = "rl")]
        agent: AgentKind,
        /// native or fields [default: from the config]
        #[arg(long, value_parser = parse_enum::<GuideSpace>)]
        space: Option<GuideSpace>,
        #[arg(long)]
        start: Option<PathBuf>,
    },
    /// Continual training with a fixed mixture.
    Baseline {
        config: PathBuf,
        /// naive, static-mixture or regmix-lite
        #[arg(long, value_parser = parse_enum::<BaselineMode>)]
        mode: BaselineMode,
        #[arg(long)]
        start: Option<PathBuf>,
    },
    /// Mean mixtures of the steps that raised and lowered a field's score.
    Analyze {
        /// Report directory, corpus directory or trajectory file.
        input: PathBuf,
        /// Field index, or `general` / `target`.
        #[arg(long, value_parser = parse_field)]
        field: usize,
    },
    /// Estimate the start distribution from domain counts or labels.
    EstimateStart {
        input: PathBuf,
        /// Label draws per sample size for the curve against the truth.
        #[arg(long, default_value_t = 100)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Re-run the command a manifest records and verify its artifact hashes.
    Replay { manifest: PathBuf },
}

fn parse_field(s: &str) -> std::result::Result<usize, String> {
    match s {
        "general" => Ok(0),
        "target" => Ok(1),
        _ => s
            .parse()
            .map_err(|_| format!("expected a field index or name, got {s:?}")),
    }
}

fn report(m: &RunManifest, manifest: &Path) {
    let name = serde_json::to_value(&m.command)
        .ok()
        .and_then(|v| v["name"].as_str().map(String::from))
        .unwrap_or_default();
    println!(
        "{name}: {} artifacts, manifest {}",
        m.artifacts.len(),
        manifest.display()
    );
}

fn execute(cli: Cli) -> Result<()> {
    let (inv, cfg) = match cli.command {
        Command::Profile { name } => {
            print!("{}", render_config(&PipelineConfig::profile(&name)?)?);
            return Ok(());
        }
        Command::Resolve { config } => {
            print!("{}", render_config(&load_config(&config)?)?);
            return Ok(());
        }
        Command::Replay { manifest } => {
            let (m, path) = datamix_cli::replay(&manifest, cli.out)?;
            report(&m, &path);
            println!("replay: all {} artifact hashes match", m.artifacts.len());
            return Ok(());
        }
        Command::GenEnv { config } => (Invocation::GenEnv, Some(load_config(&config)?)),
        Command::Sample { config, start } => (Invocation::Sample { start }, Some(load_config(&config)?)),
        Command::Collect { config, resume } => (Invocation::Collect { resume }, Some(load_config(&config)?)),
        Command::Train { config, phase } => (Invocation::Train { phase }, Some(load_config(&config)?)),
        Command::Guide {
            config,
            agent,
            space,
            start,
        } => {
            let cfg = load_config(&config)?;
            let space = space.unwrap_or(cfg.guide.space);
            (Invocation::Guide { agent, space, start }, Some(cfg))
        }
        Command::Baseline { config, mode, start } => {
            (Invocation::Baseline { mode, start }, Some(load_config(&config)?))
        }
        Command::Analyze { input, field } => (Invocation::Analyze { input, field }, None),
        Command::EstimateStart { input, repeats, seed } => (Invocation::EstimateStart { input, repeats, seed }, None),
    };
    let ctx = Context::from_process_env(cli.out, cli.workers, cfg.as_ref())?;
    let (m, path) = datamix_cli::run(&inv, cfg.as_ref(), &ctx)?;
    report(&m, &path);
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
