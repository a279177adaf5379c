//! Run manifests: what was run, with which resolved configuration, and the
//! content hash of every file it read and wrote.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use datamix::orchestrator::{BaselineMode, GuideSpace};
use datamix::pipeline::PipelineConfig;
use datamix::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::persist::{file_sha256, read_json};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Sft,
    Cql,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AgentKind {
    Rl,
    Sft,
}

/// A command with its options, minus the config path: the manifest carries
/// the resolved config itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Invocation {
    GenEnv,
    Sample {
        start: Option<PathBuf>,
    },
    Collect {
        resume: bool,
    },
    Train {
        phase: Phase,
    },
    Guide {
        agent: AgentKind,
        space: GuideSpace,
        start: Option<PathBuf>,
    },
    Baseline {
        mode: BaselineMode,
        start: Option<PathBuf>,
    },
    Analyze {
        input: PathBuf,
        field: usize,
    },
    EstimateStart {
        input: PathBuf,
        repeats: usize,
        seed: u64,
    },
}

impl Invocation {
    pub fn needs_config(&self) -> bool {
        !matches!(self, Invocation::Analyze { .. } | Invocation::EstimateStart { .. })
    }
}

/// Where an overridable setting came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Flag,
    Env,
    Config,
    Default,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Setting<T> {
    pub value: T,
    pub source: Source,
}

/// Path and worker-count settings that may come from the environment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overrides {
    pub out_dir: Setting<PathBuf>,
    pub workers: Setting<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub manifest_version: u32,
    pub tool_version: String,
    pub command: Invocation,
    pub config: Option<PipelineConfig>,
    pub config_hash: Option<String>,
    pub seed: Option<u64>,
    pub overrides: Overrides,
    /// Path (relative to the output directory when inside it) to sha256.
    pub inputs: BTreeMap<String, String>,
    pub artifacts: BTreeMap<String, String>,
    /// Run facts that are not artifacts, such as wall times.
    pub details: serde_json::Value,
    pub started_unix_ms: u64,
    pub finished_unix_ms: u64,
}

pub fn unix_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// `path` relative to `root` when it lies inside it.
pub fn display_path(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

pub fn hash_files(root: &Path, paths: &[PathBuf]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((display_path(root, p), file_sha256(p)?)))
        .collect()
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let m: RunManifest = read_json(path)?;
    if m.manifest_version != MANIFEST_VERSION {
        return Err(Error::Config(format!(
            "{}: manifest version {} is not supported",
            path.display(),
            m.manifest_version
        )));
    }
    Ok(m)
}

/// Entries whose hashes differ or that only one side lists.
pub fn hash_differences(a: &BTreeMap<String, String>, b: &BTreeMap<String, String>) -> Vec<String> {
    let mut keys: Vec<&String> = a.keys().chain(b.keys()).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter().filter(|k| a.get(*k) != b.get(*k)).cloned().collect()
}
