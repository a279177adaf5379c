//! The full pipeline from one resolved configuration: environment, start
//! state, trajectory sampling, feedback collection, agent training and the
//! guided and baseline runs. Every stage seed is derived from the master
//! seed under a fixed label.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::cql::{train_cql, CqlConfig, CqlOutcome};
use crate::agent::reward::{build_transitions, equal_lambda, standardize_corpus};
use crate::agent::sft::{train_sft, SftConfig, SftOutcome};
use crate::agent::AgentArch;
use crate::env::collect::{collect_feedback, collect_feedback_observed, pretrain_base, CollectConfig};
use crate::env::corpus::{generate_corpus, CorpusSpec, DomainCorpora};
use crate::env::eval::{build_eval_set, EvalSet, EvalSpec, Standardizer};
use crate::env::proxy::{ProxyConfig, ProxyLearner};
use crate::error::{Error, Result};
use crate::mdp::{
    estimate_state_from_counts, kl_divergence, make_target_state, Domain, Field, MixtureDistribution, TrajectoryRecord,
};
use crate::orchestrator::regmix::{regmix_fit, regmix_samples, RegMixConfig, RegMixFit};
use crate::orchestrator::{
    guide_training, run_baseline, BaselineMode, GuideEnv, GuideSpace, GuidedRunConfig, RunReport,
};
use crate::rng::{derive_seed, stream};
use crate::sampler::{sample_tiers, SamplerConfig, TrajectorySet};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSection {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub source_domains: Vec<String>,
    pub target_domains: Vec<String>,
    pub source_mixture: Vec<f64>,
    pub target_mixture: Vec<f64>,
    pub field_sharpness: f64,
    pub domain_noise: f64,
    pub domain_bias: f64,
    pub target_pool: u64,
    pub target_pool_slack: f64,
    pub source_pool: u64,
    pub eval_pairs_per_field: usize,
    pub eval_prompt_len: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StartMethod {
    /// The generator's source mixture.
    Truth,
    /// Normalized domain counts of labelled samples of the pre-training data.
    Estimate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StartSection {
    pub method: StartMethod,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub trajectories_per_tier: usize,
    pub tiers: Vec<usize>,
    pub max_steps: usize,
    pub samples_per_step: u64,
    pub candidate_count: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub target_pool_size: u64,
    /// Later tiers see earlier tiers' trajectories in the diversity term.
    pub share_across_runs: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectSection {
    /// Proxy trained from scratch along each sampled trajectory, with the
    /// sampler's samples per step.
    pub proxy: ProxyConfig,
    pub workers: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchProfile {
    Desk,
    Paper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSection {
    pub architecture: ArchProfile,
    /// History steps the networks attend over.
    pub context: usize,
    /// Per-field reward weights; must sum to 1.
    pub lambda: Vec<f64>,
    pub sft: SftConfig,
    pub cql: CqlConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuideSection {
    pub max_steps: usize,
    pub samples_per_step: usize,
    pub target_pool: u64,
    pub space: GuideSpace,
    /// The continually trained target learner.
    pub proxy: ProxyConfig,
    /// Pre-training of the target learner on the start state.
    pub base_steps: usize,
    pub base_samples_per_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegMixSection {
    pub mixtures: usize,
    pub steps: usize,
    pub samples_per_step: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    pub profile: String,
    pub seed: u64,
    pub env: EnvSection,
    pub start: StartSection,
    pub sampler: SamplerSection,
    pub collect: CollectSection,
    pub agent: AgentSection,
    pub guide: GuideSection,
    pub regmix: RegMixSection,
}

fn named(prefix: &str, count: usize) -> Vec<String> {
    (0..count).map(|i| format!("{prefix}-{i:02}")).collect()
}

impl PipelineConfig {
    /// Eight domains, 40-step runs; everything fits a laptop core.
    pub fn desk() -> Self {
        let guide_r = 4096;
        let sampler_r = 256;
        Self {
            version: CONFIG_VERSION,
            profile: "desk".into(),
            seed: 0,
            env: EnvSection {
                vocab_size: 64,
                seq_len: 16,
                source_domains: ["web", "news", "books", "forum"]
                    .map(|s| format!("general-{s}"))
                    .to_vec(),
                target_domains: ["algebra", "geometry", "arithmetic", "proofs"]
                    .map(|s| format!("math-{s}"))
                    .to_vec(),
                source_mixture: vec![0.4, 0.3, 0.2, 0.1],
                target_mixture: vec![0.35, 0.3, 0.2, 0.15],
                field_sharpness: 2.5,
                domain_noise: 0.6,
                domain_bias: 1.0,
                target_pool: 18 * guide_r as u64,
                target_pool_slack: 0.1,
                source_pool: 1_000_000,
                eval_pairs_per_field: 128,
                eval_prompt_len: 4,
            },
            start: StartSection {
                method: StartMethod::Estimate,
                samples: 3000,
            },
            sampler: SamplerSection {
                trajectories_per_tier: 16,
                tiers: vec![1, 100, 1000, 10_000],
                max_steps: 40,
                samples_per_step: sampler_r,
                candidate_count: 20_000,
                alpha: 1.0,
                beta: 1.0,
                gamma: 0.5,
                target_pool_size: 50 * sampler_r,
                share_across_runs: true,
            },
            collect: CollectSection {
                proxy: ProxyConfig {
                    minibatch: 64,
                    ..ProxyConfig::desk()
                },
                workers: 1,
            },
            agent: AgentSection {
                architecture: ArchProfile::Desk,
                context: 41,
                lambda: equal_lambda(2),
                sft: SftConfig::desk(),
                // short horizon and a light anchor to the data actions
                cql: CqlConfig {
                    discount: 0.5,
                    bc_weight: 0.3,
                    ..CqlConfig::desk()
                },
            },
            guide: GuideSection {
                max_steps: 40,
                samples_per_step: guide_r,
                target_pool: 18 * guide_r as u64,
                space: GuideSpace::Native,
                proxy: ProxyConfig::desk(),
                base_steps: 40,
                base_samples_per_step: guide_r,
            },
            regmix: RegMixSection {
                mixtures: 64,
                steps: 20,
                samples_per_step: sampler_r as usize,
            },
        }
    }

    /// The published scale: 26 + 26 domains, 96 trajectories per tier,
    /// 80 guided steps of 64K samples and the 2.1M-parameter actor.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.profile = "paper".into();
        c.env.source_domains = named("general", 26);
        c.env.target_domains = named("math", 26);
        c.env.source_mixture = vec![1.0 / 26.0; 26];
        c.env.target_mixture = vec![1.0 / 26.0; 26];
        c.env.target_pool = 64 * 1024 * 60;
        c.sampler.trajectories_per_tier = 96;
        c.sampler.max_steps = 80;
        c.agent.architecture = ArchProfile::Paper;
        c.agent.context = 81;
        c.guide.max_steps = 80;
        c.guide.samples_per_step = 64 * 1024;
        c.guide.target_pool = 64 * 1024 * 60;
        c.guide.base_samples_per_step = 64 * 1024;
        c.regmix.mixtures = 512;
        c
    }

    pub fn profile(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::Config(format!(
                "unknown profile {other:?} (expected desk or paper)"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "config version {} is not supported (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        corpus_spec(self).validate()?;
        sampler_config(self).validate()?;
        if self.sampler.tiers.is_empty() {
            return Err(Error::Config("sampler.tiers must not be empty".into()));
        }
        if self.start.method == StartMethod::Estimate && self.start.samples == 0 {
            return Err(Error::Config("start.samples must be positive".into()));
        }
        let fields = 2;
        if self.agent.lambda.len() != fields
            || self.agent.lambda.iter().any(|&l| !(l >= 0.0))
            || (self.agent.lambda.iter().sum::<f64>() - 1.0).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "agent.lambda needs {fields} non-negative weights summing to 1"
            )));
        }
        if self.agent.context == 0 {
            return Err(Error::Config("agent.context must be positive".into()));
        }
        self.agent.cql.validate()?;
        guided_config(self, self.guide.space).validate()?;
        if self.regmix.mixtures < self.env.source_domains.len() + self.env.target_domains.len() + 1 {
            return Err(Error::Config(
                "regmix.mixtures must exceed the number of domains".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }

    pub fn stage_seed(&self, label: &str) -> u64 {
        derive_seed(self.seed, label, 0)
    }
}

pub fn corpus_spec(cfg: &PipelineConfig) -> CorpusSpec {
    let e = &cfg.env;
    let mut domains: Vec<Domain> = e
        .source_domains
        .iter()
        .map(|n| Domain {
            name: n.clone(),
            field: Field::Source,
        })
        .collect();
    domains.extend(e.target_domains.iter().map(|n| Domain {
        name: n.clone(),
        field: Field::Target,
    }));
    CorpusSpec {
        vocab_size: e.vocab_size,
        seq_len: e.seq_len,
        domains,
        source_mixture: e.source_mixture.clone(),
        target_mixture: e.target_mixture.clone(),
        field_sharpness: e.field_sharpness,
        domain_noise: e.domain_noise,
        domain_bias: e.domain_bias,
        target_pool: e.target_pool,
        target_pool_slack: e.target_pool_slack,
        source_pool: e.source_pool,
        seed: cfg.stage_seed("env"),
    }
}

pub fn eval_spec(cfg: &PipelineConfig) -> EvalSpec {
    EvalSpec {
        pairs_per_field: cfg.env.eval_pairs_per_field,
        prompt_len: cfg.env.eval_prompt_len,
        seed: cfg.stage_seed("eval"),
    }
}

pub struct Environment {
    pub corpora: DomainCorpora,
    pub eval: EvalSet,
}

pub fn build_environment(cfg: &PipelineConfig) -> Result<Environment> {
    let corpora = generate_corpus(&corpus_spec(cfg))?;
    let eval = build_eval_set(&corpora, &eval_spec(cfg))?;
    Ok(Environment { corpora, eval })
}

/// Domain labels of `samples` draws from `mixture`, counted per domain.
pub fn draw_domain_counts(mixture: &MixtureDistribution, samples: usize, seed: u64) -> Result<Vec<u64>> {
    let pick = WeightedIndex::new(mixture.weights()).map_err(|e| Error::Data(format!("mixture weights: {e}")))?;
    let mut rng = stream(seed, "start.labels", 0);
    let mut counts = vec![0u64; mixture.dim()];
    for _ in 0..samples {
        counts[pick.sample(&mut rng)] += 1;
    }
    Ok(counts)
}

/// Sample sizes of the estimation curve.
pub const START_CURVE_SIZES: [usize; 5] = [500, 1000, 2000, 3000, 5000];

/// Median `KL(estimate ‖ truth)` over `repeats` independent label draws at
/// each sample size. Repeat `r` uses the same seed at every size.
pub fn start_kl_curve(
    truth: &MixtureDistribution,
    sizes: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if repeats == 0 {
        return Err(Error::Config("start curve needs at least one repeat".into()));
    }
    sizes
        .iter()
        .map(|&n| {
            let mut kls = (0..repeats)
                .map(|r| {
                    let counts = draw_domain_counts(truth, n, derive_seed(seed, "start.curve", r as u64))?;
                    kl_divergence(&estimate_state_from_counts(&counts)?, truth)
                })
                .collect::<Result<Vec<f64>>>()?;
            kls.sort_by(f64::total_cmp);
            let m = kls.len() / 2;
            let median = if kls.len() % 2 == 1 {
                kls[m]
            } else {
                0.5 * (kls[m - 1] + kls[m])
            };
            Ok((n, median))
        })
        .collect()
}

/// The start state ρ_0 and, when estimated, the counts it came from.
pub fn start_state(cfg: &PipelineConfig, env: &Environment) -> Result<(MixtureDistribution, Option<Vec<u64>>)> {
    let truth = env.corpora.spec.source_truth()?;
    match cfg.start.method {
        StartMethod::Truth => Ok((truth, None)),
        StartMethod::Estimate => {
            let counts = draw_domain_counts(&truth, cfg.start.samples, cfg.stage_seed("start"))?;
            Ok((estimate_state_from_counts(&counts)?, Some(counts)))
        }
    }
}

pub fn target_state(env: &Environment, start: &MixtureDistribution) -> Result<MixtureDistribution> {
    make_target_state(start, &env.corpora.spec.target_mixture, &env.corpora.space)
}

pub fn sampler_config(cfg: &PipelineConfig) -> SamplerConfig {
    let s = &cfg.sampler;
    SamplerConfig {
        trajectories: s.trajectories_per_tier,
        max_steps: s.max_steps,
        samples_per_step: s.samples_per_step,
        top_k: s.tiers.iter().copied().min().unwrap_or(1),
        candidate_count: s.candidate_count,
        alpha: s.alpha,
        beta: s.beta,
        gamma: s.gamma,
        target_pool_size: s.target_pool_size,
        seed: cfg.stage_seed("sampler"),
    }
}

pub fn sample(cfg: &PipelineConfig, env: &Environment, start: &MixtureDistribution) -> Result<TrajectorySet> {
    let target = target_state(env, start)?;
    sample_tiers(
        &sampler_config(cfg),
        &cfg.sampler.tiers,
        start,
        &target,
        &env.corpora.space,
        cfg.sampler.share_across_runs,
    )
}

pub fn collect_config(cfg: &PipelineConfig) -> CollectConfig {
    CollectConfig {
        proxy: cfg.collect.proxy.clone(),
        samples_per_step: cfg.sampler.samples_per_step as usize,
        proxy_seed: cfg.stage_seed("proxy"),
    }
}

pub fn collect(cfg: &PipelineConfig, env: &Environment, set: &TrajectorySet, workers: usize) -> Result<TrajectorySet> {
    collect_feedback(set, &env.corpora, &env.eval, &collect_config(cfg), workers)
}

/// [`collect`] reporting each trajectory as it completes.
pub fn collect_observed(
    cfg: &PipelineConfig,
    env: &Environment,
    set: &TrajectorySet,
    workers: usize,
    observe: &(dyn Fn(usize, &TrajectoryRecord) -> Result<()> + Sync),
) -> Result<TrajectorySet> {
    collect_feedback_observed(set, &env.corpora, &env.eval, &collect_config(cfg), workers, observe)
}

pub fn agent_arch(cfg: &PipelineConfig) -> AgentArch {
    let n = cfg.env.source_domains.len() + cfg.env.target_domains.len();
    let fields = cfg.agent.lambda.len();
    match cfg.agent.architecture {
        ArchProfile::Desk => AgentArch::desk(n, fields, cfg.agent.context),
        ArchProfile::Paper => AgentArch::paper(n, fields, cfg.agent.context),
    }
}

/// Corpus-wide standardization of a collected corpus.
pub fn standardize(collected: &TrajectorySet) -> Result<(TrajectorySet, Standardizer)> {
    standardize_corpus(collected)
}

/// SFT on the top-1 tier of a standardized corpus.
pub fn train_agent_sft(cfg: &PipelineConfig, standardized: &TrajectorySet) -> Result<SftOutcome> {
    let top = cfg.sampler.tiers.iter().copied().min().unwrap_or(1);
    if top != 1 {
        return Err(Error::Config("SFT needs a top-1 tier in sampler.tiers".into()));
    }
    train_sft(
        &standardized.tier(1),
        &agent_arch(cfg),
        &cfg.agent.sft,
        cfg.stage_seed("agent.sft"),
    )
}

/// CQL from the SFT actor over every transition of a standardized corpus.
pub fn train_agent_cql(
    cfg: &PipelineConfig,
    standardized: &TrajectorySet,
    sft_actor: &datamix_nn::NetworkParams,
) -> Result<CqlOutcome> {
    let transitions = build_transitions(standardized, &cfg.agent.lambda)?;
    train_cql(
        sft_actor,
        &transitions,
        &agent_arch(cfg),
        &cfg.agent.cql,
        cfg.stage_seed("agent.cql"),
    )
}

/// The target learner after pre-training on the start state.
pub fn pretrain_target(cfg: &PipelineConfig, env: &Environment, start: &MixtureDistribution) -> Result<ProxyLearner> {
    pretrain_base(
        &env.corpora,
        &cfg.guide.proxy,
        start,
        cfg.guide.base_steps,
        cfg.guide.base_samples_per_step,
        cfg.stage_seed("base"),
    )
}

/// Every guided and baseline run shares one batch stream seed, so policies
/// are compared on the same draws.
pub fn guided_config(cfg: &PipelineConfig, space: GuideSpace) -> GuidedRunConfig {
    GuidedRunConfig {
        max_steps: cfg.guide.max_steps,
        samples_per_step: cfg.guide.samples_per_step,
        target_pool: cfg.guide.target_pool,
        space,
        seed: cfg.stage_seed("guide"),
    }
}

pub fn regmix_config(cfg: &PipelineConfig) -> RegMixConfig {
    RegMixConfig {
        mixtures: cfg.regmix.mixtures,
        steps: cfg.regmix.steps,
        samples_per_step: cfg.regmix.samples_per_step,
        proxy: cfg.collect.proxy.clone(),
        seed: cfg.stage_seed("regmix"),
    }
}

pub fn fit_regmix(cfg: &PipelineConfig, env: &Environment, workers: usize) -> Result<RegMixFit> {
    let samples = regmix_samples(&env.corpora, &env.eval, &regmix_config(cfg), workers)?;
    regmix_fit(&samples, &cfg.agent.lambda)
}

/// Everything one end-to-end run produces.
pub struct EndToEnd {
    pub start: MixtureDistribution,
    pub collected: TrajectorySet,
    pub sft: SftOutcome,
    pub cql: CqlOutcome,
    pub regmix: RegMixFit,
    pub agent_rl: RunReport,
    pub agent_sft: RunReport,
    pub naive: RunReport,
    pub static_mixture: RunReport,
    pub regmix_run: RunReport,
}

pub fn run_end_to_end(cfg: &PipelineConfig, workers: usize) -> Result<EndToEnd> {
    cfg.validate()?;
    let env = build_environment(cfg)?;
    let (start, _) = start_state(cfg, &env)?;
    let sampled = sample(cfg, &env, &start)?;
    let collected = collect(cfg, &env, &sampled, workers)?;
    let (standardized, _) = standardize(&collected)?;
    let sft = train_agent_sft(cfg, &standardized)?;
    let cql = train_agent_cql(cfg, &standardized, &sft.actor)?;
    let regmix = fit_regmix(cfg, &env, workers)?;
    let base = pretrain_target(cfg, &env, &start)?;
    let genv = GuideEnv {
        corpora: &env.corpora,
        eval: &env.eval,
        base: &base,
        start: start.clone(),
    };
    let gcfg = guided_config(cfg, cfg.guide.space);
    let agent_rl = guide_training(&gcfg, &genv, &cql.actor)?;
    let agent_sft = guide_training(&gcfg, &genv, &sft.actor)?;
    let naive = run_baseline(BaselineMode::Naive, &gcfg, &genv, None)?;
    let static_mixture = run_baseline(BaselineMode::StaticMixture, &gcfg, &genv, Some(&start))?;
    let regmix_run = run_baseline(BaselineMode::RegMixLite, &gcfg, &genv, Some(&regmix.mixture))?;
    Ok(EndToEnd {
        start,
        collected,
        sft,
        cql,
        regmix,
        agent_rl,
        agent_sft,
        naive,
        static_mixture,
        regmix_run,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_validate() {
        PipelineConfig::desk().validate().unwrap();
        PipelineConfig::paper().validate().unwrap();
        assert!(PipelineConfig::profile("huge").is_err());
        let mut c = PipelineConfig::desk();
        c.version = 2;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn desk_early_stop_is_reachable_within_budget() {
        let c = PipelineConfig::desk();
        let full_target_steps = c.guide.target_pool.div_ceil(c.guide.samples_per_step as u64);
        assert!(full_target_steps < c.guide.max_steps as u64);
        // a balanced mixture also covers the pool before the step budget
        assert!(2 * full_target_steps <= c.guide.max_steps as u64);
    }

    #[test]
    fn stage_seeds_are_distinct_and_stable() {
        let c = PipelineConfig::desk();
        let labels = [
            "env",
            "eval",
            "start",
            "sampler",
            "proxy",
            "agent.sft",
            "agent.cql",
            "base",
            "guide",
            "regmix",
        ];
        let seeds: std::collections::BTreeSet<u64> = labels.iter().map(|l| c.stage_seed(l)).collect();
        assert_eq!(seeds.len(), labels.len());
        assert_eq!(c.stage_seed("env"), PipelineConfig::desk().stage_seed("env"));
    }

    #[test]
    fn estimated_start_is_close_to_truth() {
        let c = PipelineConfig::desk();
        let env = build_environment(&c).unwrap();
        let (start, counts) = start_state(&c, &env).unwrap();
        assert_eq!(counts.unwrap().iter().sum::<u64>(), 3000);
        let truth = env.corpora.spec.source_truth().unwrap();
        assert!(crate::mdp::kl_divergence(&start, &truth).unwrap() < 0.05);
        assert_eq!(start.mass(&env.corpora.space, Field::Target), 0.0);
    }
}
