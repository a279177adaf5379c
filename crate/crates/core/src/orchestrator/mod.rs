//! Agent-guided continual training of a target learner, the fixed-policy
//! baselines it is compared against, and trajectory analysis.

pub mod analysis;
pub mod regmix;

use std::time::Instant;

use datamix_nn::NetworkParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::agent::{AgentInputStep, ConstantPolicy, Policy};
use crate::env::corpus::{sample_batch, DomainCorpora, PoolCursor};
use crate::env::eval::{feedback, standardize_feedback, EvalSet, StandardizeMode};
use crate::env::proxy::ProxyLearner;
use crate::error::{Error, Result};
use crate::mdp::{
    project_to_fields, spread_fields, validate_distribution, FeedbackVector, Field, MixtureDistribution, Provenance,
    TrajectoryRecord,
};
use crate::rng::stream;

/// Action space the policy's proposals are executed in.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideSpace {
    /// The proposal is used as is.
    Native,
    /// The proposal is collapsed to source/target mass, and each field's mass
    /// is spread over its domains by the field's empirical distribution.
    Fields,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidedRunConfig {
    /// Maximum reweighting steps (M_tgt).
    pub max_steps: usize,
    /// Sequences per step (R_tgt).
    pub samples_per_step: usize,
    /// Target-field sequences |T|; the run stops once it has drawn this many.
    pub target_pool: u64,
    pub space: GuideSpace,
    pub seed: u64,
}

impl GuidedRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 || self.samples_per_step == 0 {
            return Err(Error::Config(
                "guide max_steps and samples_per_step must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// Everything a guided run executes against.
pub struct GuideEnv<'a> {
    pub corpora: &'a DomainCorpora,
    pub eval: &'a EvalSet,
    /// The pretrained learner; every run trains its own copy.
    pub base: &'a ProxyLearner,
    /// Distribution of the base learner's pre-training data (ρ_0).
    pub start: MixtureDistribution,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    /// Start, executed actions and raw feedback (index 0 before any update).
    pub trajectory: TrajectoryRecord,
    /// Cumulative target-field sequences drawn after each step.
    pub coverage: Vec<u64>,
    /// Source-field sequences drawn over the run.
    pub source_samples: u64,
    /// Step at which coverage reached the target pool, if it did.
    pub early_stop: Option<usize>,
    pub final_learner: NetworkParams,
    /// Wall time per step; excluded from the hash.
    pub step_seconds: Vec<f64>,
}

#[derive(Serialize)]
struct HashedReport<'a> {
    trajectory: &'a TrajectoryRecord,
    coverage: &'a [u64],
    source_samples: u64,
    early_stop: Option<usize>,
    final_learner: String,
}

impl RunReport {
    pub fn steps(&self) -> usize {
        self.trajectory.actions.len()
    }

    pub fn final_feedback(&self) -> &FeedbackVector {
        self.trajectory.feedback.last().expect("report has feedback")
    }

    pub fn target_samples(&self) -> u64 {
        self.coverage.last().copied().unwrap_or(0)
    }

    /// Each step's feedback standardized against the history up to and
    /// including it, as the policy saw it at the following step.
    pub fn running_standardized(&self) -> Result<Vec<FeedbackVector>> {
        let f = &self.trajectory.feedback;
        (1..=f.len())
            .map(|i| {
                Ok(standardize_feedback(&f[..i], StandardizeMode::RunningList)?
                    .pop()
                    .expect("non-empty"))
            })
            .collect()
    }

    pub fn hash(&self) -> String {
        let h = HashedReport {
            trajectory: &self.trajectory,
            coverage: &self.coverage,
            source_samples: self.source_samples,
            early_stop: self.early_stop,
            final_learner: self.final_learner.content_hash(),
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&h).expect("report serializes")))
    }
}

/// Within-field weights of the corpus: source truth and target empirical.
fn field_spread(corpora: &DomainCorpora, two: &MixtureDistribution) -> Result<MixtureDistribution> {
    spread_fields(
        two,
        &corpora.space,
        &corpora.spec.source_mixture,
        &corpora.spec.target_mixture,
    )
}

fn execute(corpora: &DomainCorpora, space: GuideSpace, proposal: MixtureDistribution) -> Result<MixtureDistribution> {
    validate_distribution(proposal.weights().to_vec(), corpora.space.dim())?;
    match space {
        GuideSpace::Native => Ok(proposal),
        GuideSpace::Fields => field_spread(corpora, &project_to_fields(&proposal, &corpora.space)?),
    }
}

/// Continual training of a copy of `env.base` where each step's mixture is
/// proposed by `policy` from the running-standardized history. Stops after
/// `max_steps` steps or at the first step whose cumulative target draws reach
/// `target_pool`.
pub fn guide_training(cfg: &GuidedRunConfig, env: &GuideEnv, policy: &dyn Policy) -> Result<RunReport> {
    cfg.validate()?;
    let corpora = env.corpora;
    let n = corpora.space.dim();
    if env.start.dim() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: env.start.dim(),
        });
    }
    let mut learner = env.base.clone();
    let mut rng = stream(cfg.seed, "guide.batch", 0);
    let mut cursor = PoolCursor::new(n);
    let mut dists = vec![env.start.clone()];
    let mut raw = vec![feedback(&learner, env.eval)?];
    let mut coverage = Vec::new();
    let mut covered = 0u64;
    let mut source_samples = 0u64;
    let mut early_stop = None;
    let mut step_seconds = Vec::new();
    for step in 1..=cfg.max_steps {
        let clock = Instant::now();
        let z = standardize_feedback(&raw, StandardizeMode::RunningList)?;
        let history: Vec<AgentInputStep> = dists.iter().zip(&z).map(|(d, f)| AgentInputStep::new(d, f)).collect();
        let rho = execute(corpora, cfg.space, policy.act(&history)?)?;
        let batch = sample_batch(corpora, &mut cursor, &rho, cfg.samples_per_step, &mut rng)?;
        learner.train_step(&batch)?;
        for &d in &batch.domains {
            match corpora.space.field(d) {
                Field::Target => covered += 1,
                Field::Source => source_samples += 1,
            }
        }
        let f = feedback(&learner, env.eval)?;
        if f.scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("learner produced non-finite scores".into()));
        }
        raw.push(f);
        dists.push(rho);
        coverage.push(covered);
        step_seconds.push(clock.elapsed().as_secs_f64());
        if covered >= cfg.target_pool {
            early_stop = Some(step);
            break;
        }
    }
    let start = dists.remove(0);
    Ok(RunReport {
        trajectory: TrajectoryRecord {
            start,
            actions: dists,
            feedback: raw,
            provenance: Provenance {
                seed: cfg.seed,
                tier: 0,
                config_hash: cfg.hash(),
            },
        },
        coverage,
        source_samples,
        early_stop,
        final_learner: learner.params,
        step_seconds,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BaselineMode {
    /// Target-field data only, in its empirical proportions.
    Naive,
    /// A fixed distribution, normally the start state.
    StaticMixture,
    /// The mixture chosen by regression over proxy runs.
    #[serde(rename = "regmix-lite")]
    RegMixLite,
}

/// The guided loop with a constant policy. `fixed` is required for
/// `StaticMixture` and `RegMixLite` and ignored for `Naive`.
pub fn run_baseline(
    mode: BaselineMode,
    cfg: &GuidedRunConfig,
    env: &GuideEnv,
    fixed: Option<&MixtureDistribution>,
) -> Result<RunReport> {
    let rho = match (mode, fixed) {
        (BaselineMode::Naive, _) => env.corpora.spec.target_empirical()?,
        (_, Some(d)) => d.clone(),
        (_, None) => return Err(Error::Config(format!("{mode:?} baseline needs a fixed distribution"))),
    };
    guide_training(cfg, env, &ConstantPolicy(rho))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::collect::pretrain_base;
    use crate::env::corpus::{desk_corpus_spec, generate_corpus, CorpusSpec};
    use crate::env::eval::{build_eval_set, EvalSpec};
    use crate::env::proxy::ProxyConfig;

    struct Fixture {
        corpora: DomainCorpora,
        eval: EvalSet,
        base: ProxyLearner,
    }

    impl Fixture {
        fn new(target_pool: u64) -> Self {
            let corpora = generate_corpus(&CorpusSpec {
                target_pool,
                ..desk_corpus_spec(5)
            })
            .unwrap();
            let eval = build_eval_set(
                &corpora,
                &EvalSpec {
                    pairs_per_field: 32,
                    prompt_len: 4,
                    seed: 5,
                },
            )
            .unwrap();
            let start = corpora.spec.source_truth().unwrap();
            let base = pretrain_base(&corpora, &ProxyConfig::desk(), &start, 10, 1024, 5).unwrap();
            Self { corpora, eval, base }
        }

        fn env(&self) -> GuideEnv<'_> {
            GuideEnv {
                corpora: &self.corpora,
                eval: &self.eval,
                base: &self.base,
                start: self.corpora.spec.source_truth().unwrap(),
            }
        }
    }

    fn cfg(max_steps: usize, target_pool: u64) -> GuidedRunConfig {
        GuidedRunConfig {
            max_steps,
            samples_per_step: 256,
            target_pool,
            space: GuideSpace::Native,
            seed: 3,
        }
    }

    /// Records the histories it is shown.
    struct Recorder(std::cell::RefCell<Vec<Vec<AgentInputStep>>>, MixtureDistribution);

    impl Policy for Recorder {
        fn act(&self, history: &[AgentInputStep]) -> Result<MixtureDistribution> {
            self.0.borrow_mut().push(history.to_vec());
            Ok(self.1.clone())
        }
    }

    #[test]
    fn empty_target_pool_stops_after_one_step() {
        let fx = Fixture::new(10_000);
        let r = guide_training(&cfg(5, 0), &fx.env(), &ConstantPolicy(MixtureDistribution::uniform(8))).unwrap();
        assert_eq!(r.early_stop, Some(1));
        assert_eq!(r.steps(), 1);
        assert_eq!(r.trajectory.feedback.len(), 2);
    }

    #[test]
    fn start_state_stub_gives_constant_trajectory() {
        let fx = Fixture::new(10_000);
        let env = fx.env();
        let r = guide_training(&cfg(4, u64::MAX), &env, &ConstantPolicy(env.start.clone())).unwrap();
        assert_eq!(r.steps(), 4);
        assert!(r.trajectory.actions.iter().all(|a| a == &env.start));
        assert_eq!(r.early_stop, None);
        assert_eq!(r.target_samples(), 0);
        assert_eq!(r.source_samples, 4 * 256);
    }

    /// The policy sees `[ρ_i ; z_i]` with z the running-list z-score of the
    /// raw history so far; the first step sees the single-element fallback.
    #[test]
    fn policy_sees_running_standardized_history() {
        let fx = Fixture::new(10_000);
        let rec = Recorder(Default::default(), MixtureDistribution::uniform(8));
        let r = guide_training(&cfg(3, u64::MAX), &fx.env(), &rec).unwrap();
        let seen = rec.0.borrow();
        assert_eq!(seen.len(), 3);
        assert_eq!(seen[0].len(), 1);
        assert!(seen[0][0].feature[8..].iter().all(|&z| z == 0.0));
        for (t, h) in seen.iter().enumerate() {
            assert_eq!(h.len(), t + 1);
            let raw = &r.trajectory.feedback[..=t];
            for field in 0..2 {
                let xs: Vec<f64> = raw.iter().map(|f| f.scores[field]).collect();
                let mean = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
                let sd = if var.sqrt() < 1e-12 { 1.0 } else { var.sqrt() };
                for (i, step) in h.iter().enumerate() {
                    assert!((step.feature[8 + field] - (xs[i] - mean) / sd).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn early_stop_at_first_covering_step() {
        let fx = Fixture::new(10_000);
        let env = fx.env();
        let tgt = env.corpora.spec.target_empirical().unwrap();
        let r = guide_training(&cfg(10, 600), &env, &ConstantPolicy(tgt)).unwrap();
        // all-target batches of 256 cover 600 at step 3
        assert_eq!(r.coverage, vec![256, 512, 768]);
        assert_eq!(r.early_stop, Some(3));
        assert!(r.coverage.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn fields_space_spreads_by_empirical_weights() {
        let fx = Fixture::new(10_000);
        let env = fx.env();
        let c = GuidedRunConfig {
            space: GuideSpace::Fields,
            ..cfg(2, u64::MAX)
        };
        let r = guide_training(&c, &env, &ConstantPolicy(MixtureDistribution::vertex(8, 0))).unwrap();
        for a in &r.trajectory.actions {
            for (x, y) in a.weights()[..4].iter().zip(&fx.corpora.spec.source_mixture) {
                assert!((x - y).abs() < 1e-15);
            }
            assert!(a.weights()[4..].iter().all(|&w| w == 0.0));
        }
    }

    #[test]
    fn baselines_and_reproducibility() {
        let fx = Fixture::new(10_000);
        let env = fx.env();
        let c = cfg(3, u64::MAX);
        let naive = run_baseline(BaselineMode::Naive, &c, &env, None).unwrap();
        let tgt = fx.corpora.spec.target_empirical().unwrap();
        assert!(naive.trajectory.actions.iter().all(|a| a == &tgt));
        assert_eq!(naive.source_samples, 0);
        assert!(matches!(
            run_baseline(BaselineMode::StaticMixture, &c, &env, None),
            Err(Error::Config(_))
        ));
        let again = run_baseline(BaselineMode::Naive, &c, &env, None).unwrap();
        assert_eq!(naive.hash(), again.hash());
        let other = run_baseline(BaselineMode::Naive, &GuidedRunConfig { seed: 4, ..c }, &env, None).unwrap();
        assert_ne!(naive.hash(), other.hash());
    }
}
