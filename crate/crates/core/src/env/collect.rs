//! Feedback collection: each trajectory is replayed on its own proxy learner
//! trained from scratch, with a checkpoint evaluated after every step.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::corpus::{sample_batch, DomainCorpora, PoolCursor};
use crate::env::eval::{feedback, EvalSet};
use crate::env::proxy::{ProxyConfig, ProxyLearner};
use crate::error::{Error, Result};
use crate::mdp::{FeedbackVector, MixtureDistribution, TrajectoryRecord};
use crate::rng::stream;
use crate::sampler::TrajectorySet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectConfig {
    pub proxy: ProxyConfig,
    /// Sequences drawn per reweighting step.
    pub samples_per_step: usize,
    /// Seeds the proxy initialization (shared by every trajectory) and the
    /// per-trajectory batch streams.
    pub proxy_seed: u64,
}

/// Trains `learner` on one batch drawn from each action in turn and returns
/// the feedback after every step.
pub fn rollout(
    learner: &mut ProxyLearner,
    corpora: &DomainCorpora,
    eval: &EvalSet,
    actions: &[MixtureDistribution],
    samples_per_step: usize,
    cursor: &mut PoolCursor,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Vec<FeedbackVector>> {
    let mut out = Vec::with_capacity(actions.len());
    for rho in actions {
        let batch = sample_batch(corpora, cursor, rho, samples_per_step, rng)?;
        learner.train_step(&batch)?;
        let f = feedback(learner, eval)?;
        if f.scores.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("proxy produced non-finite scores".into()));
        }
        out.push(f);
    }
    Ok(out)
}

/// Feedback for one trajectory: step 0 from the untrained learner, then one
/// vector per action.
pub fn collect_one(
    traj: &TrajectoryRecord,
    index: usize,
    corpora: &DomainCorpora,
    eval: &EvalSet,
    cfg: &CollectConfig,
) -> Result<Vec<FeedbackVector>> {
    let mut learner = ProxyLearner::new(&cfg.proxy, corpora.vocab_size(), cfg.proxy_seed)?;
    let mut rng = stream(cfg.proxy_seed, "collect.batch", index as u64);
    let mut cursor = PoolCursor::new(corpora.space.dim());
    let mut out = vec![feedback(&learner, eval)?];
    out.extend(rollout(
        &mut learner,
        corpora,
        eval,
        &traj.actions,
        cfg.samples_per_step,
        &mut cursor,
        &mut rng,
    )?);
    Ok(out)
}

/// Attaches raw feedback to every trajectory of `set` that lacks it.
/// Trajectories that already carry feedback are kept as they are. With
/// `workers > 1` trajectories run on a thread pool; the result is identical
/// to the serial one.
pub fn collect_feedback(
    set: &TrajectorySet,
    corpora: &DomainCorpora,
    eval: &EvalSet,
    cfg: &CollectConfig,
    workers: usize,
) -> Result<TrajectorySet> {
    collect_feedback_observed(set, corpora, eval, cfg, workers, &|_, _| Ok(()))
}

/// [`collect_feedback`] calling `observe` with each newly collected
/// trajectory as soon as it is done, in completion order.
pub fn collect_feedback_observed(
    set: &TrajectorySet,
    corpora: &DomainCorpora,
    eval: &EvalSet,
    cfg: &CollectConfig,
    workers: usize,
    observe: &(dyn Fn(usize, &TrajectoryRecord) -> Result<()> + Sync),
) -> Result<TrajectorySet> {
    let work = |(i, t): (usize, &TrajectoryRecord)| -> Result<TrajectoryRecord> {
        let mut t = t.clone();
        if !t.has_feedback() {
            t.feedback = collect_one(&t, i, corpora, eval, cfg)?;
            observe(i, &t)?;
        }
        Ok(t)
    };
    let trajectories = if workers <= 1 {
        set.trajectories
            .iter()
            .enumerate()
            .map(work)
            .collect::<Result<Vec<_>>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| {
            set.trajectories
                .par_iter()
                .enumerate()
                .map(work)
                .collect::<Result<Vec<_>>>()
        })?
    };
    Ok(TrajectorySet { trajectories })
}

/// A learner pretrained for `steps` steps of `samples_per_step` sequences
/// drawn from `start`; stands in for the target model's original
/// pre-training.
pub fn pretrain_base(
    corpora: &DomainCorpora,
    proxy: &ProxyConfig,
    start: &MixtureDistribution,
    steps: usize,
    samples_per_step: usize,
    seed: u64,
) -> Result<ProxyLearner> {
    let mut learner = ProxyLearner::new(proxy, corpora.vocab_size(), seed)?;
    let mut rng = stream(seed, "base.batch", 0);
    let mut cursor = PoolCursor::new(corpora.space.dim());
    for _ in 0..steps {
        let batch = sample_batch(corpora, &mut cursor, start, samples_per_step, &mut rng)?;
        learner.train_step(&batch)?;
    }
    Ok(learner)
}
