//! Supervised warm-up: squared error between predicted and recorded actions.

use std::rc::Rc;

use datamix_nn::{
    decoder_logits, loss_and_gradients, optimizer_step, AttnMask, Bound, Graph, NetworkParams, OptState,
    OptimizerConfig, Tensor, Var,
};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::agent::{actor_config, init_actor, AgentArch, AgentInputStep};
use crate::error::{Error, Result};
use crate::mdp::{compensated_sum, TrajectoryRecord};
use crate::rng::stream;
use crate::sampler::TrajectorySet;

fn check_feedback(traj: &TrajectoryRecord, index: usize) -> Result<()> {
    if traj.feedback.len() != traj.len() {
        return Err(Error::MissingFeedback(index));
    }
    if traj.feedback.iter().any(|f| !f.standardized) {
        return Err(Error::Data(format!("trajectory {index} feedback is not standardized")));
    }
    Ok(())
}

fn features(traj: &TrajectoryRecord, upto: usize) -> Vec<Vec<f64>> {
    (0..upto)
        .map(|k| AgentInputStep::new(traj.distribution(k), &traj.feedback[k]).feature)
        .collect()
}

/// Adds the summed squared error of one trajectory to `g`.
fn sft_loss_var(g: &mut Graph, bound: &Bound, actor: &NetworkParams, traj: &TrajectoryRecord) -> Result<Var> {
    let cfg = actor_config(actor)?;
    let t = traj.len() - 1;
    let x = g.constant(Tensor::from_rows(&features(traj, t))?);
    let positions: Vec<usize> = (0..t).collect();
    let logits = decoder_logits(g, bound, cfg, x, &positions, Rc::new(AttnMask::causal(t)))?;
    let pred = g.softmax_rows(logits);
    let truth: Vec<Vec<f64>> = (1..=t).map(|k| traj.distribution(k).weights().to_vec()).collect();
    let truth = g.constant(Tensor::from_rows(&truth)?);
    let diff = g.sub(pred, truth);
    let sq = g.square(diff);
    Ok(g.sum(sq))
}

/// `Σ_{t≥1} ‖ρ_t − f(ρ̃_0, …, ρ̃_{t−1})‖²` on a trajectory with
/// standardized feedback. A trajectory without actions has zero loss.
pub fn sft_loss(actor: &NetworkParams, traj: &TrajectoryRecord) -> Result<f64> {
    check_feedback(traj, 0)?;
    if traj.actions.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let bound = actor.bind(&mut g, false);
    let l = sft_loss_var(&mut g, &bound, actor, traj)?;
    Ok(g.value(l).item())
}

/// Mean loss over trajectories and its gradient.
pub fn sft_loss_and_grad(actor: &NetworkParams, batch: &[&TrajectoryRecord]) -> Result<(f64, NetworkParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let inv = 1.0 / batch.len() as f64;
    Ok(loss_and_gradients(actor, |g, bound| {
        let mut parts = Vec::new();
        for t in batch.iter().filter(|t| !t.actions.is_empty()) {
            let l = sft_loss_var(g, bound, actor, t).map_err(|e| datamix_nn::NnError::Shape(e.to_string()))?;
            parts.push(l);
        }
        if parts.is_empty() {
            return Ok(g.constant(Tensor::scalar(0.0)));
        }
        let all = g.concat_rows(&parts);
        let s = g.sum(all);
        Ok(g.scale(s, inv))
    })?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SftConfig {
    pub steps: usize,
    /// Trajectories per update.
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl SftConfig {
    pub fn desk() -> Self {
        Self {
            steps: 400,
            batch_size: 4,
            optimizer: OptimizerConfig::adam(3e-3),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SftOutcome {
    pub actor: NetworkParams,
    /// (update, minibatch loss).
    pub curve: Vec<(usize, f64)>,
    /// Mean per-trajectory loss over the corpus before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

pub fn corpus_sft_loss(actor: &NetworkParams, corpus: &TrajectorySet) -> Result<f64> {
    let losses = corpus
        .trajectories
        .iter()
        .map(|t| sft_loss(actor, t))
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(losses) / corpus.len() as f64)
}

/// Trains an actor from scratch on top-1 trajectories.
pub fn train_sft(corpus: &TrajectorySet, arch: &AgentArch, cfg: &SftConfig, seed: u64) -> Result<SftOutcome> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if cfg.batch_size == 0 || cfg.steps == 0 {
        return Err(Error::Config("sft steps and batch_size must be positive".into()));
    }
    for (i, t) in corpus.trajectories.iter().enumerate() {
        if t.provenance.tier != 1 {
            return Err(Error::Data(format!(
                "trajectory {i} is from tier top-{}, not top-1",
                t.provenance.tier
            )));
        }
        check_feedback(t, i)?;
    }
    let mut actor = init_actor(arch, crate::rng::derive_seed(seed, "sft.init", 0))?;
    let initial_loss = corpus_sft_loss(&actor, corpus)?;
    let mut rng = stream(seed, "sft.order", 0);
    let mut state = OptState::default();
    let mut order: Vec<usize> = Vec::new();
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut picks = Vec::with_capacity(cfg.batch_size);
        while picks.len() < cfg.batch_size.min(corpus.len()) {
            if order.is_empty() {
                order = (0..corpus.len()).collect();
                order.shuffle(&mut rng);
            }
            picks.push(order.pop().expect("refilled"));
        }
        let batch: Vec<&TrajectoryRecord> = picks.iter().map(|&i| &corpus.trajectories[i]).collect();
        let (loss, grads) = sft_loss_and_grad(&actor, &batch)?;
        optimizer_step(&mut actor, &grads, &mut state, &cfg.optimizer)?;
        curve.push((step, loss));
    }
    let final_loss = corpus_sft_loss(&actor, corpus)?;
    Ok(SftOutcome {
        actor,
        curve,
        initial_loss,
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::agent_predict;
    use crate::mdp::{FeedbackVector, MixtureDistribution, Provenance};
    use datamix_nn::gradcheck::check_gradients;

    fn d(w: &[f64]) -> MixtureDistribution {
        MixtureDistribution::try_from(w.to_vec()).unwrap()
    }

    fn z(x: &[f64]) -> FeedbackVector {
        FeedbackVector {
            scores: x.to_vec(),
            standardized: true,
        }
    }

    fn traj(start: &[f64], actions: &[&[f64]], fb: f64) -> TrajectoryRecord {
        TrajectoryRecord {
            start: d(start),
            actions: actions.iter().map(|a| d(a)).collect(),
            feedback: (0..=actions.len())
                .map(|k| z(&[fb * k as f64, -0.5 * k as f64]))
                .collect(),
            provenance: Provenance {
                seed: 0,
                tier: 1,
                config_hash: String::new(),
            },
        }
    }

    fn arch() -> AgentArch {
        AgentArch::desk(2, 2, 16)
    }

    #[test]
    fn uniform_prediction_single_step() {
        let a = init_actor(&arch(), 0).unwrap();
        let t = traj(&[0.5, 0.5], &[&[1.0, 0.0]], 0.1);
        assert!((sft_loss(&a, &t).unwrap() - 0.5).abs() < 1e-15);
        let mut raw = t.clone();
        raw.feedback[0].standardized = false;
        assert!(sft_loss(&a, &raw).is_err());
        raw.feedback.clear();
        assert!(matches!(sft_loss(&a, &raw), Err(Error::MissingFeedback(_))));
    }

    #[test]
    fn zero_loss_when_prediction_is_exact() {
        let a = init_actor(&arch(), 0).unwrap();
        let t = traj(&[0.9, 0.1], &[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]], 0.2);
        assert_eq!(sft_loss(&a, &t).unwrap(), 0.0);
    }

    #[test]
    fn loss_matches_per_step_recomputation() {
        let mut a = init_actor(&AgentArch::desk(3, 2, 16), 5).unwrap();
        for i in 0..a.param_count() {
            a.set_scalar(i, a.scalar(i) + ((i as f64) * 0.13).sin() * 0.2);
        }
        let t = traj(
            &[0.2, 0.3, 0.5],
            &[&[0.1, 0.1, 0.8], &[0.6, 0.2, 0.2], &[0.3, 0.3, 0.4], &[1.0, 0.0, 0.0]],
            0.4,
        );
        let mut terms = Vec::new();
        for s in 1..t.len() {
            let hist: Vec<AgentInputStep> = (0..s)
                .map(|k| AgentInputStep::new(t.distribution(k), &t.feedback[k]))
                .collect();
            let p = agent_predict(&a, &hist).unwrap();
            for (x, y) in p.weights().iter().zip(t.distribution(s).weights()) {
                terms.push((x - y) * (x - y));
            }
        }
        let oracle = compensated_sum(terms);
        let got = sft_loss(&a, &t).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
        assert!(got > 0.0);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut a = init_actor(&AgentArch::desk(3, 2, 16), 6).unwrap();
        for i in 0..a.param_count() {
            a.set_scalar(i, a.scalar(i) + ((i as f64) * 0.71).cos() * 0.1);
        }
        let t1 = traj(&[0.2, 0.3, 0.5], &[&[0.1, 0.1, 0.8], &[0.6, 0.2, 0.2]], 0.4);
        let t2 = traj(&[0.4, 0.3, 0.3], &[&[0.3, 0.3, 0.4]], -0.7);
        let batch = vec![&t1, &t2];
        let (_, g) = sft_loss_and_grad(&a, &batch).unwrap();
        let report = check_gradients(&a, &g, |p| sft_loss_and_grad(p, &batch).unwrap().0, 50, 3, 1e-5);
        assert!(report.within(1e-4, 1e-8), "{:?}", report.worst);
    }

    #[test]
    fn memorizes_two_trajectories_and_is_deterministic() {
        let corpus = TrajectorySet {
            trajectories: vec![
                traj(&[0.6, 0.4], &[&[0.7, 0.3], &[0.8, 0.2], &[0.9, 0.1]], 1.0),
                traj(&[0.4, 0.6], &[&[0.2, 0.8], &[0.3, 0.7], &[0.1, 0.9]], -1.0),
            ],
        };
        let cfg = SftConfig {
            steps: 300,
            batch_size: 2,
            optimizer: OptimizerConfig::adam(1e-2),
        };
        let seed = 1;
        let out = train_sft(&corpus, &arch(), &cfg, seed).unwrap();
        // squared error per predicted step, summed over coordinates
        let mse = out.final_loss / 3.0;
        assert!(mse < 1e-3, "{mse}");
        let again = train_sft(&corpus, &arch(), &cfg, seed).unwrap();
        assert_eq!(out.actor.content_hash(), again.actor.content_hash());
        let mut wrong = corpus.clone();
        wrong.trajectories[0].provenance.tier = 100;
        assert!(train_sft(&wrong, &arch(), &cfg, seed).is_err());
        assert!(matches!(
            train_sft(&TrajectorySet { trajectories: vec![] }, &arch(), &cfg, seed),
            Err(Error::EmptyCorpus)
        ));
    }

    #[test]
    fn reproduces_a_constant_action_trajectory() {
        let c = [0.15, 0.85];
        let corpus = TrajectorySet {
            trajectories: vec![traj(&[0.5, 0.5], &[&c, &c, &c, &c, &c], 0.3)],
        };
        let cfg = SftConfig {
            steps: 200,
            batch_size: 1,
            optimizer: OptimizerConfig::adam(1e-2),
        };
        let seed = 2;
        let out = train_sft(&corpus, &arch(), &cfg, seed).unwrap();
        let t = &corpus.trajectories[0];
        let hist: Vec<AgentInputStep> = (0..3)
            .map(|k| AgentInputStep::new(t.distribution(k), &t.feedback[k]))
            .collect();
        let p = agent_predict(&out.actor, &hist).unwrap();
        assert!(p.max_abs_diff(&d(&c)) < 0.01, "{:?}", p.weights());
    }
}
