//! Single-step environment with a hidden optimal mixture, used to check that
//! conservative actor-critic training finds a known optimum.

use serde::{Deserialize, Serialize};

use crate::agent::cql::{train_cql, CqlConfig, CqlOutcome};
use crate::agent::{init_actor, AgentArch, AgentInputStep, Policy};
use crate::error::Result;
use crate::mdp::{kl_divergence, validate_distribution, FeedbackVector, MixtureDistribution, StateStep, Transition};
use crate::rng::{derive_seed, stream};
use crate::sampler::random_probability;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BanditConfig {
    pub domains: usize,
    /// Logged (action, reward) pairs.
    pub dataset: usize,
    pub cql: CqlConfig,
    pub seed: u64,
}

impl BanditConfig {
    /// Four domains, 512 logged pulls. Every transition is terminal, so the
    /// discount only sets the scale rewards are mapped to; 0.5 keeps them in
    /// the sigmoid critic's responsive range.
    pub fn desk(seed: u64) -> Self {
        Self {
            domains: 4,
            dataset: 512,
            cql: CqlConfig {
                discount: 0.5,
                ..CqlConfig::desk()
            },
            seed,
        }
    }
}

/// A flat-Dirichlet draw pulled halfway toward uniform, so the optimum is
/// interior.
pub fn hidden_optimum(n: usize, seed: u64) -> MixtureDistribution {
    let d = random_probability(n, &mut stream(seed, "bandit.optimum", 0));
    let w: Vec<f64> = d.weights().iter().map(|x| 0.5 * x + 0.5 / n as f64).collect();
    let s: f64 = w.iter().sum();
    validate_distribution(w.iter().map(|x| x / s).collect(), n).expect("interior point")
}

fn start_step(n: usize) -> StateStep {
    StateStep {
        dist: MixtureDistribution::uniform(n),
        feedback: FeedbackVector {
            scores: vec![0.0, 0.0],
            standardized: true,
        },
    }
}

/// Terminal transitions from the uniform start with flat-Dirichlet actions
/// and reward `−KL(action ‖ optimum)`.
pub fn bandit_transitions(optimum: &MixtureDistribution, count: usize, seed: u64) -> Result<Vec<Transition>> {
    let n = optimum.dim();
    let mut rng = stream(seed, "bandit.data", 0);
    (0..count)
        .map(|i| {
            let a = random_probability(n, &mut rng);
            let reward = -kl_divergence(&a, optimum)?;
            let s = start_step(n);
            Ok(Transition {
                trajectory: i,
                step: 1,
                state: vec![s.clone()],
                action: a.clone(),
                reward,
                next_state: vec![
                    s,
                    StateStep {
                        dist: a,
                        feedback: FeedbackVector {
                            scores: vec![0.0, 0.0],
                            standardized: true,
                        },
                    },
                ],
                terminal: true,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct BanditOutcome {
    pub optimum: MixtureDistribution,
    pub action: MixtureDistribution,
    pub total_variation: f64,
    pub training: CqlOutcome,
}

pub fn run_bandit(cfg: &BanditConfig) -> Result<BanditOutcome> {
    let n = cfg.domains;
    let optimum = hidden_optimum(n, cfg.seed);
    let data = bandit_transitions(&optimum, cfg.dataset, cfg.seed)?;
    let arch = AgentArch::desk(n, 2, 4);
    let actor = init_actor(&arch, derive_seed(cfg.seed, "bandit.actor", 0))?;
    let training = train_cql(&actor, &data, &arch, &cfg.cql, derive_seed(cfg.seed, "bandit.cql", 0))?;
    let action = training.actor.act(&[AgentInputStep::from_state(&start_step(n))])?;
    Ok(BanditOutcome {
        total_variation: action.total_variation(&optimum),
        optimum,
        action,
        training,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn optimum_is_interior_and_data_is_terminal() {
        let opt = hidden_optimum(5, 3);
        assert!(opt.weights().iter().all(|&w| w >= 0.1 - 1e-12));
        let data = bandit_transitions(&opt, 20, 3).unwrap();
        assert!(data.iter().all(|t| t.terminal && t.reward <= 0.0));
        let ids: std::collections::BTreeSet<usize> = data.iter().map(|t| t.trajectory).collect();
        assert_eq!(ids.len(), 20);
    }

    #[test]
    fn trained_actor_finds_the_optimum() {
        let out = run_bandit(&BanditConfig::desk(0)).unwrap();
        assert!(out.total_variation < 0.1, "{:?} vs {:?}", out.action, out.optimum);
    }
}
