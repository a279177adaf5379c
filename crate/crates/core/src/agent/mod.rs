//! The data mixing agent: a causal decoder actor mapping the history of
//! (distribution, standardized feedback) steps to the next distribution, and
//! a single-layer critic scoring distribution sequences.

pub mod bandit;
pub mod cql;
pub mod reward;
pub mod sft;

use std::rc::Rc;

use datamix_nn::{decoder_logits, Architecture, AttnMask, DecoderConfig, Graph, HeadKind, NetworkParams, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{validate_distribution, FeedbackVector, MixtureDistribution, StateStep};

/// One history element: `[ρ_i ; feedback_i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentInputStep {
    pub feature: Vec<f64>,
}

impl AgentInputStep {
    pub fn new(dist: &MixtureDistribution, feedback: &FeedbackVector) -> Self {
        let mut feature = dist.weights().to_vec();
        feature.extend_from_slice(&feedback.scores);
        Self { feature }
    }

    pub fn from_state(step: &StateStep) -> Self {
        Self::new(&step.dist, &step.feedback)
    }
}

/// Anything that proposes the next distribution from a history.
pub trait Policy {
    fn act(&self, history: &[AgentInputStep]) -> Result<MixtureDistribution>;

    /// The action after every prefix `history[..=i]`, in order.
    fn act_all(&self, history: &[AgentInputStep]) -> Result<Vec<MixtureDistribution>> {
        (1..=history.len()).map(|i| self.act(&history[..i])).collect()
    }
}

impl Policy for NetworkParams {
    fn act(&self, history: &[AgentInputStep]) -> Result<MixtureDistribution> {
        agent_predict(self, history)
    }

    fn act_all(&self, history: &[AgentInputStep]) -> Result<Vec<MixtureDistribution>> {
        let cfg = actor_config(self)?;
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        if history.len() > cfg.max_context {
            return (1..=history.len()).map(|i| self.act(&history[..i])).collect();
        }
        let probs = actor_rows(self, history)?;
        probs.to_rows().into_iter().map(|r| to_distribution(r)).collect()
    }
}

/// A policy that always proposes the same distribution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantPolicy(pub MixtureDistribution);

impl Policy for ConstantPolicy {
    fn act(&self, history: &[AgentInputStep]) -> Result<MixtureDistribution> {
        if history.is_empty() {
            return Err(Error::EmptyHistory);
        }
        Ok(self.0.clone())
    }
}

pub(crate) fn actor_config(params: &NetworkParams) -> Result<&DecoderConfig> {
    match params.arch() {
        Architecture::Decoder(c) if c.head == HeadKind::Softmax => Ok(c),
        _ => Err(Error::CheckpointInvalid(
            "actor must be a decoder with a softmax head".into(),
        )),
    }
}

pub(crate) fn critic_config(params: &NetworkParams) -> Result<&DecoderConfig> {
    match params.arch() {
        Architecture::Decoder(c) if c.head == HeadKind::Sigmoid && c.output_dim == 1 => Ok(c),
        _ => Err(Error::CheckpointInvalid(
            "critic must be a decoder with a scalar sigmoid head".into(),
        )),
    }
}

fn to_distribution(row: Vec<f64>) -> Result<MixtureDistribution> {
    let n = row.len();
    validate_distribution(row, n).map_err(|e| Error::Numeric(format!("actor output off the simplex: {e}")))
}

/// Softmax rows of one causal actor pass over `history`.
fn actor_rows(actor: &NetworkParams, history: &[AgentInputStep]) -> Result<Tensor> {
    let cfg = actor_config(actor)?;
    let rows: Vec<Vec<f64>> = history.iter().map(|s| s.feature.clone()).collect();
    let t = rows.len();
    let mut g = Graph::new();
    let bound = actor.bind(&mut g, false);
    let x = g.constant(Tensor::from_rows(&rows)?);
    let positions: Vec<usize> = (0..t).collect();
    let logits = decoder_logits(&mut g, &bound, cfg, x, &positions, Rc::new(AttnMask::causal(t)))?;
    let p = g.softmax_rows(logits);
    Ok(g.value(p).clone())
}

/// Next distribution from the most recent `max_context` steps of `history`.
pub fn agent_predict(actor: &NetworkParams, history: &[AgentInputStep]) -> Result<MixtureDistribution> {
    let cfg = actor_config(actor)?;
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let window = &history[history.len().saturating_sub(cfg.max_context)..];
    let probs = actor_rows(actor, window)?;
    to_distribution(probs.row(probs.rows() - 1).to_vec())
}

/// Q-value of `action` after `state`: the critic's sigmoid output at the
/// last position of `state ∥ action`, keeping the most recent window.
pub fn critic_q(critic: &NetworkParams, state: &[MixtureDistribution], action: &MixtureDistribution) -> Result<f64> {
    let cfg = critic_config(critic)?;
    let mut rows: Vec<Vec<f64>> = state.iter().map(|d| d.weights().to_vec()).collect();
    rows.push(action.weights().to_vec());
    let rows = &rows[rows.len().saturating_sub(cfg.max_context)..];
    let out = datamix_nn::decoder_forward(critic, rows)?;
    Ok(out[out.len() - 1][0])
}

/// Actor and critic descriptors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentArch {
    pub actor: DecoderConfig,
    pub critic: DecoderConfig,
}

impl AgentArch {
    /// Small networks for the desk environment: `n` domains, `fields`
    /// feedback entries, histories up to `context` steps.
    pub fn desk(n: usize, fields: usize, context: usize) -> Self {
        Self {
            actor: DecoderConfig {
                layers: 2,
                d_model: 32,
                heads: 4,
                ff_dim: 64,
                input_dim: n + fields,
                output_dim: n,
                max_context: context,
                head: HeadKind::Softmax,
                zero_init_head: true,
            },
            critic: DecoderConfig {
                layers: 1,
                d_model: 32,
                heads: 4,
                ff_dim: 64,
                input_dim: n,
                output_dim: 1,
                max_context: context + 1,
                head: HeadKind::Sigmoid,
                zero_init_head: false,
            },
        }
    }

    /// Two-layer actor of about 2.1M parameters for a 52-domain space with
    /// two feedback fields.
    pub fn paper(n: usize, fields: usize, context: usize) -> Self {
        let mut a = Self::desk(n, fields, context);
        a.actor.d_model = 288;
        a.actor.heads = 8;
        a.actor.ff_dim = 1152;
        a.critic.d_model = 128;
        a.critic.ff_dim = 512;
        a
    }
}

pub fn init_actor(arch: &AgentArch, seed: u64) -> Result<NetworkParams> {
    Ok(NetworkParams::init(Architecture::Decoder(arch.actor.clone()), seed)?)
}

pub fn init_critic(arch: &AgentArch, seed: u64) -> Result<NetworkParams> {
    Ok(NetworkParams::init(Architecture::Decoder(arch.critic.clone()), seed)?)
}
