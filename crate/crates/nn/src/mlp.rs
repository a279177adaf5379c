//! Token-level next-token predictor: embeddings of the last `context` tokens,
//! one tanh hidden layer, and a softmax over the vocabulary.
//!
//! The output layer starts at zero, so a fresh model predicts the uniform
//! distribution at every position.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{Graph, Var};
use crate::params::Bound;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenMlpConfig {
    pub vocab_size: usize,
    /// Number of preceding tokens the model conditions on.
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
}

impl TokenMlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.context == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(NnError::DescriptorInvalid(
                "token mlp needs vocab >= 2 and positive context/embed/hidden sizes".into(),
            ));
        }
        Ok(())
    }

    /// Index used for context slots before the start of a sequence.
    pub fn pad_token(&self) -> usize {
        self.vocab_size
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        vec![
            ("embed".to_string(), (self.vocab_size + 1, self.embed_dim)),
            ("hidden.w".to_string(), (self.context * self.embed_dim, self.hidden_dim)),
            ("hidden.b".to_string(), (1, self.hidden_dim)),
            ("head.w".to_string(), (self.hidden_dim, self.vocab_size)),
            ("head.b".to_string(), (1, self.vocab_size)),
        ]
    }
}

/// Log-probabilities `[B, V]` for a batch of contexts.
///
/// `contexts` holds `B * context` token ids, row-major, oldest token first;
/// use [`TokenMlpConfig::pad_token`] for positions before the sequence start.
pub fn token_mlp_log_probs(g: &mut Graph, bound: &Bound, cfg: &TokenMlpConfig, contexts: &[usize]) -> Result<Var> {
    if contexts.is_empty() || contexts.len() % cfg.context != 0 {
        return Err(NnError::Shape(format!(
            "{} context ids do not split into windows of {}",
            contexts.len(),
            cfg.context
        )));
    }
    if let Some(&bad) = contexts.iter().find(|&&t| t > cfg.vocab_size) {
        return Err(NnError::Shape(format!("token id {bad} outside vocabulary")));
    }
    let b = contexts.len() / cfg.context;
    let slots: Vec<Var> = (0..cfg.context)
        .map(|s| {
            let idx: Vec<usize> = (0..b).map(|r| contexts[r * cfg.context + s]).collect();
            g.gather(bound.var(0), Rc::new(idx))
        })
        .collect();
    let x = if slots.len() == 1 {
        slots[0]
    } else {
        g.concat_cols(&slots)
    };
    let h = g.matmul(x, bound.var(1));
    let h = g.add_bias(h, bound.var(2));
    let h = g.tanh(h);
    let logits = g.matmul(h, bound.var(3));
    let logits = g.add_bias(logits, bound.var(4));
    Ok(g.log_softmax_rows(logits))
}

/// Mean next-token cross-entropy (nats) of `targets` under the model.
pub fn token_mlp_cross_entropy(
    g: &mut Graph,
    bound: &Bound,
    cfg: &TokenMlpConfig,
    contexts: &[usize],
    targets: &[usize],
) -> Result<Var> {
    let lp = token_mlp_log_probs(g, bound, cfg, contexts)?;
    if g.value(lp).rows() != targets.len() {
        return Err(NnError::Shape("one target per context window".into()));
    }
    if targets.iter().any(|&t| t >= cfg.vocab_size) {
        return Err(NnError::Shape("target outside vocabulary".into()));
    }
    let picked = g.pick_per_row(lp, Rc::new(targets.to_vec()));
    let mean = g.mean(picked);
    Ok(g.scale(mean, -1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{Architecture, NetworkParams};

    #[test]
    fn fresh_model_is_uniform() {
        let cfg = TokenMlpConfig {
            vocab_size: 16,
            context: 2,
            embed_dim: 4,
            hidden_dim: 5,
        };
        let p = NetworkParams::init(Architecture::TokenMlp(cfg.clone()), 1).unwrap();
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let lp = token_mlp_log_probs(&mut g, &bound, &cfg, &[16, 3, 4, 5]).unwrap();
        for v in g.value(lp).data() {
            assert_eq!(*v, -(16f64).ln());
        }
    }
}
