//! Small neural next-token learner used both as the per-trajectory proxy and
//! as the continually trained target model.
//!
//! The loss over a batch only depends on how often each (context, next
//! token) pair occurs, so every update first aggregates counts and then runs
//! one forward/backward pass over the distinct contexts.

use std::collections::BTreeMap;

use datamix_nn::{
    loss_and_gradients, optimizer_step, token_mlp_log_probs, Architecture, Graph, NetworkParams, OptState,
    OptimizerConfig, Tensor, TokenMlpConfig,
};
use serde::{Deserialize, Serialize};

use crate::env::corpus::TokenBatch;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyConfig {
    pub context: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub optimizer: OptimizerConfig,
    /// Sequences per parameter update; a training step makes one pass over
    /// its batch in consecutive chunks of this size.
    pub minibatch: usize,
}

impl ProxyConfig {
    pub fn desk() -> Self {
        Self {
            context: 1,
            embed_dim: 16,
            hidden_dim: 32,
            optimizer: OptimizerConfig::sgd(1.0),
            minibatch: 512,
        }
    }

    pub fn model(&self, vocab_size: usize) -> TokenMlpConfig {
        TokenMlpConfig {
            vocab_size,
            context: self.context,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProxyLearner {
    pub params: NetworkParams,
    pub model: TokenMlpConfig,
    pub optimizer: OptimizerConfig,
    pub minibatch: usize,
    pub state: OptState,
    pub steps: u64,
}

/// Distinct contexts and the next-token counts observed after each.
#[derive(Clone, Debug, Default)]
pub struct ContextCounts {
    pub contexts: Vec<Vec<usize>>,
    /// Row-major `contexts.len() × V`.
    pub counts: Vec<f64>,
    pub total: f64,
}

impl ContextCounts {
    pub fn from_sequences<'a>(model: &TokenMlpConfig, seqs: impl IntoIterator<Item = &'a [u16]>) -> Self {
        let v = model.vocab_size;
        let mut rows: BTreeMap<Vec<usize>, Vec<f64>> = BTreeMap::new();
        let mut total = 0.0;
        for seq in seqs {
            for i in 0..seq.len() {
                let ctx = context_before(model, seq, i);
                rows.entry(ctx).or_insert_with(|| vec![0.0; v])[seq[i] as usize] += 1.0;
                total += 1.0;
            }
        }
        let mut out = ContextCounts {
            total,
            ..Default::default()
        };
        for (ctx, c) in rows {
            out.contexts.push(ctx);
            out.counts.extend(c);
        }
        out
    }
}

/// The `context` tokens preceding position `i`, oldest first, padded.
pub fn context_before(model: &TokenMlpConfig, seq: &[u16], i: usize) -> Vec<usize> {
    (0..model.context)
        .map(|s| {
            let back = model.context - s;
            if i >= back {
                seq[i - back] as usize
            } else {
                model.pad_token()
            }
        })
        .collect()
}

impl ProxyLearner {
    pub fn new(cfg: &ProxyConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        let model = cfg.model(vocab_size);
        if cfg.minibatch == 0 {
            return Err(Error::Config("proxy minibatch must be positive".into()));
        }
        Ok(Self {
            params: NetworkParams::init(Architecture::TokenMlp(model.clone()), seed)?,
            model,
            optimizer: cfg.optimizer.clone(),
            minibatch: cfg.minibatch,
            state: OptState::default(),
            steps: 0,
        })
    }

    /// Log-probabilities `[contexts.len(), V]`.
    pub fn log_probs(&self, contexts: &[Vec<usize>]) -> Result<Tensor> {
        let flat: Vec<usize> = contexts.iter().flatten().copied().collect();
        let mut g = Graph::new();
        let bound = self.params.bind(&mut g, false);
        let lp = token_mlp_log_probs(&mut g, &bound, &self.model, &flat)?;
        Ok(g.value(lp).clone())
    }

    /// Mean cross-entropy of the counts and its gradient.
    pub fn loss_and_grad(&self, counts: &ContextCounts) -> Result<(f64, NetworkParams)> {
        let flat: Vec<usize> = counts.contexts.iter().flatten().copied().collect();
        let weights = Tensor::from_vec(counts.contexts.len(), self.model.vocab_size, counts.counts.clone())?;
        let inv = 1.0 / counts.total;
        Ok(loss_and_gradients(&self.params, |g, bound| {
            let lp = token_mlp_log_probs(g, bound, &self.model, &flat)?;
            let w = g.constant(weights);
            let weighted = g.mul(lp, w);
            let s = g.sum(weighted);
            Ok(g.scale(s, -inv))
        })?)
    }

    /// One pass over `batch`; returns the mean loss over its updates.
    pub fn train_step(&mut self, batch: &TokenBatch) -> Result<f64> {
        if batch.is_empty() {
            return Ok(0.0);
        }
        if batch.tokens.iter().any(|&t| t as usize >= self.model.vocab_size) {
            return Err(Error::Data("token id outside vocabulary".into()));
        }
        let mut losses = Vec::new();
        let mut start = 0;
        while start < batch.len() {
            let end = (start + self.minibatch).min(batch.len());
            let counts = ContextCounts::from_sequences(&self.model, (start..end).map(|i| batch.sequence(i)));
            let (loss, grads) = self.loss_and_grad(&counts)?;
            optimizer_step(&mut self.params, &grads, &mut self.state, &self.optimizer)?;
            losses.push(loss);
            start = end;
        }
        self.steps += 1;
        Ok(losses.iter().sum::<f64>() / losses.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::corpus::{desk_corpus_spec, generate_corpus, sample_batch, PoolCursor};
    use crate::mdp::MixtureDistribution;
    use datamix_nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn batch(n: usize, seed: u64) -> TokenBatch {
        let c = generate_corpus(&desk_corpus_spec(1)).unwrap();
        sample_batch(
            &c,
            &mut PoolCursor::new(8),
            &MixtureDistribution::uniform(8),
            n,
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .unwrap()
    }

    #[test]
    fn fresh_learner_loss_is_log_vocab() {
        let mut l = ProxyLearner::new(&ProxyConfig::desk(), 64, 3).unwrap();
        let b = batch(32, 1);
        let counts = ContextCounts::from_sequences(&l.model, (0..b.len()).map(|i| b.sequence(i)));
        let (loss, _) = l.loss_and_grad(&counts).unwrap();
        assert!((loss - 64f64.ln()).abs() < 1e-12);
        assert!((l.train_step(&b).unwrap() - 64f64.ln()).abs() < 1e-12);
    }

    /// The count-aggregated loss equals the plain per-token mean.
    #[test]
    fn aggregated_loss_matches_per_token_mean() {
        let mut l = ProxyLearner::new(&ProxyConfig::desk(), 64, 3).unwrap();
        let b = batch(64, 2);
        l.train_step(&b).unwrap();
        let b = batch(16, 3);
        let counts = ContextCounts::from_sequences(&l.model, (0..b.len()).map(|i| b.sequence(i)));
        let (loss, _) = l.loss_and_grad(&counts).unwrap();
        let mut total = 0.0;
        let mut n = 0.0;
        for s in 0..b.len() {
            let seq = b.sequence(s);
            for i in 0..seq.len() {
                let lp = l.log_probs(&[context_before(&l.model, seq, i)]).unwrap();
                total -= lp.get(0, seq[i] as usize);
                n += 1.0;
            }
        }
        assert!((loss - total / n).abs() < 1e-12, "{loss} vs {}", total / n);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut l = ProxyLearner::new(&ProxyConfig::desk(), 64, 5).unwrap();
        l.train_step(&batch(128, 4)).unwrap();
        let b = batch(8, 5);
        let counts = ContextCounts::from_sequences(&l.model, (0..b.len()).map(|i| b.sequence(i)));
        let (_, grads) = l.loss_and_grad(&counts).unwrap();
        let probe = l.clone();
        let report = check_gradients(
            &l.params,
            &grads,
            |p| {
                let mut q = probe.clone();
                q.params = p.clone();
                q.loss_and_grad(&counts).unwrap().0
            },
            50,
            9,
            1e-5,
        );
        assert!(report.within(1e-4, 1e-8), "{:?}", report.worst);
    }

    #[test]
    fn overfits_one_batch_and_is_deterministic() {
        let cfg = ProxyConfig {
            embed_dim: 16,
            hidden_dim: 64,
            optimizer: OptimizerConfig::adam(0.03),
            ..ProxyConfig::desk()
        };
        // every context has a single successor, so the loss can reach zero
        let b = TokenBatch {
            seq_len: 12,
            tokens: vec![1, 2, 3, 4, 5, 6, 9, 8, 7, 10, 11, 12],
            domains: vec![0],
        };
        let mut l = ProxyLearner::new(&cfg, 16, 1).unwrap();
        let mut losses = Vec::new();
        for _ in 0..400 {
            losses.push(l.train_step(&b).unwrap());
        }
        // after warm-up the loss never rises by more than rounding
        assert!(losses[50..].windows(2).all(|w| w[1] <= w[0] + 1e-9));
        assert!(*losses.last().unwrap() < 0.1, "{:?}", losses.last());

        let mut l2 = ProxyLearner::new(&cfg, 16, 1).unwrap();
        for _ in 0..400 {
            l2.train_step(&b).unwrap();
        }
        assert_eq!(l.params, l2.params);
    }
}
