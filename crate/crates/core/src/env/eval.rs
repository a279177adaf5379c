//! Evaluation environment: per-field prompt/response pairs scored by mean
//! length-normalized response log-probability, and feedback standardization.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::corpus::{DomainCorpora, Split};
use crate::env::proxy::{context_before, ProxyLearner};
use crate::error::{Error, Result};
use crate::mdp::{compensated_sum, FeedbackVector, Field};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPair {
    pub prompt: Vec<u16>,
    pub response: Vec<u16>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalField {
    pub name: String,
    pub pairs: Vec<EvalPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSet {
    pub fields: Vec<EvalField>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSpec {
    pub pairs_per_field: usize,
    /// Leading tokens of each held-out sequence used as the prompt; the rest
    /// is the response.
    pub prompt_len: usize,
    pub seed: u64,
}

/// Two fields, "general" then "target". General pairs come from the source
/// domains in proportion to the source mixture, target pairs from the target
/// domains in proportion to the target mixture, all from held-out pools.
pub fn build_eval_set(corpora: &DomainCorpora, spec: &EvalSpec) -> Result<EvalSet> {
    if spec.pairs_per_field == 0 || spec.prompt_len == 0 || spec.prompt_len >= corpora.spec.seq_len {
        return Err(Error::SpecInvalid(
            "eval needs pairs and a prompt shorter than the sequence".into(),
        ));
    }
    let mut fields = Vec::new();
    for (name, field, mix) in [
        ("general", Field::Source, &corpora.spec.source_mixture),
        ("target", Field::Target, &corpora.spec.target_mixture),
    ] {
        let domains = corpora.space.indices(field);
        // largest-remainder allocation of pairs to domains
        let exact: Vec<f64> = mix.iter().map(|w| w * spec.pairs_per_field as f64).collect();
        let mut alloc: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
        let mut order: Vec<usize> = (0..alloc.len()).collect();
        order.sort_by(|&a, &b| {
            (exact[b] - exact[b].floor())
                .total_cmp(&(exact[a] - exact[a].floor()))
                .then(a.cmp(&b))
        });
        let mut short = spec.pairs_per_field - alloc.iter().sum::<usize>();
        for &i in &order {
            if short == 0 {
                break;
            }
            alloc[i] += 1;
            short -= 1;
        }
        let mut pairs = Vec::with_capacity(spec.pairs_per_field);
        for (&k, &count) in domains.iter().zip(&alloc) {
            for i in 0..count {
                // held-out pools are keyed apart from training pools; the eval
                // seed picks an offset so different eval sets do not overlap
                let index = (spec.seed % 1_000_000) * 1_000_000 + i as u64;
                let seq = corpora.sequence(k, Split::HeldOut, index);
                pairs.push(EvalPair {
                    prompt: seq[..spec.prompt_len].to_vec(),
                    response: seq[spec.prompt_len..].to_vec(),
                });
            }
        }
        fields.push(EvalField {
            name: name.to_string(),
            pairs,
        });
    }
    Ok(EvalSet { fields })
}

/// Mean over pairs of `(1/|r|) · log P(r | q)`, in nats.
pub fn score(learner: &ProxyLearner, field: &EvalField) -> Result<f64> {
    if field.pairs.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    // one forward pass over the distinct contexts of all response tokens
    let mut index: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let mut lookups = Vec::with_capacity(field.pairs.len());
    for pair in &field.pairs {
        if pair.response.is_empty() {
            return Err(Error::Data("evaluation response is empty".into()));
        }
        let seq: Vec<u16> = pair.prompt.iter().chain(&pair.response).copied().collect();
        let mut rows = Vec::with_capacity(pair.response.len());
        for i in pair.prompt.len()..seq.len() {
            let ctx = context_before(&learner.model, &seq, i);
            let next = index.len();
            let row = *index.entry(ctx).or_insert(next);
            rows.push((row, seq[i] as usize));
        }
        lookups.push(rows);
    }
    let mut contexts = vec![Vec::new(); index.len()];
    for (ctx, row) in index {
        contexts[row] = ctx;
    }
    let lp = learner.log_probs(&contexts)?;
    let per_pair: Vec<f64> = lookups
        .iter()
        .map(|rows| compensated_sum(rows.iter().map(|&(r, t)| lp.get(r, t))) / rows.len() as f64)
        .collect();
    Ok(compensated_sum(per_pair) / field.pairs.len() as f64)
}

/// One score per field, in the eval set's field order.
pub fn feedback(learner: &ProxyLearner, eval: &EvalSet) -> Result<FeedbackVector> {
    let scores = eval
        .fields
        .iter()
        .map(|f| score(learner, f))
        .collect::<Result<Vec<_>>>()?;
    Ok(FeedbackVector::raw(scores))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StandardizeMode {
    /// Statistics over every step of every trajectory in a corpus.
    CorpusWide,
    /// Statistics over the history observed so far in one run.
    RunningList,
}

/// Below this the standard deviation is treated as 1.
pub const STD_FLOOR: f64 = 1e-12;

/// Per-field mean and population standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mode: StandardizeMode,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(history: &[FeedbackVector], mode: StandardizeMode) -> Result<Self> {
        let first = history.first().ok_or(Error::EmptyHistory)?;
        let d = first.len();
        if let Some(bad) = history.iter().find(|f| f.len() != d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                got: bad.len(),
            });
        }
        let n = history.len() as f64;
        let mut mean = Vec::with_capacity(d);
        let mut std = Vec::with_capacity(d);
        for i in 0..d {
            let m = compensated_sum(history.iter().map(|f| f.scores[i])) / n;
            let var = compensated_sum(history.iter().map(|f| (f.scores[i] - m).powi(2))) / n;
            let s = var.sqrt();
            mean.push(m);
            std.push(if s < STD_FLOOR { 1.0 } else { s });
        }
        Ok(Self { mode, mean, std })
    }

    pub fn apply(&self, f: &FeedbackVector) -> FeedbackVector {
        FeedbackVector {
            scores: f
                .scores
                .iter()
                .zip(self.mean.iter().zip(&self.std))
                .map(|(&x, (&m, &s))| (x - m) / s)
                .collect(),
            standardized: true,
        }
    }
}

/// Z-scores every vector of `history` against the history's own
/// statistics.
pub fn standardize_feedback(history: &[FeedbackVector], mode: StandardizeMode) -> Result<Vec<FeedbackVector>> {
    let s = Standardizer::fit(history, mode)?;
    Ok(history.iter().map(|f| s.apply(f)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::corpus::{desk_corpus_spec, generate_corpus};
    use crate::env::proxy::ProxyConfig;
    use datamix_nn::{Architecture, NetworkParams, Tensor, TokenMlpConfig};
    use proptest::prelude::*;

    fn fv(x: &[f64]) -> FeedbackVector {
        FeedbackVector::raw(x.to_vec())
    }

    #[test]
    fn uniform_learner_scores_minus_log_vocab() {
        let learner = ProxyLearner::new(&ProxyConfig::desk(), 16, 0).unwrap();
        let field = EvalField {
            name: "f".into(),
            pairs: vec![
                EvalPair {
                    prompt: vec![1, 2],
                    response: vec![3, 4, 5],
                },
                EvalPair {
                    prompt: vec![],
                    response: vec![7],
                },
            ],
        };
        assert!((score(&learner, &field).unwrap() + 16f64.ln()).abs() < 1e-12);
        let eval = EvalSet {
            fields: vec![field.clone(), field],
        };
        let f = feedback(&learner, &eval).unwrap();
        assert_eq!(f.scores.len(), 2);
        assert_eq!(f.scores[0], f.scores[1]);
        assert!(score(
            &learner,
            &EvalField {
                name: "e".into(),
                pairs: vec![]
            }
        )
        .is_err());
    }

    /// A learner whose head puts probability ½ on token 0 after any context.
    #[test]
    fn single_token_half_probability() {
        let model = TokenMlpConfig {
            vocab_size: 2,
            context: 1,
            embed_dim: 1,
            hidden_dim: 1,
        };
        let mut learner = ProxyLearner::new(
            &ProxyConfig {
                embed_dim: 1,
                hidden_dim: 1,
                ..ProxyConfig::desk()
            },
            2,
            0,
        )
        .unwrap();
        learner.params = NetworkParams::init(Architecture::TokenMlp(model), 0).unwrap();
        let field = EvalField {
            name: "f".into(),
            pairs: vec![EvalPair {
                prompt: vec![1],
                response: vec![0],
            }],
        };
        assert!((score(&learner, &field).unwrap() + 2f64.ln()).abs() < 1e-15);
    }

    /// Chain-rule oracle: the response log-probability is recomputed with a
    /// hand-written forward pass (embedding, tanh layer, log-softmax) and
    /// summed per pair without sharing contexts.
    #[test]
    fn three_pairs_match_chain_rule_oracle() {
        let cfg = ProxyConfig {
            context: 2,
            embed_dim: 3,
            hidden_dim: 4,
            ..ProxyConfig::desk()
        };
        let mut learner = ProxyLearner::new(&cfg, 6, 2).unwrap();
        for i in 0..learner.params.param_count() {
            learner.params.set_scalar(i, ((i as f64) * 0.61).sin() * 0.8);
        }
        let p = &learner.params;
        let t = |name: &str| -> &Tensor { p.get(name).unwrap() };
        let oracle_logp = |ctx: [usize; 2], next: usize| -> f64 {
            let mut x = Vec::new();
            for c in ctx {
                x.extend_from_slice(t("embed").row(c));
            }
            let h: Vec<f64> = (0..4)
                .map(|j| {
                    let z: f64 = (0..6).map(|i| x[i] * t("hidden.w").get(i, j)).sum::<f64>() + t("hidden.b").get(0, j);
                    z.tanh()
                })
                .collect();
            let logits: Vec<f64> = (0..6)
                .map(|k| (0..4).map(|j| h[j] * t("head.w").get(j, k)).sum::<f64>() + t("head.b").get(0, k))
                .collect();
            let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
            logits[next] - lse
        };
        let pairs = vec![
            EvalPair {
                prompt: vec![0, 1, 2],
                response: vec![3, 4],
            },
            EvalPair {
                prompt: vec![5],
                response: vec![0, 0, 1],
            },
            EvalPair {
                prompt: vec![],
                response: vec![2, 5, 3, 1],
            },
        ];
        let pad = 6;
        let mut oracle = 0.0;
        for pair in &pairs {
            let seq: Vec<usize> = pair.prompt.iter().chain(&pair.response).map(|&x| x as usize).collect();
            let mut lp = 0.0;
            for i in pair.prompt.len()..seq.len() {
                let a = if i >= 2 { seq[i - 2] } else { pad };
                let b = if i >= 1 { seq[i - 1] } else { pad };
                lp += oracle_logp([a, b], seq[i]);
            }
            oracle += lp / pair.response.len() as f64;
        }
        oracle /= 3.0;
        let got = score(
            &learner,
            &EvalField {
                name: "x".into(),
                pairs,
            },
        )
        .unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
        assert!(got <= 0.0);
    }

    #[test]
    fn feedback_is_order_equivariant() {
        let corpora = generate_corpus(&desk_corpus_spec(1)).unwrap();
        let eval = build_eval_set(
            &corpora,
            &EvalSpec {
                pairs_per_field: 20,
                prompt_len: 4,
                seed: 1,
            },
        )
        .unwrap();
        assert_eq!(eval.fields[0].pairs.len(), 20);
        let mut learner = ProxyLearner::new(&ProxyConfig::desk(), 64, 1).unwrap();
        for i in 0..learner.params.param_count() {
            learner.params.set_scalar(i, ((i as f64) * 0.37).cos() * 0.3);
        }
        let f = feedback(&learner, &eval).unwrap();
        let swapped = EvalSet {
            fields: vec![eval.fields[1].clone(), eval.fields[0].clone()],
        };
        let g = feedback(&learner, &swapped).unwrap();
        assert_eq!(f.scores[0], g.scores[1]);
        assert_eq!(f.scores[1], g.scores[0]);
        assert_ne!(f.scores[0], f.scores[1]);
    }

    #[test]
    fn standardization_examples() {
        let z = standardize_feedback(&[fv(&[-2.0]), fv(&[-1.0]), fv(&[0.0])], StandardizeMode::CorpusWide).unwrap();
        // population std is sqrt(2/3), so the extremes sit at ±sqrt(3/2)
        let e = 1.224_744_871_391_589;
        assert!((z[0].scores[0] + e).abs() < 1e-12);
        assert_eq!(z[1].scores[0], 0.0);
        assert!((z[2].scores[0] - e).abs() < 1e-12);
        assert!(z.iter().all(|f| f.standardized));

        let one = standardize_feedback(&[fv(&[-3.7, 2.0])], StandardizeMode::RunningList).unwrap();
        assert_eq!(one[0].scores, vec![0.0, 0.0]);
        let flat = standardize_feedback(&vec![fv(&[1.5]); 4], StandardizeMode::CorpusWide).unwrap();
        assert!(flat.iter().all(|f| f.scores[0] == 0.0));
        assert!(matches!(
            standardize_feedback(&[], StandardizeMode::CorpusWide),
            Err(Error::EmptyHistory)
        ));
    }

    proptest! {
        #[test]
        fn standardized_fields_have_zero_mean_unit_std(
            rows in prop::collection::vec(prop::collection::vec(-8.0f64..0.0, 3), 2..60)
        ) {
            let hist: Vec<FeedbackVector> = rows.iter().map(|r| fv(r)).collect();
            let z = standardize_feedback(&hist, StandardizeMode::CorpusWide).unwrap();
            for i in 0..3 {
                let xs: Vec<f64> = hist.iter().map(|f| f.scores[i]).collect();
                let m = xs.iter().sum::<f64>() / xs.len() as f64;
                let var = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / xs.len() as f64;
                prop_assume!(var.sqrt() > 1e-6);
                let zs: Vec<f64> = z.iter().map(|f| f.scores[i]).collect();
                let zm = zs.iter().sum::<f64>() / zs.len() as f64;
                let zsd = (zs.iter().map(|x| (x - zm).powi(2)).sum::<f64>() / zs.len() as f64).sqrt();
                prop_assert!(zm.abs() <= 1e-12, "mean {}", zm);
                prop_assert!((zsd - 1.0).abs() <= 1e-9, "std {}", zsd);
            }
        }
    }
}
