//! Pre-norm causal transformer decoder.
//!
//! Input features are linearly embedded, summed with sinusoidal position
//! encodings, passed through `layers` blocks of
//! `x + Attn(LN(x))` / `x + FF(LN(x))`, a final layer norm and a linear
//! head. The head activation is applied per position.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::graph::{AttnMask, Graph, Var};
use crate::params::{Architecture, Bound, NetworkParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Softmax over the output dimension (a distribution per position).
    Softmax,
    /// Element-wise logistic output.
    Sigmoid,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub input_dim: usize,
    pub output_dim: usize,
    pub max_context: usize,
    pub head: HeadKind,
    pub zero_init_head: bool,
}

const PER_LAYER: usize = 16;

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NnError::DescriptorInvalid(m.to_string()));
        if self.layers == 0 {
            return bad("decoder needs at least one layer");
        }
        if self.d_model == 0 || self.d_model % 2 != 0 {
            return bad("d_model must be positive and even");
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return bad("heads must divide d_model");
        }
        if self.ff_dim == 0 || self.input_dim == 0 || self.output_dim == 0 {
            return bad("ff_dim, input_dim and output_dim must be positive");
        }
        if self.max_context == 0 {
            return bad("max_context must be positive");
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let d = self.d_model;
        let mut out = vec![
            ("input.w".to_string(), (self.input_dim, d)),
            ("input.b".to_string(), (1, d)),
        ];
        for l in 0..self.layers {
            let p = format!("blk{l}");
            out.extend([
                (format!("{p}.ln1.g"), (1, d)),
                (format!("{p}.ln1.b"), (1, d)),
                (format!("{p}.attn.q.w"), (d, d)),
                (format!("{p}.attn.q.b"), (1, d)),
                (format!("{p}.attn.k.w"), (d, d)),
                (format!("{p}.attn.k.b"), (1, d)),
                (format!("{p}.attn.v.w"), (d, d)),
                (format!("{p}.attn.v.b"), (1, d)),
                (format!("{p}.attn.o.w"), (d, d)),
                (format!("{p}.attn.o.b"), (1, d)),
                (format!("{p}.ln2.g"), (1, d)),
                (format!("{p}.ln2.b"), (1, d)),
                (format!("{p}.ff.up.w"), (d, self.ff_dim)),
                (format!("{p}.ff.up.b"), (1, self.ff_dim)),
                (format!("{p}.ff.down.w"), (self.ff_dim, d)),
                (format!("{p}.ff.down.b"), (1, d)),
            ]);
        }
        out.extend([
            ("final_ln.g".to_string(), (1, d)),
            ("final_ln.b".to_string(), (1, d)),
            ("head.w".to_string(), (d, self.output_dim)),
            ("head.b".to_string(), (1, self.output_dim)),
        ]);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, (r, c))| r * c).sum()
    }
}

/// Sinusoidal position encodings for the given positions, `[T, d]`.
pub fn position_encodings(positions: &[usize], d: usize) -> Tensor {
    let mut out = Tensor::zeros(positions.len(), d);
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            let angle = pos as f64 * freq;
            out.set(r, 2 * i, angle.sin());
            out.set(r, 2 * i + 1, angle.cos());
        }
    }
    out
}

fn decoder_config(params: &NetworkParams) -> Result<&DecoderConfig> {
    match params.arch() {
        Architecture::Decoder(c) => Ok(c),
        other => Err(NnError::DescriptorInvalid(format!("expected a decoder, got {other:?}"))),
    }
}

/// Builds the decoder on `g` and returns head pre-activations `[T, output_dim]`.
///
/// `positions[i]` is the position index of row `i`; with a causal mask this
/// is simply `0..T`, with branch masks siblings share a position.
pub fn decoder_logits(
    g: &mut Graph,
    bound: &Bound,
    cfg: &DecoderConfig,
    input: Var,
    positions: &[usize],
    mask: Rc<AttnMask>,
) -> Result<Var> {
    let (rows, cols) = g.value(input).shape();
    if cols != cfg.input_dim {
        return Err(NnError::DimMismatch {
            expected: cfg.input_dim,
            got: cols,
        });
    }
    if rows == 0 || positions.len() != rows || mask.len() != rows {
        return Err(NnError::Shape(format!(
            "{rows} input rows with {} positions and mask of {}",
            positions.len(),
            mask.len()
        )));
    }
    if let Some(&max_pos) = positions.iter().max() {
        if max_pos >= cfg.max_context {
            return Err(NnError::ContextOverflow {
                len: max_pos + 1,
                max: cfg.max_context,
            });
        }
    }

    let h = g.matmul(input, bound.var(0));
    let h = g.add_bias(h, bound.var(1));
    let pe = g.constant(position_encodings(positions, cfg.d_model));
    let mut x = g.add(h, pe);

    for l in 0..cfg.layers {
        let base = 2 + l * PER_LAYER;
        let p = |i: usize| bound.var(base + i);
        let n1 = g.layer_norm(x, p(0), p(1));
        let q = g.matmul(n1, p(2));
        let q = g.add_bias(q, p(3));
        let k = g.matmul(n1, p(4));
        let k = g.add_bias(k, p(5));
        let v = g.matmul(n1, p(6));
        let v = g.add_bias(v, p(7));
        let att = g.attention(q, k, v, cfg.heads, mask.clone());
        let o = g.matmul(att, p(8));
        let o = g.add_bias(o, p(9));
        x = g.add(x, o);

        let n2 = g.layer_norm(x, p(10), p(11));
        let up = g.matmul(n2, p(12));
        let up = g.add_bias(up, p(13));
        let act = g.gelu(up);
        let down = g.matmul(act, p(14));
        let down = g.add_bias(down, p(15));
        x = g.add(x, down);
    }

    let tail = 2 + cfg.layers * PER_LAYER;
    let xf = g.layer_norm(x, bound.var(tail), bound.var(tail + 1));
    let logits = g.matmul(xf, bound.var(tail + 2));
    Ok(g.add_bias(logits, bound.var(tail + 3)))
}

pub fn apply_head(g: &mut Graph, head: HeadKind, logits: Var) -> Var {
    match head {
        HeadKind::Softmax => g.softmax_rows(logits),
        HeadKind::Sigmoid => g.sigmoid(logits),
        HeadKind::Linear => logits,
    }
}

/// Causal forward pass over a feature sequence, head activation applied.
pub fn decoder_forward(params: &NetworkParams, input_sequence: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let cfg = decoder_config(params)?;
    if input_sequence.is_empty() {
        return Err(NnError::Shape("empty input sequence".into()));
    }
    if input_sequence.len() > cfg.max_context {
        return Err(NnError::ContextOverflow {
            len: input_sequence.len(),
            max: cfg.max_context,
        });
    }
    for row in input_sequence {
        if row.len() != cfg.input_dim {
            return Err(NnError::DimMismatch {
                expected: cfg.input_dim,
                got: row.len(),
            });
        }
    }
    let features = Tensor::from_rows(input_sequence)?;
    let t = features.rows();
    let positions: Vec<usize> = (0..t).collect();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(features);
    let logits = decoder_logits(&mut g, &bound, cfg, x, &positions, Rc::new(AttnMask::causal(t)))?;
    let out = apply_head(&mut g, cfg.head, logits);
    Ok(g.value(out).to_rows())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(layers: usize, head: HeadKind) -> DecoderConfig {
        DecoderConfig {
            layers,
            d_model: 8,
            heads: 2,
            ff_dim: 16,
            input_dim: 3,
            output_dim: 4,
            max_context: 8,
            head,
            zero_init_head: false,
        }
    }

    fn seq(len: usize, salt: f64) -> Vec<Vec<f64>> {
        (0..len)
            .map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.61 + salt).cos()).collect())
            .collect()
    }

    #[test]
    fn softmax_head_rows_sum_to_one() {
        let p = NetworkParams::init(Architecture::Decoder(cfg(2, HeadKind::Softmax)), 3).unwrap();
        for row in decoder_forward(&p, &seq(5, 0.0)).unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn length_one_sequence_gives_one_output() {
        let p = NetworkParams::init(Architecture::Decoder(cfg(1, HeadKind::Linear)), 3).unwrap();
        assert_eq!(decoder_forward(&p, &seq(1, 0.0)).unwrap().len(), 1);
    }

    #[test]
    fn overflow_and_dim_errors() {
        let p = NetworkParams::init(Architecture::Decoder(cfg(1, HeadKind::Linear)), 3).unwrap();
        assert!(matches!(
            decoder_forward(&p, &seq(9, 0.0)),
            Err(NnError::ContextOverflow { .. })
        ));
        assert!(matches!(
            decoder_forward(&p, &[vec![1.0, 2.0]]),
            Err(NnError::DimMismatch { .. })
        ));
    }

    #[test]
    fn branch_mask_matches_separate_causal_passes() {
        let p = NetworkParams::init(Architecture::Decoder(cfg(2, HeadKind::Linear)), 11).unwrap();
        let prefix = seq(3, 0.2);
        let branches = seq(2, 1.7);
        let mut rows = prefix.clone();
        rows.extend(branches.iter().cloned());
        let positions = vec![0, 1, 2, 3, 3];
        let mut g = Graph::new();
        let bound = p.bind(&mut g, false);
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let Architecture::Decoder(c) = p.arch() else {
            unreachable!()
        };
        let out = decoder_logits(
            &mut g,
            &bound,
            c,
            x,
            &positions,
            Rc::new(AttnMask::prefix_branches(3, 2)),
        )
        .unwrap();
        let joint = g.value(out).clone();
        for (b, branch) in branches.iter().enumerate() {
            let mut s = prefix.clone();
            s.push(branch.clone());
            let separate = decoder_forward(&p, &s).unwrap();
            for (x, y) in joint.row(3 + b).iter().zip(&separate[3]) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rejects_bad_descriptors() {
        let mut c = cfg(1, HeadKind::Linear);
        c.heads = 3;
        assert!(c.validate().is_err());
        c = cfg(0, HeadKind::Linear);
        assert!(c.validate().is_err());
    }
}
