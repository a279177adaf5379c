use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decoder::DecoderConfig;
use crate::error::{NnError, Result};
use crate::graph::{Grads, Graph, Var};
use crate::mlp::TokenMlpConfig;
use crate::tensor::Tensor;

/// Architecture descriptor carried with every parameter set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Decoder(DecoderConfig),
    TokenMlp(TokenMlpConfig),
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        match self {
            Architecture::Decoder(c) => c.validate(),
            Architecture::TokenMlp(c) => c.validate(),
        }
    }

    /// Names and shapes of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        match self {
            Architecture::Decoder(c) => c.layout(),
            Architecture::TokenMlp(c) => c.layout(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Named parameter tensors plus the descriptor they were built for.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    arch: Architecture,
    tensors: Vec<NamedTensor>,
}

impl NetworkParams {
    /// Deterministic initialization: uniform weights with variance `1/fan_in`,
    /// unit layer-norm gains, zero biases, and zeroed output heads where the
    /// architecture asks for an exactly uniform (or neutral) start.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let zero_head = match &arch {
            Architecture::Decoder(c) => c.zero_init_head,
            Architecture::TokenMlp(_) => true,
        };
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, (rows, cols))| {
                let tensor = if name.ends_with(".g") {
                    Tensor::filled(rows, cols, 1.0)
                } else if name.ends_with(".b") || (zero_head && name.starts_with("head.")) {
                    Tensor::zeros(rows, cols)
                } else if name == "embed" {
                    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Tensor::from_vec(rows, cols, data).expect("layout shape")
                } else {
                    let a = (3.0 / rows as f64).sqrt();
                    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
                    Tensor::from_vec(rows, cols, data).expect("layout shape")
                };
                NamedTensor { name, tensor }
            })
            .collect();
        Ok(Self { arch, tensors })
    }

    /// Reassembles a parameter set, checking names and shapes against the
    /// architecture.
    pub fn from_parts(arch: Architecture, tensors: Vec<NamedTensor>) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if layout.len() != tensors.len() {
            return Err(NnError::Shape(format!(
                "architecture expects {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if *name != t.name || *shape != t.tensor.shape() {
                return Err(NnError::Shape(format!(
                    "expected {name} {shape:?}, got {} {:?}",
                    t.name,
                    t.tensor.shape()
                )));
            }
        }
        Ok(Self { arch, tensors })
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| NamedTensor {
                    name: t.name.clone(),
                    tensor: Tensor::zeros(t.tensor.rows(), t.tensor.cols()),
                })
                .collect(),
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [NamedTensor] {
        &mut self.tensors
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index].tensor
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.tensor)
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.tensor.all_finite())
    }

    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(|t| t.tensor.squared_norm()).sum()
    }

    /// Flat view of scalar `i` across all tensors in storage order.
    pub fn scalar_location(&self, mut i: usize) -> Option<(usize, usize)> {
        for (ti, t) in self.tensors.iter().enumerate() {
            if i < t.tensor.len() {
                return Some((ti, i));
            }
            i -= t.tensor.len();
        }
        None
    }

    pub fn scalar(&self, i: usize) -> f64 {
        let (t, j) = self.scalar_location(i).expect("scalar index in range");
        self.tensors[t].tensor.data()[j]
    }

    pub fn set_scalar(&mut self, i: usize, value: f64) {
        let (t, j) = self.scalar_location(i).expect("scalar index in range");
        self.tensors[t].tensor.data_mut()[j] = value;
    }

    /// SHA-256 over descriptor, names, shapes and little-endian values.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).expect("descriptor serializes"));
        for t in &self.tensors {
            h.update(t.name.as_bytes());
            h.update((t.tensor.rows() as u64).to_le_bytes());
            h.update((t.tensor.cols() as u64).to_le_bytes());
            for v in t.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Places every tensor on the graph as a trainable or constant leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.tensor.clone())
                } else {
                    g.constant(t.tensor.clone())
                }
            })
            .collect();
        Bound { vars }
    }
}

/// Graph handles for one bound [`NetworkParams`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn var(&self, index: usize) -> Var {
        self.vars[index]
    }

    /// Collects gradients into a parameter-shaped container; tensors the
    /// loss does not depend on get zeros.
    pub fn gradients(&self, grads: &Grads, like: &NetworkParams) -> NetworkParams {
        let mut out = like.zeros_like();
        for (slot, var) in out.tensors.iter_mut().zip(&self.vars) {
            if let Some(g) = grads.get(*var) {
                slot.tensor = g.clone();
            }
        }
        out
    }
}

/// Runs `build` on a fresh graph with trainable parameters and returns the
/// scalar loss with its exact gradient.
pub fn loss_and_gradients<F>(params: &NetworkParams, build: F) -> Result<(f64, NetworkParams)>
where
    F: FnOnce(&mut Graph, &Bound) -> Result<Var>,
{
    let mut g = Graph::new();
    let bound = params.bind(&mut g, true);
    let loss = build(&mut g, &bound)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(NnError::NonFinite(format!("loss evaluated to {value}")));
    }
    let grads = g.backward(loss);
    Ok((value, bound.gradients(&grads, params)))
}
