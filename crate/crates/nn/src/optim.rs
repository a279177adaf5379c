use serde::{Deserialize, Serialize};

use crate::error::{NnError, Result};
use crate::params::NetworkParams;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 0.0,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Adam,
            ..Self::sgd(lr)
        }
    }
}

/// Moment estimates for the adaptive scheme; empty until the first step.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OptState {
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

pub fn optimizer_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut OptState,
    cfg: &OptimizerConfig,
) -> Result<()> {
    if params.tensors().len() != grads.tensors().len()
        || params
            .tensors()
            .iter()
            .zip(grads.tensors())
            .any(|(p, g)| p.tensor.shape() != g.tensor.shape())
    {
        return Err(NnError::Shape("gradients do not match parameter shapes".into()));
    }
    let clip = if cfg.clip_norm > 0.0 {
        let norm = grads.squared_norm().sqrt();
        if norm > cfg.clip_norm {
            cfg.clip_norm / norm
        } else {
            1.0
        }
    } else {
        1.0
    };
    state.step += 1;
    match cfg.kind {
        OptimizerKind::Sgd => {
            for (p, g) in params.tensors_mut().iter_mut().zip(grads.tensors()) {
                for (w, &d) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()) {
                    *w -= cfg.lr * clip * d;
                }
            }
        }
        OptimizerKind::Adam => {
            if state.m.is_empty() {
                state.m = grads
                    .tensors()
                    .iter()
                    .map(|g| Tensor::zeros(g.tensor.rows(), g.tensor.cols()))
                    .collect();
                state.v = state.m.clone();
            }
            let t = state.step as i32;
            let bc1 = 1.0 - cfg.beta1.powi(t);
            let bc2 = 1.0 - cfg.beta2.powi(t);
            for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads.tensors()).enumerate() {
                let m = state.m[i].data_mut();
                let v = state.v[i].data_mut();
                for (j, (w, &d)) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).enumerate() {
                    let d = d * clip;
                    m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * d;
                    v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * d * d;
                    let mhat = m[j] / bc1;
                    let vhat = v[j] / bc2;
                    *w -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
                }
            }
        }
    }
    if !params.all_finite() {
        return Err(NnError::NonFinite("parameters after optimizer step".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::decoder::{DecoderConfig, HeadKind};
    use crate::params::Architecture;

    fn one_scalar(x: f64) -> NetworkParams {
        let cfg = DecoderConfig {
            layers: 1,
            d_model: 2,
            heads: 1,
            ff_dim: 1,
            input_dim: 1,
            output_dim: 1,
            max_context: 1,
            head: HeadKind::Linear,
            zero_init_head: true,
        };
        let mut p = NetworkParams::init(Architecture::Decoder(cfg), 0).unwrap();
        for t in p.tensors_mut() {
            t.tensor = Tensor::zeros(t.tensor.rows(), t.tensor.cols());
        }
        p.set_scalar(0, x);
        p
    }

    /// Gradient of `sum(x^2)/2` is `x` itself.
    fn quadratic_grad(p: &NetworkParams) -> NetworkParams {
        p.clone()
    }

    #[test]
    fn sgd_zero_lr_is_identity() {
        let mut p = one_scalar(1.0);
        let before = p.clone();
        let g = quadratic_grad(&p);
        optimizer_step(&mut p, &g, &mut OptState::default(), &OptimizerConfig::sgd(0.0)).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_step_on_half_square() {
        let mut p = one_scalar(1.0);
        let g = quadratic_grad(&p);
        optimizer_step(&mut p, &g, &mut OptState::default(), &OptimizerConfig::sgd(0.1)).unwrap();
        assert!((p.scalar(0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn both_schemes_converge_on_a_convex_quadratic() {
        for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.05)] {
            let mut p = one_scalar(1.0);
            p.set_scalar(1, -2.0);
            let mut st = OptState::default();
            for _ in 0..2000 {
                let g = quadratic_grad(&p);
                optimizer_step(&mut p, &g, &mut st, &cfg).unwrap();
            }
            assert!(
                p.squared_norm().sqrt() < 1e-6,
                "{:?} ended at {}",
                cfg.kind,
                p.squared_norm()
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut p = one_scalar(1.0);
        let other = NetworkParams::init(
            Architecture::TokenMlp(crate::mlp::TokenMlpConfig {
                vocab_size: 4,
                context: 1,
                embed_dim: 2,
                hidden_dim: 2,
            }),
            0,
        )
        .unwrap();
        assert!(optimizer_step(&mut p, &other, &mut OptState::default(), &OptimizerConfig::sgd(0.1)).is_err());
    }
}
