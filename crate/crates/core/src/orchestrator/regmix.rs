//! Regression-based mixture selection: short proxy runs on random mixtures,
//! a linear model per field from mixture to final score, and the simplex
//! point maximizing the weighted combination of the fitted models.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::corpus::{sample_batch, DomainCorpora, PoolCursor};
use crate::env::eval::{feedback, EvalSet};
use crate::env::proxy::{ProxyConfig, ProxyLearner};
use crate::error::{Error, Result};
use crate::mdp::{validate_distribution, FeedbackVector, MixtureDistribution};
use crate::rng::{derive_seed, stream};
use crate::sampler::random_probability;

/// Singular values below this fraction of the largest mark the design rank
/// deficient.
const RANK_TOLERANCE: f64 = 1e-10;
/// Objective values within this relative distance of the best are ties.
const TIE_TOLERANCE: f64 = 1e-12;
const ASCENT_ITERATIONS: usize = 500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegMixConfig {
    /// Random mixtures, one proxy run each.
    pub mixtures: usize,
    /// Training steps per proxy run.
    pub steps: usize,
    pub samples_per_step: usize,
    pub proxy: ProxyConfig,
    pub seed: u64,
}

/// One proxy trained from scratch on a fixed mixture, with its final
/// feedback.
pub fn proxy_run(
    corpora: &DomainCorpora,
    eval: &EvalSet,
    cfg: &RegMixConfig,
    index: usize,
    rho: &MixtureDistribution,
) -> Result<FeedbackVector> {
    let mut learner = ProxyLearner::new(
        &cfg.proxy,
        corpora.vocab_size(),
        derive_seed(cfg.seed, "regmix.proxy", 0),
    )?;
    let mut rng = stream(cfg.seed, "regmix.batch", index as u64);
    let mut cursor = PoolCursor::new(corpora.space.dim());
    for _ in 0..cfg.steps {
        let batch = sample_batch(corpora, &mut cursor, rho, cfg.samples_per_step, &mut rng)?;
        learner.train_step(&batch)?;
    }
    feedback(&learner, eval)
}

/// Flat-Dirichlet mixtures and the final feedback of a proxy run on each.
/// Runs in parallel when `workers > 1`; the output does not depend on it.
pub fn regmix_samples(
    corpora: &DomainCorpora,
    eval: &EvalSet,
    cfg: &RegMixConfig,
    workers: usize,
) -> Result<Vec<(MixtureDistribution, FeedbackVector)>> {
    let n = corpora.space.dim();
    let mut rng = stream(cfg.seed, "regmix.mixtures", 0);
    let mixtures: Vec<MixtureDistribution> = (0..cfg.mixtures).map(|_| random_probability(n, &mut rng)).collect();
    let work = |(i, rho): (usize, &MixtureDistribution)| Ok((rho.clone(), proxy_run(corpora, eval, cfg, i, rho)?));
    if workers <= 1 {
        mixtures.iter().enumerate().map(work).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
        pool.install(|| mixtures.par_iter().enumerate().map(work).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegMixFit {
    /// Per field, one coefficient per domain: `score ≈ w · ρ`. The simplex
    /// constraint makes an intercept redundant.
    pub coefficients: Vec<Vec<f64>>,
    pub mixture: MixtureDistribution,
}

/// Least-squares `w` minimizing `‖X w − y‖` for a full-column-rank `X`.
pub fn least_squares(x: &DMatrix<f64>, ys: &[DVector<f64>]) -> Result<Vec<DVector<f64>>> {
    let svd = x.clone().svd(true, true);
    let sv = &svd.singular_values;
    let max = sv.max();
    if !(max > 0.0) || sv.min() <= RANK_TOLERANCE * max {
        return Err(Error::DegenerateDesign);
    }
    ys.iter()
        .map(|y| {
            svd.solve(y, 0.0)
                .map_err(|e| Error::Numeric(format!("least squares: {e}")))
        })
        .collect()
}

/// Euclidean projection onto the probability simplex.
pub fn project_to_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (j, &x) in u.iter().enumerate() {
        cumulative += x;
        let t = (cumulative - 1.0) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

fn renormalized(w: Vec<f64>) -> Result<MixtureDistribution> {
    let n = w.len();
    let s: f64 = w.iter().sum();
    validate_distribution(w.iter().map(|x| x / s).collect(), n)
}

/// Fits the per-field models and returns the simplex point maximizing
/// `Σ_i λ_i w_i · ρ`. Candidates are, in order: uniform, the result of
/// projected gradient ascent from uniform, every vertex and every sampled
/// mixture. The first candidate within a relative `1e-12` of the best wins.
pub fn regmix_fit(samples: &[(MixtureDistribution, FeedbackVector)], lambda: &[f64]) -> Result<RegMixFit> {
    let n = samples.first().map(|s| s.0.dim()).unwrap_or(0);
    if samples.len() < n + 1 || n == 0 {
        return Err(Error::TooFewSamples {
            need: n + 1,
            got: samples.len(),
        });
    }
    let fields = lambda.len();
    for (rho, f) in samples {
        if rho.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: rho.dim(),
            });
        }
        if f.len() != fields {
            return Err(Error::DimensionMismatch {
                expected: fields,
                got: f.len(),
            });
        }
    }
    let x = DMatrix::from_fn(samples.len(), n, |r, c| samples[r].0.weights()[c]);
    let ys: Vec<DVector<f64>> = (0..fields)
        .map(|i| DVector::from_fn(samples.len(), |r, _| samples[r].1.scores[i]))
        .collect();
    let coefficients: Vec<Vec<f64>> = least_squares(&x, &ys)?
        .into_iter()
        .map(|w| w.as_slice().to_vec())
        .collect();
    let c: Vec<f64> = (0..n)
        .map(|k| (0..fields).map(|i| lambda[i] * coefficients[i][k]).sum())
        .collect();
    let objective = |w: &[f64]| w.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>();

    let norm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut ascent = MixtureDistribution::uniform(n).weights().to_vec();
    if norm > 0.0 {
        let step = 1.0 / norm;
        for _ in 0..ASCENT_ITERATIONS {
            let moved: Vec<f64> = ascent.iter().zip(&c).map(|(a, g)| a + step * g).collect();
            ascent = project_to_simplex(&moved);
        }
    }
    let mut candidates = vec![MixtureDistribution::uniform(n), renormalized(ascent)?];
    candidates.extend((0..n).map(|k| MixtureDistribution::vertex(n, k)));
    candidates.extend(samples.iter().map(|s| s.0.clone()));
    let values: Vec<f64> = candidates.iter().map(|d| objective(d.weights())).collect();
    let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tol = TIE_TOLERANCE * best.abs().max(1.0);
    let pick = values.iter().position(|&v| v >= best - tol).expect("non-empty");
    Ok(RegMixFit {
        coefficients,
        mixture: candidates.swap_remove(pick),
    })
}
