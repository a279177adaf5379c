//! Scalar rewards from feedback gains and the offline transition set.

use serde::{Deserialize, Serialize};

use crate::env::eval::{StandardizeMode, Standardizer};
use crate::error::{Error, Result};
use crate::mdp::{compensated_sum, FeedbackVector, StateStep, Transition};
use crate::sampler::TrajectorySet;

/// `λ · f_t − λ · f_prev`.
pub fn scalar_reward(f_t: &FeedbackVector, f_prev: &FeedbackVector, lambda: &[f64]) -> Result<f64> {
    for f in [f_t, f_prev] {
        if f.len() != lambda.len() {
            return Err(Error::DimensionMismatch {
                expected: lambda.len(),
                got: f.len(),
            });
        }
    }
    let dot = |f: &FeedbackVector| compensated_sum(f.scores.iter().zip(lambda).map(|(x, l)| x * l));
    Ok(dot(f_t) - dot(f_prev))
}

/// Equal weights over `fields` feedback entries.
pub fn equal_lambda(fields: usize) -> Vec<f64> {
    vec![1.0 / fields as f64; fields]
}

/// Standardizes every feedback vector against statistics pooled over all
/// steps of all trajectories.
pub fn standardize_corpus(set: &TrajectorySet) -> Result<(TrajectorySet, Standardizer)> {
    let mut all = Vec::new();
    for (i, t) in set.trajectories.iter().enumerate() {
        if !t.has_feedback() {
            return Err(Error::MissingFeedback(i));
        }
        if t.feedback.iter().any(|f| f.standardized) {
            return Err(Error::Data("corpus feedback is already standardized".into()));
        }
        all.extend(t.feedback.iter().cloned());
    }
    let s = Standardizer::fit(&all, StandardizeMode::CorpusWide)?;
    let mut out = set.clone();
    for t in &mut out.trajectories {
        for f in &mut t.feedback {
            *f = s.apply(f);
        }
    }
    Ok((out, s))
}

/// One transition per action of every trajectory; the last action of each
/// trajectory is terminal.
pub fn build_transitions(corpus: &TrajectorySet, lambda: &[f64]) -> Result<Vec<Transition>> {
    let mut out = Vec::new();
    for (i, t) in corpus.trajectories.iter().enumerate() {
        if t.feedback.len() != t.len() {
            return Err(Error::MissingFeedback(i));
        }
        let steps: Vec<StateStep> = (0..t.len())
            .map(|k| StateStep {
                dist: t.distribution(k).clone(),
                feedback: t.feedback[k].clone(),
            })
            .collect();
        for step in 1..t.len() {
            out.push(Transition {
                trajectory: i,
                step,
                state: steps[..step].to_vec(),
                action: t.distribution(step).clone(),
                reward: scalar_reward(&t.feedback[step], &t.feedback[step - 1], lambda)?,
                next_state: steps[..=step].to_vec(),
                terminal: step + 1 == t.len(),
            });
        }
    }
    Ok(out)
}

/// Affine map of raw rewards onto `[0, 1 − γ]`, so discounted returns fit
/// the critic's sigmoid range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardMap {
    pub low: f64,
    pub high: f64,
    pub span: f64,
}

impl RewardMap {
    pub fn fit(transitions: &[Transition], discount: f64) -> Result<Self> {
        if transitions.is_empty() {
            return Err(Error::EmptyBatch);
        }
        let low = transitions.iter().map(|t| t.reward).fold(f64::INFINITY, f64::min);
        let high = transitions.iter().map(|t| t.reward).fold(f64::NEG_INFINITY, f64::max);
        Ok(Self {
            low,
            high,
            span: 1.0 - discount,
        })
    }

    pub fn apply(&self, r: f64) -> f64 {
        if self.high > self.low {
            (r - self.low) / (self.high - self.low) * self.span
        } else {
            0.5 * self.span
        }
    }

    pub fn invert(&self, mapped: f64) -> f64 {
        if self.high > self.low {
            mapped / self.span * (self.high - self.low) + self.low
        } else {
            self.low
        }
    }

    pub fn map_all(&self, transitions: &[Transition]) -> Vec<Transition> {
        transitions
            .iter()
            .map(|t| Transition {
                reward: self.apply(t.reward),
                ..t.clone()
            })
            .collect()
    }
}
