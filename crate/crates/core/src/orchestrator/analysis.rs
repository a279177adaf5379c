//! Mean mixtures of the steps that raised and that lowered one field's
//! score.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{compensated_sum, validate_distribution, MixtureDistribution};
use crate::sampler::TrajectorySet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepAnalysis {
    /// `None` when no step raised the score.
    pub increase: Option<MixtureDistribution>,
    pub decrease: Option<MixtureDistribution>,
    pub increase_count: usize,
    pub decrease_count: usize,
    /// Steps whose score did not change at all; counted on neither side.
    pub unchanged_count: usize,
}

fn mean(points: &[&MixtureDistribution]) -> Result<Option<MixtureDistribution>> {
    let Some(first) = points.first() else {
        return Ok(None);
    };
    let n = first.dim();
    let k = points.len() as f64;
    let w: Vec<f64> = (0..n)
        .map(|i| compensated_sum(points.iter().map(|p| p.weights()[i])) / k)
        .collect();
    validate_distribution(w, n).map(Some)
}

/// Splits every step `t ≥ 1` by the sign of `f_t[field] − f_{t−1}[field]` and
/// averages the step's distribution within each side.
pub fn analyze_trajectories(corpus: &TrajectorySet, field: usize) -> Result<StepAnalysis> {
    let mut up = Vec::new();
    let mut down = Vec::new();
    let mut unchanged = 0;
    for (i, t) in corpus.trajectories.iter().enumerate() {
        if !t.has_feedback() {
            return Err(Error::MissingFeedback(i));
        }
        if t.feedback.len() != t.len() {
            return Err(Error::Data(format!(
                "trajectory {i} feedback does not match its length"
            )));
        }
        for s in 1..t.len() {
            let (prev, cur) = (&t.feedback[s - 1].scores, &t.feedback[s].scores);
            if field >= cur.len() || field >= prev.len() {
                return Err(Error::Config(format!("field {field} out of range")));
            }
            let delta = cur[field] - prev[field];
            if delta > 0.0 {
                up.push(t.distribution(s));
            } else if delta < 0.0 {
                down.push(t.distribution(s));
            } else {
                unchanged += 1;
            }
        }
    }
    Ok(StepAnalysis {
        increase: mean(&up)?,
        decrease: mean(&down)?,
        increase_count: up.len(),
        decrease_count: down.len(),
        unchanged_count: unchanged,
    })
}
