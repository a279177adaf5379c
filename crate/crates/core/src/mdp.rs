//! Domain spaces, simplex points, divergences and trajectory containers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `|Σw − 1|` for a valid simplex point.
pub const SUM_TOLERANCE: f64 = 1e-9;
/// Smoothing mass mixed into both KL arguments.
pub const KL_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Domain {
    pub name: String,
    pub field: Field,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Domain>", into = "Vec<Domain>")]
pub struct DomainSpace {
    domains: Vec<Domain>,
}

impl TryFrom<Vec<Domain>> for DomainSpace {
    type Error = Error;

    fn try_from(domains: Vec<Domain>) -> Result<Self> {
        DomainSpace::new(domains)
    }
}

impl From<DomainSpace> for Vec<Domain> {
    fn from(s: DomainSpace) -> Self {
        s.domains
    }
}

impl DomainSpace {
    pub fn new(domains: Vec<Domain>) -> Result<Self> {
        if domains.len() < 2 {
            return Err(Error::InvalidSpace("need at least two domains".into()));
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].iter().any(|e| e.name == d.name) {
                return Err(Error::InvalidSpace(format!("duplicate domain name {:?}", d.name)));
            }
        }
        if !domains.iter().any(|d| d.field == Field::Source) || !domains.iter().any(|d| d.field == Field::Target) {
            return Err(Error::InvalidSpace(
                "need at least one source and one target domain".into(),
            ));
        }
        Ok(Self { domains })
    }

    /// Convenience constructor from field tags, naming domains `d0, d1, ...`.
    pub fn from_fields(fields: &[Field]) -> Result<Self> {
        Self::new(
            fields
                .iter()
                .enumerate()
                .map(|(i, &field)| Domain {
                    name: format!("d{i}"),
                    field,
                })
                .collect(),
        )
    }

    /// The two-dimensional space obtained by collapsing each field.
    pub fn fields_only() -> Self {
        Self {
            domains: vec![
                Domain {
                    name: "source".into(),
                    field: Field::Source,
                },
                Domain {
                    name: "target".into(),
                    field: Field::Target,
                },
            ],
        }
    }

    pub fn dim(&self) -> usize {
        self.domains.len()
    }

    pub fn domains(&self) -> &[Domain] {
        &self.domains
    }

    pub fn field(&self, i: usize) -> Field {
        self.domains[i].field
    }

    pub fn indices(&self, field: Field) -> Vec<usize> {
        (0..self.dim()).filter(|&i| self.domains[i].field == field).collect()
    }
}

/// Neumaier-compensated sum.
pub fn compensated_sum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut c = 0.0;
    for x in xs {
        let t = sum + x;
        if sum.abs() >= x.abs() {
            c += (sum - t) + x;
        } else {
            c += (x - t) + sum;
        }
        sum = t;
    }
    sum + c
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct MixtureDistribution {
    weights: Vec<f64>,
}

impl TryFrom<Vec<f64>> for MixtureDistribution {
    type Error = Error;

    fn try_from(raw: Vec<f64>) -> Result<Self> {
        let n = raw.len();
        validate_distribution(raw, n)
    }
}

impl From<MixtureDistribution> for Vec<f64> {
    fn from(d: MixtureDistribution) -> Self {
        d.weights
    }
}

/// Accepts `raw` only if it already is a point on the `n`-simplex.
pub fn validate_distribution(raw: Vec<f64>, n: usize) -> Result<MixtureDistribution> {
    if raw.len() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: raw.len(),
        });
    }
    if n == 0 {
        return Err(Error::SumNotOne { sum: 0.0 });
    }
    for (index, &value) in raw.iter().enumerate() {
        // NaN fails this comparison too
        if !(value >= 0.0) || !value.is_finite() {
            return Err(Error::NegativeWeight { index, value });
        }
    }
    let sum = compensated_sum(raw.iter().copied());
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::SumNotOne { sum });
    }
    Ok(MixtureDistribution { weights: raw })
}

impl MixtureDistribution {
    pub fn uniform(n: usize) -> Self {
        Self {
            weights: vec![1.0 / n as f64; n],
        }
    }

    pub fn vertex(n: usize, k: usize) -> Self {
        let mut weights = vec![0.0; n];
        weights[k] = 1.0;
        Self { weights }
    }

    /// Normalizes positive finite scores; used for constructive draws where
    /// the sum is known to be positive.
    pub(crate) fn from_positive(mut raw: Vec<f64>) -> Self {
        let s: f64 = raw.iter().sum();
        for w in &mut raw {
            *w /= s;
        }
        Self { weights: raw }
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn mass(&self, space: &DomainSpace, field: Field) -> f64 {
        compensated_sum(
            self.weights
                .iter()
                .enumerate()
                .filter(|(i, _)| space.field(*i) == field)
                .map(|(_, &w)| w),
        )
    }

    /// L∞ distance.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn approx_eq(&self, other: &Self) -> bool {
        self.dim() == other.dim() && self.max_abs_diff(other) <= SUM_TOLERANCE
    }

    pub fn total_variation(&self, other: &Self) -> f64 {
        0.5 * self
            .weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
    }
}

fn smooth(w: f64, n: usize) -> f64 {
    (1.0 - KL_EPSILON) * w + KL_EPSILON / n as f64
}

/// `Σ p̃ ln p̃` of the smoothed weights; the constant part of every KL with `p`
/// as the first argument.
pub fn smoothed_neg_entropy(p: &MixtureDistribution) -> f64 {
    let n = p.dim();
    p.weights
        .iter()
        .map(|&w| {
            let s = smooth(w, n);
            s * s.ln()
        })
        .sum()
}

/// Smoothed weights of `p`.
pub fn smoothed(p: &MixtureDistribution) -> Vec<f64> {
    let n = p.dim();
    p.weights.iter().map(|&w| smooth(w, n)).collect()
}

/// `Σ p_i ln(p_i / q_i)` in nats, both arguments smoothed as
/// `(1−ε)w + ε/N` so exact zeros are admissible.
pub fn kl_divergence(p: &MixtureDistribution, q: &MixtureDistribution) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(Error::DimensionMismatch {
            expected: p.dim(),
            got: q.dim(),
        });
    }
    let n = p.dim();
    Ok(p.weights
        .iter()
        .zip(&q.weights)
        .map(|(&a, &b)| {
            let (sa, sb) = (smooth(a, n), smooth(b, n));
            sa * (sa / sb).ln()
        })
        .sum())
}

/// Finds `(s', t')` within a few ulps of `(s, total − s)` whose rounded sum
/// is exactly `total`. Moving only `t'` is not always enough: under
/// round-half-even some totals are skipped by every `s + t'`.
fn split_exactly(s: f64, total: f64) -> (f64, f64) {
    let mut s_try = s;
    for k in 0..5u32 {
        // s, s+1ulp, s-1ulp, s+2ulp, s-2ulp
        if k > 0 {
            s_try = s;
            for _ in 0..k.div_ceil(2) {
                s_try = if k % 2 == 1 { s_try.next_up() } else { s_try.next_down() };
            }
        }
        if !(0.0..=total).contains(&s_try) {
            continue;
        }
        let mut t = total - s_try;
        for _ in 0..3 {
            let back = s_try + t;
            if back == total {
                return (s_try, t);
            }
            t = if back < total { t.next_up() } else { t.next_down() };
        }
    }
    (s, total - s)
}

/// Collapses `dist` to `[source mass, target mass]`.
pub fn project_to_fields(dist: &MixtureDistribution, space: &DomainSpace) -> Result<MixtureDistribution> {
    if dist.dim() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            got: dist.dim(),
        });
    }
    let source = dist.mass(space, Field::Source);
    let total = compensated_sum(dist.weights.iter().copied());
    let (source, target) = split_exactly(source, total);
    Ok(MixtureDistribution {
        weights: vec![source, target],
    })
}

/// Inverse of [`project_to_fields`]: spreads each field's mass over its
/// domains in proportion to `within[field]`, each a distribution over that
/// field's domains in space order.
pub fn spread_fields(
    two: &MixtureDistribution,
    space: &DomainSpace,
    source_within: &[f64],
    target_within: &[f64],
) -> Result<MixtureDistribution> {
    if two.dim() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: two.dim(),
        });
    }
    let mut out = vec![0.0; space.dim()];
    for (field, mass, within) in [
        (Field::Source, two.weights[0], source_within),
        (Field::Target, two.weights[1], target_within),
    ] {
        let idx = space.indices(field);
        if within.len() != idx.len() {
            return Err(Error::DimensionMismatch {
                expected: idx.len(),
                got: within.len(),
            });
        }
        for (&i, &w) in idx.iter().zip(within) {
            out[i] = mass * w;
        }
    }
    validate_distribution(out, space.dim())
}

pub fn estimate_state_from_counts(counts: &[u64]) -> Result<MixtureDistribution> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::EmptySample);
    }
    let t = total as f64;
    Ok(MixtureDistribution {
        weights: counts.iter().map(|&c| c as f64 / t).collect(),
    })
}

/// Zero mass on the source field; `target_empirical` (ordered like the
/// space's target domains) on the target field.
pub fn make_target_state(
    start: &MixtureDistribution,
    target_empirical: &[f64],
    space: &DomainSpace,
) -> Result<MixtureDistribution> {
    if start.dim() != space.dim() {
        return Err(Error::DimensionMismatch {
            expected: space.dim(),
            got: start.dim(),
        });
    }
    let targets = space.indices(Field::Target);
    if target_empirical.len() != targets.len() {
        return Err(Error::DimensionMismatch {
            expected: targets.len(),
            got: target_empirical.len(),
        });
    }
    if target_empirical.iter().any(|&w| !(w >= 0.0) || !w.is_finite()) {
        return Err(Error::InvalidEmpirical("negative or non-finite weight".into()));
    }
    let sum = compensated_sum(target_empirical.iter().copied());
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidEmpirical(format!("weights sum to {sum}")));
    }
    let mut w = vec![0.0; space.dim()];
    for (&i, &e) in targets.iter().zip(target_empirical) {
        w[i] = e;
    }
    validate_distribution(w, space.dim())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeedbackVector {
    pub scores: Vec<f64>,
    /// False for raw per-token log-probabilities, true for z-scores.
    pub standardized: bool,
}

impl FeedbackVector {
    pub fn raw(scores: Vec<f64>) -> Self {
        Self {
            scores,
            standardized: false,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Equal-weight combination `Σ λ_i f_i` with `λ_i = 1/|D|`.
    pub fn mean(&self) -> f64 {
        self.scores.iter().sum::<f64>() / self.scores.len() as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// Top-K threshold of the sampling run; 0 for trajectories not produced
    /// by the sampler.
    pub tier: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryRecord {
    pub start: MixtureDistribution,
    pub actions: Vec<MixtureDistribution>,
    /// Empty, or one vector per distribution with index 0 for the start.
    pub feedback: Vec<FeedbackVector>,
    pub provenance: Provenance,
}

impl TrajectoryRecord {
    /// `ρ_0 = start, ρ_1.. = actions`.
    pub fn distribution(&self, i: usize) -> &MixtureDistribution {
        if i == 0 {
            &self.start
        } else {
            &self.actions[i - 1]
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn has_feedback(&self) -> bool {
        !self.feedback.is_empty()
    }

    pub fn check(&self, space: &DomainSpace) -> Result<()> {
        for d in std::iter::once(&self.start).chain(&self.actions) {
            validate_distribution(d.weights.clone(), space.dim())?;
        }
        if self.has_feedback() && self.feedback.len() != self.actions.len() + 1 {
            return Err(Error::Data(format!(
                "{} feedback vectors for {} actions",
                self.feedback.len(),
                self.actions.len()
            )));
        }
        if let Some(f) = self.feedback.iter().find(|f| f.scores.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite feedback {:?}", f.scores)));
        }
        Ok(())
    }
}

/// One element of an MDP state: a distribution and the feedback observed
/// after training on it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateStep {
    pub dist: MixtureDistribution,
    pub feedback: FeedbackVector,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    /// Index of the source trajectory within its corpus.
    pub trajectory: usize,
    /// Step `t ≥ 1` of the action within the trajectory.
    pub step: usize,
    /// `ρ_0 .. ρ_{t−1}` with their feedback.
    pub state: Vec<StateStep>,
    pub action: MixtureDistribution,
    pub reward: f64,
    /// `state ∥ (action, feedback_t)`.
    pub next_state: Vec<StateStep>,
    /// True for the last action of a trajectory.
    pub terminal: bool,
}
