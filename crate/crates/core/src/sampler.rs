//! Random trajectory sampling ranked by top-K inductive scores.
//!
//! Each step draws `candidate_count` flat-Dirichlet candidates, scores them by
//! `α·KL(ρ‖ρ′) + β·σ(d/5)·KL(ρ_t‖ρ′) − γ·mean_j KL(τ_j[d]‖ρ′)` and picks one
//! uniformly among the `K` lowest scores. A trajectory ends after `M` steps or
//! once the target samples it has drawn reach the target pool size.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::mdp::{
    kl_divergence, smoothed, smoothed_neg_entropy, DomainSpace, Field, MixtureDistribution, Provenance,
    TrajectoryRecord, KL_EPSILON,
};
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerConfig {
    /// Trajectories per run (P).
    pub trajectories: usize,
    /// Maximum reweighting steps per trajectory (M).
    pub max_steps: usize,
    /// Samples drawn per step (R).
    pub samples_per_step: u64,
    /// Inductive threshold (K).
    pub top_k: usize,
    pub candidate_count: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    /// Target pool size |T|, in samples.
    pub target_pool_size: u64,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trajectories == 0
            || self.max_steps == 0
            || self.samples_per_step == 0
            || self.top_k == 0
            || self.candidate_count == 0
        {
            return Err(Error::SamplerConfig(
                "trajectories, max_steps, samples_per_step, top_k and candidate_count must be >= 1".into(),
            ));
        }
        if self.top_k > self.candidate_count {
            return Err(Error::SamplerConfig(format!(
                "top_k {} exceeds candidate_count {}",
                self.top_k, self.candidate_count
            )));
        }
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::SamplerConfig(format!("{name} must be a non-negative real")));
            }
        }
        Ok(())
    }

    pub fn weights(&self) -> InductiveWeights {
        InductiveWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        hex::encode(h.finalize())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InductiveWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

/// Trajectories from one or more sampling runs. Each record carries its
/// top-K tier in its provenance.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrajectorySet {
    pub trajectories: Vec<TrajectoryRecord>,
}

impl TrajectorySet {
    pub fn tier(&self, k: usize) -> TrajectorySet {
        TrajectorySet {
            trajectories: self
                .trajectories
                .iter()
                .filter(|t| t.provenance.tier == k)
                .cloned()
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// One flat-Dirichlet draw.
pub fn random_probability(n: usize, rng: &mut impl Rng) -> MixtureDistribution {
    let mut raw: Vec<f64> = (0..n).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    // an all-zero draw has probability zero but would divide by zero
    if raw.iter().all(|&x| x == 0.0) {
        raw.iter_mut().for_each(|x| *x = 1.0);
    }
    MixtureDistribution::from_positive(raw)
}

fn sigma(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// The inductive score of candidate `cand` at step `d`, evaluated term by
/// term from the divergence definition.
pub fn calculate_inductive_score(
    d: usize,
    cand: &MixtureDistribution,
    prior: &[TrajectoryRecord],
    last: &MixtureDistribution,
    target: &MixtureDistribution,
    w: InductiveWeights,
) -> Result<f64> {
    let s_c = kl_divergence(last, cand)?;
    let s_t = kl_divergence(target, cand)?;
    let mut sims = Vec::new();
    for t in prior.iter().filter(|t| d < t.len()) {
        sims.push(kl_divergence(t.distribution(d), cand)?);
    }
    let s_d = if sims.is_empty() {
        0.0
    } else {
        sims.iter().sum::<f64>() / sims.len() as f64
    };
    Ok(w.alpha * s_c + w.beta * sigma(d as f64 / 5.0) * s_t - w.gamma * s_d)
}

/// Step-specific scorer. Every KL term has the form `Σ p̃ ln p̃ − Σ p̃ ln q̃`,
/// so the whole score is `constant − coef · ln q̃` and each candidate costs
/// one dot product.
#[derive(Clone, Debug)]
pub struct InductiveScorer {
    constant: f64,
    coef: Vec<f64>,
}

impl InductiveScorer {
    pub fn new(
        d: usize,
        prior: &[TrajectoryRecord],
        last: &MixtureDistribution,
        target: &MixtureDistribution,
        w: InductiveWeights,
    ) -> Result<Self> {
        let n = last.dim();
        if target.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: target.dim(),
            });
        }
        let bs = w.beta * sigma(d as f64 / 5.0);
        let mut constant = w.alpha * smoothed_neg_entropy(last) + bs * smoothed_neg_entropy(target);
        let mut coef: Vec<f64> = smoothed(last)
            .iter()
            .zip(smoothed(target))
            .map(|(a, b)| w.alpha * a + bs * b)
            .collect();
        let reach: Vec<&MixtureDistribution> = prior
            .iter()
            .filter(|t| d < t.len())
            .map(|t| t.distribution(d))
            .collect();
        if !reach.is_empty() {
            let k = w.gamma / reach.len() as f64;
            for p in reach {
                if p.dim() != n {
                    return Err(Error::DimensionMismatch {
                        expected: n,
                        got: p.dim(),
                    });
                }
                constant -= k * smoothed_neg_entropy(p);
                for (c, s) in coef.iter_mut().zip(smoothed(p)) {
                    *c -= k * s;
                }
            }
        }
        Ok(Self { constant, coef })
    }

    /// Score of a candidate given its raw weights.
    pub fn score(&self, cand: &[f64]) -> f64 {
        let n = cand.len();
        let mut acc = 0.0;
        for (&c, &q) in self.coef.iter().zip(cand) {
            acc += c * ((1.0 - KL_EPSILON) * q + KL_EPSILON / n as f64).ln();
        }
        self.constant - acc
    }
}

/// Indices of the `k` lowest scores, ordered by (score, index).
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if scores.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if k == 0 || k > scores.len() {
        return Err(Error::KTooLarge { k, len: scores.len() });
    }
    let key = |&i: &usize| (scores[i], i);
    let cmp = |a: &usize, b: &usize| {
        let (sa, ia) = key(a);
        let (sb, ib) = key(b);
        sa.total_cmp(&sb).then(ia.cmp(&ib))
    };
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    Ok(idx)
}

/// Uniform pick among the `k` lowest-scoring candidates; equal scores rank
/// by list position.
pub fn random_top_k(
    candidates: &[(MixtureDistribution, f64)],
    k: usize,
    rng: &mut impl Rng,
) -> Result<MixtureDistribution> {
    let scores: Vec<f64> = candidates.iter().map(|c| c.1).collect();
    let top = top_k_indices(&scores, k)?;
    Ok(candidates[top[rng.random_range(0..k)]].0.clone())
}

pub fn target_samples_covered(rho: &MixtureDistribution, r: u64, space: &DomainSpace) -> u64 {
    (r as f64 * rho.mass(space, Field::Target)).round() as u64
}

/// Per-step record of a selection, for inspection.
#[derive(Clone, Debug, PartialEq)]
pub struct StepTrace {
    pub trajectory: usize,
    pub step: usize,
    pub chosen_score: f64,
    pub min_score: f64,
    pub rank: usize,
}

/// Runs the sampling loop for one tier. `prior` seeds the cross-trajectory
/// diversity term; trajectories sampled in this run are appended to it as
/// they complete. Only the new trajectories are returned.
pub fn sample_trajectories(
    cfg: &SamplerConfig,
    start: &MixtureDistribution,
    target: &MixtureDistribution,
    space: &DomainSpace,
    prior: &[TrajectoryRecord],
) -> Result<TrajectorySet> {
    sample_trajectories_traced(cfg, start, target, space, prior, None)
}

pub fn sample_trajectories_traced(
    cfg: &SamplerConfig,
    start: &MixtureDistribution,
    target: &MixtureDistribution,
    space: &DomainSpace,
    prior: &[TrajectoryRecord],
    mut trace: Option<&mut Vec<StepTrace>>,
) -> Result<TrajectorySet> {
    cfg.validate()?;
    let n = space.dim();
    for d in [start, target] {
        if d.dim() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: d.dim(),
            });
        }
    }
    let hash = cfg.hash();
    let mut pool: Vec<TrajectoryRecord> = prior.to_vec();
    let mut out = Vec::with_capacity(cfg.trajectories);
    let mut cands = vec![0.0; cfg.candidate_count * n];
    let mut scores = vec![0.0; cfg.candidate_count];
    let w = cfg.weights();

    for p in 0..cfg.trajectories {
        let mut rng: ChaCha8Rng = stream(cfg.seed, "sampler.trajectory", p as u64);
        let mut record = TrajectoryRecord {
            start: start.clone(),
            actions: Vec::new(),
            feedback: Vec::new(),
            provenance: Provenance {
                seed: cfg.seed,
                tier: cfg.top_k,
                config_hash: hash.clone(),
            },
        };
        let mut covered = 0u64;
        let mut last = start.clone();
        for d in 0..cfg.max_steps {
            let scorer = InductiveScorer::new(d, &pool, &last, target, w)?;
            for (c, s) in cands.chunks_exact_mut(n).zip(scores.iter_mut()) {
                let draw = random_probability(n, &mut rng);
                c.copy_from_slice(draw.weights());
                *s = scorer.score(c);
            }
            let top = top_k_indices(&scores, cfg.top_k)?;
            let rank = rng.random_range(0..cfg.top_k);
            let pick = top[rank];
            let chosen = crate::mdp::validate_distribution(cands[pick * n..(pick + 1) * n].to_vec(), n)?;
            if let Some(t) = trace.as_deref_mut() {
                t.push(StepTrace {
                    trajectory: p,
                    step: d,
                    chosen_score: scores[pick],
                    min_score: scores.iter().copied().fold(f64::INFINITY, f64::min),
                    rank,
                });
            }
            covered += target_samples_covered(&chosen, cfg.samples_per_step, space);
            record.actions.push(chosen.clone());
            last = chosen;
            if covered >= cfg.target_pool_size {
                break;
            }
        }
        pool.push(record.clone());
        out.push(record);
    }
    Ok(TrajectorySet { trajectories: out })
}

/// Runs one sampling pass per threshold in `tiers`, each with its own seed
/// stream. With `share_across_runs`, later runs see earlier runs'
/// trajectories in the diversity term.
pub fn sample_tiers(
    base: &SamplerConfig,
    tiers: &[usize],
    start: &MixtureDistribution,
    target: &MixtureDistribution,
    space: &DomainSpace,
    share_across_runs: bool,
) -> Result<TrajectorySet> {
    let mut all = TrajectorySet::default();
    for (i, &k) in tiers.iter().enumerate() {
        let cfg = SamplerConfig {
            top_k: k,
            seed: crate::rng::derive_seed(base.seed, "sampler.tier", i as u64),
            ..base.clone()
        };
        let prior: &[TrajectoryRecord] = if share_across_runs { &all.trajectories } else { &[] };
        let run = sample_trajectories(&cfg, start, target, space, prior)?;
        all.trajectories.extend(run.trajectories);
    }
    Ok(all)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::validate_distribution;
    use rand::SeedableRng;

    fn d(w: &[f64]) -> MixtureDistribution {
        validate_distribution(w.to_vec(), w.len()).unwrap()
    }

    fn space4() -> DomainSpace {
        DomainSpace::from_fields(&[Field::Source, Field::Source, Field::Target, Field::Target]).unwrap()
    }

    fn cfg() -> SamplerConfig {
        SamplerConfig {
            trajectories: 2,
            max_steps: 3,
            samples_per_step: 100,
            top_k: 5,
            candidate_count: 200,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
            target_pool_size: 1_000_000,
            seed: 11,
        }
    }

    fn record(dists: &[MixtureDistribution]) -> TrajectoryRecord {
        TrajectoryRecord {
            start: dists[0].clone(),
            actions: dists[1..].to_vec(),
            feedback: vec![],
            provenance: Provenance {
                seed: 0,
                tier: 1,
                config_hash: String::new(),
            },
        }
    }

    #[test]
    fn flat_dirichlet_first_coordinate_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| random_probability(2, &mut rng).weights()[0])
            .sum::<f64>()
            / n as f64;
        assert!((mean - 0.5).abs() < 0.02, "{mean}");
        let a: Vec<_> = (0..5)
            .map(|_| random_probability(4, &mut ChaCha8Rng::seed_from_u64(9)))
            .collect();
        assert!(a.windows(2).all(|w| w[0] == w[1]));
        for _ in 0..1000 {
            let p = random_probability(7, &mut rng);
            assert!(validate_distribution(p.weights().to_vec(), 7).is_ok());
        }
    }

    #[test]
    fn score_examples() {
        let w = InductiveWeights {
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.5,
        };
        let p = d(&[0.2, 0.8]);
        assert_eq!(calculate_inductive_score(3, &p, &[], &p, &p, w).unwrap(), 0.0);

        let cand = d(&[0.25, 0.75]);
        let last = d(&[0.5, 0.5]);
        let tgt = d(&[0.0, 1.0]);
        let w1 = InductiveWeights { gamma: 0.0, ..w };
        let s = calculate_inductive_score(0, &cand, &[], &last, &tgt, w1).unwrap();
        let expect = kl_divergence(&last, &cand).unwrap() + 0.5 * kl_divergence(&tgt, &cand).unwrap();
        assert!((s - expect).abs() < 1e-15);
    }

    /// Worked two-domain case against an independent evaluation of the
    /// smoothed divergences written out by hand.
    #[test]
    fn two_domain_worked_score() {
        let eps = 1e-8f64;
        let sm = |w: f64| (1.0 - eps) * w + eps / 2.0;
        let kl = |p: [f64; 2], q: [f64; 2]| -> f64 { (0..2).map(|i| sm(p[i]) * (sm(p[i]).ln() - sm(q[i]).ln())).sum() };
        let (rho, cand, tgt) = ([0.5, 0.5], [0.25, 0.75], [0.0, 1.0]);
        for step in [0usize, 1, 7] {
            let sig = 1.0 / (1.0 + (-(step as f64) / 5.0).exp());
            // one prior trajectory whose element at `step` is [0.5, 0.5]
            let oracle = kl(rho, cand) + sig * kl(tgt, cand) - 0.5 * kl([0.5, 0.5], cand);
            let prior = record(&vec![d(&[0.5, 0.5]); step + 1]);
            let w = InductiveWeights {
                alpha: 1.0,
                beta: 1.0,
                gamma: 0.5,
            };
            let got = calculate_inductive_score(step, &d(&cand), &[prior.clone()], &d(&rho), &d(&tgt), w).unwrap();
            assert!((got - oracle).abs() < 1e-12, "step {step}: {got} vs {oracle}");
            let fast = InductiveScorer::new(step, &[prior], &d(&rho), &d(&tgt), w)
                .unwrap()
                .score(&cand);
            assert!((fast - oracle).abs() < 1e-12);
        }
        // the prior term vanishes once the trajectory is too short
        let short = record(&[d(&[0.5, 0.5])]);
        let w = InductiveWeights {
            alpha: 1.0,
            beta: 0.0,
            gamma: 3.0,
        };
        let s = calculate_inductive_score(1, &d(&cand), &[short], &d(&rho), &d(&tgt), w).unwrap();
        assert!((s - kl(rho, cand)).abs() < 1e-15);
    }

    #[test]
    fn fast_scorer_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let prior: Vec<_> = (0..3)
            .map(|i| {
                record(
                    &(0..(3 + i))
                        .map(|_| random_probability(5, &mut rng))
                        .collect::<Vec<_>>(),
                )
            })
            .collect();
        let w = InductiveWeights {
            alpha: 0.7,
            beta: 1.3,
            gamma: 0.4,
        };
        for step in 0..6 {
            let last = random_probability(5, &mut rng);
            let tgt = random_probability(5, &mut rng);
            let scorer = InductiveScorer::new(step, &prior, &last, &tgt, w).unwrap();
            for _ in 0..50 {
                let c = random_probability(5, &mut rng);
                let a = calculate_inductive_score(step, &c, &prior, &last, &tgt, w).unwrap();
                let b = scorer.score(c.weights());
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{a} {b}");
            }
        }
    }

    #[test]
    fn top_k_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = |s: &[f64]| -> Vec<(MixtureDistribution, f64)> {
            s.iter()
                .enumerate()
                .map(|(i, &x)| (MixtureDistribution::vertex(4, i), x))
                .collect()
        };
        assert_eq!(
            random_top_k(&c(&[3.0, 1.0, 2.0, 5.0]), 1, &mut rng).unwrap(),
            MixtureDistribution::vertex(4, 1)
        );
        // equal minima: the earlier index wins
        assert_eq!(
            random_top_k(&c(&[2.0, 1.0, 1.0, 5.0]), 1, &mut rng).unwrap(),
            MixtureDistribution::vertex(4, 1)
        );
        assert!(matches!(random_top_k(&[], 1, &mut rng), Err(Error::EmptyCandidates)));
        assert!(matches!(
            random_top_k(&c(&[1.0]), 2, &mut rng),
            Err(Error::KTooLarge { .. })
        ));
        assert_eq!(top_k_indices(&[4.0, 1.0, 3.0, 1.0, 0.5], 3).unwrap(), vec![4, 1, 3]);
    }

    #[test]
    fn top_k_over_whole_list_is_uniform() {
        // χ² goodness of fit, 9 degrees of freedom; 21.67 is the 0.99 quantile
        let cands: Vec<_> = (0..10)
            .map(|i| (MixtureDistribution::vertex(10, i), (i * 7 % 10) as f64))
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 10];
        let draws = 10_000;
        for _ in 0..draws {
            let p = random_top_k(&cands, 10, &mut rng).unwrap();
            counts[p.weights().iter().position(|&w| w == 1.0).unwrap()] += 1;
        }
        let e = draws as f64 / 10.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        assert!(chi2 < 21.67, "chi2 = {chi2}, counts {counts:?}");
    }

    #[test]
    fn coverage_examples() {
        let s = space4();
        assert_eq!(target_samples_covered(&d(&[0.5, 0.25, 0.125, 0.125]), 8000, &s), 2000);
        assert_eq!(target_samples_covered(&d(&[0.5, 0.5, 0.0, 0.0]), 8000, &s), 0);
        assert_eq!(target_samples_covered(&d(&[0.0, 0.0, 0.5, 0.5]), 64000, &s), 64000);
    }

    #[test]
    fn structure_and_determinism() {
        let s = space4();
        let start = d(&[0.5, 0.5, 0.0, 0.0]);
        let tgt = d(&[0.0, 0.0, 0.5, 0.5]);
        let a = sample_trajectories(&cfg(), &start, &tgt, &s, &[]).unwrap();
        assert_eq!(a.len(), 2);
        for t in &a.trajectories {
            assert_eq!(t.actions.len(), 3);
            assert_eq!(t.start, start);
            assert!(t.check(&s).is_ok());
        }
        let b = sample_trajectories(&cfg(), &start, &tgt, &s, &[]).unwrap();
        assert_eq!(a, b);
        let c = sample_trajectories(&SamplerConfig { seed: 12, ..cfg() }, &start, &tgt, &s, &[]).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn argmin_is_selected_with_k_one() {
        let s = space4();
        let mut trace = Vec::new();
        let c = SamplerConfig {
            top_k: 1,
            trajectories: 3,
            max_steps: 6,
            ..cfg()
        };
        sample_trajectories_traced(
            &c,
            &d(&[0.5, 0.5, 0.0, 0.0]),
            &d(&[0.0, 0.0, 0.5, 0.5]),
            &s,
            &[],
            Some(&mut trace),
        )
        .unwrap();
        assert_eq!(trace.len(), 18);
        for t in trace {
            assert_eq!(t.chosen_score, t.min_score);
        }
    }

    #[test]
    fn full_target_budget_stops_early() {
        let s = space4();
        let c = SamplerConfig {
            top_k: 1,
            max_steps: 50,
            candidate_count: 2000,
            target_pool_size: 100,
            ..cfg()
        };
        let set = sample_trajectories(&c, &d(&[0.5, 0.5, 0.0, 0.0]), &d(&[0.0, 0.0, 0.0, 1.0]), &s, &[]).unwrap();
        for t in &set.trajectories {
            assert!(t.actions.len() < 50, "ran {} steps", t.actions.len());
            let covered: u64 = t.actions.iter().map(|a| target_samples_covered(a, 100, &s)).sum();
            assert!(covered >= 100);
            let before: u64 = t.actions[..t.actions.len() - 1]
                .iter()
                .map(|a| target_samples_covered(a, 100, &s))
                .sum();
            assert!(before < 100);
        }
    }

    #[test]
    fn config_validation() {
        assert!(SamplerConfig { top_k: 300, ..cfg() }.validate().is_err());
        assert!(SamplerConfig {
            trajectories: 0,
            ..cfg()
        }
        .validate()
        .is_err());
        assert!(SamplerConfig { gamma: -1.0, ..cfg() }.validate().is_err());
        assert!(cfg().validate().is_ok());
    }

    #[test]
    fn tiers_are_labelled() {
        let s = space4();
        let set = sample_tiers(
            &SamplerConfig {
                trajectories: 1,
                ..cfg()
            },
            &[1, 5, 20],
            &d(&[0.5, 0.5, 0.0, 0.0]),
            &d(&[0.0, 0.0, 0.5, 0.5]),
            &s,
            false,
        )
        .unwrap();
        assert_eq!(set.len(), 3);
        assert_eq!(set.tier(5).len(), 1);
        assert_eq!(set.tier(5).trajectories[0].provenance.tier, 5);
    }
}
