//! Conservative Q-learning of the critic with a deterministic-policy actor.
//!
//! A minibatch is grouped by trajectory. For each group one critic pass runs
//! over the longest state in the group (the "spine") with extra branch rows:
//! a branch row carries position `t`, sees spine rows `0..t` and itself, and
//! so evaluates `Q(s_t, a)` for an alternative action `a` alongside the
//! causal rows, which give `Q(s_t, ρ_t)` for every data action at once.

use std::collections::BTreeMap;
use std::rc::Rc;

use datamix_nn::{
    apply_head, decoder_logits, loss_and_gradients, optimizer_step, AttnMask, Bound, DecoderConfig, Graph,
    NetworkParams, OptState, OptimizerConfig, Tensor, Var,
};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::reward::RewardMap;
use crate::agent::{actor_config, critic_config, critic_q, AgentArch, AgentInputStep, Policy};
use crate::error::{Error, Result};
use crate::mdp::{compensated_sum, MixtureDistribution, StateStep, Transition};
use crate::rng::{derive_seed, stream};
use crate::sampler::random_probability;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CqlConfig {
    /// Weight of the conservative penalty.
    pub alpha: f64,
    pub discount: f64,
    /// Flat-Dirichlet actions per transition in the penalty.
    pub ood_samples: usize,
    /// Critic updates between target-critic copies.
    pub target_sync: usize,
    pub critic_optimizer: OptimizerConfig,
    pub actor_optimizer: OptimizerConfig,
    /// Transitions per update, drawn uniformly with replacement.
    pub batch_size: usize,
    pub steps: usize,
    /// Critic updates per actor update.
    pub actor_every: usize,
    /// Weight of the squared-error anchor of actor actions to data actions.
    pub bc_weight: f64,
}

impl CqlConfig {
    pub fn desk() -> Self {
        Self {
            alpha: 0.02,
            discount: 0.99,
            ood_samples: 10,
            target_sync: 50,
            critic_optimizer: OptimizerConfig::adam(3e-3),
            actor_optimizer: OptimizerConfig::adam(1e-3),
            batch_size: 32,
            steps: 1000,
            actor_every: 2,
            bc_weight: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !(0.0..1.0).contains(&self.discount) {
            return Err(Error::Config("cql alpha must be >= 0 and discount in [0, 1)".into()));
        }
        if self.target_sync == 0 || self.batch_size == 0 || self.actor_every == 0 {
            return Err(Error::Config(
                "cql target_sync, batch_size and actor_every must be positive".into(),
            ));
        }
        if !(self.bc_weight >= 0.0) {
            return Err(Error::Config("cql bc_weight must be >= 0".into()));
        }
        Ok(())
    }
}

/// Components of the critic objective, averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CqlTerms {
    pub loss: f64,
    pub bellman: f64,
    pub penalty: f64,
    pub mean_q: f64,
}

struct Group<'a> {
    spine: &'a [StateStep],
    /// Batch indices of the transitions in this group.
    members: Vec<usize>,
}

fn group_batch(batch: &[Transition]) -> Result<Vec<Group<'_>>> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut by_traj: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, t) in batch.iter().enumerate() {
        if t.state.is_empty() || t.next_state.len() != t.state.len() + 1 {
            return Err(Error::Data(format!("transition {i} has a malformed state")));
        }
        by_traj.entry(t.trajectory).or_default().push(i);
    }
    let mut out = Vec::with_capacity(by_traj.len());
    for members in by_traj.into_values() {
        let longest = *members
            .iter()
            .max_by_key(|&&i| (batch[i].next_state.len(), std::cmp::Reverse(i)))
            .expect("non-empty group");
        let spine = &batch[longest].next_state[..];
        for &i in &members {
            let t = &batch[i];
            if t.next_state[..] != spine[..t.next_state.len()] || t.next_state[t.state.len()].dist != t.action {
                return Err(Error::Data(format!(
                    "transition {i} does not share a prefix with trajectory {}",
                    t.trajectory
                )));
            }
        }
        out.push(Group { spine, members });
    }
    Ok(out)
}

fn dist_rows(steps: &[StateStep]) -> Vec<Vec<f64>> {
    steps.iter().map(|s| s.dist.weights().to_vec()).collect()
}

fn history(steps: &[StateStep]) -> Vec<AgentInputStep> {
    steps.iter().map(AgentInputStep::from_state).collect()
}

/// Runs the critic on `spine ∥ branches`; spine rows are causal, a branch
/// row at position `p` sees spine rows `0..p` and itself. Returns the
/// sigmoid outputs, one row per input row.
fn branch_pass(
    g: &mut Graph,
    bound: &Bound,
    cfg: &DecoderConfig,
    spine: Var,
    branches: &[(Var, usize)],
) -> Result<Var> {
    let spine_len = g.value(spine).rows();
    let mut parts = vec![spine];
    let mut positions: Vec<usize> = (0..spine_len).collect();
    for &(b, pos) in branches {
        if pos > spine_len {
            return Err(Error::Data("branch position beyond its spine".into()));
        }
        positions.extend(std::iter::repeat_n(pos, g.value(b).rows()));
        parts.push(b);
    }
    let input = g.concat_rows(&parts);
    let len = positions.len();
    let pos = positions.clone();
    let mask = AttnMask::from_fn(
        len,
        move |i, j| if i < spine_len { j <= i } else { j == i || j < pos[i] },
    );
    let logits = decoder_logits(g, bound, cfg, input, &positions, Rc::new(mask))?;
    Ok(apply_head(g, cfg.head, logits))
}

/// Per-transition penalty actions: the actor's action at the state
/// followed by the given out-of-distribution draws.
fn penalty_actions(
    group: &Group,
    batch: &[Transition],
    ood: &[Vec<MixtureDistribution>],
    actor_actions: &[MixtureDistribution],
) -> Vec<Vec<Vec<f64>>> {
    group
        .members
        .iter()
        .map(|&i| {
            let t = batch[i].state.len();
            std::iter::once(actor_actions[t - 1].weights().to_vec())
                .chain(ood[i].iter().map(|d| d.weights().to_vec()))
                .collect()
        })
        .collect()
}

/// Bellman targets `r + γ·Q_target(s′, actor(s′))` (just `r` when terminal).
fn bellman_targets(
    target_critic: &NetworkParams,
    group: &Group,
    batch: &[Transition],
    actor_actions: &[MixtureDistribution],
    discount: f64,
) -> Result<Vec<f64>> {
    let cfg = critic_config(target_critic)?;
    let live: Vec<usize> = group.members.iter().copied().filter(|&i| !batch[i].terminal).collect();
    let mut q_next = BTreeMap::new();
    if !live.is_empty() {
        let mut g = Graph::new();
        let bound = target_critic.bind(&mut g, false);
        let spine = g.constant(Tensor::from_rows(&dist_rows(group.spine))?);
        let mut branches = Vec::with_capacity(live.len());
        for &i in &live {
            let t = batch[i].state.len();
            let a = g.constant(Tensor::row_vector(actor_actions[t].weights()));
            branches.push((a, t + 1));
        }
        let q = branch_pass(&mut g, &bound, cfg, spine, &branches)?;
        let qv = g.value(q);
        for (k, &i) in live.iter().enumerate() {
            q_next.insert(i, qv.get(group.spine.len() + k, 0));
        }
    }
    Ok(group
        .members
        .iter()
        .map(|&i| batch[i].reward + q_next.get(&i).map_or(0.0, |q| discount * q))
        .collect())
}

fn cql_graph(
    g: &mut Graph,
    bound: &Bound,
    critic: &NetworkParams,
    target_critic: &NetworkParams,
    actor: &dyn Policy,
    batch: &[Transition],
    ood: &[Vec<MixtureDistribution>],
    cfg: &CqlConfig,
) -> Result<(Var, Var, Var, Var)> {
    let ccfg = critic_config(critic)?;
    if ood.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            expected: batch.len(),
            got: ood.len(),
        });
    }
    let mut bellman = Vec::with_capacity(batch.len());
    let mut penalty = Vec::with_capacity(batch.len());
    let mut q_data = Vec::with_capacity(batch.len());
    for group in group_batch(batch)? {
        let actor_actions = actor.act_all(&history(group.spine))?;
        let targets = bellman_targets(target_critic, &group, batch, &actor_actions, cfg.discount)?;
        let pen_actions = penalty_actions(&group, batch, ood, &actor_actions);
        let spine = g.constant(Tensor::from_rows(&dist_rows(group.spine))?);
        let mut branches = Vec::with_capacity(group.members.len());
        for (k, &i) in group.members.iter().enumerate() {
            branches.push((g.constant(Tensor::from_rows(&pen_actions[k])?), batch[i].state.len()));
        }
        let q = branch_pass(g, bound, ccfg, spine, &branches)?;
        let mut offset = group.spine.len();
        for (k, &i) in group.members.iter().enumerate() {
            let t = batch[i].state.len();
            let qd = g.row_slice(q, t, 1);
            let y = g.constant(Tensor::scalar(targets[k]));
            let diff = g.sub(qd, y);
            bellman.push(g.square(diff));
            let rows = pen_actions[k].len();
            let qp = g.row_slice(q, offset, rows);
            offset += rows;
            let lme = g.log_mean_exp(qp);
            penalty.push(g.sub(lme, qd));
            q_data.push(qd);
        }
    }
    let mean = |g: &mut Graph, xs: &[Var]| {
        let all = g.concat_rows(xs);
        g.mean(all)
    };
    let b = mean(g, &bellman);
    let p = mean(g, &penalty);
    let q = mean(g, &q_data);
    let scaled = g.scale(p, cfg.alpha);
    let loss = g.add(b, scaled);
    Ok((loss, b, p, q))
}

/// Mean over the batch of `(Q(s,a) − y)² + α·(log-mean-exp_{a′} Q(s,a′) − Q(s,a))`
/// where `y` uses the frozen target critic at the actor's next action and
/// `a′` ranges over the actor's action at `s` and `ood[i]`.
pub fn cql_loss(
    critic: &NetworkParams,
    target_critic: &NetworkParams,
    actor: &dyn Policy,
    batch: &[Transition],
    ood: &[Vec<MixtureDistribution>],
    cfg: &CqlConfig,
) -> Result<CqlTerms> {
    let mut g = Graph::new();
    let bound = critic.bind(&mut g, false);
    let (l, b, p, q) = cql_graph(&mut g, &bound, critic, target_critic, actor, batch, ood, cfg)?;
    Ok(CqlTerms {
        loss: g.value(l).item(),
        bellman: g.value(b).item(),
        penalty: g.value(p).item(),
        mean_q: g.value(q).item(),
    })
}

pub fn cql_loss_and_grad(
    critic: &NetworkParams,
    target_critic: &NetworkParams,
    actor: &dyn Policy,
    batch: &[Transition],
    ood: &[Vec<MixtureDistribution>],
    cfg: &CqlConfig,
) -> Result<(CqlTerms, NetworkParams)> {
    let mut terms = CqlTerms::default();
    let mut inner: Option<Error> = None;
    let res = loss_and_gradients(critic, |g, bound| {
        match cql_graph(g, bound, critic, target_critic, actor, batch, ood, cfg) {
            Ok((l, b, p, q)) => {
                terms = CqlTerms {
                    loss: g.value(l).item(),
                    bellman: g.value(b).item(),
                    penalty: g.value(p).item(),
                    mean_q: g.value(q).item(),
                };
                Ok(l)
            }
            Err(e) => {
                let msg = e.to_string();
                inner = Some(e);
                Err(datamix_nn::NnError::Shape(msg))
            }
        }
    });
    match (res, inner) {
        (Ok((_, grads)), _) => Ok((terms, grads)),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

fn actor_graph(
    g: &mut Graph,
    bound: &Bound,
    actor: &NetworkParams,
    critic: &NetworkParams,
    batch: &[Transition],
    bc_weight: f64,
) -> Result<(Var, Var)> {
    let acfg = actor_config(actor)?;
    let ccfg = critic_config(critic)?;
    let mut cg_bound = None;
    let mut qs = Vec::with_capacity(batch.len());
    let mut anchors = Vec::new();
    for group in group_batch(batch)? {
        let feats: Vec<Vec<f64>> = history(group.spine).into_iter().map(|s| s.feature).collect();
        let rows = feats.len();
        let x = g.constant(Tensor::from_rows(&feats)?);
        let positions: Vec<usize> = (0..rows).collect();
        let logits = decoder_logits(g, bound, acfg, x, &positions, Rc::new(AttnMask::causal(rows)))?;
        let probs = g.softmax_rows(logits);
        let mut branches = Vec::with_capacity(group.members.len());
        for &i in &group.members {
            let t = batch[i].state.len();
            let a = g.row_slice(probs, t - 1, 1);
            if bc_weight > 0.0 {
                let data = g.constant(Tensor::row_vector(batch[i].action.weights()));
                let d = g.sub(a, data);
                let sq = g.square(d);
                anchors.push(g.sum(sq));
            }
            branches.push((a, t));
        }
        let cb = cg_bound.get_or_insert_with(|| critic.bind(g, false)).clone();
        let spine = g.constant(Tensor::from_rows(&dist_rows(group.spine))?);
        let q = branch_pass(g, &cb, ccfg, spine, &branches)?;
        qs.push(g.row_slice(q, group.spine.len(), branches.len()));
    }
    let all = g.concat_rows(&qs);
    let mean_q = g.mean(all);
    let mut loss = g.scale(mean_q, -1.0);
    if !anchors.is_empty() {
        let a = g.concat_rows(&anchors);
        let m = g.mean(a);
        let w = g.scale(m, bc_weight);
        loss = g.add(loss, w);
    }
    Ok((loss, mean_q))
}

/// Mean `Q(s, actor(s))` over the batch through a frozen critic, and the
/// gradient of `−mean Q + bc_weight·mean ‖actor(s) − a‖²` for the actor.
pub fn actor_objective_and_grad(
    actor: &NetworkParams,
    critic: &NetworkParams,
    batch: &[Transition],
    bc_weight: f64,
) -> Result<(f64, f64, NetworkParams)> {
    let mut mean_q = 0.0;
    let mut inner: Option<Error> = None;
    let res = loss_and_gradients(actor, |g, bound| {
        match actor_graph(g, bound, actor, critic, batch, bc_weight) {
            Ok((l, q)) => {
                mean_q = g.value(q).item();
                Ok(l)
            }
            Err(e) => {
                let msg = e.to_string();
                inner = Some(e);
                Err(datamix_nn::NnError::Shape(msg))
            }
        }
    });
    match (res, inner) {
        (Ok((loss, grads)), _) => Ok((mean_q, loss, grads)),
        (Err(_), Some(e)) => Err(e),
        (Err(e), None) => Err(e.into()),
    }
}

/// Mean `Q(s, actor(s))` over the batch, evaluated state by state.
pub fn mean_actor_q(actor: &dyn Policy, critic: &NetworkParams, batch: &[Transition]) -> Result<f64> {
    let qs = batch
        .iter()
        .map(|t| {
            let a = actor.act(&history(&t.state))?;
            let s: Vec<MixtureDistribution> = t.state.iter().map(|x| x.dist.clone()).collect();
            critic_q(critic, &s, &a)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(compensated_sum(qs) / batch.len() as f64)
}

pub fn draw_ood(n: usize, count: usize, samples: usize, rng: &mut impl Rng) -> Vec<Vec<MixtureDistribution>> {
    (0..count)
        .map(|_| (0..samples).map(|_| random_probability(n, rng)).collect())
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqlCurveRow {
    pub step: usize,
    pub loss: f64,
    pub bellman: f64,
    pub penalty: f64,
    pub mean_q: f64,
    /// Mean Q of the actor's actions on the batch before its update; NaN on
    /// steps without an actor update.
    pub actor_q: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CqlOutcome {
    pub actor: NetworkParams,
    pub critic: NetworkParams,
    pub reward_map: RewardMap,
    pub curve: Vec<CqlCurveRow>,
}

/// Alternating critic/actor training from `actor_init` on transitions with
/// raw (standardized-feedback) rewards.
pub fn train_cql(
    actor_init: &NetworkParams,
    transitions: &[Transition],
    arch: &AgentArch,
    cfg: &CqlConfig,
    seed: u64,
) -> Result<CqlOutcome> {
    cfg.validate()?;
    actor_config(actor_init)?;
    if transitions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = transitions[0].action.dim();
    let reward_map = RewardMap::fit(transitions, cfg.discount)?;
    let data = reward_map.map_all(transitions);
    let mut critic = crate::agent::init_critic(arch, derive_seed(seed, "cql.critic", 0))?;
    let mut target = critic.clone();
    let mut actor = actor_init.clone();
    let mut critic_state = OptState::default();
    let mut actor_state = OptState::default();
    let mut rng = stream(seed, "cql.batch", 0);
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Transition> = (0..cfg.batch_size)
            .map(|_| data[rng.random_range(0..data.len())].clone())
            .collect();
        let ood = draw_ood(n, batch.len(), cfg.ood_samples, &mut rng);
        let (terms, grads) = cql_loss_and_grad(&critic, &target, &actor, &batch, &ood, cfg)?;
        optimizer_step(&mut critic, &grads, &mut critic_state, &cfg.critic_optimizer)?;
        let mut actor_q = f64::NAN;
        if (step + 1) % cfg.actor_every == 0 {
            let (q, _, g) = actor_objective_and_grad(&actor, &critic, &batch, cfg.bc_weight)?;
            optimizer_step(&mut actor, &g, &mut actor_state, &cfg.actor_optimizer)?;
            actor_q = q;
        }
        if (step + 1) % cfg.target_sync == 0 {
            target = critic.clone();
        }
        curve.push(CqlCurveRow {
            step,
            loss: terms.loss,
            bellman: terms.bellman,
            penalty: terms.penalty,
            mean_q: terms.mean_q,
            actor_q,
        });
    }
    Ok(CqlOutcome {
        actor,
        critic,
        reward_map,
        curve,
    })
}

/// Mean Q of data actions and of flat-Dirichlet actions at the same states.
pub fn conservatism(
    critic: &NetworkParams,
    transitions: &[Transition],
    samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    let mut rng = stream(seed, "cql.conservatism", 0);
    let mut data = Vec::with_capacity(transitions.len());
    let mut ood = Vec::with_capacity(transitions.len() * samples);
    for t in transitions {
        let s: Vec<MixtureDistribution> = t.state.iter().map(|x| x.dist.clone()).collect();
        data.push(critic_q(critic, &s, &t.action)?);
        for _ in 0..samples {
            ood.push(critic_q(critic, &s, &random_probability(t.action.dim(), &mut rng))?);
        }
    }
    Ok((
        compensated_sum(data.iter().copied()) / data.len() as f64,
        compensated_sum(ood.iter().copied()) / ood.len() as f64,
    ))
}
