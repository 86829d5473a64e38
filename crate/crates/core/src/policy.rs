//! Multi-agent masking policy: every patch is an agent that chooses to keep
//! or mask itself. All agents share one actor; a centralized critic scores
//! the global state. The team reward is the change in the frozen target
//! network's pretraining loss between consecutive joint actions, and both
//! networks are trained with synchronous advantage actor-critic updates.

use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::mim::{LossConfig, MaskDecision, Sample, TargetModel};
use crate::nn::{self, adam_step, AdamConfig, Dense, Param, Parameterized};
use crate::{Error, Result};

/// Column of the action distribution that means "mask".
pub const MASK: usize = 1;
/// Column that means "keep".
pub const KEEP: usize = 0;

/// Joint actions resampled this many times before a forced flip.
const MAX_RESAMPLES: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: usize,
    /// Discount `γ ∈ (0, 1]`.
    pub gamma: f64,
    /// Return window `T`.
    pub horizon: usize,
    /// Decision steps per episode; must be at least `horizon`.
    pub episode_steps: usize,
    /// One policy episode every this many MIM steps during phase 1.
    pub update_period: usize,
    pub entropy_coef: f64,
    /// Discount relative to the window start instead of the absolute step index.
    pub relative_discount: bool,
    /// Use argmax actions for MIM masks instead of sampling.
    pub greedy: bool,
    pub lr: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            gamma: 0.99,
            horizon: 4,
            episode_steps: 4,
            update_period: 4,
            entropy_coef: 0.0,
            relative_discount: false,
            greedy: false,
            lr: 1e-3,
        }
    }
}

impl PolicyConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            v.push(format!("policy.gamma = {} must lie in (0, 1]", self.gamma));
        }
        if self.horizon == 0 {
            v.push("policy.horizon must be at least 1".into());
        }
        if self.episode_steps < self.horizon {
            v.push(format!(
                "policy.episode_steps = {} must be >= policy.horizon = {}",
                self.episode_steps, self.horizon
            ));
        }
        if self.update_period == 0 {
            v.push("policy.update_period must be at least 1".into());
        }
        if self.hidden == 0 {
            v.push("policy.hidden must be at least 1".into());
        }
        if !(self.entropy_coef >= 0.0) {
            v.push("policy.entropy_coef must be >= 0".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            v.push("policy.lr must be finite and >= 0".into());
        }
        v
    }
}

/// Global state `S` (1×E) and per-agent observations `O` (N×E).
#[derive(Clone, Debug, PartialEq)]
pub struct DecisionState {
    pub global: Array2<f64>,
    pub observations: Array2<f64>,
}

impl DecisionState {
    /// `S` is the row mean of `O`.
    pub fn from_observations(observations: Array2<f64>) -> Self {
        Self {
            global: nn::meanpool_forward(&observations),
            observations,
        }
    }

    pub fn num_agents(&self) -> usize {
        self.observations.nrows()
    }

    /// Actor input rows `[O_i ; S]`.
    fn actor_input(&self) -> Array2<f64> {
        let n = self.num_agents();
        let g = self
            .global
            .broadcast((n, self.global.ncols()))
            .expect("1-row global state");
        concatenate(Axis(1), &[self.observations.view(), g]).expect("matching rows")
    }
}

/// Features of the frozen target encoder with every patch visible.
pub fn observe(snapshot: &TargetModel, sample: &Sample) -> Result<DecisionState> {
    let all: Vec<usize> = (0..sample.grid.num_patches()).collect();
    Ok(DecisionState::from_observations(
        snapshot.encode(&sample.patches, &all)?,
    ))
}

/// Shared actor and centralized critic.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    pub actor_hidden: Dense,
    pub actor_out: Dense,
    pub critic_hidden: Dense,
    pub critic_out: Dense,
}

struct ActorPass {
    input: Array2<f64>,
    hidden: Array2<f64>,
    log_probs: Array2<f64>,
}

struct CriticPass {
    hidden: Array2<f64>,
    value: f64,
}

impl PolicyParams {
    /// The actor's output layer starts at zero so every agent begins with a
    /// uniform keep/mask distribution.
    pub fn new(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            actor_hidden: Dense::new("actor.hidden", 2 * feature_dim, hidden, &mut rng),
            actor_out: Dense::zeros("actor.out", hidden, 2),
            critic_hidden: Dense::new("critic.hidden", feature_dim, hidden, &mut rng),
            critic_out: Dense::new("critic.out", hidden, 1, &mut rng),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.critic_hidden.inputs()
    }

    fn actor_pass(&self, state: &DecisionState) -> ActorPass {
        let input = state.actor_input();
        let hidden = nn::tanh_forward(&self.actor_hidden.forward(&input));
        let log_probs = nn::log_softmax(&self.actor_out.forward(&hidden));
        ActorPass {
            input,
            hidden,
            log_probs,
        }
    }

    fn critic_pass(&self, state: &DecisionState) -> CriticPass {
        let hidden = nn::tanh_forward(&self.critic_hidden.forward(&state.global));
        let value = self.critic_out.forward(&hidden)[[0, 0]];
        CriticPass { hidden, value }
    }

    /// Per-agent `[p_keep, p_mask]` rows.
    pub fn action_probs(&self, state: &DecisionState) -> Array2<f64> {
        self.actor_pass(state).log_probs.mapv(f64::exp)
    }

    pub fn value(&self, state: &DecisionState) -> f64 {
        self.critic_pass(state).value
    }

    /// `log π(a | S) = Σ_i log π(a_i | S, O_i)`.
    pub fn joint_log_prob(&self, state: &DecisionState, decision: &MaskDecision) -> f64 {
        let lp = self.actor_pass(state).log_probs;
        decision
            .0
            .iter()
            .enumerate()
            .map(|(i, &m)| lp[[i, usize::from(m)]])
            .sum()
    }

    pub fn critic_loss(&self, buffer: &[Transition]) -> f64 {
        let m = buffer.len() as f64;
        buffer
            .iter()
            .map(|t| {
                let a = t.ret - self.value(&t.state);
                a * a
            })
            .sum::<f64>()
            / m
    }

    /// Mean `A²`; gradients flow into the critic only.
    pub fn accumulate_critic_grad(&mut self, buffer: &[Transition]) -> f64 {
        let m = buffer.len() as f64;
        let mut loss = 0.0;
        for t in buffer {
            let pass = self.critic_pass(&t.state);
            let a = t.ret - pass.value;
            loss += a * a / m;
            let dv = Array2::from_elem((1, 1), -2.0 * a / m);
            let dh = self.critic_out.backward(&pass.hidden, &dv);
            let du = nn::tanh_backward(&pass.hidden, &dh);
            self.critic_hidden.accumulate(&t.state.global, &du);
        }
        loss
    }

    /// Mean `−log π(a|S)·A − c·H(π)` with the advantages held constant.
    pub fn actor_loss(&self, buffer: &[Transition], advantages: &[f64], entropy_coef: f64) -> f64 {
        let m = buffer.len() as f64;
        buffer
            .iter()
            .zip(advantages)
            .map(|(t, &a)| {
                let lp = self.actor_pass(&t.state).log_probs;
                let joint: f64 = t
                    .decision
                    .0
                    .iter()
                    .enumerate()
                    .map(|(i, &k)| lp[[i, usize::from(k)]])
                    .sum();
                let entropy: f64 = -lp.iter().map(|&l| l.exp() * l).sum::<f64>();
                (-joint * a - entropy_coef * entropy) / m
            })
            .sum()
    }

    pub fn accumulate_actor_grad(&mut self, buffer: &[Transition], advantages: &[f64], entropy_coef: f64) -> f64 {
        let m = buffer.len() as f64;
        let mut loss = 0.0;
        for (t, &a) in buffer.iter().zip(advantages) {
            let pass = self.actor_pass(&t.state);
            let probs = pass.log_probs.mapv(f64::exp);
            let mut dz = Array2::zeros(probs.dim());
            let mut joint = 0.0;
            let mut entropy = 0.0;
            for i in 0..probs.nrows() {
                let chosen = usize::from(t.decision.0[i]);
                joint += pass.log_probs[[i, chosen]];
                let h_i: f64 = -(0..2).map(|k| probs[[i, k]] * pass.log_probs[[i, k]]).sum::<f64>();
                entropy += h_i;
                for k in 0..2 {
                    let onehot = if k == chosen { 1.0 } else { 0.0 };
                    // d(−A·log p_a)/dz_k = −A(1[k=a] − p_k); d(−cH)/dz_k = c·p_k(log p_k + H_i)
                    dz[[i, k]] = (-a * (onehot - probs[[i, k]])
                        + entropy_coef * probs[[i, k]] * (pass.log_probs[[i, k]] + h_i))
                        / m;
                }
            }
            loss += (-joint * a - entropy_coef * entropy) / m;
            let dh = self.actor_out.backward(&pass.hidden, &dz);
            let du = nn::tanh_backward(&pass.hidden, &dh);
            self.actor_hidden.accumulate(&pass.input, &du);
        }
        loss
    }
}

impl Parameterized for PolicyParams {
    fn params(&self) -> Vec<&Param> {
        let mut v = self.actor_hidden.params();
        v.extend(self.actor_out.params());
        v.extend(self.critic_hidden.params());
        v.extend(self.critic_out.params());
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.actor_hidden.params_mut();
        v.extend(self.actor_out.params_mut());
        v.extend(self.critic_hidden.params_mut());
        v.extend(self.critic_out.params_mut());
        v
    }
}

/// A sampled or greedy joint action.
#[derive(Clone, Debug, PartialEq)]
pub struct Action {
    pub decision: MaskDecision,
    /// `log π(a_i | S, O_i)` of the chosen action per agent.
    pub log_probs: Vec<f64>,
    /// Per-agent `[p_keep, p_mask]`.
    pub probs: Array2<f64>,
}

impl Action {
    pub fn joint_log_prob(&self) -> f64 {
        self.log_probs.iter().sum()
    }
}

/// Each agent independently samples keep/mask from the shared actor.
///
/// All-keep and all-mask joint actions are redrawn up to 16 times; after
/// that one uniformly chosen agent is flipped. With a single agent the
/// degenerate action is returned as drawn.
pub fn act<R: Rng>(policy: &PolicyParams, state: &DecisionState, rng: &mut R) -> Action {
    let probs = policy.action_probs(state);
    let n = probs.nrows();
    let draw = |rng: &mut R| {
        (0..n)
            .map(|i| rng.random::<f64>() < probs[[i, MASK]])
            .collect::<Vec<bool>>()
    };
    let mut d = MaskDecision(draw(rng));
    let mut tries = 1;
    while !d.is_trainable() && n > 1 && tries < MAX_RESAMPLES {
        d = MaskDecision(draw(rng));
        tries += 1;
    }
    if !d.is_trainable() && n > 1 {
        let i = rng.random_range(0..n);
        d.0[i] = !d.0[i];
    }
    finish(d, probs)
}

/// Argmax per agent (ties keep). A degenerate result flips the agent whose
/// mask probability is closest to the other side, lowest index on ties.
pub fn act_greedy(policy: &PolicyParams, state: &DecisionState) -> Action {
    let probs = policy.action_probs(state);
    let n = probs.nrows();
    let mut d = MaskDecision((0..n).map(|i| probs[[i, MASK]] > probs[[i, KEEP]]).collect());
    if n > 1 && d.num_masked() == 0 {
        let i = argmax((0..n).map(|i| probs[[i, MASK]]));
        d.0[i] = true;
    } else if n > 1 && d.num_masked() == n {
        let i = argmax((0..n).map(|i| probs[[i, KEEP]]));
        d.0[i] = false;
    }
    finish(d, probs)
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

fn finish(decision: MaskDecision, probs: Array2<f64>) -> Action {
    let log_probs = decision
        .0
        .iter()
        .enumerate()
        .map(|(i, &m)| probs[[i, usize::from(m)]].ln())
        .collect();
    Action {
        decision,
        log_probs,
        probs,
    }
}

/// `r = L(φ(x·a_cur)) − L(φ(x·a_prev))` against one frozen snapshot.
pub fn reward(
    snapshot: &TargetModel,
    sample: &Sample,
    prev: &MaskDecision,
    cur: &MaskDecision,
    loss_cfg: &LossConfig,
) -> Result<f64> {
    let now = snapshot.loss(sample, cur, loss_cfg)?.total;
    let before = snapshot.loss(sample, prev, loss_cfg)?.total;
    Ok(now - before)
}

/// Per-step batch rewards, indexed from step 1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardTrace {
    pub gamma: f64,
    pub horizon: usize,
    pub relative_discount: bool,
    steps: Vec<Vec<f64>>,
}

impl RewardTrace {
    pub fn new(gamma: f64, horizon: usize, relative_discount: bool) -> Self {
        Self {
            gamma,
            horizon,
            relative_discount,
            steps: Vec::new(),
        }
    }

    /// Appends the rewards of every volume at the next step.
    pub fn push(&mut self, rewards: Vec<f64>) {
        self.steps.push(rewards);
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn rewards(&self, t: usize) -> &[f64] {
        &self.steps[t - 1]
    }

    /// `r̄^t`, the batch mean at step `t ≥ 1`.
    pub fn mean(&self, t: usize) -> f64 {
        let r = self.rewards(t);
        r.iter().sum::<f64>() / r.len() as f64
    }

    /// `R^t = Σ_{i=t−T+1}^{t} γ^{i−1} r̄^i`; with `relative_discount` the
    /// exponent is `i − (t − T + 1)`.
    pub fn discounted_return(&self, t: usize) -> Result<f64> {
        let first = (t + 1).checked_sub(self.horizon).filter(|&f| f >= 1);
        let Some(first) = first.filter(|_| t <= self.steps.len()) else {
            return Err(Error::InsufficientHistory {
                first: (t + 1).saturating_sub(self.horizon),
                last: t,
                held: self.steps.len(),
            });
        };
        Ok((first..=t)
            .map(|i| {
                let exp = if self.relative_discount { i - first } else { i - 1 };
                self.gamma.powi(exp as i32) * self.mean(i)
            })
            .sum())
    }
}

/// `(S^t, O^t, a^t, R^t)` for one volume.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: DecisionState,
    pub decision: MaskDecision,
    pub ret: f64,
}

/// `A = Q − V`, with `Q` estimated by the realized return.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageEstimate {
    pub q: f64,
    pub v: f64,
    pub a: f64,
}

impl AdvantageEstimate {
    pub fn new(q: f64, v: f64) -> Self {
        Self { q, v, a: q - v }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct A2cReport {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub mean_advantage: f64,
}

/// One joint Adam step on the critic (`A²`) and actor (`−log π·A`) losses.
pub fn a2c_update(
    policy: &mut PolicyParams,
    buffer: &[Transition],
    entropy_coef: f64,
    adam: &AdamConfig,
) -> Result<A2cReport> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    let estimates: Vec<AdvantageEstimate> = buffer
        .iter()
        .map(|t| AdvantageEstimate::new(t.ret, policy.value(&t.state)))
        .collect();
    let advantages: Vec<f64> = estimates.iter().map(|e| e.a).collect();
    policy.zero_grad();
    let critic_loss = policy.accumulate_critic_grad(buffer);
    let actor_loss = policy.accumulate_actor_grad(buffer, &advantages, entropy_coef);
    adam_step(policy, adam)?;
    Ok(A2cReport {
        critic_loss,
        actor_loss,
        mean_advantage: advantages.iter().sum::<f64>() / advantages.len() as f64,
    })
}

/// Outcome of one policy episode over a batch of volumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    pub trace: RewardTrace,
    /// Mean `R^t` over the steps that produced transitions.
    pub mean_return: f64,
    /// Mean `r̄^t` over all steps.
    pub mean_reward: f64,
    /// Mean masking ratio of the sampled joint actions `a^1..a^T`.
    pub masking_ratio: f64,
    /// Per volume: `(L(a^0), L(a^T))`.
    pub endpoint_losses: Vec<(f64, f64)>,
}

/// Rolls `cfg.episode_steps` decisions on each sample against a frozen
/// snapshot. Step `t` rewards `L(a^t) − L(a^{t−1})`; steps with a full
/// return window yield one transition per volume.
pub fn run_episode<R: Rng>(
    policy: &PolicyParams,
    snapshot: &TargetModel,
    samples: &[&Sample],
    cfg: &PolicyConfig,
    loss_cfg: &LossConfig,
    rng: &mut R,
) -> Result<Episode> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument("episode needs at least one volume".into()));
    }
    let states = samples
        .iter()
        .map(|s| observe(snapshot, s))
        .collect::<Result<Vec<_>>>()?;
    let mut prev: Vec<MaskDecision> = states.iter().map(|s| act(policy, s, rng).decision).collect();
    let mut prev_loss = samples
        .iter()
        .zip(&prev)
        .map(|(s, d)| Ok(snapshot.loss(s, d, loss_cfg)?.total))
        .collect::<Result<Vec<f64>>>()?;
    let start_loss = prev_loss.clone();
    let mut trace = RewardTrace::new(cfg.gamma, cfg.horizon, cfg.relative_discount);
    let mut transitions = Vec::new();
    let mut returns = Vec::new();
    let mut ratio_sum = 0.0;
    for t in 1..=cfg.episode_steps {
        let mut rewards = Vec::with_capacity(samples.len());
        let mut current = Vec::with_capacity(samples.len());
        for (b, sample) in samples.iter().enumerate() {
            let d = act(policy, &states[b], rng).decision;
            let loss = snapshot.loss(sample, &d, loss_cfg)?.total;
            rewards.push(loss - prev_loss[b]);
            prev_loss[b] = loss;
            ratio_sum += d.masking_ratio();
            current.push(d);
        }
        trace.push(rewards);
        prev = current;
        if t >= cfg.horizon {
            let ret = trace.discounted_return(t)?;
            returns.push(ret);
            for (state, decision) in states.iter().zip(&prev) {
                transitions.push(Transition {
                    state: state.clone(),
                    decision: decision.clone(),
                    ret,
                });
            }
        }
    }
    let steps = cfg.episode_steps as f64;
    Ok(Episode {
        transitions,
        mean_return: returns.iter().sum::<f64>() / returns.len() as f64,
        mean_reward: (1..=trace.len()).map(|t| trace.mean(t)).sum::<f64>() / steps,
        trace,
        masking_ratio: ratio_sum / (steps * samples.len() as f64),
        endpoint_losses: start_loss.into_iter().zip(prev_loss).collect(),
    })
}

/// A four-agent contextual bandit whose only rewarded joint action masks
/// agents 1 and 2; used to check that the A2C machinery learns.
pub mod bandit {
    use super::*;

    pub const AGENTS: usize = 4;
    pub const TARGET: [bool; AGENTS] = [false, true, true, false];

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct BanditConfig {
        pub feature_dim: usize,
        pub hidden: usize,
        pub lr: f64,
        pub max_updates: usize,
        /// Joint actions sampled per update.
        pub batch: usize,
    }

    impl Default for BanditConfig {
        fn default() -> Self {
            Self {
                feature_dim: 8,
                hidden: 16,
                lr: 1e-2,
                max_updates: 2000,
                batch: 1,
            }
        }
    }

    #[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
    pub struct BanditOutcome {
        pub seed: u64,
        /// First update after which the greedy joint action was optimal and
        /// held at least half of the joint probability mass.
        pub solved_at: Option<usize>,
        pub final_target_prob: f64,
        pub final_greedy_optimal: bool,
    }

    pub fn reward_of(decision: &MaskDecision) -> f64 {
        if decision.0 == TARGET {
            1.0
        } else {
            0.0
        }
    }

    pub fn target_prob(policy: &PolicyParams, state: &DecisionState) -> f64 {
        policy.joint_log_prob(state, &MaskDecision(TARGET.to_vec())).exp()
    }

    fn solved(policy: &PolicyParams, state: &DecisionState) -> bool {
        act_greedy(policy, state).decision.0 == TARGET && target_prob(policy, state) >= 0.5
    }

    pub fn run(seed: u64, cfg: &BanditConfig) -> Result<BanditOutcome> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obs = Array2::from_shape_fn((AGENTS, cfg.feature_dim), |_| rng.random_range(-1.0..1.0));
        let state = DecisionState::from_observations(obs);
        let mut policy = PolicyParams::new(cfg.feature_dim, cfg.hidden, seed.wrapping_add(1));
        let adam = AdamConfig::with_lr(cfg.lr);
        let mut solved_at = None;
        for update in 1..=cfg.max_updates {
            let buffer: Vec<Transition> = (0..cfg.batch)
                .map(|_| {
                    let decision = act(&policy, &state, &mut rng).decision;
                    Transition {
                        state: state.clone(),
                        ret: reward_of(&decision),
                        decision,
                    }
                })
                .collect();
            a2c_update(&mut policy, &buffer, 0.0, &adam)?;
            if solved_at.is_none() && solved(&policy, &state) {
                solved_at = Some(update);
            }
        }
        Ok(BanditOutcome {
            seed,
            solved_at,
            final_target_prob: target_prob(&policy, &state),
            final_greedy_optimal: act_greedy(&policy, &state).decision.0 == TARGET,
        })
    }
}
