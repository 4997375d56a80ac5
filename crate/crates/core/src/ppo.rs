//! Per-agent actor-critic trained with the clipped surrogate objective.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{adam_update, AdamConfig, AdamState, Graph, Mlp, NumericsError, ParamStore, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PpoError {
    #[error("policy input has length {got}, expected {expected}")]
    InputLength { expected: usize, got: usize },
    #[error("non-finite logits")]
    NanLogits,
    #[error("non-finite loss, update aborted")]
    NanLoss,
    #[error("empty rollout")]
    EmptyRollout,
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpoConfig {
    pub hidden: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub clip: f64,
    pub entropy_coef: f64,
    pub value_coef: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub buffer: usize,
    pub lr: f64,
    /// Critic regresses onto running-standardized returns.
    pub value_norm: bool,
}

impl Default for PpoConfig {
    fn default() -> Self {
        Self {
            hidden: 64,
            gamma: 0.99,
            lambda: 0.95,
            clip: 0.2,
            entropy_coef: 0.01,
            value_coef: 0.5,
            epochs: 4,
            minibatch: 64,
            buffer: 256,
            lr: 5e-4,
            value_norm: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionMode {
    Sample,
    Greedy,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ActionChoice {
    pub action: usize,
    pub log_prob: f64,
    pub value: f64,
    pub probs: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub input: Vec<f64>,
    pub action: usize,
    pub log_prob: f64,
    pub reward: f64,
    pub value: f64,
    pub done: bool,
}

/// On-policy transitions of one agent, in collection order. Episode
/// boundaries are marked by `done`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub transitions: Vec<Transition>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.transitions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.transitions.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        self.transitions.push(t);
    }

    pub fn clear(&mut self) {
        self.transitions.clear();
    }

    /// Whether the last transition ended an episode.
    pub fn ends_episode(&self) -> bool {
        self.transitions.last().is_none_or(|t| t.done)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PpoStats {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub minibatches: usize,
}

/// GAE over a rollout. `bootstrap` is the value estimate of the state after
/// the last transition, used only when that transition is not terminal.
/// Returns raw (unnormalized) advantages and the value targets.
pub fn compute_gae(
    rewards: &[f64],
    values: &[f64],
    dones: &[bool],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_adv = 0.0;
    let mut next_value = bootstrap;
    for t in (0..n).rev() {
        let live = if dones[t] { 0.0 } else { 1.0 };
        let delta = rewards[t] + gamma * next_value * live - values[t];
        next_adv = delta + gamma * lambda * live * next_adv;
        adv[t] = next_adv;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (adv, returns)
}

/// Shifts and scales to zero mean and unit variance; a constant input maps to zeros.
pub fn normalize(xs: &[f64]) -> Vec<f64> {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    xs.iter().map(|x| (x - mean) / (std + 1e-8)).collect()
}

/// Running mean and variance of every value target seen so far.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValueNorm {
    pub count: f64,
    pub mean: f64,
    /// Sum of squared deviations from `mean`.
    pub m2: f64,
}

impl Default for ValueNorm {
    fn default() -> Self {
        Self {
            count: 0.0,
            mean: 0.0,
            m2: 0.0,
        }
    }
}

impl ValueNorm {
    /// Merges a batch (parallel-variance update).
    pub fn observe(&mut self, xs: &[f64]) {
        if xs.is_empty() {
            return;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let m2 = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>();
        let total = self.count + n;
        let delta = mean - self.mean;
        self.m2 += m2 + delta * delta * self.count * n / total;
        self.mean += delta * n / total;
        self.count = total;
    }

    pub fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / self.count).sqrt().max(1e-4)
        }
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std()
    }

    pub fn denormalize(&self, y: f64) -> f64 {
        y * self.std() + self.mean
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row(vec![self.count, self.mean, self.m2])
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, NumericsError> {
        match t.data() {
            [count, mean, m2] => Ok(Self {
                count: *count,
                mean: *mean,
                m2: *m2,
            }),
            _ => Err(NumericsError::Checkpoint("value normalizer needs 3 entries".into())),
        }
    }
}

/// Minibatch tensors for [`PpoController::loss`].
#[derive(Clone, Debug, PartialEq)]
pub struct PpoBatch {
    pub inputs: Tensor,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

pub struct PpoLoss {
    pub total: Var,
    pub policy: Var,
    pub value: Var,
    pub entropy: Var,
    pub ratio: Var,
}

#[derive(Clone, Debug)]
pub struct PpoController {
    pub config: PpoConfig,
    pub actor_store: ParamStore,
    pub critic_store: ParamStore,
    input_dim: usize,
    num_actions: usize,
    actor: Mlp,
    critic: Mlp,
    actor_opt: AdamState,
    critic_opt: AdamState,
    pub value_norm: ValueNorm,
}

impl PpoController {
    pub fn new<R: Rng + ?Sized>(config: PpoConfig, input_dim: usize, num_actions: usize, rng: &mut R) -> Self {
        let h = config.hidden;
        let mut actor_store = ParamStore::new();
        let actor = Mlp::new(&mut actor_store, "actor", &[input_dim, h, h, num_actions], rng);
        let mut critic_store = ParamStore::new();
        let critic = Mlp::new(&mut critic_store, "critic", &[input_dim, h, h, 1], rng);
        let actor_opt = AdamState::new(AdamConfig::with_lr(config.lr), &actor_store);
        let critic_opt = AdamState::new(AdamConfig::with_lr(config.lr), &critic_store);
        Self {
            config,
            actor_store,
            critic_store,
            input_dim,
            num_actions,
            actor,
            critic,
            actor_opt,
            critic_opt,
            value_norm: ValueNorm::default(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.actor_opt.step_count()
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.config.lr = lr;
        self.actor_opt.config.lr = lr;
        self.critic_opt.config.lr = lr;
    }

    fn unnormalized(&self, v: f64) -> f64 {
        if self.config.value_norm {
            self.value_norm.denormalize(v)
        } else {
            v
        }
    }

    /// Action log-probabilities (`rows x actions`) and raw critic outputs
    /// (`rows x 1`, standardized when `value_norm` is on).
    pub fn forward(&self, g: &mut Graph, inputs: Var) -> Result<(Var, Var), NumericsError> {
        let logits = self.actor.forward(g, &self.actor_store, inputs)?;
        let logp = g.log_softmax_rows(logits);
        let value = self.critic.forward(g, &self.critic_store, inputs)?;
        Ok((logp, value))
    }

    pub fn select_action<R: Rng + ?Sized>(
        &self,
        input: &[f64],
        rng: &mut R,
        mode: ActionMode,
    ) -> Result<ActionChoice, PpoError> {
        if input.len() != self.input_dim {
            return Err(PpoError::InputLength {
                expected: self.input_dim,
                got: input.len(),
            });
        }
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(input.to_vec()));
        let (logp, value) = self.forward(&mut g, x)?;
        let logp = g.value(logp).data().to_vec();
        if logp.iter().any(|l| !l.is_finite()) {
            return Err(PpoError::NanLogits);
        }
        let probs: Vec<f64> = logp.iter().map(|l| l.exp()).collect();
        let action = match mode {
            ActionMode::Greedy => argmax(&probs),
            ActionMode::Sample => sample_categorical(&probs, rng),
        };
        Ok(ActionChoice {
            action,
            log_prob: logp[action],
            value: self.unnormalized(g.value(value).item()),
            probs,
        })
    }

    pub fn value(&self, input: &[f64]) -> Result<f64, PpoError> {
        let mut g = Graph::no_grad();
        let x = g.constant(Tensor::row(input.to_vec()));
        let v = self.critic.forward(&mut g, &self.critic_store, x)?;
        Ok(self.unnormalized(g.value(v).item()))
    }

    /// Clipped surrogate + value + entropy loss over one minibatch.
    pub fn loss(&self, g: &mut Graph, batch: &PpoBatch) -> Result<PpoLoss, NumericsError> {
        let n = batch.actions.len();
        let x = g.constant(batch.inputs.clone());
        let (logp, value) = self.forward(g, x)?;
        let taken = g.gather_cols(logp, batch.actions.clone())?;
        let old = g.constant(Tensor::column(batch.old_log_probs.clone()));
        let diff = g.sub(taken, old)?;
        let ratio = g.exp(diff);
        let adv = Tensor::column(batch.advantages.clone());
        let surr = g.mul_const(ratio, adv.clone())?;
        let clipped = g.clamp(ratio, 1.0 - self.config.clip, 1.0 + self.config.clip);
        let clipped = g.mul_const(clipped, adv)?;
        let pess = g.minimum(surr, clipped)?;
        let policy = g.mean(pess);
        let policy = g.neg(policy);
        let ret = g.constant(Tensor::column(batch.returns.clone()));
        let err = g.sub(value, ret)?;
        let sq = g.square(err);
        let value_loss = g.mean(sq);
        let p = g.exp(logp);
        let plogp = g.mul(p, logp)?;
        let ent_rows = g.sum_cols(plogp);
        let ent_sum = g.sum(ent_rows);
        let entropy = g.scale(ent_sum, -1.0 / n as f64);
        let v_term = g.scale(value_loss, self.config.value_coef);
        let e_term = g.scale(entropy, -self.config.entropy_coef);
        let total = g.add(policy, v_term)?;
        let total = g.add(total, e_term)?;
        Ok(PpoLoss {
            total,
            policy,
            value: value_loss,
            entropy,
            ratio,
        })
    }

    /// `epochs` passes of shuffled minibatches over the rollout. Actor and
    /// critic each take their own (separately clipped) Adam step on the
    /// joint loss. A non-finite loss aborts before any parameter of that
    /// minibatch is written.
    pub fn update<R: Rng + ?Sized>(
        &mut self,
        rollout: &Rollout,
        bootstrap: f64,
        rng: &mut R,
    ) -> Result<PpoStats, PpoError> {
        if rollout.is_empty() {
            return Err(PpoError::EmptyRollout);
        }
        let tr = &rollout.transitions;
        let rewards: Vec<f64> = tr.iter().map(|t| t.reward).collect();
        let values: Vec<f64> = tr.iter().map(|t| t.value).collect();
        let dones: Vec<bool> = tr.iter().map(|t| t.done).collect();
        let (adv, returns) = compute_gae(&rewards, &values, &dones, bootstrap, self.config.gamma, self.config.lambda);
        let adv = normalize(&adv);
        let targets = if self.config.value_norm {
            self.value_norm.observe(&returns);
            returns.iter().map(|r| self.value_norm.normalize(*r)).collect()
        } else {
            returns
        };
        let mut order: Vec<usize> = (0..tr.len()).collect();
        let mut stats = PpoStats::default();
        let mut clipped = 0usize;
        let mut seen = 0usize;
        for _ in 0..self.config.epochs {
            order.shuffle(rng);
            for chunk in order.chunks(self.config.minibatch.max(1)) {
                let batch = PpoBatch {
                    inputs: Tensor::matrix(
                        chunk.len(),
                        self.input_dim,
                        chunk.iter().flat_map(|&i| tr[i].input.iter().copied()).collect(),
                    ),
                    actions: chunk.iter().map(|&i| tr[i].action).collect(),
                    old_log_probs: chunk.iter().map(|&i| tr[i].log_prob).collect(),
                    advantages: chunk.iter().map(|&i| adv[i]).collect(),
                    returns: chunk.iter().map(|&i| targets[i]).collect(),
                };
                let mut g = Graph::new();
                let loss = self.loss(&mut g, &batch)?;
                let total = g.value(loss.total).item();
                if !total.is_finite() {
                    return Err(PpoError::NanLoss);
                }
                stats.policy_loss += g.value(loss.policy).item();
                stats.value_loss += g.value(loss.value).item();
                stats.entropy += g.value(loss.entropy).item();
                clipped += g
                    .value(loss.ratio)
                    .data()
                    .iter()
                    .filter(|r| (*r - 1.0).abs() > self.config.clip)
                    .count();
                seen += chunk.len();
                stats.minibatches += 1;
                let mut grads = g.backward(loss.total)?;
                let mut critic_grads = grads.take_store(&self.critic_store);
                adam_update(&mut self.actor_store, &mut grads, &mut self.actor_opt)?;
                adam_update(&mut self.critic_store, &mut critic_grads, &mut self.critic_opt)?;
            }
        }
        let m = stats.minibatches as f64;
        stats.policy_loss /= m;
        stats.value_loss /= m;
        stats.entropy /= m;
        stats.clip_fraction = clipped as f64 / seen as f64;
        Ok(stats)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; the last category absorbs rounding.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}
