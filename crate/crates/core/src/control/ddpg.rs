//! Deterministic-policy actor-critic with target networks, FIFO replay and
//! Ornstein-Uhlenbeck exploration.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::neural::layers::{sigmoid, sigmoid_backward, tanh, tanh_backward};
use crate::neural::{Adam, Mlp, ParamStore, Tensor};

/// Mean-reverting noise `x += theta (0 - x) dt + sigma sqrt(dt) n`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    pub x: Vec<f64>,
}

impl OuNoise {
    pub fn new(dim: usize, theta: f64, sigma: f64) -> Result<Self> {
        if !(theta >= 0.0 && sigma >= 0.0) {
            return Err(invalid(format!("OU parameters must be nonnegative, got theta={theta} sigma={sigma}")));
        }
        Ok(Self { theta, sigma, x: vec![0.0; dim] })
    }

    pub fn reset(&mut self) {
        self.x.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn sample<R: Rng>(&mut self, dt: f64, rng: &mut R) -> Vec<f64> {
        let s = self.sigma * dt.sqrt();
        for v in self.x.iter_mut() {
            let n: f64 = rng.sample(StandardNormal);
            *v += -self.theta * *v * dt + s * n;
        }
        self.x.clone()
    }

    /// Stationary variance `sigma^2 / (2 theta)` of the continuous process.
    pub fn stationary_variance(&self) -> f64 {
        self.sigma * self.sigma / (2.0 * self.theta)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Meta,
    Sub,
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub level: Level,
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    /// No bootstrap from `next_state`.
    pub done: bool,
}

/// Fixed-capacity ring; the oldest transition is evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(invalid("replay capacity must be at least 1"));
        }
        Ok(Self { capacity, items: Vec::new(), head: 0 })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `t`, returning the evicted transition once full.
    pub fn push(&mut self, t: Transition) -> Result<Option<Transition>> {
        if !t.reward.is_finite() {
            return Err(Error::NumericDomain(format!("non-finite reward {}", t.reward)));
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
            return Ok(None);
        }
        let old = std::mem::replace(&mut self.items[self.head], t);
        self.head = (self.head + 1) % self.capacity;
        Ok(Some(old))
    }

    /// Oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `batch` distinct transitions drawn uniformly.
    pub fn sample<R: Rng>(&self, batch: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if batch > self.items.len() {
            return Err(invalid(format!("batch {batch} exceeds buffer size {}", self.items.len())));
        }
        Ok(rand::seq::index::sample(rng, self.items.len(), batch).into_iter().map(|i| &self.items[i]).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Sigmoid,
    Tanh,
}

impl OutputActivation {
    fn apply(self, x: &Tensor) -> Tensor {
        match self {
            Self::Sigmoid => sigmoid(x),
            Self::Tanh => tanh(x),
        }
    }

    fn backward(self, y: &Tensor, dy: &Tensor) -> Tensor {
        match self {
            Self::Sigmoid => sigmoid_backward(y, dy),
            Self::Tanh => tanh_backward(y, dy),
        }
    }

    pub fn range(self) -> (f64, f64) {
        match self {
            Self::Sigmoid => (0.0, 1.0),
            Self::Tanh => (-1.0, 1.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub performed: bool,
    pub critic_loss: f64,
    pub mean_q: f64,
}

/// Actor `mu(s)` and critic `Q(s, a)` MLPs with soft-updated targets. Target
/// stores are clones of the live stores, so the layer handles apply to both.
#[derive(Debug, Clone)]
pub struct ActorCritic {
    pub actor: Mlp,
    pub critic: Mlp,
    pub actor_ps: ParamStore,
    pub critic_ps: ParamStore,
    pub actor_target: ParamStore,
    pub critic_target: ParamStore,
    actor_opt: Adam,
    critic_opt: Adam,
    pub output: OutputActivation,
    pub state_dim: usize,
    pub action_dim: usize,
    pub gamma: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AcHyper {
    pub gamma: f64,
    pub tau: f64,
    pub actor_lr: f64,
    pub critic_lr: f64,
}

impl ActorCritic {
    pub fn new<R: Rng>(
        state_dim: usize,
        action_dim: usize,
        hidden: &[usize],
        output: OutputActivation,
        hp: AcHyper,
        rng: &mut R,
    ) -> Result<Self> {
        if state_dim == 0 || action_dim == 0 {
            return Err(invalid("state and action dimensions must be at least 1"));
        }
        if !(0.0..=1.0).contains(&hp.tau) || !(0.0..=1.0).contains(&hp.gamma) {
            return Err(invalid("gamma and tau must lie in [0, 1]"));
        }
        let mut sizes = vec![state_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(action_dim);
        let mut actor_ps = ParamStore::new();
        let actor = Mlp::new(&mut actor_ps, "actor", &sizes, rng);
        let mut sizes = vec![state_dim + action_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        let mut critic_ps = ParamStore::new();
        let critic = Mlp::new(&mut critic_ps, "critic", &sizes, rng);
        Ok(Self {
            actor_opt: Adam::new(&actor_ps, hp.actor_lr),
            critic_opt: Adam::new(&critic_ps, hp.critic_lr),
            actor_target: actor_ps.clone(),
            critic_target: critic_ps.clone(),
            actor,
            critic,
            actor_ps,
            critic_ps,
            output,
            state_dim,
            action_dim,
            gamma: hp.gamma,
            tau: hp.tau,
        })
    }

    fn policy(&self, ps: &ParamStore, states: &Tensor) -> (Tensor, crate::neural::layers::MlpCache) {
        let (z, cache) = self.actor.forward(ps, states);
        (self.output.apply(&z), cache)
    }

    fn joint(&self, states: &Tensor, actions: &Tensor) -> Tensor {
        let mut x = Tensor::zeros(&[states.rows(), self.state_dim + self.action_dim]);
        x.add_col_slice(0, states);
        x.add_col_slice(self.state_dim, actions);
        x
    }

    /// Deterministic action of the live actor.
    pub fn act(&self, state: &[f64]) -> Result<Vec<f64>> {
        let s = self.row(state, self.state_dim)?;
        let a = self.policy(&self.actor_ps, &s).0.into_data();
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged("actor produced a non-finite action".into()));
        }
        Ok(a)
    }

    pub fn q_value(&self, state: &[f64], action: &[f64]) -> Result<f64> {
        let x = self.joint(&self.row(state, self.state_dim)?, &self.row(action, self.action_dim)?);
        Ok(self.critic.forward(&self.critic_ps, &x).0.data()[0])
    }

    fn row(&self, v: &[f64], expect: usize) -> Result<Tensor> {
        if v.len() != expect {
            return Err(crate::error::dim(format!("vector of length {} where {expect} expected", v.len())));
        }
        Tensor::from_vec(&[1, expect], v.to_vec())
    }

    /// One critic TD step, one actor ascent step, then soft target updates.
    pub fn update(&mut self, batch: &[&Transition]) -> Result<UpdateStats> {
        let b = batch.len();
        if b == 0 {
            return Ok(UpdateStats::default());
        }
        let rows = |f: &dyn Fn(&Transition) -> &Vec<f64>| Tensor::from_rows(&batch.iter().map(|t| f(t).clone()).collect::<Vec<_>>());
        let s = rows(&|t| &t.state)?;
        let a = rows(&|t| &t.action)?;
        let s2 = rows(&|t| &t.next_state)?;
        if s.cols() != self.state_dim || a.cols() != self.action_dim || s2.cols() != self.state_dim {
            return Err(crate::error::dim("transition dimensions do not match the networks"));
        }

        let (a2, _) = self.policy(&self.actor_target, &s2);
        let (q2, _) = self.critic.forward(&self.critic_target, &self.joint(&s2, &a2));
        let y: Vec<f64> = batch
            .iter()
            .zip(q2.data())
            .map(|(t, q)| t.reward + if t.done { 0.0 } else { self.gamma * q })
            .collect();

        self.critic_ps.zero_grads();
        let (q, cache) = self.critic.forward(&self.critic_ps, &self.joint(&s, &a));
        let err: Vec<f64> = q.data().iter().zip(&y).map(|(q, y)| q - y).collect();
        let critic_loss = err.iter().map(|e| e * e).sum::<f64>() / b as f64;
        let dq = Tensor::from_vec(&[b, 1], err.iter().map(|e| 2.0 * e / b as f64).collect())?;
        self.critic.backward(&mut self.critic_ps, &cache, &dq);
        if !critic_loss.is_finite() || !self.critic_ps.grads_finite() {
            return Err(Error::Diverged(format!("critic loss {critic_loss}")));
        }
        self.critic_opt.step(&mut self.critic_ps);

        self.actor_ps.zero_grads();
        let (mu, acache) = self.policy(&self.actor_ps, &s);
        let (qa, ccache) = self.critic.forward(&self.critic_ps, &self.joint(&s, &mu));
        let dx = self.critic.backward(&mut self.critic_ps, &ccache, &Tensor::full(&[b, 1], -1.0 / b as f64));
        self.critic_ps.zero_grads();
        let dz = self.output.backward(&mu, &dx.col_slice(self.state_dim, self.action_dim));
        self.actor.backward(&mut self.actor_ps, &acache, &dz);
        if !self.actor_ps.grads_finite() {
            return Err(Error::Diverged("non-finite actor gradient".into()));
        }
        self.actor_opt.step(&mut self.actor_ps);

        self.actor_target.soft_update_from(&self.actor_ps, self.tau);
        self.critic_target.soft_update_from(&self.critic_ps, self.tau);
        if !self.actor_ps.values_finite() || !self.critic_ps.values_finite() {
            return Err(Error::Diverged("non-finite network parameters".into()));
        }
        Ok(UpdateStats { performed: true, critic_loss, mean_q: qa.sum() / b as f64 })
    }

    /// Writes the four parameter stores as `<prefix>.{actor,critic,actor_target,critic_target}.nfps`.
    pub fn write_checkpoints(&self, dir: &Path, prefix: &str) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, ps) in [
            ("actor", &self.actor_ps),
            ("critic", &self.critic_ps),
            ("actor_target", &self.actor_target),
            ("critic_target", &self.critic_target),
        ] {
            let path = dir.join(format!("{prefix}.{name}.nfps"));
            ps.write_checkpoint(std::io::BufWriter::new(std::fs::File::create(&path)?))?;
            out.push(path);
        }
        Ok(out)
    }
}

/// Samples `batch` transitions and updates `ac`; a no-op with
/// `performed == false` while the buffer holds fewer than `batch`.
pub fn ddpg_update<R: Rng>(buffer: &ReplayBuffer, ac: &mut ActorCritic, batch: usize, rng: &mut R) -> Result<UpdateStats> {
    if batch == 0 || buffer.len() < batch {
        return Ok(UpdateStats::default());
    }
    let sample = buffer.sample(batch, rng)?;
    ac.update(&sample)
}
