//! Q-network over all `2^K` joint slot actions, with an online and a
//! periodically synchronized target copy.

use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::dataset::Transition;
use crate::env::Action;
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, MlpGrad};
use crate::rng::{rng_from_seed, Rng};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub gamma: f64,
    pub sync_interval: u64,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self { hidden: vec![64, 64], activation: Activation::Tanh, gamma: 0.9, sync_interval: 100, lr: 1e-3, batch_size: 256 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Which {
    Online,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QAgent {
    pub version: u32,
    pub k: usize,
    pub gamma: f64,
    pub sync_interval: u64,
    pub online: Mlp,
    pub target: Mlp,
    pub updates: u64,
    optimizer: Adam,
}

/// Columnar view of a batch of transitions.
#[derive(Debug, Clone)]
pub struct Batch {
    pub states: DMatrix<f64>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
    /// Terminal columns are zero and must be ignored.
    pub next_states: DMatrix<f64>,
    pub terminal: Vec<bool>,
    pub weights: Vec<Option<f64>>,
}

impl Batch {
    pub fn from_transitions(ts: &[&Transition]) -> Self {
        let dim = ts.first().map_or(0, |t| t.state_feat.len());
        let b = ts.len();
        let mut states = DMatrix::zeros(dim, b);
        let mut next_states = DMatrix::zeros(dim, b);
        for (j, t) in ts.iter().enumerate() {
            states.column_mut(j).copy_from_slice(&t.state_feat);
            if let Some(n) = &t.next_state_feat {
                next_states.column_mut(j).copy_from_slice(n);
            }
        }
        Self {
            states,
            actions: ts.iter().map(|t| t.action_index).collect(),
            rewards: ts.iter().map(|t| t.r).collect(),
            next_states,
            terminal: ts.iter().map(|t| t.is_terminal()).collect(),
            weights: ts.iter().map(|t| t.w).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }
}

/// Mean losses of one update; `tl` is zero when no imitation term is used.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLoss {
    pub total: f64,
    pub rl: f64,
    pub tl: f64,
}

/// Teacher Q-values `Q_S(s, a)` and per-sample weights for the imitation term.
#[derive(Debug, Clone, Copy)]
pub struct Imitation<'a> {
    pub teacher_q: &'a [f64],
    pub weights: &'a [f64],
}

impl QAgent {
    pub fn new(feature_dim: usize, k: usize, cfg: &AgentConfig, seed: u64) -> Self {
        let mut rng = rng_from_seed(seed);
        let online = Mlp::new(feature_dim, &cfg.hidden, Some(1 << k), cfg.activation, &mut rng);
        Self {
            version: CHECKPOINT_VERSION,
            k,
            gamma: cfg.gamma,
            sync_interval: cfg.sync_interval.max(1),
            target: online.clone(),
            online,
            updates: 0,
            optimizer: Adam::default(),
        }
    }

    pub fn n_actions(&self) -> usize {
        1 << self.k
    }

    fn net(&self, which: Which) -> &Mlp {
        match which {
            Which::Online => &self.online,
            Which::Target => &self.target,
        }
    }

    pub fn q_values(&self, state_feat: &[f64], which: Which) -> Vec<f64> {
        let x = DMatrix::from_column_slice(state_feat.len(), 1, state_feat);
        self.net(which).forward(&x).as_slice().to_vec()
    }

    /// `n_actions x b` Q-values for a batch of states.
    pub fn q_batch(&self, states: &DMatrix<f64>, which: Which) -> DMatrix<f64> {
        self.net(which).forward(states)
    }

    /// Epsilon-greedy action; ties in the greedy branch go to the lowest index.
    pub fn act(&self, state_feat: &[f64], epsilon: f64, rng: &mut Rng) -> Action {
        let explore = rng.gen::<f64>() < epsilon;
        let index = if explore { rng.gen_range(0..self.n_actions()) } else { argmax(&self.q_values(state_feat, Which::Online)) };
        Action::from_index(index, self.k).expect("index below n_actions")
    }

    /// `r` if terminal, else `r + γ max_{a' ∈ restrict} Q_target(s', a')`.
    pub fn td_target(&self, r: f64, next_state: Option<&[f64]>, restrict: Option<&[usize]>) -> Result<f64> {
        if restrict.is_some_and(|set| set.is_empty()) {
            return Err(Error::Usage("restricted action set is empty".into()));
        }
        let Some(next) = next_state else {
            return Ok(r);
        };
        let q = self.q_values(next, Which::Target);
        Ok(r + self.gamma * restricted_max(&q, restrict))
    }

    /// Batched [`Self::td_target`]; `restrict[i]` applies to sample `i`.
    pub fn td_targets(&self, batch: &Batch, restrict: Option<&[Vec<usize>]>) -> Result<Vec<f64>> {
        if let Some(sets) = restrict {
            if sets.len() != batch.len() {
                return Err(Error::Usage("one restricted action set per sample required".into()));
            }
            if sets.iter().any(Vec::is_empty) {
                return Err(Error::Usage("restricted action set is empty".into()));
            }
        }
        let q_next = self.q_batch(&batch.next_states, Which::Target);
        Ok((0..batch.len())
            .map(|i| {
                if batch.terminal[i] {
                    batch.rewards[i]
                } else {
                    let col = q_next.column(i);
                    let set = restrict.map(|s| s[i].as_slice());
                    batch.rewards[i] + self.gamma * restricted_max(col.as_slice(), set)
                }
            })
            .collect())
    }

    /// Loss `mean_i scale_i·(w_i (Q_S - Q)² + (y_i - Q)²)` over the taken
    /// actions and its gradient w.r.t. the online parameters. Targets and
    /// teacher values are constants.
    pub fn loss_and_grad(
        &self,
        batch: &Batch,
        targets: &[f64],
        imitation: Option<Imitation<'_>>,
        sample_scale: Option<&[f64]>,
    ) -> (StepLoss, MlpGrad) {
        let b = batch.len();
        let cache = self.online.forward_cached(&batch.states);
        let q = cache.output();
        let mut grad_out = DMatrix::zeros(q.nrows(), b);
        let (mut total, mut rl_sum, mut tl_sum) = (0.0, 0.0, 0.0);
        for i in 0..b {
            let a = batch.actions[i];
            let qa = q[(a, i)];
            let rl = (targets[i] - qa) * (targets[i] - qa);
            let mut loss = rl;
            let mut g = qa - targets[i];
            if let Some(im) = imitation {
                let tl = (im.teacher_q[i] - qa) * (im.teacher_q[i] - qa);
                loss = im.weights[i] * tl + rl;
                g += im.weights[i] * (qa - im.teacher_q[i]);
                tl_sum += tl;
            }
            if let Some(scale) = sample_scale {
                loss *= scale[i];
                g *= scale[i];
            }
            rl_sum += rl;
            total += loss;
            grad_out[(a, i)] = 2.0 * g / b as f64;
        }
        let (grad, _) = self.online.backward(&cache, grad_out);
        let n = b as f64;
        (StepLoss { total: total / n, rl: rl_sum / n, tl: tl_sum / n }, grad)
    }

    /// Adam step on the online network; syncs the target every `sync_interval` updates.
    pub fn apply_grad(&mut self, grad: &MlpGrad, lr: f64) {
        self.optimizer.step(self.online.param_slices_mut(), &grad.slices(), lr);
        self.updates += 1;
        if self.updates.is_multiple_of(self.sync_interval) {
            self.sync_target();
        }
    }

    pub fn sync_target(&mut self) {
        self.target = self.online.clone();
    }

    /// One standard DQN step with unrestricted targets; returns the pre-step loss.
    pub fn dqn_update(&mut self, batch: &Batch, lr: f64) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let targets = self.td_targets(batch, None)?;
        let (loss, grad) = self.loss_and_grad(batch, &targets, None, None);
        self.apply_grad(&grad, lr);
        Ok(loss.total)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(f, self)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let agent: Self = serde_json::from_reader(f)?;
        if agent.version != CHECKPOINT_VERSION {
            return Err(Error::Parse { line: 1, message: format!("unsupported agent checkpoint version {}", agent.version) });
        }
        Ok(agent)
    }
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn restricted_max(q: &[f64], restrict: Option<&[usize]>) -> f64 {
    match restrict {
        Some(set) => set.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max),
        None => q.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Indices of the `beta` largest values, ties broken toward lower indices.
pub fn top_actions(q: &[f64], beta: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].total_cmp(&q[a]).then(a.cmp(&b)));
    idx.truncate(beta.clamp(1, q.len()));
    idx
}
