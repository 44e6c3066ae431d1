//! Offline transfer pipeline: NSR models and the source agent are trained
//! first, source samples are weighted by similarity, filtered and merged with
//! the target data, and the target agent is trained on the hybrid loss
//! `mean(w·(Q_S(s,a) - Q_T(s,a))² + (r + γ max_{a'∈A_T} Q_T'(s',a') - Q_T(s,a))²)`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::agent::{top_actions, AgentConfig, Batch, Imitation, QAgent, StepLoss, Which};
use crate::dataset::{Dataset, Transition};
use crate::error::{Error, Result};
use crate::nn::MlpGrad;
use crate::nsr::{train_nsr, NsrConfig, NsrModel};
use crate::rng::{derive_seed, rng_from_seed, tags};
use crate::similarity::{annotate_weights, beta_from_weight, filter_source, mean_only_weight, SimilarityConfig};

/// Training recipe for the target agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Filtered instance transfer plus action constraint and imitation.
    Shtaa,
    /// DQN on target data only.
    NoTransfer,
    /// DQN on the unfiltered union of source and target data.
    AllTransfer,
    /// Similarity from predicted means only.
    NoUaSim,
    /// No action constraint (β fixed at the full action count).
    NoAc,
    /// No imitation term.
    NoLossTl,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::NoTransfer, Method::AllTransfer, Method::Shtaa, Method::NoUaSim, Method::NoAc, Method::NoLossTl];

    pub fn name(self) -> &'static str {
        match self {
            Method::Shtaa => "shtaa",
            Method::NoTransfer => "no_transfer",
            Method::AllTransfer => "all_transfer",
            Method::NoUaSim => "no_ua_sim",
            Method::NoAc => "no_ac",
            Method::NoLossTl => "no_loss_tl",
        }
    }

    /// Whether the method needs NSR models and a source agent.
    pub fn needs_pretraining(self) -> bool {
        !matches!(self, Method::NoTransfer | Method::AllTransfer)
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Diagnostic switches that pin intermediate quantities.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Overrides {
    /// Replace every similarity weight by this value.
    pub weight: Option<f64>,
    /// Replace every β by this value.
    pub beta: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub method: Method,
    /// Slots per screen; the agent has `2^k` actions.
    pub k: usize,
    pub nsr_horizon: usize,
    pub gamma: f64,
    pub similarity: SimilarityConfig,
    /// Update budget for the target agent.
    pub iterations: usize,
    /// Update budget for the source agent.
    pub source_iterations: usize,
    pub seed: u64,
    pub agent: AgentConfig,
    pub nsr: NsrConfig,
    /// Early-stop window in updates; 0 disables.
    pub plateau_window: usize,
    /// Stop when the windowed mean loss improves by less than this fraction.
    pub plateau_tol: f64,
    pub log_every: usize,
    pub overrides: Overrides,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            method: Method::Shtaa,
            k: 3,
            nsr_horizon: 3,
            gamma: 0.9,
            similarity: SimilarityConfig::default(),
            iterations: 20_000,
            source_iterations: 20_000,
            seed: 0,
            agent: AgentConfig::default(),
            nsr: NsrConfig::default(),
            plateau_window: 2_000,
            plateau_tol: 1e-3,
            log_every: 100,
            overrides: Overrides::default(),
        }
    }
}

impl TransferConfig {
    pub fn n_actions(&self) -> usize {
        1 << self.k
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.k > 10 {
            return Err(Error::Config(format!("k = {} outside 1..=10", self.k)));
        }
        if self.nsr_horizon == 0 {
            return Err(Error::Config("nsr_horizon must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0,1]", self.gamma)));
        }
        if self.agent.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("batch_size and log_every must be positive".into()));
        }
        if let Some(b) = self.overrides.beta {
            if b == 0 || b > self.n_actions() {
                return Err(Error::Config(format!("beta override {b} outside 1..={}", self.n_actions())));
            }
        }
        self.similarity.validate(self.n_actions())
    }

    fn agent_config(&self) -> AgentConfig {
        AgentConfig { gamma: self.gamma, ..self.agent.clone() }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub loss: f64,
    pub loss_rl: f64,
    pub loss_tl: f64,
    pub mean_w: f64,
    pub mean_beta: f64,
}

/// Artifacts that depend only on the datasets and the pre-training config.
#[derive(Debug, Clone)]
pub struct Pretrained {
    pub nsr_source: NsrModel,
    pub nsr_target: NsrModel,
    pub agent_source: QAgent,
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub agent: QAgent,
    pub log: Vec<LogRow>,
    pub iterations_run: usize,
    /// Transitions the target agent trained on.
    pub merged: Dataset,
    pub source_kept: usize,
}

/// Loss terms that are switched on in the hybrid objective.
#[derive(Debug, Clone)]
pub struct HybridTerms {
    pub similarity: SimilarityConfig,
    pub action_constraint: bool,
    pub imitation: bool,
    pub forced_beta: Option<usize>,
}

/// Result of [`hybrid_loss`].
#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub loss: StepLoss,
    pub grad: MlpGrad,
    pub mean_w: f64,
    pub mean_beta: f64,
}

/// Hybrid loss of `agent_t` on a similarity-weighted batch, with gradients
/// w.r.t. `agent_t`'s online network only.
///
/// For each sample, `A_T` is the top-β actions of `Q_S(s', ·)` (source online
/// network), β coming from the sample's weight.
pub fn hybrid_loss(
    agent_t: &QAgent,
    agent_s: &QAgent,
    batch: &Batch,
    terms: &HybridTerms,
    sample_scale: Option<&[f64]>,
) -> Result<HybridLoss> {
    if batch.is_empty() {
        return Err(Error::Usage("empty batch".into()));
    }
    let weights: Vec<f64> = batch
        .weights
        .iter()
        .map(|w| w.ok_or_else(|| Error::Usage("hybrid loss needs similarity-annotated samples".into())))
        .collect::<Result<_>>()?;
    let n_actions = agent_t.n_actions();
    let betas: Vec<usize> = weights
        .iter()
        .map(|&w| match (terms.forced_beta, terms.action_constraint) {
            (Some(b), _) => b,
            (None, true) => beta_from_weight(w, n_actions, &terms.similarity),
            (None, false) => n_actions,
        })
        .collect();
    let q_s_next = agent_s.q_batch(&batch.next_states, Which::Online);
    let restrict: Vec<Vec<usize>> = (0..batch.len())
        .map(|i| if batch.terminal[i] { vec![0] } else { top_actions(q_s_next.column(i).as_slice(), betas[i]) })
        .collect();
    let targets = agent_t.td_targets(batch, Some(&restrict))?;
    let teacher: Vec<f64>;
    let imitation = if terms.imitation {
        let q_s = agent_s.q_batch(&batch.states, Which::Online);
        teacher = (0..batch.len()).map(|i| q_s[(batch.actions[i], i)]).collect();
        Some(Imitation { teacher_q: &teacher, weights: &weights })
    } else {
        None
    };
    let (loss, grad) = agent_t.loss_and_grad(batch, &targets, imitation, sample_scale);
    let n = batch.len() as f64;
    Ok(HybridLoss {
        loss,
        grad,
        mean_w: weights.iter().sum::<f64>() / n,
        mean_beta: betas.iter().sum::<usize>() as f64 / n,
    })
}

fn check_rewards(ds: &Dataset, n_actions: usize) -> Result<()> {
    for t in ds.iter() {
        if t.r != t.r_ad + t.r_fee {
            return Err(Error::Usage(format!(
                "transition ({}, {}, {}) violates r = r_ad + r_fee",
                t.entrance_id, t.episode_id, t.t
            )));
        }
        if t.action_index >= n_actions {
            return Err(Error::Usage(format!("action index {} out of range", t.action_index)));
        }
    }
    Ok(())
}

fn check_nsr(ds: &Dataset, cfg: &TransferConfig, which: &str) -> Result<()> {
    match ds.nsr {
        Some(a) if a.horizon == cfg.nsr_horizon && a.gamma == cfg.gamma => Ok(()),
        Some(a) => Err(Error::Config(format!(
            "{which} dataset annotated with N={}, gamma={} but config has N={}, gamma={}",
            a.horizon, a.gamma, cfg.nsr_horizon, cfg.gamma
        ))),
        None => Err(Error::Config(format!("{which} dataset has no N-step-return annotation"))),
    }
}

/// Trains the source and target NSR models (in parallel).
pub fn train_nsr_pair(ds_s: &Dataset, ds_t: &Dataset, cfg: &TransferConfig) -> Result<(NsrModel, NsrModel)> {
    let n_actions = cfg.n_actions();
    let cfg_s = NsrConfig { seed: derive_seed(cfg.seed, tags::NSR_SOURCE), ..cfg.nsr.clone() };
    let cfg_t = NsrConfig { seed: derive_seed(cfg.seed, tags::NSR_TARGET), ..cfg.nsr.clone() };
    let (s, t) = rayon::join(|| train_nsr(ds_s, n_actions, &cfg_s), || train_nsr(ds_t, n_actions, &cfg_t));
    Ok((s?.0, t?.0))
}

/// Trains the source agent with plain DQN on the source data.
pub fn train_source_agent(ds_s: &Dataset, cfg: &TransferConfig) -> Result<QAgent> {
    check_rewards(ds_s, cfg.n_actions())?;
    let seed = derive_seed(cfg.seed, tags::AGENT_SOURCE);
    let (agent, _, _) = train_agent(&ds_s.transitions, None, cfg, cfg.source_iterations, seed)?;
    Ok(agent)
}

pub fn pretrain(ds_s: &Dataset, ds_t: &Dataset, cfg: &TransferConfig) -> Result<Pretrained> {
    cfg.validate()?;
    check_nsr(ds_s, cfg, "source")?;
    check_nsr(ds_t, cfg, "target")?;
    let ((nsr_source, nsr_target), agent_source) =
        match rayon::join(|| train_nsr_pair(ds_s, ds_t, cfg), || train_source_agent(ds_s, cfg)) {
            (Ok(n), Ok(a)) => (n, a),
            (Err(e), _) | (_, Err(e)) => return Err(e),
        };
    Ok(Pretrained { nsr_source, nsr_target, agent_source })
}

/// Runs the whole pipeline, pre-training included.
pub fn run_algorithm1(ds_s: &Dataset, ds_t: &Dataset, cfg: &TransferConfig) -> Result<TransferOutcome> {
    let pre = if cfg.method.needs_pretraining() { Some(pretrain(ds_s, ds_t, cfg)?) } else { None };
    train_target(ds_s, ds_t, pre.as_ref(), cfg)
}

/// Weight annotation, filtering, merging and target-agent training.
pub fn train_target(ds_s: &Dataset, ds_t: &Dataset, pre: Option<&Pretrained>, cfg: &TransferConfig) -> Result<TransferOutcome> {
    cfg.validate()?;
    let n_actions = cfg.n_actions();
    check_rewards(ds_t, n_actions)?;
    let seed = derive_seed(cfg.seed, tags::AGENT_TARGET);
    match cfg.method {
        Method::NoTransfer => {
            let (agent, log, iterations_run) = train_agent(&ds_t.transitions, None, cfg, cfg.iterations, seed)?;
            Ok(TransferOutcome { agent, log, iterations_run, merged: ds_t.clone(), source_kept: 0 })
        }
        Method::AllTransfer => {
            check_rewards(ds_s, n_actions)?;
            let source_kept = ds_s.len();
            let merged = ds_s.clone().merge(ds_t.clone());
            let (agent, log, iterations_run) = train_agent(&merged.transitions, None, cfg, cfg.iterations, seed)?;
            Ok(TransferOutcome { agent, log, iterations_run, merged, source_kept })
        }
        method => {
            let pre = pre.ok_or_else(|| Error::Config(format!("method {method} needs pre-trained NSR models and source agent")))?;
            check_rewards(ds_s, n_actions)?;
            check_nsr(ds_s, cfg, "source")?;
            check_nsr(ds_t, cfg, "target")?;
            if pre.agent_source.n_actions() != n_actions || pre.nsr_source.n_actions != n_actions {
                return Err(Error::Config("pre-trained models do not match the configured action count".into()));
            }
            let (ws, wt) = weigh_datasets(ds_s, ds_t, pre, cfg)?;
            let kept = filter_source(ws, &cfg.similarity)?;
            let source_kept = kept.len();
            let scale = cfg.similarity.weighted_mode.then(|| {
                kept.iter()
                    .map(|t| t.w.unwrap_or(0.0))
                    .chain(std::iter::repeat_n(1.0, wt.len()))
                    .collect::<Vec<f64>>()
            });
            let merged = kept.merge(wt);
            let terms = HybridTerms {
                similarity: cfg.similarity.clone(),
                action_constraint: method != Method::NoAc,
                imitation: method != Method::NoLossTl,
                forced_beta: cfg.overrides.beta,
            };
            let hybrid = HybridMode { teacher: &pre.agent_source, terms, scale };
            let (agent, log, iterations_run) = train_agent(&merged.transitions, Some(&hybrid), cfg, cfg.iterations, seed)?;
            Ok(TransferOutcome { agent, log, iterations_run, merged, source_kept })
        }
    }
}

/// Similarity-annotated copies of both datasets for a transfer method.
pub fn weigh_datasets(ds_s: &Dataset, ds_t: &Dataset, pre: &Pretrained, cfg: &TransferConfig) -> Result<(Dataset, Dataset)> {
    let (mut ws, mut wt) = if cfg.method == Method::NoUaSim {
        let n = ds_t.len() as f64;
        let mean = ds_t.iter().map(|t| t.r_n).sum::<f64>() / n;
        let scale = (ds_t.iter().map(|t| (t.r_n - mean).powi(2)).sum::<f64>() / n).sqrt();
        if !(scale > 0.0) {
            return Err(Error::Numerical("target N-step returns have zero spread".into()));
        }
        let ps = pre.nsr_source.predictor()?;
        let pt = pre.nsr_target.predictor()?;
        let weigh = |ds: &Dataset| {
            let mut out = ds.clone();
            let a = ps.predict_transitions(&ds.transitions);
            let b = pt.predict_transitions(&ds.transitions);
            for ((t, p), q) in out.transitions.iter_mut().zip(a).zip(b) {
                t.w = Some(mean_only_weight(p, q, scale));
            }
            out
        };
        (weigh(ds_s), weigh(ds_t))
    } else {
        (
            annotate_weights(ds_s.clone(), &pre.nsr_source, &pre.nsr_target, &cfg.similarity)?,
            annotate_weights(ds_t.clone(), &pre.nsr_source, &pre.nsr_target, &cfg.similarity)?,
        )
    };
    if let Some(w) = cfg.overrides.weight {
        for t in ws.transitions.iter_mut().chain(wt.transitions.iter_mut()) {
            t.w = Some(w);
        }
    }
    Ok((ws, wt))
}

struct HybridMode<'a> {
    teacher: &'a QAgent,
    terms: HybridTerms,
    scale: Option<Vec<f64>>,
}

/// Shared training loop: uniform batch sampling with replacement from
/// `data`, plain DQN updates or hybrid updates, windowed plateau stop.
fn train_agent(
    data: &[Transition],
    hybrid: Option<&HybridMode<'_>>,
    cfg: &TransferConfig,
    iterations: usize,
    seed: u64,
) -> Result<(QAgent, Vec<LogRow>, usize)> {
    let first = data.first().ok_or_else(|| Error::Usage("cannot train an agent on an empty dataset".into()))?;
    let agent_cfg = cfg.agent_config();
    let mut agent = QAgent::new(first.state_feat.len(), cfg.k, &agent_cfg, derive_seed(seed, 0));
    let mut rng = rng_from_seed(derive_seed(seed, 1));
    let n_actions = cfg.n_actions();
    let mut log = Vec::new();
    let mut window = Acc::default();
    let mut losses = Vec::with_capacity(iterations);
    let mut done = 0;
    for it in 0..iterations {
        let idx: Vec<usize> = (0..agent_cfg.batch_size).map(|_| rng.gen_range(0..data.len())).collect();
        let refs: Vec<&Transition> = idx.iter().map(|&i| &data[i]).collect();
        let batch = Batch::from_transitions(&refs);
        let (loss, mean_w, mean_beta) = match hybrid {
            None => {
                let total = agent.dqn_update(&batch, agent_cfg.lr)?;
                let mean_w = batch.weights.iter().map(|w| w.unwrap_or(0.0)).sum::<f64>() / batch.len() as f64;
                (StepLoss { total, rl: total, tl: 0.0 }, mean_w, n_actions as f64)
            }
            Some(h) => {
                let scale: Option<Vec<f64>> = h.scale.as_ref().map(|s| idx.iter().map(|&i| s[i]).collect());
                let out = hybrid_loss(&agent, h.teacher, &batch, &h.terms, scale.as_deref())?;
                agent.apply_grad(&out.grad, agent_cfg.lr);
                (out.loss, out.mean_w, out.mean_beta)
            }
        };
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at iteration {it}")));
        }
        window.add(loss, mean_w, mean_beta);
        losses.push(loss.total);
        done = it + 1;
        if done % cfg.log_every == 0 {
            log.push(window.row(done));
            window = Acc::default();
        }
        if plateaued(&losses, cfg.plateau_window, cfg.plateau_tol) {
            break;
        }
    }
    if window.n > 0 {
        log.push(window.row(done));
    }
    Ok((agent, log, done))
}

fn plateaued(losses: &[f64], window: usize, tol: f64) -> bool {
    let n = losses.len();
    if window == 0 || n < 2 * window || !n.is_multiple_of(window) {
        return false;
    }
    let cur = losses[n - window..].iter().sum::<f64>() / window as f64;
    let prev = losses[n - 2 * window..n - window].iter().sum::<f64>() / window as f64;
    prev - cur < tol * prev.abs()
}

#[derive(Default)]
struct Acc {
    n: usize,
    loss: f64,
    rl: f64,
    tl: f64,
    w: f64,
    beta: f64,
}

impl Acc {
    fn add(&mut self, l: StepLoss, w: f64, beta: f64) {
        self.n += 1;
        self.loss += l.total;
        self.rl += l.rl;
        self.tl += l.tl;
        self.w += w;
        self.beta += beta;
    }

    fn row(&self, iteration: usize) -> LogRow {
        let n = self.n.max(1) as f64;
        LogRow {
            iteration,
            loss: self.loss / n,
            loss_rl: self.rl / n,
            loss_tl: self.tl / n,
            mean_w: self.w / n,
            mean_beta: self.beta / n,
        }
    }
}

pub fn write_log_csv<W: std::io::Write>(log: &[LogRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in log {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}
