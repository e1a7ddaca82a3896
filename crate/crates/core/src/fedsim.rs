//! Federated simulation of two-exit split training and its baselines.
//!
//! Every client runs the same sequential logic on its own data; per-round
//! fan-out goes through rayon, but results are collected in client-id order
//! and every reduction runs sequentially in that order, so the parameter
//! trajectory does not depend on the worker count.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{LabeledDataset, Sample};
use crate::diagnostics;
use crate::error::{Error, Result};
use crate::nn::{self, LayeredModel};
use crate::partition::ModelSpec;
use crate::seed::{self, stream};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Two-exit objective with λ-mixed client aggregation.
    #[default]
    Splitgp,
    /// Plain federated averaging of the full model.
    Fedavg,
    /// Split training on the server-exit loss with full client averaging.
    Splitfed,
    /// Federated averaging followed by local fine-tuning of the full model.
    Personalized,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Splitgp, Mode::Fedavg, Mode::Splitfed, Mode::Personalized];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Splitgp => "splitgp",
            Mode::Fedavg => "fedavg",
            Mode::Splitfed => "splitfed",
            Mode::Personalized => "personalized",
        }
    }

    /// Whether inference routes between the client and server exits.
    pub fn uses_client_exit(self) -> bool {
        self == Mode::Splitgp
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown mode {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum LrPolicy {
    Fixed { lr: f64 },
    /// `eta0 / (a + t)` with `a = (c + 4) / (1 - λ²)`.
    Schedule { eta0: f64, c: f64 },
}

impl LrPolicy {
    pub fn rate(&self, round: usize, lambda: f64) -> Result<f64> {
        match *self {
            LrPolicy::Fixed { lr } => Ok(lr),
            LrPolicy::Schedule { eta0, c } => lr_schedule(round, eta0, c, lambda),
        }
    }
}

/// Offset `a = (c + 4) / (1 - λ²)` of the diminishing schedule.
pub fn schedule_offset(c: f64, lambda: f64) -> Result<f64> {
    if !(c > 0.0) {
        return Err(Error::invalid(format!("schedule constant c must be positive, got {c}")));
    }
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(format!(
            "schedule requires 0 <= lambda < 1, got {lambda}"
        )));
    }
    Ok((c + 4.0) / (1.0 - lambda * lambda))
}

/// Diminishing learning rate `eta0 / (a + t)`.
pub fn lr_schedule(round: usize, eta0: f64, c: f64, lambda: f64) -> Result<f64> {
    Ok(eta0 / (schedule_offset(c, lambda)? + round as f64))
}

fn default_finetune_epochs() -> usize {
    5
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the client-exit loss.
    pub gamma: f64,
    /// Personalization weight of the client aggregation.
    pub lambda: f64,
    pub lr: LrPolicy,
    pub rounds: usize,
    pub batch_size: usize,
    /// Mini-batch steps per round; `None` means one local epoch.
    #[serde(default)]
    pub local_steps: Option<usize>,
    /// Local epochs of the personalized baseline after federated training.
    #[serde(default = "default_finetune_epochs")]
    pub finetune_epochs: usize,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    /// Record the full-batch gradient-norm proxy after every round.
    #[serde(default = "default_true")]
    pub track_grad_norm: bool,
}

impl TrainConfig {
    /// Experimental defaults: η=0.01, batch 50, λ=0.2, one epoch per round.
    pub fn reference_defaults(mode: Mode, rounds: usize, seed: u64) -> Self {
        TrainConfig {
            gamma: 0.5,
            lambda: 0.2,
            lr: LrPolicy::Fixed { lr: 0.01 },
            rounds,
            batch_size: 50,
            local_steps: None,
            finetune_epochs: default_finetune_epochs(),
            mode,
            seed,
            track_grad_norm: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config("train.gamma", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("train.lambda", "must lie in [0, 1]"));
        }
        if self.rounds < 1 {
            return Err(Error::config("train.rounds", "must be at least 1"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("train.batch_size", "must be at least 1"));
        }
        if self.local_steps == Some(0) {
            return Err(Error::config("train.local_steps", "must be at least 1 when set"));
        }
        match self.lr {
            LrPolicy::Fixed { lr } if !(lr > 0.0 && lr.is_finite()) => {
                return Err(Error::config("train.lr.lr", "must be positive"));
            }
            LrPolicy::Schedule { eta0, c } => {
                if !(eta0 > 0.0 && eta0.is_finite()) {
                    return Err(Error::config("train.lr.eta0", "must be positive"));
                }
                schedule_offset(c, self.effective_lambda())
                    .map_err(|e| Error::config("train.lr", e.to_string()))?;
            }
            _ => {}
        }
        Ok(())
    }

    /// Exit weight actually used by the mode.
    pub fn effective_gamma(&self) -> f64 {
        match self.mode {
            Mode::Splitgp => self.gamma,
            _ => 0.0,
        }
    }

    /// Aggregation weight actually used by the mode.
    pub fn effective_lambda(&self) -> f64 {
        match self.mode {
            Mode::Splitgp => self.lambda,
            _ => 0.0,
        }
    }
}

/// One client's local data, model segments and aggregation weight.
#[derive(Clone, Debug)]
pub struct ClientState {
    pub id: usize,
    pub data: LabeledDataset,
    pub phi: LayeredModel,
    pub head: LayeredModel,
    pub alpha: f64,
    /// Client-specific server segment (personalized baseline only).
    pub local_theta: Option<LayeredModel>,
}

impl ClientState {
    /// Server segment this client infers with.
    pub fn theta<'a>(&'a self, shared: &'a LayeredModel) -> &'a LayeredModel {
        self.local_theta.as_ref().unwrap_or(shared)
    }
}

#[derive(Clone, Debug)]
pub struct FederationState {
    pub mode: Mode,
    pub clients: Vec<ClientState>,
    pub theta: LayeredModel,
    pub round: usize,
    /// Exit weight of the objective the state was trained on.
    pub gamma: f64,
    pub seed: u64,
}

/// `α_k = |D_k| / Σ_i |D_i|`.
pub fn dataset_weights(datasets: &[LabeledDataset]) -> Result<Vec<f64>> {
    let total: usize = datasets.iter().map(LabeledDataset::len).sum();
    if total == 0 {
        return Err(Error::invalid("all client datasets are empty"));
    }
    Ok(datasets.iter().map(|d| d.len() as f64 / total as f64).collect())
}

/// Result of one client's local work in a round.
#[derive(Clone, Debug)]
pub struct LocalUpdate {
    pub phi: LayeredModel,
    pub head: LayeredModel,
    pub theta: LayeredModel,
    pub client_loss: Option<f64>,
    pub server_loss: f64,
    pub objective: f64,
}

/// Batches of sample indices for local step `step` onward: each epoch uses a
/// fresh shuffle keyed by (seed, client, round, epoch).
fn batch_plan(n: usize, batch_size: usize, steps: Option<usize>, key: (u64, usize, u64, u64)) -> Vec<Vec<usize>> {
    let (seed, client, round, tag) = key;
    let per_epoch = n.div_ceil(batch_size);
    let total = steps.unwrap_or(per_epoch);
    let mut out = Vec::with_capacity(total);
    let mut epoch = 0u64;
    while out.len() < total {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut seed::rng(seed, &[tag, client as u64, round, epoch]));
        for chunk in order.chunks(batch_size) {
            if out.len() == total {
                break;
            }
            out.push(chunk.to_vec());
        }
        epoch += 1;
    }
    out
}

/// Mini-batch SGD on one client starting from its segments and a working
/// copy of the server segment.
pub fn local_round(client: &ClientState, theta: &LayeredModel, cfg: &TrainConfig, lr: f64, round: usize) -> Result<LocalUpdate> {
    if client.data.is_empty() {
        return Err(Error::invalid(format!("client {} has no data", client.id)));
    }
    let plan = batch_plan(
        client.data.len(),
        cfg.batch_size,
        cfg.local_steps,
        (cfg.seed, client.id, round as u64, stream::BATCH),
    );
    let samples = client.data.samples();
    let ctx = |step: usize| move || format!("round {round}, client {}, step {step}", client.id);

    match cfg.mode {
        Mode::Splitgp | Mode::Splitfed => {
            let gamma = cfg.effective_gamma();
            let mut phi = client.phi.clone();
            let mut head = client.head.clone();
            let mut theta = theta.clone();
            let (mut lc, mut ls, mut f) = (0.0, 0.0, 0.0);
            for (step, idx) in plan.iter().enumerate() {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
                let g = nn::backward_multi_exit(&phi, &head, &theta, &batch, gamma)
                    .map_err(|e| e.with_context(ctx(step)))?;
                phi.sgd_step(&g.phi, lr)?;
                head.sgd_step(&g.head, lr)?;
                theta.sgd_step(&g.theta, lr)?;
                lc += g.client_loss;
                ls += g.server_loss;
                f += g.objective;
            }
            let n = plan.len() as f64;
            Ok(LocalUpdate {
                phi,
                head,
                theta,
                client_loss: Some(lc / n),
                server_loss: ls / n,
                objective: f / n,
            })
        }
        Mode::Fedavg | Mode::Personalized => {
            let cut = client.phi.num_layers();
            let mut w = client.phi.concat(theta)?;
            let mut ls = 0.0;
            for (step, idx) in plan.iter().enumerate() {
                let batch: Vec<&Sample> = idx.iter().map(|&i| &samples[i]).collect();
                let (g, loss) = nn::backward_single_exit(&w, &batch).map_err(|e| e.with_context(ctx(step)))?;
                w.sgd_step(&g, lr)?;
                ls += loss;
            }
            let ls = ls / plan.len() as f64;
            Ok(LocalUpdate {
                phi: w.slice(0..cut)?,
                head: client.head.clone(),
                theta: w.slice(cut..w.num_layers())?,
                client_loss: None,
                server_loss: ls,
                objective: ls,
            })
        }
    }
}

/// `Σ_k α_k m_k`, accumulated in ascending index order.
pub fn weighted_mean(models: &[&LayeredModel], alphas: &[f64]) -> Result<LayeredModel> {
    let first = models.first().ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    if models.len() != alphas.len() {
        return Err(Error::invalid(format!(
            "{} models but {} weights",
            models.len(),
            alphas.len()
        )));
    }
    if models.iter().any(|m| !m.same_shape(first)) {
        return Err(Error::shape("aggregated segments differ in shape"));
    }
    let sum: f64 = alphas.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || alphas.iter().any(|&a| !(a >= 0.0)) {
        return Err(Error::invalid(format!(
            "aggregation weights must be non-negative and sum to 1, got sum {sum}"
        )));
    }
    let mut out = (*first).clone();
    out.param_blocks_mut().flatten().for_each(|v| *v = 0.0);
    for (m, &a) in models.iter().zip(alphas) {
        for (acc, src) in out.param_blocks_mut().zip(m.param_blocks()) {
            for (x, y) in acc.iter_mut().zip(src) {
                *x += a * y;
            }
        }
    }
    Ok(out)
}

/// Server-side aggregation `θ ← Σ_i α_i θ_i`.
pub fn aggregate_server(thetas: &[LayeredModel], alphas: &[f64]) -> Result<LayeredModel> {
    let refs: Vec<&LayeredModel> = thetas.iter().collect();
    weighted_mean(&refs, alphas)
}

/// `λ x + (1 - λ) mean`, entrywise.
fn mix(own: &LayeredModel, mean: &LayeredModel, lambda: f64) -> LayeredModel {
    let mut out = own.clone();
    for (o, m) in out.param_blocks_mut().zip(mean.param_blocks()) {
        for (x, y) in o.iter_mut().zip(m) {
            *x = lambda * *x + (1.0 - lambda) * y;
        }
    }
    out
}

/// Client-side aggregation: `φ_k ← λ φ_k + (1-λ) Σ_i α_i φ_i`, and the same
/// for the auxiliary heads. The weighted means are computed once.
pub fn aggregate_clients(
    phis: &[LayeredModel],
    heads: &[LayeredModel],
    alphas: &[f64],
    lambda: f64,
) -> Result<(Vec<LayeredModel>, Vec<LayeredModel>)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    if phis.len() != heads.len() {
        return Err(Error::invalid("phi and head lists differ in length"));
    }
    let phi_mean = aggregate_server(phis, alphas)?;
    let head_mean = aggregate_server(heads, alphas)?;
    Ok((
        phis.iter().map(|p| mix(p, &phi_mean, lambda)).collect(),
        heads.iter().map(|h| mix(h, &head_mean, lambda)).collect(),
    ))
}

/// Per-round training record.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub lr: Option<f64>,
    pub client_loss: Option<f64>,
    pub server_loss: Option<f64>,
    pub objective: Option<f64>,
    pub grad_norm: Option<f64>,
}

/// Training history. Record 0 describes the initial state; record `t`
/// holds the mean losses of round `t` and the proxy at the state it produced.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct History {
    pub mode: Mode,
    pub records: Vec<RoundRecord>,
}

impl History {
    pub fn csv_header() -> &'static str {
        "round,mode,lr,client_loss,server_loss,objective,grad_norm_proxy"
    }

    pub fn write_csv_rows<W: Write>(&self, out: &mut W) -> std::io::Result<()> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{}",
                r.round,
                self.mode,
                opt(r.lr),
                opt(r.client_loss),
                opt(r.server_loss),
                opt(r.objective),
                opt(r.grad_norm)
            )?;
        }
        Ok(())
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        writeln!(buf, "{}", Self::csv_header()).and_then(|_| self.write_csv_rows(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Gradient-norm proxy values in round order (rounds without one skipped).
    pub fn grad_norms(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| r.grad_norm.map(|g| (r.round, g)))
            .collect()
    }
}

fn with_pool<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if workers == 0 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot build worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Shared initial state: one `(φ⁰, h⁰, θ⁰)` copied to every client.
pub fn init_federation(cfg: &TrainConfig, datasets: Vec<LabeledDataset>, spec: &ModelSpec) -> Result<FederationState> {
    let first = datasets.first().ok_or_else(|| Error::invalid("no clients"))?;
    let (dim, classes) = (first.dim(), first.num_classes());
    if datasets.iter().any(|d| d.dim() != dim || d.num_classes() != classes) {
        return Err(Error::invalid("client datasets disagree on feature dim or class count"));
    }
    if let Some(k) = datasets.iter().position(LabeledDataset::is_empty) {
        return Err(Error::invalid(format!("client {k} has no data")));
    }
    let alphas = dataset_weights(&datasets)?;
    let init = spec.build(dim, classes, &mut seed::rng(cfg.seed, &[stream::INIT]))?;
    let clients = datasets
        .into_iter()
        .zip(alphas)
        .enumerate()
        .map(|(id, (data, alpha))| ClientState {
            id,
            data,
            phi: init.phi.clone(),
            head: init.head.clone(),
            alpha,
            local_theta: None,
        })
        .collect();
    Ok(FederationState {
        mode: cfg.mode,
        clients,
        theta: init.theta,
        round: 0,
        gamma: cfg.effective_gamma(),
        seed: cfg.seed,
    })
}

/// Runs `cfg.rounds` rounds of local training and aggregation for all
/// clients, then the fine-tuning phase for the personalized baseline.
///
/// `workers` sizes a dedicated thread pool; 0 runs on the caller's pool.
pub fn run_training(
    cfg: &TrainConfig,
    datasets: Vec<LabeledDataset>,
    spec: &ModelSpec,
    workers: usize,
) -> Result<(FederationState, History)> {
    cfg.validate()?;
    let mut state = init_federation(cfg, datasets, spec)?;
    let history = with_pool(workers, || train_state(cfg, &mut state))??;
    Ok((state, history))
}

fn train_state(cfg: &TrainConfig, state: &mut FederationState) -> Result<History> {
    let lambda = cfg.effective_lambda();
    let alphas: Vec<f64> = state.clients.iter().map(|c| c.alpha).collect();
    let mut records = vec![RoundRecord {
        round: 0,
        lr: None,
        client_loss: None,
        server_loss: None,
        objective: None,
        grad_norm: cfg
            .track_grad_norm
            .then(|| diagnostics::grad_norm_proxy(state))
            .transpose()?,
    }];

    for t in 0..cfg.rounds {
        let lr = cfg.lr.rate(t, lambda)?;
        let updates = state
            .clients
            .par_iter()
            .map(|c| local_round(c, &state.theta, cfg, lr, t))
            .collect::<Result<Vec<_>>>()?;
        let record = round_record(t + 1, lr, &updates);

        match cfg.mode {
            Mode::Splitgp | Mode::Splitfed => {
                let thetas: Vec<LayeredModel> = updates.iter().map(|u| u.theta.clone()).collect();
                let phis: Vec<LayeredModel> = updates.iter().map(|u| u.phi.clone()).collect();
                let heads: Vec<LayeredModel> = updates.iter().map(|u| u.head.clone()).collect();
                state.theta = aggregate_server(&thetas, &alphas)?;
                let (phis, heads) = aggregate_clients(&phis, &heads, &alphas, lambda)?;
                for ((c, p), h) in state.clients.iter_mut().zip(phis).zip(heads) {
                    c.phi = p;
                    c.head = h;
                }
            }
            Mode::Fedavg | Mode::Personalized => {
                let full: Vec<LayeredModel> = updates
                    .iter()
                    .map(|u| u.phi.concat(&u.theta))
                    .collect::<Result<_>>()?;
                let w = aggregate_server(&full, &alphas)?;
                let cut = state.clients[0].phi.num_layers();
                let phi = w.slice(0..cut)?;
                state.theta = w.slice(cut..w.num_layers())?;
                for c in &mut state.clients {
                    c.phi = phi.clone();
                }
            }
        }
        state.round = t + 1;
        let grad_norm = cfg
            .track_grad_norm
            .then(|| diagnostics::grad_norm_proxy(state))
            .transpose()?;
        records.push(RoundRecord { grad_norm, ..record });
    }

    if cfg.mode == Mode::Personalized {
        records.extend(finetune(cfg, state)?);
    }
    Ok(History {
        mode: cfg.mode,
        records,
    })
}

fn round_record(round: usize, lr: f64, updates: &[LocalUpdate]) -> RoundRecord {
    let k = updates.len() as f64;
    let client_loss = updates
        .iter()
        .map(|u| u.client_loss)
        .sum::<Option<f64>>()
        .map(|s| s / k);
    RoundRecord {
        round,
        lr: Some(lr),
        client_loss,
        server_loss: Some(updates.iter().map(|u| u.server_loss).sum::<f64>() / k),
        objective: Some(updates.iter().map(|u| u.objective).sum::<f64>() / k),
        grad_norm: None,
    }
}

/// Local-only fine-tuning of the full model, one epoch per step of the
/// schedule, no aggregation.
fn finetune(cfg: &TrainConfig, state: &mut FederationState) -> Result<Vec<RoundRecord>> {
    let mut records = Vec::with_capacity(cfg.finetune_epochs);
    let ft_cfg = TrainConfig {
        local_steps: None,
        ..cfg.clone()
    };
    for e in 0..cfg.finetune_epochs {
        let round = cfg.rounds + e;
        let lr = cfg.lr.rate(round, 0.0)?;
        let updates = state
            .clients
            .par_iter()
            .map(|c| {
                let theta = c.theta(&state.theta).clone();
                local_round_tagged(c, &theta, &ft_cfg, lr, round, stream::FINETUNE)
            })
            .collect::<Result<Vec<_>>>()?;
        records.push(round_record(round + 1, lr, &updates));
        for (c, u) in state.clients.iter_mut().zip(updates) {
            c.phi = u.phi;
            c.local_theta = Some(u.theta);
        }
        state.round = round + 1;
    }
    Ok(records)
}

fn local_round_tagged(
    client: &ClientState,
    theta: &LayeredModel,
    cfg: &TrainConfig,
    lr: f64,
    round: usize,
    tag: u64,
) -> Result<LocalUpdate> {
    // Fine-tuning reuses the full-model path with its own shuffle stream.
    let seed = seed::derive(cfg.seed, &[tag]);
    let cfg = TrainConfig {
        seed,
        ..cfg.clone()
    };
    local_round(client, theta, &cfg, lr, round)
}

/// Serializable snapshot of trained models (datasets excluded).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FederationCheckpoint {
    pub mode: Mode,
    pub round: usize,
    pub gamma: f64,
    pub seed: u64,
    pub theta: LayeredModel,
    pub clients: Vec<ClientCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientCheckpoint {
    pub id: usize,
    pub alpha: f64,
    pub phi: LayeredModel,
    pub head: LayeredModel,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub local_theta: Option<LayeredModel>,
}

impl FederationState {
    pub fn checkpoint(&self) -> FederationCheckpoint {
        FederationCheckpoint {
            mode: self.mode,
            round: self.round,
            gamma: self.gamma,
            seed: self.seed,
            theta: self.theta.clone(),
            clients: self
                .clients
                .iter()
                .map(|c| ClientCheckpoint {
                    id: c.id,
                    alpha: c.alpha,
                    phi: c.phi.clone(),
                    head: c.head.clone(),
                    local_theta: c.local_theta.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds a state from a checkpoint and the matching client datasets.
    pub fn restore(ckpt: FederationCheckpoint, datasets: Vec<LabeledDataset>) -> Result<Self> {
        if ckpt.clients.len() != datasets.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} clients but {} datasets were supplied",
                ckpt.clients.len(),
                datasets.len()
            )));
        }
        Ok(FederationState {
            mode: ckpt.mode,
            round: ckpt.round,
            gamma: ckpt.gamma,
            seed: ckpt.seed,
            theta: ckpt.theta,
            clients: ckpt
                .clients
                .into_iter()
                .zip(datasets)
                .map(|(c, data)| ClientState {
                    id: c.id,
                    data,
                    phi: c.phi,
                    head: c.head,
                    alpha: c.alpha,
                    local_theta: c.local_theta,
                })
                .collect(),
        })
    }
}
