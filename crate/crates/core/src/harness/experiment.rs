//! The staged experiment pipeline and its run manifest.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{build_eval_set, generate_synthetic, shard_partition, EvalSet, LabeledDataset};
use crate::diagnostics::ConvergenceTrace;
use crate::error::{Error, Result};
use crate::fedsim::{run_training, FederationCheckpoint, FederationState, History, Mode, TrainConfig};
use crate::harness::config::ExperimentConfig;
use crate::inference::{evaluate, sweep_thresholds, EvalSummary, Evaluation, Predictor};
use crate::latency::{self, LatencyParams, PhiRange, SweepAxis, Threshold};
use crate::seed::{self, stream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const HISTORY_FILE: &str = "history.csv";
pub const TRAIN_RESULTS_FILE: &str = "train_results.json";
pub const EVAL_FILE: &str = "eval.csv";
pub const EVAL_RESULTS_FILE: &str = "eval_results.json";
pub const LATENCY_FILE: &str = "latency.json";
pub const CONFIG_FILE: &str = "config.json";

/// Which stages a pipeline invocation executes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stages {
    /// Train fresh models; otherwise evaluation loads saved checkpoints.
    pub train: bool,
    pub evaluate: bool,
    pub latency: bool,
}

impl Stages {
    pub const ALL: Stages = Stages {
        train: true,
        evaluate: true,
        latency: true,
    };
    pub const TRAIN: Stages = Stages {
        train: true,
        evaluate: false,
        latency: false,
    };
    pub const EVAL: Stages = Stages {
        train: false,
        evaluate: true,
        latency: false,
    };
    pub const LATENCY: Stages = Stages {
        train: false,
        evaluate: false,
        latency: true,
    };
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub name: String,
    pub config_sha256: String,
    pub seed: u64,
    pub seeds: Vec<u64>,
    pub version: String,
    pub stages: Vec<StageRecord>,
    pub outputs: Vec<OutputFile>,
}

/// One trained federation and its training history.
pub struct TrainedRun {
    pub mode: Mode,
    pub seed: u64,
    pub lambda: f64,
    pub state: FederationState,
    pub history: History,
}

impl TrainedRun {
    pub fn checkpoint_name(mode: Mode, lambda: f64, seed: u64) -> String {
        format!("checkpoints/{mode}_l{lambda}_s{seed}.json")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub mode: Mode,
    pub seed: u64,
    pub lambda: f64,
    pub rounds: usize,
    pub final_objective: Option<f64>,
    pub final_server_loss: Option<f64>,
    pub initial_grad_norm: Option<f64>,
    pub min_grad_norm: Option<f64>,
    pub checkpoint: String,
}

/// Macro-averaged result of one (mode, seed, λ, ρ) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalCell {
    pub mode: Mode,
    pub seed: u64,
    pub lambda: f64,
    pub rho: f64,
    /// Threshold with the best macro accuracy; `None` for full-model modes.
    pub best_threshold: Option<f64>,
    pub acc_main: f64,
    pub acc_ood: Option<f64>,
    pub acc_overall: f64,
    /// Client-exit fraction β̂ at the chosen threshold.
    pub client_fraction: f64,
    /// One entry per evaluated threshold.
    pub sweep: Vec<SweepPoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub threshold: f64,
    pub acc_overall: f64,
    pub client_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyOutput {
    pub params: LatencyParams,
    pub tau_client_full: f64,
    pub tau_server_full: f64,
    pub tau_splitgp: f64,
    pub rows: Vec<latency::ResourceRow>,
    pub client_rate_threshold: Threshold,
    pub uplink_rate_threshold: Threshold,
    pub phi_range: Option<PhiRange>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phi_range_error: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn write_file(dir: &Path, rel: &str, contents: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(&path, contents).map_err(|e| Error::io(&path, e))
}

fn read_file(dir: &Path, rel: &str) -> Result<String> {
    let path = dir.join(rel);
    std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-seed data: client training sets and the shared test set.
pub struct SeedData {
    pub seed: u64,
    pub clients: Vec<LabeledDataset>,
    pub test: LabeledDataset,
}

struct Pipeline {
    dir: PathBuf,
    manifest: RunManifest,
}

impl Pipeline {
    fn new(cfg: &ExperimentConfig, dir: PathBuf) -> Result<Self> {
        let config_json = cfg.to_json();
        let mut manifest = RunManifest {
            name: cfg.name.clone(),
            config_sha256: sha256_hex(config_json.as_bytes()),
            seed: cfg.seed,
            seeds: cfg.seeds(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stages: Vec::new(),
            outputs: Vec::new(),
        };
        // stage records from earlier invocations on the same config survive
        if let Ok(text) = read_file(&dir, MANIFEST_FILE) {
            if let Ok(prev) = serde_json::from_str::<RunManifest>(&text) {
                if prev.config_sha256 == manifest.config_sha256 {
                    manifest.stages = prev.stages;
                }
            }
        }
        write_file(&dir, CONFIG_FILE, config_json + "\n")?;
        Ok(Pipeline { dir, manifest })
    }

    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&Path) -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f(&self.dir);
        let record = StageRecord {
            stage: name.to_string(),
            seconds: start.elapsed().as_secs_f64(),
            ok: out.is_ok(),
            error: out.as_ref().err().map(|e| e.to_string()),
        };
        self.manifest.stages.retain(|s| s.stage != name);
        self.manifest.stages.push(record);
        match out {
            Ok(v) => Ok(v),
            Err(e) => {
                // the failing stage is recorded before the error propagates
                let _ = self.finish();
                Err(e.in_stage(name))
            }
        }
    }

    fn finish(&mut self) -> Result<RunManifest> {
        self.manifest.outputs = inventory(&self.dir)?;
        write_file(&self.dir, MANIFEST_FILE, to_json(&self.manifest)?)?;
        Ok(self.manifest.clone())
    }
}

/// Every file under `dir` except the manifest itself, sorted by path.
pub fn inventory(dir: &Path) -> Result<Vec<OutputFile>> {
    let mut out = Vec::new();
    let mut pending = vec![dir.to_path_buf()];
    while let Some(d) = pending.pop() {
        for entry in std::fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let entry = entry.map_err(|e| Error::io(&d, e))?;
            let path = entry.path();
            if path.is_dir() {
                pending.push(path);
                continue;
            }
            let rel = path
                .strip_prefix(dir)
                .map_err(|_| Error::invalid("inventory walked outside the run directory"))?
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            if rel == MANIFEST_FILE {
                continue;
            }
            let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
            out.push(OutputFile {
                path: rel,
                bytes: bytes.len() as u64,
                sha256: sha256_hex(&bytes),
            });
        }
    }
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

/// Runs the requested stages and writes every artifact under `out` (or the
/// config's output directory). Returns the manifest.
pub fn run_experiment(cfg: &ExperimentConfig, out: Option<&Path>, stages: Stages) -> Result<RunManifest> {
    cfg.validate()?;
    let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir.clone());
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut p = Pipeline::new(cfg, dir)?;
    let needs_models = !cfg.modes.is_empty() && (stages.train || stages.evaluate);

    if needs_models {
        let raw = p.stage("generate", |_| generate(cfg))?;
        let seeds = p.stage("partition", |_| partition(cfg, raw))?;
        let runs = if stages.train {
            p.stage("train", |dir| train(cfg, &seeds, dir))?
        } else {
            p.stage("load", |dir| load(cfg, &seeds, dir))?
        };
        if stages.evaluate && !cfg.eval.rhos.is_empty() {
            p.stage("evaluate", |dir| evaluate_runs(cfg, &seeds, &runs, dir))?;
        }
    }
    if stages.latency {
        if let Some(l) = &cfg.latency {
            p.stage("latency", |dir| write_latency(l, dir))?;
        }
    }
    p.finish()
}

fn generate(cfg: &ExperimentConfig) -> Result<Vec<(u64, LabeledDataset, LabeledDataset)>> {
    let spec = cfg.training()?.dataset;
    cfg.seeds()
        .into_iter()
        .map(|s| generate_synthetic(spec, s).map(|(train, test)| (s, train, test)))
        .collect()
}

fn partition(cfg: &ExperimentConfig, raw: Vec<(u64, LabeledDataset, LabeledDataset)>) -> Result<Vec<SeedData>> {
    let p = cfg.training()?.partition;
    raw.into_iter()
        .map(|(s, train, test)| {
            let clients = shard_partition(&train, p.num_shards, p.clients, p.shards_per_client, s)?;
            Ok(SeedData { seed: s, clients, test })
        })
        .collect()
}

/// Train configs in run order: seed, then mode, then λ.
fn plan(cfg: &ExperimentConfig) -> Result<Vec<TrainConfig>> {
    let base = cfg.training()?.train;
    let mut out = Vec::new();
    for s in cfg.seeds() {
        for &mode in &cfg.modes {
            for lambda in cfg.lambdas_for(mode) {
                out.push(TrainConfig {
                    mode,
                    lambda,
                    seed: s,
                    ..base.clone()
                });
            }
        }
    }
    Ok(out)
}

fn seed_data(seeds: &[SeedData], s: u64) -> Result<&SeedData> {
    seeds
        .iter()
        .find(|d| d.seed == s)
        .ok_or_else(|| Error::invalid(format!("no data for seed {s}")))
}

fn train(cfg: &ExperimentConfig, seeds: &[SeedData], dir: &Path) -> Result<Vec<TrainedRun>> {
    let model = &cfg.training()?.partition.model;
    let mut runs = Vec::new();
    for tc in plan(cfg)? {
        let data = seed_data(seeds, tc.seed)?;
        let (state, history) = run_training(&tc, data.clients.clone(), model, cfg.workers)?;
        let name = TrainedRun::checkpoint_name(tc.mode, tc.lambda, tc.seed);
        write_file(dir, &name, to_json(&state.checkpoint())?)?;
        runs.push(TrainedRun {
            mode: tc.mode,
            seed: tc.seed,
            lambda: tc.lambda,
            state,
            history,
        });
    }
    write_file(dir, HISTORY_FILE, history_csv(cfg, &runs)?)?;
    let results: Vec<TrainResult> = runs.iter().map(train_result).collect();
    write_file(dir, TRAIN_RESULTS_FILE, to_json(&results)?)?;
    Ok(runs)
}

fn load(cfg: &ExperimentConfig, seeds: &[SeedData], dir: &Path) -> Result<Vec<TrainedRun>> {
    let mut runs = Vec::new();
    let mut missing = Vec::new();
    for tc in plan(cfg)? {
        let name = TrainedRun::checkpoint_name(tc.mode, tc.lambda, tc.seed);
        if !dir.join(&name).is_file() {
            missing.push(name);
            continue;
        }
        let ckpt: FederationCheckpoint = serde_json::from_str(&read_file(dir, &name)?)?;
        let state = FederationState::restore(ckpt, seed_data(seeds, tc.seed)?.clients.clone())?;
        runs.push(TrainedRun {
            mode: tc.mode,
            seed: tc.seed,
            lambda: tc.lambda,
            state,
            history: History {
                mode: tc.mode,
                records: Vec::new(),
            },
        });
    }
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    Ok(runs)
}

fn train_result(r: &TrainedRun) -> TrainResult {
    let last = r.history.records.last();
    let norms = r.history.grad_norms();
    TrainResult {
        mode: r.mode,
        seed: r.seed,
        lambda: r.lambda,
        rounds: r.state.round,
        final_objective: last.and_then(|x| x.objective),
        final_server_loss: last.and_then(|x| x.server_loss),
        initial_grad_norm: norms.first().map(|x| x.1),
        min_grad_norm: norms.iter().map(|x| x.1).reduce(f64::min),
        checkpoint: TrainedRun::checkpoint_name(r.mode, r.lambda, r.seed),
    }
}

fn history_csv(cfg: &ExperimentConfig, runs: &[TrainedRun]) -> Result<String> {
    let mut s = String::from(
        "mode,seed,lambda,round,lr,client_loss,server_loss,objective,grad_norm_proxy,cumulative_lr,running_min,bound_rhs\n",
    );
    for r in runs {
        let constants = cfg.bound.as_ref().filter(|_| r.mode == Mode::Splitgp && r.lambda < 1.0);
        let trace = ConvergenceTrace::from_history(&r.history, constants.map(|b| (b, r.lambda)))?;
        for (rec, row) in r.history.records.iter().zip(&trace.rows) {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.mode,
                r.seed,
                r.lambda,
                rec.round,
                opt(rec.lr),
                opt(rec.client_loss),
                opt(rec.server_loss),
                opt(rec.objective),
                opt(rec.grad_norm),
                row.cumulative_lr,
                opt(row.running_min),
                opt(row.bound)
            );
        }
    }
    Ok(s)
}

/// Evaluation sets for every client at one ρ. The out-of-distribution draw
/// depends on the seed and client only, so sets for different ρ are nested
/// in distribution.
pub fn eval_sets(state: &FederationState, test: &LabeledDataset, rho: f64, s: u64) -> Result<Vec<EvalSet>> {
    state
        .clients
        .iter()
        .map(|c| build_eval_set(&c.data.label_set(), test, rho, seed::derive(s, &[stream::EVAL, c.id as u64])))
        .collect()
}

fn evaluate_runs(cfg: &ExperimentConfig, seeds: &[SeedData], runs: &[TrainedRun], dir: &Path) -> Result<()> {
    let grid = cfg.eval.thresholds.values();
    let mut csv = String::from(
        "mode,seed,lambda,client,rho,threshold,acc_main,acc_ood,acc_overall,client_fraction\n",
    );
    let mut cells = Vec::new();
    for r in runs {
        let test = &seed_data(seeds, r.seed)?.test;
        for &rho in &cfg.eval.rhos {
            let sets = eval_sets(&r.state, test, rho, r.seed)?;
            let (evals, best) = if r.mode.uses_client_exit() {
                sweep_thresholds(&r.state, &sets, &grid)?
            } else {
                (vec![evaluate(&r.state, &sets, Predictor::FullModel)?], 0)
            };
            for e in &evals {
                write_eval_rows(&mut csv, r, e);
            }
            cells.push(eval_cell(r, rho, &evals, best));
        }
    }
    write_file(dir, EVAL_FILE, csv)?;
    write_file(dir, EVAL_RESULTS_FILE, to_json(&cells)?)
}

fn write_eval_rows(csv: &mut String, r: &TrainedRun, e: &Evaluation) {
    let prefix = format!("{},{},{}", r.mode, r.seed, r.lambda);
    for c in &e.clients {
        let _ = writeln!(
            csv,
            "{prefix},{},{},{},{},{},{},{}",
            c.client,
            c.rho,
            opt(c.threshold),
            c.acc_main,
            opt(c.acc_ood),
            c.acc_overall,
            c.client_fraction
        );
    }
    let m: &EvalSummary = &e.summary;
    let _ = writeln!(
        csv,
        "{prefix},mean,{},{},{},{},{},{}",
        m.rho,
        opt(m.threshold),
        m.acc_main,
        opt(m.acc_ood),
        m.acc_overall,
        m.client_fraction
    );
}

fn eval_cell(r: &TrainedRun, rho: f64, evals: &[Evaluation], best: usize) -> EvalCell {
    let b = &evals[best].summary;
    EvalCell {
        mode: r.mode,
        seed: r.seed,
        lambda: r.lambda,
        rho,
        best_threshold: b.threshold,
        acc_main: b.acc_main,
        acc_ood: b.acc_ood,
        acc_overall: b.acc_overall,
        client_fraction: b.client_fraction,
        sweep: evals
            .iter()
            .filter_map(|e| {
                e.summary.threshold.map(|t| SweepPoint {
                    threshold: t,
                    acc_overall: e.summary.acc_overall,
                    client_fraction: e.summary.client_fraction,
                })
            })
            .collect(),
    }
}

/// Latency figures and rate-threshold verdicts for one parameter set.
pub fn latency_output(params: &LatencyParams, formula: latency::RateFormula, phi_min: f64) -> Result<LatencyOutput> {
    params.validate()?;
    let report = latency::latency_report(params);
    let (phi_range, phi_range_error) = match latency::feasible_phi_range(params, phi_min) {
        Ok(r) => (r, None),
        Err(e @ Error::Regime(_)) => (None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(LatencyOutput {
        params: params.clone(),
        tau_client_full: report.tau_client_full,
        tau_server_full: report.tau_server_full,
        tau_splitgp: report.tau_splitgp,
        rows: report.rows,
        client_rate_threshold: latency::pc_threshold(params),
        uplink_rate_threshold: latency::rate_threshold(params, formula),
        phi_range,
        phi_range_error,
    })
}

fn write_latency(l: &crate::harness::config::LatencyConfig, dir: &Path) -> Result<()> {
    let out = latency_output(&l.params, l.formula, l.phi_min.unwrap_or(0.0))?;
    write_file(dir, LATENCY_FILE, to_json(&out)?)?;
    for (axis, values) in [(SweepAxis::ClientRate, &l.client_rates), (SweepAxis::UplinkRate, &l.uplink_rates)] {
        if !values.is_empty() {
            let rows = latency::sweep(&l.params, axis, values);
            write_file(dir, &format!("latency_{}.csv", axis.as_str()), latency::sweep_csv(axis, &rows))?;
        }
    }
    Ok(())
}

/// Reads `eval_results.json` from a run directory.
pub fn load_eval_cells(dir: &Path) -> Result<Vec<EvalCell>> {
    Ok(serde_json::from_str(&read_file(dir, EVAL_RESULTS_FILE)?)?)
}

/// Reads `train_results.json` from a run directory.
pub fn load_train_results(dir: &Path) -> Result<Vec<TrainResult>> {
    Ok(serde_json::from_str(&read_file(dir, TRAIN_RESULTS_FILE)?)?)
}

pub fn load_manifest(dir: &Path) -> Result<RunManifest> {
    Ok(serde_json::from_str(&read_file(dir, MANIFEST_FILE)?)?)
}
