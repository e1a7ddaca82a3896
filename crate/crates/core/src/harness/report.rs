//! Human-readable and JSON summaries of a completed run directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fedsim::Mode;
use crate::harness::config::ExperimentConfig;
use crate::harness::experiment::{
    self, latency_output, EvalCell, LatencyOutput, TrainResult, CONFIG_FILE, EVAL_FILE, EVAL_RESULTS_FILE,
    HISTORY_FILE, LATENCY_FILE, MANIFEST_FILE, TRAIN_RESULTS_FILE,
};

pub const SUMMARY_TEXT: &str = "summary.txt";
pub const SUMMARY_JSON: &str = "summary.json";

/// Seed-averaged accuracy of one (mode, λ, ρ) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub mode: Mode,
    pub lambda: f64,
    pub rho: f64,
    pub seeds: usize,
    pub acc_overall: f64,
    pub acc_min: f64,
    pub acc_max: f64,
    /// Threshold maximizing the seed-averaged accuracy (routed modes only).
    pub best_threshold: Option<f64>,
    /// Seed-averaged client-exit fraction β̂ at `best_threshold`.
    pub client_fraction: Option<f64>,
}

/// Latency verdicts with the offloaded fraction set to `1 - β̂`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredLatency {
    pub lambda: f64,
    pub rho: f64,
    pub client_fraction: f64,
    pub latency: LatencyOutput,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub config_sha256: String,
    pub training: Vec<TrainResult>,
    pub accuracy: Vec<AccuracyRow>,
    pub latency: Option<LatencyOutput>,
    pub measured_latency: Vec<MeasuredLatency>,
}

fn required_files(cfg: &ExperimentConfig) -> Vec<&'static str> {
    let mut files = vec![CONFIG_FILE, MANIFEST_FILE];
    if !cfg.modes.is_empty() {
        files.extend([HISTORY_FILE, TRAIN_RESULTS_FILE]);
        if !cfg.eval.rhos.is_empty() {
            files.extend([EVAL_FILE, EVAL_RESULTS_FILE]);
        }
    }
    if cfg.latency.is_some() {
        files.push(LATENCY_FILE);
    }
    files
}

/// Reads a completed run, writes `summary.txt` and `summary.json` into it
/// and returns the summary.
pub fn emit_report(dir: &Path) -> Result<Summary> {
    if !dir.join(CONFIG_FILE).is_file() {
        return Err(Error::MissingFiles(vec![dir.join(CONFIG_FILE).display().to_string()]));
    }
    let cfg = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
    let missing: Vec<String> = required_files(&cfg)
        .into_iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| dir.join(f).display().to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingFiles(missing));
    }
    let manifest = experiment::load_manifest(dir)?;
    let training = if cfg.modes.is_empty() {
        Vec::new()
    } else {
        experiment::load_train_results(dir)?
    };
    let cells = if cfg.modes.is_empty() || cfg.eval.rhos.is_empty() {
        Vec::new()
    } else {
        experiment::load_eval_cells(dir)?
    };
    let accuracy = accuracy_rows(&cells);
    let (latency, measured_latency) = match &cfg.latency {
        Some(l) => {
            let phi_min = l.phi_min.unwrap_or(0.0);
            let base = latency_output(&l.params, l.formula, phi_min)?;
            let measured = accuracy
                .iter()
                .filter(|r| r.mode == Mode::Splitgp)
                .filter_map(|r| r.client_fraction.map(|b| (r, b)))
                .map(|(r, b)| {
                    let mut p = l.params.clone();
                    p.beta = 1.0 - b;
                    Ok(MeasuredLatency {
                        lambda: r.lambda,
                        rho: r.rho,
                        client_fraction: b,
                        latency: latency_output(&p, l.formula, phi_min)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(base), measured)
        }
        None => (None, Vec::new()),
    };
    let summary = Summary {
        name: cfg.name.clone(),
        config_sha256: manifest.config_sha256,
        training,
        accuracy,
        latency,
        measured_latency,
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    let path = dir.join(SUMMARY_JSON);
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join(SUMMARY_TEXT);
    std::fs::write(&path, render(&summary)).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}

/// Groups cells by (mode, λ, ρ) and averages over seeds. The best threshold
/// maximizes the seed-mean accuracy; ties go to the larger threshold.
pub fn accuracy_rows(cells: &[EvalCell]) -> Vec<AccuracyRow> {
    let mut groups: BTreeMap<(usize, u64, u64), Vec<&EvalCell>> = BTreeMap::new();
    for c in cells {
        let mode_idx = Mode::ALL.iter().position(|m| *m == c.mode).unwrap_or(0);
        groups
            .entry((mode_idx, c.lambda.to_bits(), c.rho.to_bits()))
            .or_default()
            .push(c);
    }
    groups
        .into_values()
        .map(|g| {
            let n = g.len() as f64;
            let first = g[0];
            let (best_threshold, routed_acc, client_fraction) = best_routed(&g);
            let accs: Vec<f64> = g.iter().map(|c| c.acc_overall).collect();
            AccuracyRow {
                mode: first.mode,
                lambda: first.lambda,
                rho: first.rho,
                seeds: g.len(),
                acc_overall: routed_acc.unwrap_or_else(|| accs.iter().sum::<f64>() / n),
                acc_min: accs.iter().copied().fold(f64::INFINITY, f64::min),
                acc_max: accs.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                best_threshold,
                client_fraction,
            }
        })
        .collect()
}

fn best_routed(group: &[&EvalCell]) -> (Option<f64>, Option<f64>, Option<f64>) {
    let sweep = &group[0].sweep;
    if sweep.is_empty() || group.iter().any(|c| c.sweep.len() != sweep.len()) {
        return (None, None, None);
    }
    let n = group.len() as f64;
    let mean = |i: usize, f: fn(&experiment::SweepPoint) -> f64| group.iter().map(|c| f(&c.sweep[i])).sum::<f64>() / n;
    let mut best = 0;
    for i in 0..sweep.len() {
        if mean(i, |p| p.acc_overall) >= mean(best, |p| p.acc_overall) {
            best = i;
        }
    }
    (
        Some(sweep[best].threshold),
        Some(mean(best, |p| p.acc_overall)),
        Some(mean(best, |p| p.client_fraction)),
    )
}

fn render(s: &Summary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "run: {}", if s.name.is_empty() { "(unnamed)" } else { &s.name });
    let _ = writeln!(out, "config sha256: {}", s.config_sha256);

    if !s.training.is_empty() {
        let _ = writeln!(out, "\ntraining");
        let _ = writeln!(out, "{:<13} {:>6} {:>6} {:>7} {:>12} {:>12}", "mode", "lambda", "seed", "rounds", "objective", "min |grad|^2");
        for t in &s.training {
            let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<13} {:>6} {:>6} {:>7} {:>12} {:>12}",
                t.mode.as_str(),
                t.lambda,
                t.seed,
                t.rounds,
                f(t.final_objective),
                f(t.min_grad_norm)
            );
        }
    }

    if !s.accuracy.is_empty() {
        let _ = writeln!(out, "\naccuracy (mean over seeds)");
        let _ = writeln!(
            out,
            "{:<13} {:>6} {:>5} {:>8} {:>8} {:>8} {:>6} {:>6}",
            "mode", "lambda", "rho", "acc", "min", "max", "E_th", "beta"
        );
        for r in &s.accuracy {
            let th = r.best_threshold.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
            let b = r.client_fraction.map(|x| format!("{x:.3}")).unwrap_or_else(|| "-".into());
            let _ = writeln!(
                out,
                "{:<13} {:>6} {:>5} {:>8.4} {:>8.4} {:>8.4} {:>6} {:>6}",
                r.mode.as_str(),
                r.lambda,
                r.rho,
                r.acc_overall,
                r.acc_min,
                r.acc_max,
                th,
                b
            );
        }
    }

    if let Some(l) = &s.latency {
        let _ = writeln!(out, "\nlatency (configured offload fraction {})", l.params.beta);
        write_latency(&mut out, l);
    }
    for m in &s.measured_latency {
        let _ = writeln!(
            out,
            "\nlatency at measured client-exit fraction {:.3} (lambda {}, rho {})",
            m.client_fraction, m.lambda, m.rho
        );
        write_latency(&mut out, &m.latency);
    }
    out
}

fn write_latency(out: &mut String, l: &LatencyOutput) {
    let _ = writeln!(out, "  full model at client:  {:.4}", l.tau_client_full);
    let _ = writeln!(out, "  full model at server:  {:.4}", l.tau_server_full);
    let _ = writeln!(out, "  split deployment:      {:.4}", l.tau_splitgp);
    let _ = writeln!(
        out,
        "  split beats client-only at P_C = {}: {}",
        l.params.client_rate,
        verdict(l.client_rate_threshold.admits(l.params.client_rate))
    );
    let _ = writeln!(
        out,
        "  split beats server-only at R = {}: {}",
        l.params.uplink_rate,
        verdict(l.uplink_rate_threshold.admits(l.params.uplink_rate))
    );
}

fn verdict(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}
