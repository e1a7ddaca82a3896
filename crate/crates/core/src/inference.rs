//! Entropy-thresholded routing between the client exit and the server exit,
//! and per-client evaluation over mixed test sets.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{EvalSet, Sample};
use crate::error::{Error, Result};
use crate::fedsim::{ClientState, FederationState};
use crate::nn::{self, LayeredModel};

/// Threshold grid searched when the threshold is picked per evaluation.
pub const ENTROPY_GRID: [f64; 8] = [0.05, 0.1, 0.2, 0.4, 0.8, 1.2, 1.6, 2.3];

/// Natural-log Shannon entropy; zero-probability terms contribute nothing.
pub fn entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() || probs.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
        return Err(Error::invalid("probabilities must be finite and non-negative"));
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("probabilities sum to {sum}, not 1")));
    }
    Ok(entropy_unchecked(probs))
}

fn entropy_unchecked(probs: &[f64]) -> f64 {
    let h: f64 = probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| -p * p.ln())
        .sum();
    // rounding can push a one-hot distribution a hair below zero
    h.max(0.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Exit {
    Client,
    Server,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingOutcome {
    pub prediction: usize,
    pub exit: Exit,
    /// Entropy of the client-exit softmax.
    pub entropy: f64,
}

/// Predicts at the client exit when its entropy is at most `threshold`,
/// otherwise forwards the cut-layer feature to the server segment.
pub fn route_and_predict(
    phi: &LayeredModel,
    head: &LayeredModel,
    theta: &LayeredModel,
    z: &[f64],
    threshold: f64,
) -> Result<RoutingOutcome> {
    let cut = phi.forward(z)?;
    let probs = nn::softmax(&head.forward(&cut)?);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(Error::Numerical {
            context: "inference".into(),
            detail: "non-finite client-exit probabilities".into(),
        });
    }
    let entropy = entropy_unchecked(&probs);
    if entropy <= threshold {
        Ok(RoutingOutcome {
            prediction: nn::argmax(&probs),
            exit: Exit::Client,
            entropy,
        })
    } else {
        let logits = theta.forward(&cut)?;
        Ok(RoutingOutcome {
            prediction: nn::argmax(&logits),
            exit: Exit::Server,
            entropy,
        })
    }
}

/// Server-exit prediction only (full model `[phi, theta]`).
pub fn predict_full(phi: &LayeredModel, theta: &LayeredModel, z: &[f64]) -> Result<usize> {
    Ok(nn::argmax(&theta.forward(&phi.forward(z)?)?))
}

/// How a client turns a sample into a prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Predictor {
    /// Entropy routing at the given threshold.
    Routed(f64),
    /// Always the full model.
    FullModel,
}

/// Integer tallies for one client evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Tally {
    pub main_total: usize,
    pub main_correct: usize,
    pub ood_total: usize,
    pub ood_correct: usize,
    pub client_total: usize,
    pub client_correct: usize,
    pub server_total: usize,
    pub server_correct: usize,
}

impl Tally {
    fn add(self, o: Tally) -> Tally {
        Tally {
            main_total: self.main_total + o.main_total,
            main_correct: self.main_correct + o.main_correct,
            ood_total: self.ood_total + o.ood_total,
            ood_correct: self.ood_correct + o.ood_correct,
            client_total: self.client_total + o.client_total,
            client_correct: self.client_correct + o.client_correct,
            server_total: self.server_total + o.server_total,
            server_correct: self.server_correct + o.server_correct,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub client: usize,
    pub rho: f64,
    /// `None` for full-model predictors.
    pub threshold: Option<f64>,
    pub acc_main: f64,
    /// `None` when the evaluation set has no out-of-distribution part.
    pub acc_ood: Option<f64>,
    pub acc_overall: f64,
    /// Fraction of samples answered at the client exit.
    pub client_fraction: f64,
    pub acc_client_exit: Option<f64>,
    pub acc_server_exit: Option<f64>,
    pub main_count: usize,
    pub ood_count: usize,
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

impl EvalReport {
    fn from_tally(client: usize, rho: f64, threshold: Option<f64>, t: Tally) -> Self {
        let total = t.main_total + t.ood_total;
        EvalReport {
            client,
            rho,
            threshold,
            acc_main: ratio(t.main_correct, t.main_total).unwrap_or(0.0),
            acc_ood: ratio(t.ood_correct, t.ood_total),
            acc_overall: ratio(t.main_correct + t.ood_correct, total).unwrap_or(0.0),
            client_fraction: ratio(t.client_total, total).unwrap_or(0.0),
            acc_client_exit: ratio(t.client_correct, t.client_total),
            acc_server_exit: ratio(t.server_correct, t.server_total),
            main_count: t.main_total,
            ood_count: t.ood_total,
        }
    }
}

/// Macro-averages over clients (unweighted means).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub rho: f64,
    pub threshold: Option<f64>,
    pub acc_main: f64,
    pub acc_ood: Option<f64>,
    pub acc_overall: f64,
    pub client_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub clients: Vec<EvalReport>,
    pub summary: EvalSummary,
}

fn tally_samples(
    client: &ClientState,
    theta: &LayeredModel,
    samples: &[Sample],
    main: bool,
    predictor: Predictor,
) -> Result<Tally> {
    samples
        .par_iter()
        .map(|s| {
            let (pred, exit) = match predictor {
                Predictor::Routed(th) => {
                    let r = route_and_predict(&client.phi, &client.head, theta, &s.features, th)?;
                    (r.prediction, r.exit)
                }
                Predictor::FullModel => (predict_full(&client.phi, theta, &s.features)?, Exit::Server),
            };
            let ok = usize::from(pred == s.label);
            let mut t = Tally::default();
            if main {
                t.main_total = 1;
                t.main_correct = ok;
            } else {
                t.ood_total = 1;
                t.ood_correct = ok;
            }
            match exit {
                Exit::Client => {
                    t.client_total = 1;
                    t.client_correct = ok;
                }
                Exit::Server => {
                    t.server_total = 1;
                    t.server_correct = ok;
                }
            }
            Ok(t)
        })
        .try_reduce(Tally::default, |a, b| Ok(a.add(b)))
}

/// Evaluates one client on its evaluation set.
pub fn evaluate_client(
    client: &ClientState,
    theta: &LayeredModel,
    set: &EvalSet,
    predictor: Predictor,
) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(Error::invalid(format!("client {} has an empty evaluation set", client.id)));
    }
    let t = tally_samples(client, theta, set.main.samples(), true, predictor)?
        .add(tally_samples(client, theta, set.ood.samples(), false, predictor)?);
    let threshold = match predictor {
        Predictor::Routed(th) => Some(th),
        Predictor::FullModel => None,
    };
    Ok(EvalReport::from_tally(client.id, set.rho, threshold, t))
}

/// Per-client reports plus the unweighted mean over clients.
pub fn evaluate(state: &FederationState, sets: &[EvalSet], predictor: Predictor) -> Result<Evaluation> {
    if sets.len() != state.clients.len() {
        return Err(Error::invalid(format!(
            "{} evaluation sets for {} clients",
            sets.len(),
            state.clients.len()
        )));
    }
    let clients = state
        .clients
        .iter()
        .zip(sets)
        .map(|(c, s)| evaluate_client(c, c.theta(&state.theta), s, predictor))
        .collect::<Result<Vec<_>>>()?;
    let k = clients.len() as f64;
    let mean = |f: &dyn Fn(&EvalReport) -> f64| clients.iter().map(f).sum::<f64>() / k;
    let acc_ood = clients
        .iter()
        .map(|r| r.acc_ood)
        .sum::<Option<f64>>()
        .map(|s| s / k);
    let summary = EvalSummary {
        rho: clients.first().map(|r| r.rho).unwrap_or(0.0),
        threshold: clients.first().and_then(|r| r.threshold),
        acc_main: mean(&|r| r.acc_main),
        acc_ood,
        acc_overall: mean(&|r| r.acc_overall),
        client_fraction: mean(&|r| r.client_fraction),
    };
    Ok(Evaluation { clients, summary })
}

/// Evaluates every threshold of `grid` and returns all results plus the
/// index of the best macro accuracy. Ties go to the larger threshold, which
/// keeps more samples at the client.
pub fn sweep_thresholds(state: &FederationState, sets: &[EvalSet], grid: &[f64]) -> Result<(Vec<Evaluation>, usize)> {
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    let evals = grid
        .iter()
        .map(|&th| evaluate(state, sets, Predictor::Routed(th)))
        .collect::<Result<Vec<_>>>()?;
    let mut best = 0;
    for (i, e) in evals.iter().enumerate() {
        if e.summary.acc_overall >= evals[best].summary.acc_overall {
            best = i;
        }
    }
    Ok((evals, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Layer;

    #[test]
    #[allow(clippy::approx_constant)]
    fn entropy_examples() {
        let uniform = vec![0.1; 10];
        assert!((entropy(&uniform).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((entropy(&uniform).unwrap() - 2.302585).abs() < 1e-6);
        let mut one_hot = vec![0.0; 10];
        one_hot[3] = 1.0;
        assert_eq!(entropy(&one_hot).unwrap(), 0.0);
        let mut two = vec![0.0; 10];
        two[0] = 0.5;
        two[1] = 0.5;
        assert!((entropy(&two).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(entropy(&[0.5, 0.6]).is_err());
        assert!(entropy(&[-0.1, 1.1]).is_err());
    }

    fn zero_model(in_dim: usize, out: usize) -> LayeredModel {
        LayeredModel::new(vec![Layer::dense(in_dim, out, vec![0.0; in_dim * out], vec![0.0; out]).unwrap()]).unwrap()
    }

    #[test]
    fn routing_extremes() {
        let phi = zero_model(2, 3);
        let head = zero_model(3, 10);
        let mut theta = zero_model(3, 10);
        if let Some(b) = theta.param_blocks_mut().nth(1) {
            b[4] = 1.0;
        }
        // uniform client exit: entropy = ln 10
        let r = route_and_predict(&phi, &head, &theta, &[1.0, 2.0], 10f64.ln() + 1e-9).unwrap();
        assert_eq!((r.exit, r.prediction), (Exit::Client, 0));
        let r = route_and_predict(&phi, &head, &theta, &[1.0, 2.0], -1.0).unwrap();
        assert_eq!((r.exit, r.prediction), (Exit::Server, 4));
        let r = route_and_predict(&phi, &head, &theta, &[1.0, 2.0], 1.0).unwrap();
        assert_eq!(r.exit, Exit::Server);
    }
}
