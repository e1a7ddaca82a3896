//! Convergence instrumentation: the personalization penalty ε(λ), the
//! right-hand side of the convergence bound, and the empirical squared
//! gradient norm of the global objective.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::fedsim::{schedule_offset, FederationState, History};
use crate::nn::{self, GradientSet, LayeredModel};

/// `16 (c+4) G² L² λ² (2-λ²) / (c (1-λ²)²)`.
pub fn epsilon_lambda(lambda: f64, c: f64, g: f64, l: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&lambda) {
        return Err(Error::invalid(format!("epsilon requires 0 <= lambda < 1, got {lambda}")));
    }
    if !(c > 0.0 && g > 0.0 && l > 0.0) {
        return Err(Error::invalid("c, G and L must be positive"));
    }
    let l2 = lambda * lambda;
    Ok(16.0 * (c + 4.0) * g * g * l * l * l2 * (2.0 - l2) / (c * (1.0 - l2) * (1.0 - l2)))
}

fn default_optimum() -> f64 {
    0.0
}

/// Constants of the smoothness / bounded-gradient / bounded-variance
/// assumptions plus the schedule and the objective gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConstants {
    pub smoothness: f64,
    pub grad_bound: f64,
    /// One stochastic-gradient deviation per client.
    pub sigmas: Vec<f64>,
    pub c: f64,
    pub eta0: f64,
    pub initial_objective: f64,
    /// Lower bound of the objective; cross-entropy is bounded below by 0.
    #[serde(default = "default_optimum")]
    pub optimum: f64,
}

impl BoundConstants {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness > 0.0 && self.grad_bound > 0.0 && self.c > 0.0 && self.eta0 > 0.0) {
            return Err(Error::invalid("L, G, c and eta0 must be positive"));
        }
        if self.sigmas.is_empty() || self.sigmas.iter().any(|&s| !(s >= 0.0)) {
            return Err(Error::invalid("need one non-negative sigma per client"));
        }
        Ok(())
    }

    fn sigma_term(&self) -> f64 {
        let k = self.sigmas.len() as f64;
        self.smoothness * self.sigmas.iter().map(|s| s * s).sum::<f64>() / k
    }
}

/// Partial sums of the step sizes.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct StepSums {
    gamma: f64,
    sq: f64,
    cube: f64,
}

impl StepSums {
    fn push(&mut self, eta: f64) {
        self.gamma += eta;
        self.sq += eta * eta;
        self.cube += eta * eta * eta;
    }

    fn rhs(&self, bc: &BoundConstants, eps: f64) -> f64 {
        ((bc.initial_objective - bc.optimum) + bc.sigma_term() * self.sq + eps * self.cube) / self.gamma
    }
}

/// Right-hand side of the convergence bound after `rounds` rounds of the
/// schedule `eta0 / (a + t)`.
pub fn bound_rhs(rounds: usize, bc: &BoundConstants, lambda: f64) -> Result<f64> {
    bc.validate()?;
    if rounds == 0 {
        return Err(Error::invalid("bound needs at least one round"));
    }
    let a = schedule_offset(bc.c, lambda)?;
    let first = bc.eta0 / a;
    if first > 1.0 / (2.0 * bc.smoothness) {
        return Err(Error::invalid(format!(
            "step size eta_0 = {first} exceeds 1/(2L) = {}",
            1.0 / (2.0 * bc.smoothness)
        )));
    }
    let eps = epsilon_lambda(lambda, bc.c, bc.grad_bound, bc.smoothness)?;
    let mut sums = StepSums::default();
    for t in 0..rounds {
        sums.push(bc.eta0 / (a + t as f64));
    }
    Ok(sums.rhs(bc, eps))
}

/// Full-batch gradient of `F(v) = (1/K) Σ_j F_j(v)` at `v = [phi, head, theta]`,
/// with each `F_j` the two-exit objective on dataset `j`.
pub fn global_gradient(
    phi: &LayeredModel,
    head: &LayeredModel,
    theta: &LayeredModel,
    datasets: &[&LabeledDataset],
    gamma: f64,
) -> Result<(GradientSet, GradientSet, GradientSet, f64)> {
    let k = datasets.len() as f64;
    let mut gp = GradientSet::zeros_like(phi);
    let mut gh = GradientSet::zeros_like(head);
    let mut gt = GradientSet::zeros_like(theta);
    let mut objective = 0.0;
    for d in datasets {
        let g = nn::backward_multi_exit(phi, head, theta, d.samples(), gamma)?;
        gp.add_scaled(&g.phi, 1.0 / k)?;
        gh.add_scaled(&g.head, 1.0 / k)?;
        gt.add_scaled(&g.theta, 1.0 / k)?;
        objective += g.objective / k;
    }
    Ok((gp, gh, gt, objective))
}

/// `(1/K) Σ_k ‖∇F(v_k)‖²` with `v_k = [φ_k, h_k, θ]` and `F` evaluated on
/// every client's full dataset.
pub fn grad_norm_proxy(state: &FederationState) -> Result<f64> {
    let datasets: Vec<&LabeledDataset> = state.clients.iter().map(|c| &c.data).collect();
    let norms = state
        .clients
        .par_iter()
        .map(|c| {
            let (gp, gh, gt, _) = global_gradient(&c.phi, &c.head, c.theta(&state.theta), &datasets, state.gamma)
                .map_err(|e| e.with_context(|| format!("gradient proxy, client {}", c.id)))?;
            Ok(gp.norm_sq() + gh.norm_sq() + gt.norm_sq())
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(norms.iter().sum::<f64>() / norms.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TraceRow {
    pub round: usize,
    /// Step size used in the round that produced this state.
    pub lr: Option<f64>,
    /// Cumulative step size Γ_t.
    pub cumulative_lr: f64,
    pub grad_norm: Option<f64>,
    pub running_min: Option<f64>,
    pub bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceTrace {
    pub rows: Vec<TraceRow>,
}

impl ConvergenceTrace {
    /// Builds the trace from a training history. When constants are given the
    /// bound is evaluated on the step sizes actually used.
    pub fn from_history(history: &History, constants: Option<(&BoundConstants, f64)>) -> Result<Self> {
        let eps = match constants {
            Some((bc, lambda)) => Some(epsilon_lambda(lambda, bc.c, bc.grad_bound, bc.smoothness)?),
            None => None,
        };
        let mut sums = StepSums::default();
        let mut running: Option<f64> = None;
        let mut rows = Vec::with_capacity(history.records.len());
        for r in &history.records {
            if let Some(lr) = r.lr {
                sums.push(lr);
            }
            if let Some(g) = r.grad_norm {
                running = Some(running.map_or(g, |m| m.min(g)));
            }
            let bound = match (constants, eps) {
                (Some((bc, _)), Some(eps)) if sums.gamma > 0.0 => Some(sums.rhs(bc, eps)),
                _ => None,
            };
            rows.push(TraceRow {
                round: r.round,
                lr: r.lr,
                cumulative_lr: sums.gamma,
                grad_norm: r.grad_norm,
                running_min: running,
                bound,
            });
        }
        Ok(ConvergenceTrace { rows })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from("round,lr,cumulative_lr,grad_norm_proxy,running_min,bound_rhs\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round,
                opt(r.lr),
                r.cumulative_lr,
                opt(r.grad_norm),
                opt(r.running_min),
                opt(r.bound)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constants() -> BoundConstants {
        BoundConstants {
            smoothness: 1.0,
            grad_bound: 1.0,
            sigmas: vec![1.0; 4],
            c: 1.0,
            eta0: 1.0,
            initial_objective: 2.3,
            optimum: 0.0,
        }
    }

    #[test]
    fn epsilon_values() {
        assert_eq!(epsilon_lambda(0.0, 1.0, 1.0, 1.0).unwrap(), 0.0);
        // 16·5·0.04·1.96 / 0.9216
        let direct = 16.0 * 5.0 * 0.04 * 1.96 / 0.9216;
        let eps = epsilon_lambda(0.2, 1.0, 1.0, 1.0).unwrap();
        assert!((eps - direct).abs() < 1e-12);
        assert!((eps - 6.80556).abs() < 1e-4);
        assert!(epsilon_lambda(1.0, 1.0, 1.0, 1.0).is_err());
        assert!(epsilon_lambda(0.5, 0.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn step_condition_enforced() {
        let mut bc = constants();
        bc.eta0 = 100.0;
        assert!(bound_rhs(10, &bc, 0.2).is_err());
        assert!(bound_rhs(0, &constants(), 0.2).is_err());
    }

    #[test]
    fn lambda_zero_drops_third_term() {
        let bc = constants();
        let a: f64 = 5.0;
        let etas: Vec<f64> = (0..100).map(|t| 1.0 / (a + t as f64)).collect();
        let gamma: f64 = etas.iter().sum();
        let sq: f64 = etas.iter().map(|e| e * e).sum();
        let expected = (2.3 + 1.0 * sq) / gamma;
        assert!((bound_rhs(100, &bc, 0.0).unwrap() - expected).abs() < 1e-12);
    }
}
