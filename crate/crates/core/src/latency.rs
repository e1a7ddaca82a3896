//! Analytic inference-time model for three deployments: full model on the
//! client, full model on the server, and the split deployment with an early
//! client exit. Times are proportional to parameter counts over compute rates
//! plus uplink feature volume over the uplink rate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyParams {
    /// Client compute rate (parameters per unit time).
    pub client_rate: f64,
    /// Server compute rate.
    pub server_rate: f64,
    /// Uplink rate (feature entries per unit time).
    pub uplink_rate: f64,
    /// Input dimension q.
    pub input_dim: f64,
    /// Cut-layer dimension q_c.
    pub cut_dim: f64,
    /// β. Weights the uplink and server terms of τ, so it acts as the
    /// offloaded fraction; feed `1 - client_exit_fraction` when it comes from
    /// a measured routing rate.
    pub beta: f64,
    pub phi_size: f64,
    pub head_size: f64,
    pub theta_size: f64,
    /// Number of test samples |D|.
    pub samples: f64,
    /// Per-sample latency budget τ′.
    #[serde(default)]
    pub budget: f64,
}

impl LatencyParams {
    /// Split CNN sizes at a reference compute/rate operating point with
    /// `q = q_c = 784`.
    pub fn fixture() -> Self {
        LatencyParams {
            client_rate: 20.0,
            server_rate: 100.0,
            uplink_rate: 1.0,
            input_dim: 784.0,
            cut_dim: 784.0,
            beta: 0.1,
            phi_size: 387_840.0,
            head_size: 23_050.0,
            theta_size: 3_480_330.0,
            samples: 1.0,
            budget: 0.0,
        }
    }

    pub fn full_size(&self) -> f64 {
        self.phi_size + self.theta_size
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("latency.client_rate", self.client_rate),
            ("latency.server_rate", self.server_rate),
            ("latency.uplink_rate", self.uplink_rate),
        ];
        for (field, v) in positive {
            if !(v > 0.0) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        let non_negative = [
            ("latency.input_dim", self.input_dim),
            ("latency.cut_dim", self.cut_dim),
            ("latency.phi_size", self.phi_size),
            ("latency.head_size", self.head_size),
            ("latency.theta_size", self.theta_size),
            ("latency.samples", self.samples),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, "must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::config("latency.beta", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// τ₁: full model at the client.
pub fn tau_client_full(p: &LatencyParams) -> f64 {
    p.full_size() * p.samples / p.client_rate
}

/// τ₂: raw samples uploaded, full model at the server.
pub fn tau_server_full(p: &LatencyParams) -> f64 {
    p.input_dim * p.samples / p.uplink_rate + p.full_size() * p.samples / p.server_rate
}

/// τ: client segment plus head for every sample, uplink and server segment
/// weighted by β.
pub fn tau_splitgp(p: &LatencyParams) -> f64 {
    let b = p.beta;
    (p.phi_size + p.head_size) * p.samples / p.client_rate
        + b * p.cut_dim * p.samples / p.uplink_rate
        + b * p.theta_size * p.samples / p.server_rate
}

/// Storage, computation and communication per deployment, plus its latency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResourceRow {
    pub method: String,
    pub storage: f64,
    pub computation: f64,
    pub communication: f64,
    pub inference_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LatencyReport {
    pub tau_client_full: f64,
    pub tau_server_full: f64,
    pub tau_splitgp: f64,
    pub rows: Vec<ResourceRow>,
}

/// Resource accounting for the three deployments.
pub fn latency_report(p: &LatencyParams) -> LatencyReport {
    let d = p.samples;
    let rows = vec![
        ResourceRow {
            method: "server_full".into(),
            storage: 0.0,
            computation: 0.0,
            communication: p.input_dim * d,
            inference_time: tau_server_full(p),
        },
        ResourceRow {
            method: "client_full".into(),
            storage: p.full_size(),
            computation: p.full_size() * d,
            communication: 0.0,
            inference_time: tau_client_full(p),
        },
        ResourceRow {
            method: "splitgp".into(),
            storage: p.phi_size + p.head_size,
            computation: (p.phi_size + p.head_size) * d,
            communication: p.beta * p.cut_dim * d,
            inference_time: tau_splitgp(p),
        },
    ];
    LatencyReport {
        tau_client_full: tau_client_full(p),
        tau_server_full: tau_server_full(p),
        tau_splitgp: tau_splitgp(p),
        rows,
    }
}

/// Feasible client-segment sizes `[lower, upper]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiRange {
    pub lower: f64,
    pub upper: f64,
}

/// Range of `|φ|` meeting both the per-sample budget τ′ (with `|θ| = |w| - |φ|`,
/// `|w|` taken from the params) and the minimum size `phi_min`. `None` when
/// the budget cannot be met.
pub fn feasible_phi_range(p: &LatencyParams, phi_min: f64) -> Result<Option<PhiRange>> {
    let b = p.beta;
    let denom = p.server_rate - b * p.client_rate;
    if !(denom > 0.0) {
        return Err(Error::Regime(format!(
            "server_rate - beta * client_rate = {denom} must be positive"
        )));
    }
    let slack = p.budget - b * p.cut_dim / p.uplink_rate - p.head_size / p.client_rate - b * p.full_size() / p.server_rate;
    let upper = p.client_rate * p.server_rate * slack / denom;
    Ok((upper >= phi_min).then_some(PhiRange { lower: phi_min, upper }))
}

/// Verdict of a threshold comparison.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Threshold {
    /// The inequality holds for every positive value.
    Always,
    /// It holds for no positive value.
    Never,
    /// It holds exactly when the variable is at most the value.
    AtMost(f64),
    /// It holds exactly when the variable is at least the value.
    AtLeast(f64),
}

impl Threshold {
    pub fn admits(&self, x: f64) -> bool {
        match *self {
            Threshold::Always => true,
            Threshold::Never => false,
            Threshold::AtMost(v) => x <= v,
            Threshold::AtLeast(v) => x >= v,
        }
    }
}

/// Client compute rate below which the split deployment is no slower than the
/// full model at the client: `(|θ| - |h|) / (β (q_c/R + |θ|/P_S))`.
///
/// With `β = 0` the comparison no longer involves the client
/// rate: the split deployment wins iff `|h| <= |θ|`.
pub fn pc_threshold(p: &LatencyParams) -> Threshold {
    let b = p.beta;
    if b == 0.0 {
        return if p.head_size <= p.theta_size {
            Threshold::Always
        } else {
            Threshold::Never
        };
    }
    let value = (p.theta_size - p.head_size) / (b * (p.cut_dim / p.uplink_rate + p.theta_size / p.server_rate));
    Threshold::AtMost(value)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RateFormula {
    /// Closed form with the full-model server term, evaluated verbatim.
    #[serde(rename = "closed_form")]
    ClosedForm,
    /// Direct rearrangement of τ ≤ τ₂.
    #[default]
    Exact,
}

/// Uplink rates at which the split deployment is no slower than uploading
/// raw samples to a server-hosted full model.
pub fn rate_threshold(p: &LatencyParams, formula: RateFormula) -> Threshold {
    let b = p.beta;
    let numer = p.input_dim - b * p.cut_dim;
    match formula {
        RateFormula::ClosedForm => {
            let denom = (p.phi_size + p.head_size) / p.client_rate - (1.0 - b) * p.full_size() / p.server_rate;
            Threshold::AtMost(numer / denom)
        }
        RateFormula::Exact => {
            // τ ≤ τ₂  ⟺  numer / R ≥ rhs
            let rhs = (p.phi_size + p.head_size) / p.client_rate - (p.phi_size + (1.0 - b) * p.theta_size) / p.server_rate;
            if rhs > 0.0 {
                if numer > 0.0 {
                    Threshold::AtMost(numer / rhs)
                } else {
                    Threshold::Never
                }
            } else if rhs == 0.0 {
                if numer >= 0.0 {
                    Threshold::Always
                } else {
                    Threshold::Never
                }
            } else if numer >= 0.0 {
                Threshold::Always
            } else {
                Threshold::AtLeast(numer / rhs)
            }
        }
    }
}

/// Which latency curve a sweep varies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    ClientRate,
    UplinkRate,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::ClientRate => "client_rate",
            SweepAxis::UplinkRate => "uplink_rate",
        }
    }
}

/// One row `(value, τ₁, τ₂, τ)` per swept value.
pub fn sweep(p: &LatencyParams, axis: SweepAxis, values: &[f64]) -> Vec<[f64; 4]> {
    values
        .iter()
        .map(|&v| {
            let mut q = p.clone();
            match axis {
                SweepAxis::ClientRate => q.client_rate = v,
                SweepAxis::UplinkRate => q.uplink_rate = v,
            }
            [v, tau_client_full(&q), tau_server_full(&q), tau_splitgp(&q)]
        })
        .collect()
}

pub fn sweep_csv(axis: SweepAxis, rows: &[[f64; 4]]) -> String {
    let mut s = format!("{},tau_client_full,tau_server_full,tau_splitgp\n", axis.as_str());
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r[0], r[1], r[2], r[3]));
    }
    s
}

/// `n` points evenly spaced on a log scale between `lo` and `hi`.
pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n < 2 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|i| (a + (b - a) * i as f64 / (n - 1) as f64).exp())
        .collect()
}
