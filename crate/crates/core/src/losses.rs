//! Latency penalty for the search phase and expert load-balancing loss for
//! retraining, plus the per-phase loss totals.

use crate::blocks::{RoutedLayer, RoutingStats};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::latency::LatencyEstimate;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LatencyLossConfig {
    /// Fraction of the baseline latency to aim for, in `(0, 1]`.
    pub target_ratio: f64,
    pub baseline_us: f64,
}

impl LatencyLossConfig {
    pub fn new(target_ratio: f64, baseline_us: f64) -> Result<Self> {
        if !(target_ratio > 0.0 && target_ratio <= 1.0) {
            return Err(Error::Parameter(format!(
                "target_ratio must be in (0, 1], got {target_ratio}"
            )));
        }
        if !(baseline_us > 0.0 && baseline_us.is_finite()) {
            return Err(Error::Parameter(format!(
                "baseline latency must be positive, got {baseline_us}"
            )));
        }
        Ok(Self {
            target_ratio,
            baseline_us,
        })
    }

    pub fn budget_us(&self) -> f64 {
        self.baseline_us * self.target_ratio
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LatencyLoss {
    /// `estimated / (baseline * target)`.
    pub value: Var,
    pub lat_loss: f64,
    /// 1 when `lat_loss > 1`, else 0.
    pub beta: u8,
}

pub fn latency_loss(g: &mut Graph, estimate: &LatencyEstimate, cfg: &LatencyLossConfig) -> LatencyLoss {
    let value = g.scale(estimate.total, 1.0 / cfg.budget_us());
    let lat_loss = g.item(value);
    LatencyLoss {
        value,
        lat_loss,
        beta: u8::from(lat_loss > 1.0),
    }
}

/// `ce + beta * lat_loss`. When the penalty is inactive the result is `ce`
/// itself, so the gradient is exactly the cross-entropy gradient.
pub fn phase1_total_loss(g: &mut Graph, ce: Var, lat: &LatencyLoss) -> Result<Var> {
    if lat.beta == 1 {
        g.add(ce, lat.value)
    } else {
        Ok(ce)
    }
}

/// `E * sum_e (F_e / k) * G_e` for one layer, as a plain value.
pub fn balance_value(stats: &RoutingStats) -> f64 {
    let e = stats.experts() as f64;
    let k = stats.top_k.max(1) as f64;
    e * stats
        .token_fraction
        .iter()
        .zip(&stats.mean_gate_score)
        .map(|(f, g)| f / k * g)
        .sum::<f64>()
}

#[derive(Clone, Copy, Debug)]
pub struct BalanceLoss {
    /// Mean over MoE layers; `None` when there are none.
    pub value: Option<Var>,
    pub scalar: f64,
}

impl BalanceLoss {
    pub fn has_moe(&self) -> bool {
        self.value.is_some()
    }
}

/// Mean over layers of `E * sum_e (F_e / k) * G_e`, with the token
/// fractions `F` constant and the mean gate scores `G` differentiable.
pub fn balance_loss(g: &mut Graph, layers: &[RoutedLayer]) -> Result<BalanceLoss> {
    if layers.is_empty() {
        return Ok(BalanceLoss {
            value: None,
            scalar: 0.0,
        });
    }
    let mut total: Option<Var> = None;
    for layer in layers {
        let s = &layer.stats;
        let e = s.experts();
        if g.value(layer.gate_mean).len() != e || s.mean_gate_score.len() != e {
            return Err(Error::Dimension {
                op: "balance_loss",
                lhs: vec![e],
                rhs: g.shape(layer.gate_mean).to_vec(),
            });
        }
        let k = s.top_k.max(1) as f64;
        let coef: Vec<f64> = s.token_fraction.iter().map(|f| e as f64 * f / k).collect();
        let c = g.input(Tensor::vector(coef));
        let prod = g.mul(c, layer.gate_mean)?;
        let term = g.sum(prod);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    let mean = g.scale(total.expect("nonempty"), 1.0 / layers.len() as f64);
    Ok(BalanceLoss {
        value: Some(mean),
        scalar: g.item(mean),
    })
}

/// `ce + coef * balance`; exactly `ce` when there is no MoE layer or the
/// coefficient is zero.
pub fn phase2_total_loss(g: &mut Graph, ce: Var, balance: &BalanceLoss, coef: f64) -> Result<Var> {
    match balance.value {
        Some(b) if coef != 0.0 => {
            let scaled = if coef == 1.0 { b } else { g.scale(b, coef) };
            g.add(ce, scaled)
        }
        _ => Ok(ce),
    }
}
