//! Phase 2: pick the highest-weight option in every slot, build that network
//! from scratch and retrain it with the load-balancing loss.
//!
//! # Architecture file
//!
//! Architectures are TOML documents:
//!
//! ```toml
//! version = 1
//! source = "searched"          # or "manual"
//! model_dim = 32
//! head_dim = 4
//! slots = ["mha:h=2", "moe:d=128:e=4:k=1", "skip", "ffl:d=128"]
//! estimated_latency_us = 1234.5
//! baseline_latency_us = 2345.6
//! target_ratio = 0.5
//! target_met = true
//! seed = 7
//! alpha_snapshot = [[0.1, 0.4], [0.0, 1.2]]
//! ```
//!
//! Only `version`, `source`, `model_dim`, `head_dim` and `slots` are
//! required, so hand-written files can stay short. When
//! `estimated_latency_us` is present it must equal the summed table latency
//! of `slots`; [`ArchitectureDescriptor::verify_latency`] checks this.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, ForwardCtx, ModelDims};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::latency::{architecture_latency, baseline_latency, LatencyTable};
use crate::losses::{balance_loss, phase2_total_loss};
use crate::network::{FinalNetwork, NetShape};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::params::ParamGroup;
use crate::rng::{streams, RngStream};
use crate::blocks::RoutingStats;
use crate::supernet::SearchNetwork;
use crate::tensor;

pub const DESCRIPTOR_VERSION: u32 = 1;

/// Relative tolerance when re-checking a stored latency estimate.
const LATENCY_CHECK_RTOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Searched,
    Manual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureDescriptor {
    pub version: u32,
    pub source: Source,
    pub model_dim: usize,
    pub head_dim: usize,
    pub slots: Vec<BlockSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimated_latency_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline_latency_us: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_met: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha_snapshot: Vec<Vec<f64>>,
}

impl ArchitectureDescriptor {
    /// A hand-written architecture without latency metadata.
    pub fn manual(dims: ModelDims, slots: Vec<BlockSpec>) -> Self {
        Self {
            version: DESCRIPTOR_VERSION,
            source: Source::Manual,
            model_dim: dims.model_dim,
            head_dim: dims.head_dim,
            slots,
            estimated_latency_us: None,
            baseline_latency_us: None,
            target_ratio: None,
            target_met: None,
            seed: None,
            alpha_snapshot: Vec::new(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            model_dim: self.model_dim,
            head_dim: self.head_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != DESCRIPTOR_VERSION {
            return Err(Error::format(
                "architecture",
                format!("version {} is not supported (expected {DESCRIPTOR_VERSION})", self.version),
            ));
        }
        self.dims().validate()?;
        if self.slots.is_empty() {
            return Err(Error::Spec("architecture has no slots".into()));
        }
        for s in &self.slots {
            s.validate(&self.dims())?;
        }
        Ok(())
    }

    /// Recomputes the summed table latency of the slots and compares it with
    /// the stored estimate, if any.
    pub fn verify_latency(&self, table: &LatencyTable) -> Result<()> {
        let Some(stored) = self.estimated_latency_us else {
            return Ok(());
        };
        let actual = architecture_latency(&self.slots, table)?;
        if (stored - actual).abs() > LATENCY_CHECK_RTOL * actual.abs().max(1e-300) {
            return Err(Error::format(
                "architecture",
                format!("estimated_latency_us is {stored} but the table gives {actual}"),
            ));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("architecture", e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let d: Self = toml::from_str(text).map_err(|e| Error::format("architecture", e.to_string()))?;
        d.validate()?;
        Ok(d)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_toml()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&crate::io::read_string(path)?)
    }

    /// Loads and, when a table is given, re-checks the latency estimate.
    pub fn load_checked(path: &Path, table: Option<&LatencyTable>) -> Result<Self> {
        let d = Self::load(path)?;
        if let Some(t) = table {
            d.verify_latency(t)?;
        }
        Ok(d)
    }

    /// Slot list as text, one `slot <i>  <key>` line per slot.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "architecture ({}, model_dim {}, head_dim {})",
            match self.source {
                Source::Searched => "searched",
                Source::Manual => "manual",
            },
            self.model_dim,
            self.head_dim
        );
        for (i, s) in self.slots.iter().enumerate() {
            let _ = writeln!(out, "  slot {i:>2}  {s}");
        }
        out
    }
}

/// Per-slot argmax over the architecture weights (ties to the lower index),
/// with the table latency of the result.
pub fn sample_architecture(
    net: &SearchNetwork,
    table: &LatencyTable,
    target_ratio: f64,
    seed: u64,
) -> Result<ArchitectureDescriptor> {
    let alphas = net.alphas();
    let slots: Vec<BlockSpec> = net
        .blocks()
        .iter()
        .zip(&alphas)
        .map(|(b, a)| b.options[tensor::argmax(a)].clone())
        .collect();
    let estimated = architecture_latency(&slots, table)?;
    let baseline = baseline_latency(net.backbone(), table)?;
    let dims = net.backbone().dims;
    Ok(ArchitectureDescriptor {
        source: Source::Searched,
        estimated_latency_us: Some(estimated),
        baseline_latency_us: Some(baseline),
        target_ratio: Some(target_ratio),
        target_met: Some(estimated <= baseline * target_ratio),
        seed: Some(seed),
        alpha_snapshot: alphas,
        ..ArchitectureDescriptor::manual(dims, slots)
    })
}

/// Fresh network for the descriptor; nothing is carried over from search.
pub fn instantiate(
    arch: &ArchitectureDescriptor,
    vocab: usize,
    max_seq_len: usize,
    rng: &mut RngStream,
) -> Result<FinalNetwork> {
    arch.validate()?;
    let shape = NetShape {
        dims: arch.dims(),
        vocab,
        max_seq_len,
    };
    FinalNetwork::new(&arch.slots, shape, rng)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Phase2Config {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub dropout: f64,
    pub moe_dropout: f64,
    pub balance_coef: f64,
    pub grad_clip: f64,
    pub seed: u64,
}

impl Default for Phase2Config {
    fn default() -> Self {
        Self {
            epochs: 5,
            optimizer: OptimizerConfig::adam(1e-3),
            dropout: 0.1,
            moe_dropout: 0.2,
            balance_coef: 1.0,
            grad_clip: 1.0,
            seed: 0,
        }
    }
}

impl Phase2Config {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("phase2.epochs", 0, "must be at least 1"));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::config("phase2.lr", self.optimizer.lr, "must be positive"));
        }
        if !(self.balance_coef >= 0.0 && self.balance_coef.is_finite()) {
            return Err(Error::config("phase2.balance_coef", self.balance_coef, "must be nonnegative"));
        }
        for (field, p) in [("phase2.dropout", self.dropout), ("phase2.moe_dropout", self.moe_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::config(field, p, "must be in [0, 1)"));
            }
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("phase2.grad_clip", self.grad_clip, "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase2Record {
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    pub balance_loss: f64,
    /// Largest token fraction over experts and MoE layers.
    pub max_expert_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValidRecord {
    pub epoch: usize,
    pub valid_ce: f64,
}

#[derive(Clone, Debug, Default)]
pub struct Phase2Outcome {
    pub history: Vec<Phase2Record>,
    pub valid: Vec<ValidRecord>,
    /// Routing of every MoE layer at every step.
    pub routing: Vec<Vec<RoutingStats>>,
}

/// Mean cross-entropy over `batches` in evaluation mode.
pub fn evaluate(net: &FinalNetwork, batches: &[Batch], seed: u64) -> Result<f64> {
    if batches.is_empty() {
        return Err(Error::Data("no evaluation batches".into()));
    }
    let mut rng = RngStream::new(seed, streams::DROPOUT);
    let mut total = 0.0;
    for b in batches {
        let mut g = Graph::new();
        let out = net.forward(&mut g, &b.inputs, b.batch_size, b.seq_len, &mut ForwardCtx::eval(&mut rng))?;
        let ce = g.cross_entropy(out.logits, &b.targets)?;
        total += g.item(ce);
    }
    Ok(total / batches.len() as f64)
}

/// Trains `net` on `CE + coef * balance`, evaluating on `valid` after every
/// epoch.
pub fn run_phase2(
    net: &mut FinalNetwork,
    train: &[Batch],
    valid: &[Batch],
    cfg: &Phase2Config,
) -> Result<Phase2Outcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("no training batches".into()));
    }
    let mut opt = Optimizer::new(cfg.optimizer.clone(), ParamGroup::Network);
    let mut dropout = RngStream::new(cfg.seed, streams::DROPOUT);
    let mut out = Phase2Outcome::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        for b in train {
            net.store_mut().zero_grad();
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(&mut dropout, cfg.dropout, cfg.moe_dropout);
            let fwd = net.forward(&mut g, &b.inputs, b.batch_size, b.seq_len, &mut ctx)?;
            let ce = g.cross_entropy(fwd.logits, &b.targets)?;
            let bal = balance_loss(&mut g, &fwd.routed)?;
            let total = phase2_total_loss(&mut g, ce, &bal, cfg.balance_coef)?;
            if !g.item(total).is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    step,
                    phase: "retrain".into(),
                });
            }
            g.backward(total)?;
            g.accumulate_param_grads(net.store_mut());
            clip_grad_norm(net.store_mut(), ParamGroup::Network, cfg.grad_clip);
            opt.step(net.store_mut());

            let max_frac = fwd
                .routed
                .iter()
                .map(|r| r.stats.max_fraction())
                .fold(0.0, f64::max);
            out.history.push(Phase2Record {
                epoch,
                step,
                ce: g.item(ce),
                balance_loss: bal.scalar,
                max_expert_fraction: max_frac,
            });
            out.routing.push(fwd.routed.into_iter().map(|r| r.stats).collect());
            step += 1;
        }
        if !valid.is_empty() {
            let valid_ce = evaluate(net, valid, cfg.seed)?;
            log::info!("retrain epoch {}/{}: valid ce {valid_ce:.4}", epoch + 1, cfg.epochs);
            out.valid.push(ValidRecord { epoch, valid_ce });
        }
    }
    Ok(out)
}
