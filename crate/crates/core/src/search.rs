//! Phase 1: alternating optimization of network weights and architecture
//! weights over the search network.
//!
//! Each epoch first trains the network weights on every batch with hard
//! sampling and cross-entropy only. After the warmup epochs it then trains
//! the architecture weights on a freshly drawn subset of batches with soft
//! sampling and `CE + beta * Lat_Loss`, and anneals the temperature.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, ForwardCtx};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::gumbel::{softmax_probs, Noise};
use crate::latency::{baseline_latency, estimate_latency, expected_latency, LatencyTable};
use crate::losses::{latency_loss, phase1_total_loss, LatencyLossConfig};
use crate::optim::{clip_grad_norm, Optimizer, OptimizerConfig};
use crate::params::ParamGroup;
use crate::rng::{streams, RngState, RngStream};
use crate::supernet::{Sampling, SearchNetwork};

/// Lowest temperature the schedule will reach.
pub const MIN_TEMPERATURE: f64 = 1e-3;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Phase1Config {
    pub epochs: usize,
    pub arch_data_fraction: f64,
    pub arch_warmup_fraction: f64,
    pub initial_temperature: f64,
    pub temperature_anneal_rate: f64,
    pub net_optimizer: OptimizerConfig,
    pub arch_optimizer: OptimizerConfig,
    pub target_ratio: f64,
    pub seed: u64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub moe_dropout: f64,
}

impl Default for Phase1Config {
    fn default() -> Self {
        Self {
            epochs: 10,
            arch_data_fraction: 0.2,
            arch_warmup_fraction: 0.1,
            initial_temperature: 5.0,
            temperature_anneal_rate: 0.6,
            net_optimizer: OptimizerConfig::adam(1e-3),
            arch_optimizer: OptimizerConfig::adam(0.01),
            target_ratio: 1.0,
            seed: 0,
            grad_clip: 1.0,
            dropout: 0.1,
            moe_dropout: 0.2,
        }
    }
}

impl Phase1Config {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, value: f64, msg: &str| Err(Error::config(field, value, msg));
        if self.epochs == 0 {
            return bad("phase1.epochs", 0.0, "must be at least 1");
        }
        if !(self.arch_data_fraction > 0.0 && self.arch_data_fraction <= 1.0) {
            return bad("phase1.arch_data_fraction", self.arch_data_fraction, "must be in (0, 1]");
        }
        if !(0.0..1.0).contains(&self.arch_warmup_fraction) {
            return bad("phase1.arch_warmup_fraction", self.arch_warmup_fraction, "must be in [0, 1)");
        }
        if !(self.initial_temperature > 0.0 && self.initial_temperature.is_finite()) {
            return bad("phase1.initial_temperature", self.initial_temperature, "must be positive");
        }
        if !(self.temperature_anneal_rate > 0.0 && self.temperature_anneal_rate <= 1.0) {
            return bad("phase1.temperature_anneal_rate", self.temperature_anneal_rate, "must be in (0, 1]");
        }
        if !(self.target_ratio > 0.0 && self.target_ratio <= 1.0) {
            return bad("target_ratio", self.target_ratio, "must be in (0, 1]");
        }
        if !(self.net_optimizer.lr > 0.0) {
            return bad("phase1.net_optimizer.lr", self.net_optimizer.lr, "must be positive");
        }
        if !(self.arch_optimizer.lr > 0.0) {
            return bad("phase1.arch_optimizer.lr", self.arch_optimizer.lr, "must be positive");
        }
        if !(self.grad_clip > 0.0) {
            return bad("phase1.grad_clip", self.grad_clip, "must be positive");
        }
        for (field, p) in [("phase1.dropout", self.dropout), ("phase1.moe_dropout", self.moe_dropout)] {
            if !(0.0..1.0).contains(&p) {
                return bad(field, p, "must be in [0, 1)");
            }
        }
        Ok(())
    }

    /// Whole epochs without architecture updates: `ceil(fraction * epochs)`.
    pub fn warmup_epochs(&self) -> usize {
        let x = self.arch_warmup_fraction * self.epochs as f64;
        ((x - 1e-9).ceil().max(0.0) as usize).min(self.epochs)
    }

    /// Temperature in effect during `epoch`.
    pub fn temperature_at(&self, epoch: usize) -> f64 {
        let annealed = epoch.saturating_sub(self.warmup_epochs());
        let mut t = self.initial_temperature;
        for _ in 0..annealed {
            t = anneal_temperature(t, self.temperature_anneal_rate);
        }
        t
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    /// `net` or `arch`.
    pub phase: String,
    pub ce: f64,
    pub lat_loss: f64,
    pub beta: u8,
    pub estimated_us: f64,
    pub temperature: f64,
}

#[derive(Clone, Debug)]
pub struct Phase1State {
    /// Epochs completed.
    pub epoch: usize,
    pub temperature: f64,
    pub alpha: Vec<Vec<f64>>,
    pub history: Vec<StepRecord>,
    pub baseline_us: f64,
    rngs: [RngStream; 3],
}

impl Phase1State {
    pub fn checkpoint(&self, options: Vec<Vec<BlockSpec>>, aborted: bool) -> Phase1Checkpoint {
        Phase1Checkpoint {
            version: CHECKPOINT_VERSION,
            epoch: self.epoch,
            temperature: self.temperature,
            options,
            alpha: self.alpha.clone(),
            rng: self.rngs.iter().map(RngStream::state).collect(),
            aborted,
        }
    }
}

/// Search progress written after every epoch (and on abort).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Phase1Checkpoint {
    pub version: u32,
    pub epoch: usize,
    pub temperature: f64,
    pub options: Vec<Vec<BlockSpec>>,
    pub alpha: Vec<Vec<f64>>,
    /// Gumbel, dropout and subset streams, in that order.
    pub rng: Vec<RngState>,
    pub aborted: bool,
}

impl Phase1Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(text).map_err(|e| Error::format("checkpoint", e.to_string()))?;
        if c.version != CHECKPOINT_VERSION {
            return Err(Error::format(
                "checkpoint",
                format!("version {} is not supported (expected {CHECKPOINT_VERSION})", c.version),
            ));
        }
        if c.alpha.len() != c.options.len() || c.alpha.iter().zip(&c.options).any(|(a, o)| a.len() != o.len()) {
            return Err(Error::format("checkpoint", "alpha shapes do not match the option menus"));
        }
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&crate::io::read_string(path)?)
    }

    /// Restores the random streams recorded in this checkpoint.
    pub fn rng_streams(&self) -> Result<Vec<RngStream>> {
        self.rng.iter().map(RngStream::from_state).collect()
    }
}

/// `T * rate`, never below [`MIN_TEMPERATURE`].
pub fn anneal_temperature(temperature: f64, rate: f64) -> f64 {
    (temperature * rate).max(MIN_TEMPERATURE)
}

/// `max(1, floor(fraction * n))` distinct batch indices drawn uniformly
/// without replacement, returned in ascending order.
pub fn select_arch_subset(n: usize, fraction: f64, rng: &mut RngStream) -> Vec<usize> {
    if n == 0 {
        return Vec::new();
    }
    let count = ((fraction * n as f64 + 1e-9).floor() as usize).clamp(1, n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count {
        let j = i + rng.below(n - i);
        idx.swap(i, j);
    }
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

fn nonfinite(epoch: usize, step: usize, phase: &str) -> Error {
    Error::NonFinite {
        epoch,
        step,
        phase: phase.to_string(),
    }
}

/// Runs the search. When `checkpoint_dir` is given, `checkpoint.json` is
/// rewritten after every epoch, and `snapshot.json` is written before a
/// non-finite loss aborts the run.
pub fn run_phase1(
    net: &mut SearchNetwork,
    table: &LatencyTable,
    cfg: &Phase1Config,
    batches: &[Batch],
    checkpoint_dir: Option<&Path>,
) -> Result<Phase1State> {
    cfg.validate()?;
    if batches.is_empty() {
        return Err(Error::Data("no training batches".into()));
    }
    let options = net.options();
    table.check_coverage(options.iter().flatten())?;
    table.check_coverage(net.backbone().slots.iter())?;
    let baseline_us = baseline_latency(net.backbone(), table)?;
    let lcfg = LatencyLossConfig::new(cfg.target_ratio, baseline_us)?;
    let warmup = cfg.warmup_epochs();

    let mut net_opt = Optimizer::new(cfg.net_optimizer.clone(), ParamGroup::Network);
    let mut arch_opt = Optimizer::new(cfg.arch_optimizer.clone(), ParamGroup::Architecture);
    let mut state = Phase1State {
        epoch: 0,
        temperature: cfg.initial_temperature,
        alpha: net.alphas(),
        history: Vec::new(),
        baseline_us,
        rngs: [
            RngStream::new(cfg.seed, streams::GUMBEL),
            RngStream::new(cfg.seed, streams::DROPOUT),
            RngStream::new(cfg.seed, streams::ARCH_SUBSET),
        ],
    };
    let mut step = 0;
    let [mut gumbel, mut dropout, mut subset] = state.rngs.clone();

    let abort = |state: &mut Phase1State, net: &SearchNetwork, rngs: [&RngStream; 3], err: Error| -> Error {
        if let Some(dir) = checkpoint_dir {
            state.alpha = net.alphas();
            state.rngs = rngs.map(RngStream::clone);
            if let Err(e) = state.checkpoint(net.options(), true).save(&dir.join("snapshot.json")) {
                log::error!("could not write snapshot: {e}");
            }
        }
        err
    };

    for epoch in 0..cfg.epochs {
        let t = state.temperature;

        for batch in batches {
            net.store_mut().zero_grad();
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(&mut dropout, cfg.dropout, cfg.moe_dropout);
            let out = net.forward(
                &mut g,
                &batch.inputs,
                batch.batch_size,
                batch.seq_len,
                t,
                &Sampling::Hard,
                &mut Noise::Sampled(&mut gumbel),
                &mut ctx,
            )?;
            let ce = g.cross_entropy(out.logits, &batch.targets)?;
            let ce_v = g.item(ce);
            if !ce_v.is_finite() {
                let err = nonfinite(epoch, step, "net");
                return Err(abort(&mut state, net, [&gumbel, &dropout, &subset], err));
            }
            g.backward(ce)?;
            g.accumulate_param_grads(net.store_mut());
            clip_grad_norm(net.store_mut(), ParamGroup::Network, cfg.grad_clip);
            net_opt.step(net.store_mut());

            let probs: Vec<Vec<f64>> = net.alphas().iter().map(|a| softmax_probs(a, t)).collect();
            let est = expected_latency(&probs, &options, table)?;
            state.history.push(StepRecord {
                epoch,
                step,
                phase: "net".into(),
                ce: ce_v,
                lat_loss: est / lcfg.budget_us(),
                beta: 0,
                estimated_us: est,
                temperature: t,
            });
            step += 1;
        }

        if epoch >= warmup {
            let picked = select_arch_subset(batches.len(), cfg.arch_data_fraction, &mut subset);
            for &bi in &picked {
                let batch = &batches[bi];
                net.store_mut().zero_grad();
                let mut g = Graph::new();
                let mut ctx = ForwardCtx::train(&mut dropout, cfg.dropout, cfg.moe_dropout);
                let out = net.forward(
                    &mut g,
                    &batch.inputs,
                    batch.batch_size,
                    batch.seq_len,
                    t,
                    &Sampling::Soft,
                    &mut Noise::Sampled(&mut gumbel),
                    &mut ctx,
                )?;
                let ce = g.cross_entropy(out.logits, &batch.targets)?;
                let est = estimate_latency(&mut g, &out.probs, &options, table)?;
                let lat = latency_loss(&mut g, &est, &lcfg);
                let total = phase1_total_loss(&mut g, ce, &lat)?;
                let ce_v = g.item(ce);
                if !g.item(total).is_finite() {
                    let err = nonfinite(epoch, step, "arch");
                    return Err(abort(&mut state, net, [&gumbel, &dropout, &subset], err));
                }
                g.backward(total)?;
                g.accumulate_param_grads(net.store_mut());
                clip_grad_norm(net.store_mut(), ParamGroup::Architecture, cfg.grad_clip);
                arch_opt.step(net.store_mut());
                state.history.push(StepRecord {
                    epoch,
                    step,
                    phase: "arch".into(),
                    ce: ce_v,
                    lat_loss: lat.lat_loss,
                    beta: lat.beta,
                    estimated_us: est.total_us(&g),
                    temperature: t,
                });
                step += 1;
            }
            state.temperature = anneal_temperature(t, cfg.temperature_anneal_rate);
        }

        state.epoch = epoch + 1;
        state.alpha = net.alphas();
        state.rngs = [gumbel.clone(), dropout.clone(), subset.clone()];
        let probs: Vec<Vec<f64>> = state.alpha.iter().map(|a| softmax_probs(a, t)).collect();
        log::info!(
            "search epoch {}/{}: temperature {t:.4}, expected latency {:.1} us",
            epoch + 1,
            cfg.epochs,
            expected_latency(&probs, &options, table)?
        );
        log::debug!("alpha {:?}", state.alpha);
        if let Some(dir) = checkpoint_dir {
            state.checkpoint(options.clone(), false).save(&dir.join("checkpoint.json"))?;
        }
    }
    Ok(state)
}
