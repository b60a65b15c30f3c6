//! Declarative run configuration.
//!
//! One TOML file drives every pipeline stage. Relative paths are resolved
//! against the directory holding the file.
//!
//! ```toml
//! seed = 0
//! target_ratio = 0.7
//! output_dir = "runs/toy"
//! sweep_targets = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
//!
//! [data]
//! corpus = "../data/corpus.txt"
//! split = [0.8, 0.1, 0.1]
//! batch_size = 8
//! seq_len = 32
//! max_train_batches = 40      # optional cap per epoch
//! max_valid_batches = 10      # optional
//!
//! [model]
//! model_dim = 32
//! head_dim = 4                # optional, defaults to model_dim / 8
//! backbone = ["mha:h=8", "ffl:d=128", "mha:h=8", "ffl:d=128"]
//! menu = ["skip", "mha:h=1", "mha:h=2", "mha:h=4", "mha:h=8",
//!         "ffl:d=128", "moe:d=128:e=4:k=1", "moe:d=128:e=4:k=2"]
//! # or one menu per slot:
//! # menus = [["skip", "mha:h=8"], ["skip", "ffl:d=128"], ...]
//!
//! [profile]
//! batch = 8
//! seq_len = 32
//! reps = 20
//! warmup = 5
//!
//! [phase1]
//! epochs = 10
//! arch_data_fraction = 0.2
//! arch_warmup_fraction = 0.1
//! initial_temperature = 5.0
//! temperature_anneal_rate = 0.6
//! grad_clip = 1.0
//! dropout = 0.1
//! moe_dropout = 0.2
//! net_optimizer = { kind = "adam", lr = 0.001 }
//! arch_optimizer = { kind = "adam", lr = 0.01 }
//!
//! [phase2]
//! epochs = 5
//! balance_coef = 1.0
//! grad_clip = 1.0
//! dropout = 0.1
//! moe_dropout = 0.2
//! optimizer = { kind = "adam", lr = 0.001 }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::{BlockSpec, ModelDims};
use crate::data::BatchConfig;
use crate::error::{Error, Result};
use crate::finalize::Phase2Config;
use crate::latency::ProfileContext;
use crate::optim::OptimizerConfig;
use crate::search::Phase1Config;
use crate::supernet::{BackboneSpec, SearchSpace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_target")]
    pub target_ratio: f64,
    pub output_dir: PathBuf,
    #[serde(default = "default_sweep")]
    pub sweep_targets: Vec<f64>,
    pub data: DataSection,
    pub model: ModelSection,
    #[serde(default)]
    pub profile: ProfileSection,
    #[serde(default)]
    pub phase1: Phase1Section,
    #[serde(default)]
    pub phase2: Phase2Section,
}

fn default_target() -> f64 {
    1.0
}

fn default_sweep() -> Vec<f64> {
    vec![0.5, 0.6, 0.7, 0.8, 0.9, 0.95]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub corpus: PathBuf,
    #[serde(default = "default_split")]
    pub split: [f64; 3],
    pub batch_size: usize,
    pub seq_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_train_batches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_valid_batches: Option<usize>,
}

fn default_split() -> [f64; 3] {
    [0.8, 0.1, 0.1]
}

/// Block lists are kept as strings so errors can point at the entry.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub model_dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_dim: Option<usize>,
    pub backbone: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub menu: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub menus: Option<Vec<Vec<String>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileSection {
    pub batch: usize,
    pub seq_len: usize,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for ProfileSection {
    fn default() -> Self {
        Self {
            batch: 8,
            seq_len: 32,
            reps: 20,
            warmup: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase1Section {
    pub epochs: usize,
    pub arch_data_fraction: f64,
    pub arch_warmup_fraction: f64,
    pub initial_temperature: f64,
    pub temperature_anneal_rate: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub moe_dropout: f64,
    pub net_optimizer: OptimizerConfig,
    pub arch_optimizer: OptimizerConfig,
}

impl Default for Phase1Section {
    fn default() -> Self {
        let d = Phase1Config::default();
        Self {
            epochs: d.epochs,
            arch_data_fraction: d.arch_data_fraction,
            arch_warmup_fraction: d.arch_warmup_fraction,
            initial_temperature: d.initial_temperature,
            temperature_anneal_rate: d.temperature_anneal_rate,
            grad_clip: d.grad_clip,
            dropout: d.dropout,
            moe_dropout: d.moe_dropout,
            net_optimizer: d.net_optimizer,
            arch_optimizer: d.arch_optimizer,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Phase2Section {
    pub epochs: usize,
    pub balance_coef: f64,
    pub grad_clip: f64,
    pub dropout: f64,
    pub moe_dropout: f64,
    pub optimizer: OptimizerConfig,
}

impl Default for Phase2Section {
    fn default() -> Self {
        let d = Phase2Config::default();
        Self {
            epochs: d.epochs,
            balance_coef: d.balance_coef,
            grad_clip: d.grad_clip,
            dropout: d.dropout,
            moe_dropout: d.moe_dropout,
            optimizer: d.optimizer,
        }
    }
}

/// Command-line values that replace config fields.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub target_ratio: Option<f64>,
    pub output_dir: Option<PathBuf>,
    pub phase1_epochs: Option<usize>,
    pub phase2_epochs: Option<usize>,
}

/// Parses block keys and checks each against `dims`.
fn parse_list(field: &str, keys: &[String], dims: &ModelDims) -> Result<Vec<BlockSpec>> {
    keys.iter()
        .enumerate()
        .map(|(i, k)| {
            k.parse::<BlockSpec>()
                .and_then(|s| s.validate(dims).map(|_| s))
                .map_err(|e| Error::config(format!("{field}[{i}]"), k, e.to_string()))
        })
        .collect()
}

impl RunConfig {
    /// Parses a config file; relative paths become relative to its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = crate::io::read_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| {
            let field = e
                .span()
                .and_then(|s| text.get(s))
                .map(str::to_owned)
                .unwrap_or_default();
            Error::config("config", field, e.message().trim())
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("config", e.to_string()))
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.data.corpus.is_relative() {
            self.data.corpus = base.join(&self.data.corpus);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(t) = o.target_ratio {
            self.target_ratio = t;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(e) = o.phase1_epochs {
            self.phase1.epochs = e;
        }
        if let Some(e) = o.phase2_epochs {
            self.phase2.epochs = e;
        }
    }

    pub fn dims(&self) -> ModelDims {
        match self.model.head_dim {
            Some(head_dim) => ModelDims {
                model_dim: self.model.model_dim,
                head_dim,
            },
            None => ModelDims::new(self.model.model_dim),
        }
    }

    pub fn backbone(&self) -> Result<BackboneSpec> {
        let slots = parse_list("model.backbone", &self.model.backbone, &self.dims())?;
        BackboneSpec::new(self.dims(), slots).map_err(|e| Error::config("model.backbone", self.model.backbone.join(","), e.to_string()))
    }

    pub fn search_space(&self) -> Result<SearchSpace> {
        let slots = self.model.backbone.len();
        let space = match (&self.model.menu, &self.model.menus) {
            (Some(menu), None) => SearchSpace::uniform(parse_list("model.menu", menu, &self.dims())?, slots),
            (None, Some(menus)) => {
                if menus.len() != slots {
                    return Err(Error::config(
                        "model.menus",
                        menus.len(),
                        format!("needs one menu per backbone slot ({slots})"),
                    ));
                }
                SearchSpace::per_slot(
                    menus
                        .iter()
                        .enumerate()
                        .map(|(s, m)| parse_list(&format!("model.menus[{s}]"), m, &self.dims()))
                        .collect::<Result<_>>()?,
                )
            }
            _ => {
                return Err(Error::config(
                    "model.menu",
                    "",
                    "set exactly one of model.menu and model.menus",
                ))
            }
        };
        space
            .validate(&self.dims())
            .map_err(|e| Error::config("model.menu", "", e.to_string()))?;
        Ok(space)
    }

    pub fn batch_config(&self) -> BatchConfig {
        BatchConfig {
            batch_size: self.data.batch_size,
            seq_len: self.data.seq_len,
        }
    }

    pub fn profile_context(&self) -> ProfileContext {
        ProfileContext::new(self.profile.batch, self.profile.seq_len, self.dims())
    }

    pub fn phase1(&self) -> Phase1Config {
        let p = &self.phase1;
        Phase1Config {
            epochs: p.epochs,
            arch_data_fraction: p.arch_data_fraction,
            arch_warmup_fraction: p.arch_warmup_fraction,
            initial_temperature: p.initial_temperature,
            temperature_anneal_rate: p.temperature_anneal_rate,
            net_optimizer: p.net_optimizer.clone(),
            arch_optimizer: p.arch_optimizer.clone(),
            target_ratio: self.target_ratio,
            seed: self.seed,
            grad_clip: p.grad_clip,
            dropout: p.dropout,
            moe_dropout: p.moe_dropout,
        }
    }

    pub fn phase2(&self) -> Phase2Config {
        let p = &self.phase2;
        Phase2Config {
            epochs: p.epochs,
            optimizer: p.optimizer.clone(),
            dropout: p.dropout,
            moe_dropout: p.moe_dropout,
            balance_coef: p.balance_coef,
            grad_clip: p.grad_clip,
            seed: self.seed,
        }
    }

    /// Checks every field, including that the corpus file exists.
    pub fn validate(&self) -> Result<()> {
        check_ratio("target_ratio", self.target_ratio)?;
        for (i, &t) in self.sweep_targets.iter().enumerate() {
            check_ratio(&format!("sweep_targets[{i}]"), t)?;
        }
        if !self.data.corpus.is_file() {
            return Err(Error::config(
                "data.corpus",
                self.data.corpus.display(),
                "file does not exist",
            ));
        }
        let split = self.data.split;
        if split.iter().any(|r| !(0.0..=1.0).contains(r)) || split.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config(
                "data.split",
                format!("{split:?}"),
                "ratios must be in [0, 1] and sum to at most 1",
            ));
        }
        for (field, v) in [
            ("data.batch_size", self.data.batch_size),
            ("data.seq_len", self.data.seq_len),
            ("profile.batch", self.profile.batch),
            ("profile.seq_len", self.profile.seq_len),
        ] {
            if v == 0 {
                return Err(Error::config(field, v, "must be positive"));
            }
        }
        if self.data.max_train_batches == Some(0) {
            return Err(Error::config("data.max_train_batches", 0, "must be positive"));
        }
        if self.profile.reps < 10 {
            return Err(Error::config("profile.reps", self.profile.reps, "must be at least 10"));
        }
        if self.profile.warmup < 3 {
            return Err(Error::config("profile.warmup", self.profile.warmup, "must be at least 3"));
        }
        let dims = self.dims();
        dims.validate().map_err(|e| {
            Error::config(
                "model.head_dim",
                dims.head_dim,
                format!("{e} (model_dim {})", dims.model_dim),
            )
        })?;
        if self.model.backbone.is_empty() {
            return Err(Error::config("model.backbone", "[]", "needs at least one slot"));
        }
        self.backbone()?;
        self.search_space()?;
        self.phase1()
            .validate()
            .map_err(|e| Error::config("phase1", "", e.to_string()))?;
        self.phase2()
            .validate()
            .map_err(|e| Error::config("phase2", "", e.to_string()))?;
        Ok(())
    }
}

fn check_ratio(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v <= 1.0 {
        Ok(())
    } else {
        Err(Error::config(field, v, "must be in (0, 1]"))
    }
}
