//! Pipeline stages behind the command-line subcommands.
//!
//! Every stage reads and writes inside the configured output directory:
//!
//! ```text
//! <output_dir>/
//!   latency.csv                  profile
//!   vocab.json                   search, retrain
//!   search/metrics.csv           search
//!   search/checkpoint.json
//!   search/architecture.toml
//!   retrain/metrics.csv          retrain
//!   retrain/valid.csv
//!   retrain/routing.csv
//!   retrain/architecture.toml
//!   retrain/model.params
//!   retrain/eval.csv             eval
//!   report/*.csv, report/*.txt   report
//!   sweep/target_0.50/...        sweep (one search per target)
//! ```

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::blocks::BlockSpec;
use crate::config::RunConfig;
use crate::data::{batches, Batch, Corpus, Split, Vocab};
use crate::error::{Error, Result};
use crate::finalize::{
    evaluate, instantiate, run_phase2, sample_architecture, ArchitectureDescriptor, Phase2Outcome, Phase2Record,
};
use crate::latency::{measure_end_to_end, profile_block, LatencyTable};
use crate::metrics::{pearson, read_csv, routing_rows, spearman, write_csv};
use crate::rng::{streams, RngStream};
use crate::search::{run_phase1, Phase1State, StepRecord};
use crate::supernet::build_search_network;

/// Attention-over-FFL runtime ratio reported for a large GPU setting, kept
/// next to the measured ratio in the report.
pub const REFERENCE_MHA_OVER_FFL: f64 = 6.2;

#[derive(Clone, Debug)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn table(&self) -> PathBuf {
        self.root.join("latency.csv")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("vocab.json")
    }

    pub fn search_dir(&self) -> PathBuf {
        self.root.join("search")
    }

    pub fn search_metrics(&self) -> PathBuf {
        self.search_dir().join("metrics.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.search_dir().join("checkpoint.json")
    }

    pub fn architecture(&self) -> PathBuf {
        self.search_dir().join("architecture.toml")
    }

    pub fn retrain_dir(&self) -> PathBuf {
        self.root.join("retrain")
    }

    pub fn retrain_metrics(&self) -> PathBuf {
        self.retrain_dir().join("metrics.csv")
    }

    pub fn valid_metrics(&self) -> PathBuf {
        self.retrain_dir().join("valid.csv")
    }

    pub fn routing(&self) -> PathBuf {
        self.retrain_dir().join("routing.csv")
    }

    pub fn retrained_architecture(&self) -> PathBuf {
        self.retrain_dir().join("architecture.toml")
    }

    pub fn model(&self) -> PathBuf {
        self.retrain_dir().join("model.params")
    }

    pub fn eval(&self) -> PathBuf {
        self.retrain_dir().join("eval.csv")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }

    pub fn sweep_run(&self, target: f64) -> PathBuf {
        self.sweep_dir().join(format!("target_{target:.2}"))
    }
}

fn train_batches(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<Batch>> {
    let mut b = batches(corpus, Split::Train, cfg.batch_config(), cfg.seed)?;
    if let Some(n) = cfg.data.max_train_batches {
        b.truncate(n);
    }
    Ok(b)
}

fn held_out_batches(cfg: &RunConfig, corpus: &Corpus, split: Split) -> Result<Vec<Batch>> {
    let mut b = batches(corpus, split, cfg.batch_config(), cfg.seed)?;
    if let Some(n) = cfg.data.max_valid_batches {
        b.truncate(n);
    }
    Ok(b)
}

// ----- profile ---------------------------------------------------------------

/// Scaled-up FFL with the parameter count of a MoE block's experts.
pub fn iso_parameter_ffl(spec: &BlockSpec) -> Option<BlockSpec> {
    match *spec {
        BlockSpec::Moe { inner_dim, experts, .. } => Some(BlockSpec::Ffl {
            inner_dim: inner_dim * experts,
        }),
        _ => None,
    }
}

/// Keys the profiler fills: the search space, the backbone and the
/// iso-parameter FFL of every MoE option.
pub fn profile_keys(cfg: &RunConfig) -> Result<BTreeSet<BlockSpec>> {
    let mut keys = cfg.search_space()?.distinct_specs();
    keys.extend(cfg.backbone()?.slots);
    let iso: Vec<BlockSpec> = keys.iter().filter_map(iso_parameter_ffl).collect();
    keys.extend(iso);
    Ok(keys)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockLatencyRow {
    pub key: String,
    pub latency_us: f64,
    pub iqr_us: f64,
    /// Latency relative to the `mha:h=8` entry, when there is one.
    pub normalized: Option<f64>,
}

pub fn block_latency_rows(table: &LatencyTable) -> Vec<BlockLatencyRow> {
    let reference = table.entry("mha:h=8").map(|e| e.latency_us);
    table
        .entries()
        .map(|(key, e)| BlockLatencyRow {
            key: key.to_string(),
            latency_us: e.latency_us,
            iqr_us: e.iqr_us,
            normalized: reference.map(|r| e.latency_us / r),
        })
        .collect()
}

#[derive(Debug)]
pub struct ProfileOutcome {
    pub table: LatencyTable,
    /// Keys timed by this invocation; empty on a cache hit.
    pub profiled: Vec<String>,
}

impl ProfileOutcome {
    pub fn cached(&self) -> bool {
        self.profiled.is_empty()
    }
}

/// Profiles every key the config needs. An existing table with the same
/// context is reused and only missing keys are timed, unless `force`.
pub fn cmd_profile(cfg: &RunConfig, force: bool) -> Result<ProfileOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let ctx = cfg.profile_context();
    let mut table = match LatencyTable::load(&layout.table()) {
        Ok(t) if !force && t.context == ctx => t,
        Ok(_) | Err(Error::MissingArtifact(_)) => LatencyTable::new(ctx.clone()),
        Err(e) => return Err(e),
    };
    let mut rng = RngStream::new(cfg.seed, streams::PROFILE);
    let mut profiled = Vec::new();
    for spec in profile_keys(cfg)? {
        if table.entry(&spec.key()).is_some() {
            continue;
        }
        let entry = profile_block(&spec, &ctx, cfg.profile.reps, cfg.profile.warmup, &mut rng)?;
        log::info!("profiled {spec}: {:.3} us", entry.latency_us);
        table.insert(spec.key(), entry)?;
        profiled.push(spec.key());
    }
    if !profiled.is_empty() {
        table.save(&layout.table())?;
    }
    Ok(ProfileOutcome { table, profiled })
}

// ----- search ----------------------------------------------------------------

#[derive(Debug)]
pub struct SearchOutcome {
    pub descriptor: ArchitectureDescriptor,
    pub state: Phase1State,
}

/// Runs the search against the profiled table and writes the metrics, the
/// checkpoint and the sampled architecture.
pub fn cmd_search(cfg: &RunConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let table = LatencyTable::load(&layout.table())?;
    let backbone = cfg.backbone()?;
    let space = cfg.search_space()?;
    table.check_coverage(space.menus().iter().flatten().chain(&backbone.slots))?;

    let corpus = Corpus::load(&cfg.data.corpus, cfg.data.split)?;
    corpus.vocab().save(&layout.vocab())?;
    let train = train_batches(cfg, &corpus)?;
    let mut init = RngStream::new(cfg.seed, streams::INIT);
    let mut net = build_search_network(&backbone, &space, corpus.vocab().len(), cfg.data.seq_len, &mut init)?;
    let state = run_phase1(&mut net, &table, &cfg.phase1(), &train, Some(&layout.search_dir()))?;
    write_csv(&layout.search_metrics(), &state.history)?;

    let descriptor = sample_architecture(&net, &table, cfg.target_ratio, cfg.seed)?;
    descriptor.save(&layout.architecture())?;
    Ok(SearchOutcome { descriptor, state })
}

// ----- retrain ---------------------------------------------------------------

#[derive(Debug)]
pub struct RetrainOutcome {
    pub descriptor: ArchitectureDescriptor,
    pub outcome: Phase2Outcome,
    pub param_count: usize,
}

fn load_descriptor(cfg: &RunConfig, layout: &Layout, path: &Path) -> Result<ArchitectureDescriptor> {
    let table = match LatencyTable::load(&layout.table()) {
        Ok(t) => Some(t),
        Err(Error::MissingArtifact(_)) => None,
        Err(e) => return Err(e),
    };
    let d = ArchitectureDescriptor::load_checked(path, table.as_ref())?;
    if d.model_dim != cfg.dims().model_dim {
        return Err(Error::config(
            "model.model_dim",
            cfg.dims().model_dim,
            format!("architecture {} uses model_dim {}", path.display(), d.model_dim),
        ));
    }
    Ok(d)
}

/// Retrains the architecture at `arch` (default: the searched one) from
/// scratch. A non-finite loss leaves `retrain/snapshot.params` behind.
pub fn cmd_retrain(cfg: &RunConfig, arch: Option<&Path>) -> Result<RetrainOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let arch_path = arch.map(Path::to_path_buf).unwrap_or_else(|| layout.architecture());
    let descriptor = load_descriptor(cfg, &layout, &arch_path)?;

    let corpus = Corpus::load(&cfg.data.corpus, cfg.data.split)?;
    corpus.vocab().save(&layout.vocab())?;
    let train = train_batches(cfg, &corpus)?;
    let valid = held_out_batches(cfg, &corpus, Split::Valid)?;

    let mut init = RngStream::new(cfg.seed, streams::INIT);
    let mut net = instantiate(&descriptor, corpus.vocab().len(), cfg.data.seq_len, &mut init)?;
    let outcome = match run_phase2(&mut net, &train, &valid, &cfg.phase2()) {
        Ok(o) => o,
        Err(e @ Error::NonFinite { .. }) => {
            let snap = layout.retrain_dir().join("snapshot.params");
            if let Err(w) = net.store().save(&snap) {
                log::error!("could not write snapshot: {w}");
            }
            return Err(e);
        }
        Err(e) => return Err(e),
    };

    write_csv(&layout.retrain_metrics(), &outcome.history)?;
    write_csv(&layout.valid_metrics(), &outcome.valid)?;
    let routing: Vec<_> = outcome
        .history
        .iter()
        .zip(&outcome.routing)
        .flat_map(|(r, layers)| routing_rows(r.epoch, r.step, layers))
        .collect();
    write_csv(&layout.routing(), &routing)?;
    descriptor.save(&layout.retrained_architecture())?;
    net.store().save(&layout.model())?;
    Ok(RetrainOutcome {
        param_count: net.param_count(),
        descriptor,
        outcome,
    })
}

// ----- eval ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub split: String,
    pub ce: f64,
    pub bits_per_char: f64,
}

/// Test-split cross-entropy of the retrained model.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalRow> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let descriptor = load_descriptor(cfg, &layout, &layout.retrained_architecture())?;
    let vocab = Vocab::load(&layout.vocab())?;
    let corpus = Corpus::load(&cfg.data.corpus, cfg.data.split)?;
    if corpus.vocab() != &vocab {
        return Err(Error::Data(format!(
            "corpus vocabulary differs from {}",
            layout.vocab().display()
        )));
    }
    let mut init = RngStream::new(cfg.seed, streams::INIT);
    let mut net = instantiate(&descriptor, vocab.len(), cfg.data.seq_len, &mut init)?;
    net.store_mut().load_values(&layout.model())?;
    let test = held_out_batches(cfg, &corpus, Split::Test)?;
    let ce = evaluate(&net, &test, cfg.seed)?;
    let row = EvalRow {
        split: "test".into(),
        ce,
        bits_per_char: ce / std::f64::consts::LN_2,
    };
    write_csv(&layout.eval(), std::slice::from_ref(&row))?;
    Ok(row)
}

// ----- report ----------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetRow {
    pub run: String,
    pub target_ratio: f64,
    pub target_us: f64,
    pub estimated_us: f64,
    pub baseline_us: f64,
    pub target_met: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasuredRow {
    pub run: String,
    pub estimated_us: f64,
    pub measured_us: f64,
    pub measured_iqr_us: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCurveRow {
    pub run: String,
    /// `search-net`, `search-arch` or `retrain`.
    pub stage: String,
    pub epoch: usize,
    pub step: usize,
    pub ce: f64,
    /// Latency loss during search, balance loss during retraining.
    pub aux_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub comparison: String,
    pub measured_ratio: f64,
    pub reference_ratio: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub runs: usize,
    /// Pearson correlation of target and estimated latency.
    pub target_estimated_pearson: f64,
    /// Spearman correlation of target ratio and estimated latency.
    pub target_estimated_spearman: f64,
    /// Pearson correlation of estimated and measured latency, baseline
    /// included.
    pub estimated_measured_pearson: f64,
}

#[derive(Debug)]
pub struct ReportOutcome {
    pub targets: Vec<TargetRow>,
    pub measured: Vec<MeasuredRow>,
    pub ratios: Vec<RatioRow>,
    pub summary: ReportSummary,
}

/// Completed searches under `output_dir`: the main run and every sweep run.
pub fn discover_runs(layout: &Layout) -> Result<Vec<(String, Layout)>> {
    let mut runs = Vec::new();
    if layout.architecture().is_file() {
        runs.push(("main".to_string(), layout.clone()));
    }
    let sweep = layout.sweep_dir();
    if sweep.is_dir() {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(&sweep)
            .map_err(|e| Error::io(&sweep, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.join("search").join("architecture.toml").is_file())
            .collect();
        dirs.sort();
        for d in dirs {
            let name = d.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            runs.push((name, Layout::new(d)));
        }
    }
    if runs.is_empty() {
        return Err(Error::MissingArtifact(layout.architecture()));
    }
    Ok(runs)
}

fn ratio_rows(cfg: &RunConfig, table: &LatencyTable) -> Result<Vec<RatioRow>> {
    let mut rows = Vec::new();
    let ffl = cfg.backbone()?.slots.into_iter().find(|s| matches!(s, BlockSpec::Ffl { .. }));
    if let (Some(mha), Some(ffl)) = (table.entry("mha:h=8"), ffl.and_then(|f| table.entry(&f.key()).map(|e| (f, e)))) {
        rows.push(RatioRow {
            comparison: format!("mha:h=8 / {}", ffl.0),
            measured_ratio: mha.latency_us / ffl.1.latency_us,
            reference_ratio: Some(REFERENCE_MHA_OVER_FFL),
        });
    }
    for (key, e) in table.entries() {
        let Ok(spec) = key.parse::<BlockSpec>() else { continue };
        if let Some(iso) = iso_parameter_ffl(&spec) {
            if let Some(f) = table.entry(&iso.key()) {
                rows.push(RatioRow {
                    comparison: format!("{iso} / {spec}"),
                    measured_ratio: f.latency_us / e.latency_us,
                    reference_ratio: None,
                });
            }
        }
    }
    Ok(rows)
}

/// Writes plot-ready report files for every completed run.
pub fn cmd_report(cfg: &RunConfig) -> Result<ReportOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let runs = discover_runs(&layout)?;
    let table = LatencyTable::load(&layout.table())?;
    let vocab = Vocab::load(&layout.vocab())?;
    let ctx = cfg.profile_context();
    let mut rng = RngStream::new(cfg.seed, streams::PROFILE);
    let (reps, warmup) = (cfg.profile.reps, cfg.profile.warmup);

    let mut targets = Vec::new();
    let mut measured = Vec::new();
    let mut curves = Vec::new();
    let mut diagrams = String::new();
    for (name, run) in &runs {
        let d = ArchitectureDescriptor::load_checked(&run.architecture(), Some(&table))?;
        let estimated = crate::latency::architecture_latency(&d.slots, &table)?;
        let baseline = crate::latency::baseline_latency(&cfg.backbone()?, &table)?;
        let ratio = d.target_ratio.unwrap_or(1.0);
        targets.push(TargetRow {
            run: name.clone(),
            target_ratio: ratio,
            target_us: ratio * baseline,
            estimated_us: estimated,
            baseline_us: baseline,
            target_met: estimated <= ratio * baseline,
        });
        let m = measure_end_to_end(&d.slots, vocab.len(), &ctx, reps, warmup, &mut rng)?;
        measured.push(MeasuredRow {
            run: name.clone(),
            estimated_us: estimated,
            measured_us: m.latency_us,
            measured_iqr_us: m.iqr_us,
        });
        let _ = writeln!(diagrams, "# {name}\n{}", d.render());

        if run.search_metrics().is_file() {
            for r in read_csv::<StepRecord>(&run.search_metrics())? {
                curves.push(LossCurveRow {
                    run: name.clone(),
                    stage: format!("search-{}", r.phase),
                    epoch: r.epoch,
                    step: r.step,
                    ce: r.ce,
                    aux_loss: r.lat_loss,
                });
            }
        }
        if run.retrain_metrics().is_file() {
            for r in read_csv::<Phase2Record>(&run.retrain_metrics())? {
                curves.push(LossCurveRow {
                    run: name.clone(),
                    stage: "retrain".into(),
                    epoch: r.epoch,
                    step: r.step,
                    ce: r.ce,
                    aux_loss: r.balance_loss,
                });
            }
        }
    }
    let backbone = cfg.backbone()?;
    let base = measure_end_to_end(&backbone.slots, vocab.len(), &ctx, reps, warmup, &mut rng)?;
    measured.push(MeasuredRow {
        run: "baseline".into(),
        estimated_us: crate::latency::baseline_latency(&backbone, &table)?,
        measured_us: base.latency_us,
        measured_iqr_us: base.iqr_us,
    });

    let col = |rows: &[TargetRow], f: fn(&TargetRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let summary = ReportSummary {
        runs: runs.len(),
        target_estimated_pearson: pearson(&col(&targets, |r| r.target_us), &col(&targets, |r| r.estimated_us)),
        target_estimated_spearman: spearman(&col(&targets, |r| r.target_ratio), &col(&targets, |r| r.estimated_us)),
        estimated_measured_pearson: pearson(
            &measured.iter().map(|r| r.estimated_us).collect::<Vec<_>>(),
            &measured.iter().map(|r| r.measured_us).collect::<Vec<_>>(),
        ),
    };
    let ratios = ratio_rows(cfg, &table)?;

    let dir = layout.report_dir();
    write_csv(&dir.join("target_vs_estimated.csv"), &targets)?;
    write_csv(&dir.join("estimated_vs_measured.csv"), &measured)?;
    write_csv(&dir.join("loss_curves.csv"), &curves)?;
    write_csv(&dir.join("block_latency.csv"), &block_latency_rows(&table))?;
    write_csv(&dir.join("latency_ratios.csv"), &ratios)?;
    write_csv(&dir.join("summary.csv"), std::slice::from_ref(&summary))?;
    crate::io::write_atomic(&dir.join("architectures.txt"), diagrams.as_bytes())?;
    Ok(ReportOutcome {
        targets,
        measured,
        ratios,
        summary,
    })
}

// ----- sweep -----------------------------------------------------------------

/// One search per entry of `sweep_targets`, sharing the main latency table,
/// followed by a report over all runs.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<ReportOutcome> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let table = cmd_profile(cfg, false)?.table;
    for &target in &cfg.sweep_targets {
        let mut sub = cfg.clone();
        sub.target_ratio = target;
        sub.output_dir = layout.sweep_run(target);
        table.save(&Layout::new(&sub.output_dir).table())?;
        let out = cmd_search(&sub)?;
        log::info!(
            "target {target:.2}: estimated {:.1} us (met: {:?})",
            out.descriptor.estimated_latency_us.unwrap_or(f64::NAN),
            out.descriptor.target_met
        );
    }
    let corpus = Corpus::load(&cfg.data.corpus, cfg.data.split)?;
    corpus.vocab().save(&layout.vocab())?;
    cmd_report(cfg)
}
