//! Per-block latency lookup table, the microbenchmark that fills it, and the
//! additive latency estimate used as a search penalty.
//!
//! # Table file format
//!
//! ```text
//! # batch=8
//! # seq_len=32
//! # model_dim=32
//! # head_dim=4
//! # precision=f64
//! key,latency_us,reps,warmup,iqr_us
//! ffl:d=128,812.5,30,5,14.25
//! skip,0.031,30,5,0.002
//! ```
//!
//! Comment lines carry the profiling context plus free-form metadata; rows
//! are sorted by key. Floats are written in shortest round-trip form, so a
//! load/save cycle reproduces the file byte for byte.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::blocks::{forward_block, init_block, BlockSpec, ForwardCtx, ModelDims, RoutingMode};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::network::{FinalNetwork, NetShape};
use crate::params::ParamStore;
use crate::rng::RngStream;
use crate::supernet::BackboneSpec;
use crate::tensor::Tensor;

/// Smallest latency a table will record, in microseconds.
pub const MIN_LATENCY_US: f64 = 1e-3;

/// Shape of the inputs a table was profiled with.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProfileContext {
    pub batch: usize,
    pub seq_len: usize,
    pub model_dim: usize,
    pub head_dim: usize,
    pub precision: String,
}

impl ProfileContext {
    pub fn new(batch: usize, seq_len: usize, dims: ModelDims) -> Self {
        Self {
            batch,
            seq_len,
            model_dim: dims.model_dim,
            head_dim: dims.head_dim,
            precision: "f64".into(),
        }
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            model_dim: self.model_dim,
            head_dim: self.head_dim,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyEntry {
    pub latency_us: f64,
    pub reps: usize,
    pub warmup: usize,
    pub iqr_us: f64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    key: String,
    latency_us: f64,
    reps: usize,
    warmup: usize,
    iqr_us: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatencyTable {
    pub context: ProfileContext,
    /// Extra `# key=value` lines (for example a creation timestamp).
    pub metadata: BTreeMap<String, String>,
    entries: BTreeMap<String, LatencyEntry>,
}

const CONTEXT_KEYS: [&str; 5] = ["batch", "seq_len", "model_dim", "head_dim", "precision"];

impl LatencyTable {
    pub fn new(context: ProfileContext) -> Self {
        Self {
            context,
            metadata: BTreeMap::new(),
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, key: impl Into<String>, entry: LatencyEntry) -> Result<()> {
        let key = key.into();
        key.parse::<BlockSpec>()?;
        if !(entry.latency_us > 0.0 && entry.latency_us.is_finite()) {
            return Err(Error::format(
                "latency table",
                format!("latency for `{key}` must be positive, got {}", entry.latency_us),
            ));
        }
        self.entries.insert(key, entry);
        Ok(())
    }

    pub fn entry(&self, key: &str) -> Option<&LatencyEntry> {
        self.entries.get(key)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &LatencyEntry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Latency of `spec` in microseconds.
    pub fn get(&self, spec: &BlockSpec) -> Result<f64> {
        let key = spec.key();
        self.entries
            .get(&key)
            .map(|e| e.latency_us)
            .ok_or(Error::Coverage { key })
    }

    /// Fails with the first spec that has no entry.
    pub fn check_coverage<'a>(&self, specs: impl IntoIterator<Item = &'a BlockSpec>) -> Result<()> {
        for s in specs {
            self.get(s)?;
        }
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut out = String::new();
        let c = &self.context;
        for (k, v) in [
            ("batch", c.batch.to_string()),
            ("seq_len", c.seq_len.to_string()),
            ("model_dim", c.model_dim.to_string()),
            ("head_dim", c.head_dim.to_string()),
            ("precision", c.precision.clone()),
        ] {
            out.push_str(&format!("# {k}={v}\n"));
        }
        for (k, v) in &self.metadata {
            out.push_str(&format!("# {k}={v}\n"));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for (key, e) in &self.entries {
            w.serialize(Row {
                key: key.clone(),
                latency_us: e.latency_us,
                reps: e.reps,
                warmup: e.warmup,
                iqr_us: e.iqr_us,
            })
            .map_err(|e| Error::format("latency table", e.to_string()))?;
        }
        let body = w
            .into_inner()
            .map_err(|e| Error::format("latency table", e.to_string()))?;
        out.push_str(&String::from_utf8(body).expect("csv output is utf-8"));
        Ok(out)
    }

    pub fn from_csv_str(text: &str) -> Result<Self> {
        let mut meta = BTreeMap::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else {
                break;
            };
            body_start += line.len();
            let (k, v) = rest
                .trim()
                .split_once('=')
                .ok_or_else(|| Error::format("latency table", format!("bad context line `{}`", line.trim_end())))?;
            meta.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut field = |name: &str| {
            meta.remove(name)
                .ok_or_else(|| Error::format("latency table", format!("missing `# {name}=` line")))
        };
        let int = |name: &str, v: String| {
            v.parse::<usize>()
                .map_err(|_| Error::format("latency table", format!("`{name}` is not an integer: {v}")))
        };
        let context = ProfileContext {
            batch: int("batch", field("batch")?)?,
            seq_len: int("seq_len", field("seq_len")?)?,
            model_dim: int("model_dim", field("model_dim")?)?,
            head_dim: int("head_dim", field("head_dim")?)?,
            precision: field("precision")?,
        };
        debug_assert!(CONTEXT_KEYS.iter().all(|k| !meta.contains_key(*k)));
        let mut table = LatencyTable {
            context,
            metadata: meta,
            entries: BTreeMap::new(),
        };
        let mut r = csv::Reader::from_reader(&text.as_bytes()[body_start..]);
        let headers = r
            .headers()
            .map_err(|e| Error::format("latency table", e.to_string()))?
            .clone();
        if headers.iter().collect::<Vec<_>>() != ["key", "latency_us", "reps", "warmup", "iqr_us"] {
            return Err(Error::format(
                "latency table",
                format!("unexpected header row `{}`", headers.iter().collect::<Vec<_>>().join(",")),
            ));
        }
        for row in r.deserialize::<Row>() {
            let row = row.map_err(|e| Error::format("latency table", e.to_string()))?;
            if table.entries.contains_key(&row.key) {
                return Err(Error::format("latency table", format!("duplicate row for `{}`", row.key)));
            }
            table.insert(
                row.key,
                LatencyEntry {
                    latency_us: row.latency_us,
                    reps: row.reps,
                    warmup: row.warmup,
                    iqr_us: row.iqr_us,
                },
            )?;
        }
        Ok(table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv_string()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv_str(&crate::io::read_string(path)?)
    }
}

// ----- timing ----------------------------------------------------------------

/// Median and interquartile range of a sample (nearest-rank quartiles).
pub fn median_iqr(samples: &[f64]) -> (f64, f64) {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let q1 = s[n / 4];
    let q3 = s[(3 * n) / 4];
    (median, q3 - q1)
}

fn check_protocol(reps: usize, warmup: usize) -> Result<()> {
    if reps < 10 || warmup < 3 {
        return Err(Error::Parameter(format!(
            "profiling needs at least 10 repetitions and 3 warmup runs, got {reps} and {warmup}"
        )));
    }
    Ok(())
}

fn summarize(samples: &[f64], reps: usize, warmup: usize) -> LatencyEntry {
    let (median, iqr) = median_iqr(samples);
    LatencyEntry {
        latency_us: median.max(MIN_LATENCY_US),
        reps,
        warmup,
        iqr_us: iqr,
    }
}

fn random_input(ctx: &ProfileContext, rng: &mut RngStream) -> Tensor {
    let shape = [ctx.batch, ctx.seq_len, ctx.model_dim];
    let n = shape.iter().product();
    Tensor::new(&shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).expect("shape matches")
}

/// Median wall-clock time of one block forward pass over random inputs.
/// MoE blocks route tokens round-robin so every expert gets an equal share.
pub fn profile_block(
    spec: &BlockSpec,
    ctx: &ProfileContext,
    reps: usize,
    warmup: usize,
    rng: &mut RngStream,
) -> Result<LatencyEntry> {
    check_protocol(reps, warmup)?;
    let mut store = ParamStore::new();
    let weights = init_block(&mut store, "profile", spec, &ctx.dims(), rng)?;
    let x = random_input(ctx, rng);
    let mut samples = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let mut fctx = ForwardCtx::eval(rng);
        fctx.routing = RoutingMode::Balanced;
        let start = Instant::now();
        let (y, _) = forward_block(&mut g, &store, &weights, xv, &mut fctx)?;
        std::hint::black_box(g.value(y).data()[0]);
        let us = start.elapsed().as_secs_f64() * 1e6;
        if i >= warmup {
            samples.push(us);
        }
    }
    Ok(summarize(&samples, reps, warmup))
}

/// Median wall-clock time of a full forward pass (embedding to logits) of a
/// freshly initialized network with the given slots.
pub fn measure_end_to_end(
    specs: &[BlockSpec],
    vocab: usize,
    ctx: &ProfileContext,
    reps: usize,
    warmup: usize,
    rng: &mut RngStream,
) -> Result<LatencyEntry> {
    check_protocol(reps, warmup)?;
    let shape = NetShape {
        dims: ctx.dims(),
        vocab,
        max_seq_len: ctx.seq_len,
    };
    let net = FinalNetwork::new(specs, shape, rng)?;
    let tokens: Vec<usize> = (0..ctx.batch * ctx.seq_len).map(|_| rng.below(vocab)).collect();
    let mut samples = Vec::with_capacity(reps);
    for i in 0..warmup + reps {
        let mut g = Graph::new();
        let mut fctx = ForwardCtx::eval(rng);
        let start = Instant::now();
        let out = net.forward(&mut g, &tokens, ctx.batch, ctx.seq_len, &mut fctx)?;
        std::hint::black_box(g.value(out.logits).data()[0]);
        let us = start.elapsed().as_secs_f64() * 1e6;
        if i >= warmup {
            samples.push(us);
        }
    }
    Ok(summarize(&samples, reps, warmup))
}

// ----- estimation ------------------------------------------------------------

/// Differentiable expected latency of a search network.
#[derive(Debug)]
pub struct LatencyEstimate {
    /// Scalar total in microseconds.
    pub total: Var,
    pub per_slot_us: Vec<f64>,
}

impl LatencyEstimate {
    pub fn total_us(&self, g: &Graph) -> f64 {
        g.item(self.total)
    }
}

fn option_latencies(options: &[BlockSpec], table: &LatencyTable) -> Result<Vec<f64>> {
    options.iter().map(|s| table.get(s)).collect()
}

/// `sum_b sum_i P_bi * Lat_i` with `probs[b]` the mixture weights of slot
/// `b` over `options[b]`.
pub fn estimate_latency(
    g: &mut Graph,
    probs: &[Var],
    options: &[Vec<BlockSpec>],
    table: &LatencyTable,
) -> Result<LatencyEstimate> {
    if probs.len() != options.len() || probs.is_empty() {
        return Err(Error::Dimension {
            op: "estimate_latency",
            lhs: vec![probs.len()],
            rhs: vec![options.len()],
        });
    }
    table.check_coverage(options.iter().flatten())?;
    let mut total: Option<Var> = None;
    let mut per_slot_us = Vec::with_capacity(probs.len());
    for (&p, menu) in probs.iter().zip(options) {
        let lat = g.input(Tensor::vector(option_latencies(menu, table)?));
        let weighted = g.mul(p, lat)?;
        let slot = g.sum(weighted);
        per_slot_us.push(g.item(slot));
        total = Some(match total {
            Some(t) => g.add(t, slot)?,
            None => slot,
        });
    }
    Ok(LatencyEstimate {
        total: total.expect("at least one slot"),
        per_slot_us,
    })
}

/// Plain-value version of [`estimate_latency`].
pub fn expected_latency(probs: &[Vec<f64>], options: &[Vec<BlockSpec>], table: &LatencyTable) -> Result<f64> {
    let mut total = 0.0;
    for (p, menu) in probs.iter().zip(options) {
        let lat = option_latencies(menu, table)?;
        total += p.iter().zip(&lat).map(|(a, b)| a * b).sum::<f64>();
    }
    Ok(total)
}

/// Sum of table latencies of a fixed slot list.
pub fn architecture_latency(specs: &[BlockSpec], table: &LatencyTable) -> Result<f64> {
    specs.iter().map(|s| table.get(s)).sum()
}

/// Latency of the backbone's baseline blocks, from the same table.
pub fn baseline_latency(backbone: &BackboneSpec, table: &LatencyTable) -> Result<f64> {
    architecture_latency(&backbone.slots, table)
}
