//! The block families a slot can hold: skip, causal multi-head attention,
//! feed-forward, and mixture-of-experts feed-forward.
//!
//! Every block maps a `[batch, seq, model_dim]` tensor to the same shape.
//! Non-skip blocks are pre-norm residual: `x + f(LN(x))`.
//!
//! # Block keys
//!
//! Each [`BlockSpec`] has a canonical key used by latency tables and
//! architecture files:
//!
//! ```text
//! skip
//! mha:h=<heads>
//! ffl:d=<inner_dim>
//! moe:d=<inner_dim>:e=<experts>:k=<top_k>
//! ```
//!
//! Numbers are positive decimal integers without sign or leading zeros, so
//! every spec has exactly one key and every key exactly one spec.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BlockSpec {
    Skip,
    Mha {
        heads: usize,
    },
    Ffl {
        inner_dim: usize,
    },
    Moe {
        inner_dim: usize,
        experts: usize,
        top_k: usize,
    },
}

/// Network-wide sizes shared by every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub model_dim: usize,
    /// Width of one attention head; an `h`-head block projects to
    /// `h * head_dim`.
    pub head_dim: usize,
}

impl ModelDims {
    /// Dims with the default head width `model_dim / 8` (at least 1).
    pub fn new(model_dim: usize) -> Self {
        Self {
            model_dim,
            head_dim: (model_dim / 8).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.head_dim == 0 {
            return Err(Error::Spec(format!(
                "model_dim and head_dim must be positive, got {} and {}",
                self.model_dim, self.head_dim
            )));
        }
        Ok(())
    }
}

impl BlockSpec {
    pub fn key(&self) -> String {
        self.to_string()
    }

    pub fn is_skip(&self) -> bool {
        matches!(self, BlockSpec::Skip)
    }

    pub fn is_moe(&self) -> bool {
        matches!(self, BlockSpec::Moe { .. })
    }

    /// Checks the spec against the network dims.
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        match *self {
            BlockSpec::Skip => Ok(()),
            BlockSpec::Mha { heads } => {
                if heads == 0 || !dims.model_dim.is_multiple_of(heads) {
                    return Err(Error::Spec(format!(
                        "`{self}`: {heads} heads do not divide model_dim {}",
                        dims.model_dim
                    )));
                }
                Ok(())
            }
            BlockSpec::Ffl { inner_dim } => {
                if inner_dim == 0 {
                    return Err(Error::Spec(format!("`{self}`: inner_dim must be positive")));
                }
                Ok(())
            }
            BlockSpec::Moe {
                inner_dim,
                experts,
                top_k,
            } => {
                if inner_dim == 0 {
                    return Err(Error::Spec(format!("`{self}`: inner_dim must be positive")));
                }
                if top_k == 0 || top_k > experts {
                    return Err(Error::Spec(format!(
                        "`{self}`: top_k must satisfy 1 <= k <= experts"
                    )));
                }
                Ok(())
            }
        }
    }
}

impl fmt::Display for BlockSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BlockSpec::Skip => write!(f, "skip"),
            BlockSpec::Mha { heads } => write!(f, "mha:h={heads}"),
            BlockSpec::Ffl { inner_dim } => write!(f, "ffl:d={inner_dim}"),
            BlockSpec::Moe {
                inner_dim,
                experts,
                top_k,
            } => write!(f, "moe:d={inner_dim}:e={experts}:k={top_k}"),
        }
    }
}

fn parse_field(key: &str, part: Option<&str>, name: &str) -> Result<usize> {
    let bad = || Error::Spec(format!("malformed block key `{key}`: expected `{name}=<positive int>`"));
    let value = part
        .and_then(|p| p.strip_prefix(name))
        .and_then(|p| p.strip_prefix('='))
        .ok_or_else(bad)?;
    let canonical = !value.is_empty()
        && value.bytes().all(|b| b.is_ascii_digit())
        && !value.starts_with('0');
    if !canonical {
        return Err(bad());
    }
    value.parse().map_err(|_| bad())
}

impl FromStr for BlockSpec {
    type Err = Error;

    fn from_str(key: &str) -> Result<Self> {
        let mut parts = key.split(':');
        let kind = parts.next().unwrap_or_default();
        let spec = match kind {
            "skip" => BlockSpec::Skip,
            "mha" => BlockSpec::Mha {
                heads: parse_field(key, parts.next(), "h")?,
            },
            "ffl" => BlockSpec::Ffl {
                inner_dim: parse_field(key, parts.next(), "d")?,
            },
            "moe" => BlockSpec::Moe {
                inner_dim: parse_field(key, parts.next(), "d")?,
                experts: parse_field(key, parts.next(), "e")?,
                top_k: parse_field(key, parts.next(), "k")?,
            },
            _ => {
                return Err(Error::Spec(format!(
                    "unknown block kind in `{key}` (expected skip, mha, ffl or moe)"
                )))
            }
        };
        if parts.next().is_some() {
            return Err(Error::Spec(format!("trailing fields in block key `{key}`")));
        }
        if let BlockSpec::Moe { experts, top_k, .. } = spec {
            if top_k == 0 || top_k > experts {
                return Err(Error::Spec(format!("`{key}`: top_k must satisfy 1 <= k <= experts")));
            }
        }
        Ok(spec)
    }
}

impl Serialize for BlockSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for BlockSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let key = String::deserialize(d)?;
        key.parse().map_err(serde::de::Error::custom)
    }
}

// ----- weights ---------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct LayerNormWeights {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct FeedForwardWeights {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub ln: LayerNormWeights,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub head_dim: usize,
}

#[derive(Clone, Debug)]
pub struct FflWeights {
    pub ln: LayerNormWeights,
    pub ff: FeedForwardWeights,
}

#[derive(Clone, Debug)]
pub struct MoeWeights {
    pub ln: LayerNormWeights,
    /// `[model_dim, experts]`, no bias.
    pub gate: ParamId,
    pub experts: Vec<FeedForwardWeights>,
    pub top_k: usize,
}

#[derive(Clone, Debug)]
pub enum BlockWeights {
    Skip,
    Mha(AttentionWeights),
    Ffl(FflWeights),
    Moe(MoeWeights),
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, dim: usize) -> LayerNormWeights {
    LayerNormWeights {
        gamma: store.ones(format!("{prefix}.ln.gamma"), &[dim]),
        beta: store.zeros(format!("{prefix}.ln.beta"), &[dim]),
    }
}

fn init_feed_forward(
    store: &mut ParamStore,
    prefix: &str,
    model_dim: usize,
    inner_dim: usize,
    rng: &mut RngStream,
) -> FeedForwardWeights {
    FeedForwardWeights {
        w1: store.normal(
            format!("{prefix}.w1"),
            &[model_dim, inner_dim],
            (model_dim as f64).powf(-0.5),
            rng,
        ),
        b1: store.zeros(format!("{prefix}.b1"), &[inner_dim]),
        w2: store.normal(
            format!("{prefix}.w2"),
            &[inner_dim, model_dim],
            (inner_dim as f64).powf(-0.5),
            rng,
        ),
        b2: store.zeros(format!("{prefix}.b2"), &[model_dim]),
    }
}

/// Registers fresh weights for `spec` under `prefix`. Skip blocks own no
/// parameters.
pub fn init_block(
    store: &mut ParamStore,
    prefix: &str,
    spec: &BlockSpec,
    dims: &ModelDims,
    rng: &mut RngStream,
) -> Result<BlockWeights> {
    spec.validate(dims)?;
    let d = dims.model_dim;
    let std = (d as f64).powf(-0.5);
    Ok(match *spec {
        BlockSpec::Skip => BlockWeights::Skip,
        BlockSpec::Mha { heads } => {
            let width = heads * dims.head_dim;
            BlockWeights::Mha(AttentionWeights {
                ln: init_layer_norm(store, prefix, d),
                wq: store.normal(format!("{prefix}.wq"), &[d, width], std, rng),
                wk: store.normal(format!("{prefix}.wk"), &[d, width], std, rng),
                wv: store.normal(format!("{prefix}.wv"), &[d, width], std, rng),
                wo: store.normal(
                    format!("{prefix}.wo"),
                    &[width, d],
                    (width as f64).powf(-0.5),
                    rng,
                ),
                heads,
                head_dim: dims.head_dim,
            })
        }
        BlockSpec::Ffl { inner_dim } => BlockWeights::Ffl(FflWeights {
            ln: init_layer_norm(store, prefix, d),
            ff: init_feed_forward(store, prefix, d, inner_dim, rng),
        }),
        BlockSpec::Moe {
            inner_dim,
            experts,
            top_k,
        } => {
            let ln = init_layer_norm(store, prefix, d);
            let gate = store.normal(format!("{prefix}.gate"), &[d, experts], std, rng);
            let experts = (0..experts)
                .map(|e| init_feed_forward(store, &format!("{prefix}.expert{e}"), d, inner_dim, rng))
                .collect();
            BlockWeights::Moe(MoeWeights {
                ln,
                gate,
                experts,
                top_k,
            })
        }
    })
}

// ----- forward ---------------------------------------------------------------

/// How exact ties between gate probabilities are ordered.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TieBreak {
    LowerIndex,
    /// Uniformly random among tied experts, drawn from the context stream.
    Random,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RoutingMode {
    /// Top-k of the gate distribution.
    Gate(TieBreak),
    /// Token `t` goes to experts `(t*k + j) mod E`, `j < k`, regardless of the
    /// gate. Used for profiling the balanced case.
    Balanced,
}

/// Per-pass settings shared by every block.
pub struct ForwardCtx<'a> {
    pub train: bool,
    pub dropout: f64,
    pub moe_dropout: f64,
    pub routing: RoutingMode,
    pub rng: &'a mut RngStream,
}

impl<'a> ForwardCtx<'a> {
    /// Evaluation mode: no dropout, gate routing with lower-index ties.
    pub fn eval(rng: &'a mut RngStream) -> Self {
        Self {
            train: false,
            dropout: 0.0,
            moe_dropout: 0.0,
            routing: RoutingMode::Gate(TieBreak::LowerIndex),
            rng,
        }
    }

    pub fn train(rng: &'a mut RngStream, dropout: f64, moe_dropout: f64) -> Self {
        Self {
            train: true,
            dropout,
            moe_dropout,
            routing: RoutingMode::Gate(TieBreak::LowerIndex),
            rng,
        }
    }
}

/// Routing summary of one MoE layer for one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingStats {
    /// Tokens routed to each expert divided by the token count. Each token
    /// counts once per selected expert, so the entries sum to `top_k`.
    pub token_fraction: Vec<f64>,
    /// Gate probability averaged over tokens; sums to 1.
    pub mean_gate_score: Vec<f64>,
    pub tokens_seen: usize,
    pub top_k: usize,
}

impl RoutingStats {
    pub fn from_assignments(assignments: &[Vec<usize>], probs: &[f64], experts: usize, top_k: usize) -> Self {
        let n = assignments.len();
        let mut counts = vec![0usize; experts];
        for sel in assignments {
            for &e in sel {
                counts[e] += 1;
            }
        }
        let mut mean = vec![0.0; experts];
        for row in probs.chunks(experts) {
            for (m, p) in mean.iter_mut().zip(row) {
                *m += p;
            }
        }
        let denom = n.max(1) as f64;
        Self {
            token_fraction: counts.iter().map(|&c| c as f64 / denom).collect(),
            mean_gate_score: mean.iter().map(|m| m / denom).collect(),
            tokens_seen: n,
            top_k,
        }
    }

    pub fn experts(&self) -> usize {
        self.token_fraction.len()
    }

    pub fn max_fraction(&self) -> f64 {
        self.token_fraction.iter().copied().fold(0.0, f64::max)
    }
}

/// Routing result of one MoE layer, with the differentiable mean gate score.
#[derive(Clone, Debug)]
pub struct RoutedLayer {
    pub stats: RoutingStats,
    /// `[experts]` mean of the gate softmax over tokens.
    pub gate_mean: Var,
}

pub struct GateOutput {
    /// Selected experts per token, highest probability first.
    pub assignments: Vec<Vec<usize>>,
    /// `[tokens, experts]` gate softmax.
    pub probs: Var,
    pub layer: RoutedLayer,
}

/// Top-k expert indices of one token's gate distribution.
pub fn select_experts(probs: &[f64], top_k: usize, tie: TieBreak, rng: &mut RngStream) -> Vec<usize> {
    match tie {
        TieBreak::LowerIndex => tensor::top_k(probs, top_k),
        TieBreak::Random => {
            let mut order: Vec<usize> = (0..probs.len()).collect();
            rng.shuffle(&mut order);
            // Stable sort keeps the random order among exact ties.
            order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap_or(std::cmp::Ordering::Equal));
            order.truncate(top_k);
            order
        }
    }
}

/// Gate over `tokens[N, D]` (already layer-normed) with a bias-free
/// `gate[D, E]`: per-token softmax, then top-k selection.
pub fn gate_route(
    g: &mut Graph,
    tokens: Var,
    gate: Var,
    top_k: usize,
    tie: TieBreak,
    rng: &mut RngStream,
) -> Result<GateOutput> {
    let experts = g.shape(gate).last().copied().unwrap_or(0);
    if top_k == 0 || top_k > experts {
        return Err(Error::Spec(format!(
            "top_k {top_k} outside 1..={experts}"
        )));
    }
    let logits = g.matmul(tokens, gate)?;
    let probs = g.softmax(logits, 1)?;
    let pv = g.value(probs).data().to_vec();
    let assignments: Vec<Vec<usize>> = pv
        .chunks(experts)
        .map(|row| select_experts(row, top_k, tie, rng))
        .collect();
    let stats = RoutingStats::from_assignments(&assignments, &pv, experts, top_k);
    let gate_mean = g.mean_axis(probs, 0)?;
    Ok(GateOutput {
        assignments,
        probs,
        layer: RoutedLayer { stats, gate_mean },
    })
}

fn seq_shape(g: &Graph, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [b, t, d] => Ok((b, t, d)),
        ref other => Err(Error::Dimension {
            op,
            lhs: other.to_vec(),
            rhs: vec![],
        }),
    }
}

pub fn layer_norm(g: &mut Graph, store: &ParamStore, w: &LayerNormWeights, x: Var) -> Result<Var> {
    let gamma = g.param(store, w.gamma);
    let beta = g.param(store, w.beta);
    g.layer_norm(x, gamma, beta)
}

/// `W2·dropout(relu(W1·h + b1)) + b2`, without the residual.
pub fn feed_forward(
    g: &mut Graph,
    store: &ParamStore,
    w: &FeedForwardWeights,
    h: Var,
    p_drop: f64,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let w1 = g.param(store, w.w1);
    let b1 = g.param(store, w.b1);
    let w2 = g.param(store, w.w2);
    let b2 = g.param(store, w.b2);
    let a = g.matmul(h, w1)?;
    let a = g.add_row(a, b1)?;
    let a = g.relu(a);
    let a = g.dropout(a, p_drop, ctx.rng, ctx.train)?;
    let o = g.matmul(a, w2)?;
    g.add_row(o, b2)
}

pub fn forward_skip(x: Var) -> Var {
    x
}

pub fn forward_ffl(
    g: &mut Graph,
    store: &ParamStore,
    w: &FflWeights,
    x: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    seq_shape(g, x, "forward_ffl")?;
    let h = layer_norm(g, store, &w.ln, x)?;
    let p = ctx.dropout;
    let o = feed_forward(g, store, &w.ff, h, p, ctx)?;
    g.add(x, o)
}

pub fn forward_mha(
    g: &mut Graph,
    store: &ParamStore,
    w: &AttentionWeights,
    x: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<Var> {
    let (b, t, _) = seq_shape(g, x, "forward_mha")?;
    let (heads, hd) = (w.heads, w.head_dim);
    let width = heads * hd;
    let h = layer_norm(g, store, &w.ln, x)?;
    let wq = g.param(store, w.wq);
    let wk = g.param(store, w.wk);
    let wv = g.param(store, w.wv);
    let wo = g.param(store, w.wo);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let scale = (hd as f64).powf(-0.5);

    let mut per_batch = Vec::with_capacity(b);
    for bi in 0..b {
        let mut rows = [q, k, v];
        for r in &mut rows {
            let s = g.narrow(*r, 0, bi, 1)?;
            *r = g.reshape(s, &[t, width])?;
        }
        let [qb, kb, vb] = rows;
        let mut per_head = Vec::with_capacity(heads);
        for hi in 0..heads {
            let qh = g.narrow(qb, 1, hi * hd, hd)?;
            let kh = g.narrow(kb, 1, hi * hd, hd)?;
            let vh = g.narrow(vb, 1, hi * hd, hd)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale);
            let scores = g.causal_mask(scores)?;
            let attn = g.softmax(scores, 1)?;
            per_head.push(g.matmul(attn, vh)?);
        }
        per_batch.push(g.concat(&per_head, 1)?);
    }
    let merged = g.concat(&per_batch, 0)?;
    let merged = g.reshape(merged, &[b, t, width])?;
    let o = g.matmul(merged, wo)?;
    let o = g.dropout(o, ctx.dropout, ctx.rng, ctx.train)?;
    g.add(x, o)
}

pub fn forward_moe(
    g: &mut Graph,
    store: &ParamStore,
    w: &MoeWeights,
    x: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, RoutedLayer)> {
    let (b, t, d) = seq_shape(g, x, "forward_moe")?;
    let n = b * t;
    let experts = w.experts.len();
    let k = w.top_k;
    let xf = g.reshape(x, &[n, d])?;
    let h = layer_norm(g, store, &w.ln, xf)?;
    let gate = g.param(store, w.gate);
    let tie = match ctx.routing {
        RoutingMode::Gate(tie) => tie,
        RoutingMode::Balanced => TieBreak::LowerIndex,
    };
    let mut routed = gate_route(g, h, gate, k, tie, ctx.rng)?;
    let pv = g.value(routed.probs).data().to_vec();
    if ctx.routing == RoutingMode::Balanced {
        routed.assignments = (0..n)
            .map(|tok| (0..k).map(|j| (tok * k + j) % experts).collect())
            .collect();
        routed.layer.stats = RoutingStats::from_assignments(&routed.assignments, &pv, experts, k);
    }

    let inv_sum: Vec<f64> = routed
        .assignments
        .iter()
        .enumerate()
        .map(|(tok, sel)| 1.0 / sel.iter().map(|&e| pv[tok * experts + e]).sum::<f64>())
        .collect();

    let mut acc = xf;
    for (e, ew) in w.experts.iter().enumerate() {
        let rows: Vec<usize> = (0..n).filter(|&tok| routed.assignments[tok].contains(&e)).collect();
        if rows.is_empty() {
            continue;
        }
        let sub = g.gather_rows(h, &rows)?;
        let p = ctx.moe_dropout;
        let out = feed_forward(g, store, ew, sub, p, ctx)?;
        let flat: Vec<usize> = rows.iter().map(|&tok| tok * experts + e).collect();
        let weight = g.take(routed.probs, &flat)?;
        // Renormalized over the selected experts; the denominator is held
        // constant for the backward pass.
        let norm = g.input(Tensor::vector(rows.iter().map(|&tok| inv_sum[tok]).collect()));
        let weight = g.mul(weight, norm)?;
        let scaled = g.scale_rows(out, weight)?;
        acc = g.index_add_rows(acc, scaled, &rows)?;
    }
    let y = g.reshape(acc, &[b, t, d])?;
    Ok((y, routed.layer))
}

/// Forward through any block. MoE blocks also return their routing.
pub fn forward_block(
    g: &mut Graph,
    store: &ParamStore,
    w: &BlockWeights,
    x: Var,
    ctx: &mut ForwardCtx<'_>,
) -> Result<(Var, Option<RoutedLayer>)> {
    match w {
        BlockWeights::Skip => Ok((forward_skip(x), None)),
        BlockWeights::Mha(w) => Ok((forward_mha(g, store, w, x, ctx)?, None)),
        BlockWeights::Ffl(w) => Ok((forward_ffl(g, store, w, x, ctx)?, None)),
        BlockWeights::Moe(w) => {
            let (y, r) = forward_moe(g, store, w, x, ctx)?;
            Ok((y, Some(r)))
        }
    }
}
