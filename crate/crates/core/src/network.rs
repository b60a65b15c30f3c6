//! Token/position embeddings, output head, and the fixed-architecture
//! network produced by sampling.

use crate::blocks::{forward_block, init_block, layer_norm, init_layer_norm, BlockSpec, BlockWeights, ForwardCtx, LayerNormWeights, ModelDims, RoutedLayer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::RngStream;

/// Sizes that do not depend on the architecture.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NetShape {
    pub dims: ModelDims,
    pub vocab: usize,
    pub max_seq_len: usize,
}

#[derive(Clone, Debug)]
pub struct Embeddings {
    pub tok: ParamId,
    pub pos: ParamId,
    pub ln_f: LayerNormWeights,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

impl Embeddings {
    pub fn init(store: &mut ParamStore, shape: &NetShape, rng: &mut RngStream) -> Self {
        let d = shape.dims.model_dim;
        Self {
            tok: store.normal("embed.tok", &[shape.vocab, d], 1.0, rng),
            pos: store.normal("embed.pos", &[shape.max_seq_len, d], 0.1, rng),
            ln_f: init_layer_norm(store, "final", d),
            head_w: store.normal("head.w", &[d, shape.vocab], (d as f64).powf(-0.5), rng),
            head_b: store.zeros("head.b", &[shape.vocab]),
        }
    }

    /// `tokens` is `batch * seq` ids in row-major order; returns
    /// `[batch, seq, model_dim]`.
    pub fn embed(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &[usize],
        batch: usize,
        seq: usize,
    ) -> Result<Var> {
        let max_seq = store.value(self.pos).shape()[0];
        if seq == 0 || seq > max_seq || tokens.len() != batch * seq {
            return Err(Error::Data(format!(
                "{} tokens do not form {batch} sequences of length {seq} (max {max_seq})",
                tokens.len()
            )));
        }
        let tok = g.param(store, self.tok);
        let pos = g.param(store, self.pos);
        let d = store.value(self.tok).shape()[1];
        let t = g.embedding(tok, tokens)?;
        let positions: Vec<usize> = (0..batch).flat_map(|_| 0..seq).collect();
        let p = g.embedding(pos, &positions)?;
        let x = g.add(t, p)?;
        g.reshape(x, &[batch, seq, d])
    }

    /// `[batch, seq, D]` to `[batch * seq, vocab]` logits.
    pub fn logits(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let d = *g.shape(x).last().unwrap_or(&0);
        let rows = g.value(x).len() / d.max(1);
        let flat = g.reshape(x, &[rows, d])?;
        let h = layer_norm(g, store, &self.ln_f, flat)?;
        let w = g.param(store, self.head_w);
        let b = g.param(store, self.head_b);
        let o = g.matmul(h, w)?;
        g.add_row(o, b)
    }
}

#[derive(Debug)]
pub struct NetOutput {
    /// `[batch * seq, vocab]`.
    pub logits: Var,
    /// One entry per MoE slot, in slot order.
    pub routed: Vec<RoutedLayer>,
}

/// A network with one fixed block per slot.
#[derive(Debug)]
pub struct FinalNetwork {
    shape: NetShape,
    store: ParamStore,
    emb: Embeddings,
    slots: Vec<(BlockSpec, BlockWeights)>,
}

impl FinalNetwork {
    /// Builds the network with freshly initialized weights.
    pub fn new(specs: &[BlockSpec], shape: NetShape, rng: &mut RngStream) -> Result<Self> {
        shape.dims.validate()?;
        let mut store = ParamStore::new();
        let emb = Embeddings::init(&mut store, &shape, rng);
        let mut slots = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let w = init_block(&mut store, &format!("slot{i}"), spec, &shape.dims, rng)?;
            slots.push((spec.clone(), w));
        }
        Ok(Self {
            shape,
            store,
            emb,
            slots,
        })
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn specs(&self) -> Vec<BlockSpec> {
        self.slots.iter().map(|(s, _)| s.clone()).collect()
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count(crate::params::ParamGroup::Network)
    }

    pub fn has_moe(&self) -> bool {
        self.slots.iter().any(|(s, _)| s.is_moe())
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<NetOutput> {
        let mut x = self.emb.embed(g, &self.store, tokens, batch, seq)?;
        let mut routed = Vec::new();
        for (_, w) in &self.slots {
            let (y, r) = forward_block(g, &self.store, w, x, ctx)?;
            x = y;
            routed.extend(r);
        }
        let logits = self.emb.logits(g, &self.store, x)?;
        Ok(NetOutput { logits, routed })
    }
}
