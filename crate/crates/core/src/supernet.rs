//! The search network: every backbone slot becomes a super block holding all
//! candidate blocks plus a vector of architecture weights `alpha`. The slot
//! output is `sum_i P_i * Block_i(x)` with `P` drawn by Gumbel-softmax.

use std::collections::BTreeSet;

use num_bigint::BigUint;

use crate::blocks::{forward_block, init_block, BlockSpec, BlockWeights, ForwardCtx, ModelDims, RoutedLayer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::gumbel::{gumbel_softmax, Noise};
use crate::network::{Embeddings, NetShape};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};

/// Ordered baseline slots of the network being searched.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneSpec {
    pub dims: ModelDims,
    pub slots: Vec<BlockSpec>,
}

impl BackboneSpec {
    pub fn new(dims: ModelDims, slots: Vec<BlockSpec>) -> Result<Self> {
        let b = Self { dims, slots };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.slots.is_empty() {
            return Err(Error::Spec("backbone has no slots".into()));
        }
        for s in &self.slots {
            s.validate(&self.dims)?;
        }
        Ok(())
    }
}

/// Per-slot option menus.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchSpace {
    menus: Vec<Vec<BlockSpec>>,
}

impl SearchSpace {
    /// The same menu in each of `slots` slots.
    pub fn uniform(menu: Vec<BlockSpec>, slots: usize) -> Self {
        Self {
            menus: vec![menu; slots],
        }
    }

    pub fn per_slot(menus: Vec<Vec<BlockSpec>>) -> Self {
        Self { menus }
    }

    pub fn menus(&self) -> &[Vec<BlockSpec>] {
        &self.menus
    }

    pub fn slots(&self) -> usize {
        self.menus.len()
    }

    /// Every menu nonempty, duplicate-free and valid for `dims`.
    pub fn validate(&self, dims: &ModelDims) -> Result<()> {
        for (i, menu) in self.menus.iter().enumerate() {
            if menu.is_empty() {
                return Err(Error::Spec(format!("slot {i} has an empty option menu")));
            }
            let mut seen = BTreeSet::new();
            for spec in menu {
                spec.validate(dims)?;
                if !seen.insert(spec.key()) {
                    return Err(Error::Spec(format!("slot {i} lists `{spec}` twice")));
                }
            }
        }
        Ok(())
    }

    /// Distinct specs across all menus.
    pub fn distinct_specs(&self) -> BTreeSet<BlockSpec> {
        self.menus.iter().flatten().cloned().collect()
    }
}

/// Number of distinct architectures: the product of menu sizes.
pub fn count_architectures(space: &SearchSpace) -> BigUint {
    space
        .menus
        .iter()
        .fold(BigUint::from(1u32), |acc, m| acc * BigUint::from(m.len()))
}

#[derive(Debug)]
pub struct SuperBlock {
    pub options: Vec<BlockSpec>,
    pub weights: Vec<BlockWeights>,
    pub alpha: ParamId,
}

/// How a super block picks its mixture weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleMode {
    /// Full weighted sum under soft Gumbel-softmax probabilities.
    Soft,
    /// Only the sampled option runs; straight-through gradients to alpha.
    Hard,
    /// One-hot on the given option, without sampling.
    Forced(usize),
}

#[derive(Debug)]
pub struct SuperBlockOutput {
    pub y: Var,
    /// Mixture weights `P` used for this pass.
    pub probs: Var,
    pub routed: Vec<RoutedLayer>,
    /// Option evaluated alone, in hard and forced modes.
    pub chosen: Option<usize>,
}

#[allow(clippy::too_many_arguments)]
pub fn superblock_forward(
    g: &mut Graph,
    store: &ParamStore,
    sb: &SuperBlock,
    x: Var,
    temperature: f64,
    mode: SampleMode,
    noise: &mut Noise<'_>,
    ctx: &mut ForwardCtx<'_>,
) -> Result<SuperBlockOutput> {
    let n = sb.options.len();
    if let SampleMode::Forced(j) = mode {
        if j >= n {
            return Err(Error::Parameter(format!("forced option {j} outside menu of {n}")));
        }
        let mut onehot = vec![0.0; n];
        onehot[j] = 1.0;
        let probs = g.input(Tensor::vector(onehot));
        let (y, r) = forward_block(g, store, &sb.weights[j], x, ctx)?;
        return Ok(SuperBlockOutput {
            y,
            probs,
            routed: r.into_iter().collect(),
            chosen: Some(j),
        });
    }

    let alpha = g.param(store, sb.alpha);
    let hard = mode == SampleMode::Hard;
    let probs = gumbel_softmax(g, alpha, temperature, noise, hard)?;
    let indices: Vec<usize> = if hard {
        vec![tensor::argmax(g.value(probs).data())]
    } else {
        (0..n).collect()
    };
    let mut routed = Vec::new();
    let mut y: Option<Var> = None;
    for &i in &indices {
        let (out, r) = forward_block(g, store, &sb.weights[i], x, ctx)?;
        routed.extend(r);
        let p = g.take(probs, &[i])?;
        let term = g.mul_scalar(out, p)?;
        y = Some(match y {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    Ok(SuperBlockOutput {
        y: y.expect("menu is nonempty"),
        probs,
        routed,
        chosen: hard.then(|| indices[0]),
    })
}

/// Slot sampling for a whole-network pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Sampling {
    Soft,
    Hard,
    /// One option index per slot.
    Forced(Vec<usize>),
}

#[derive(Debug)]
pub struct SearchOutput {
    pub logits: Var,
    /// Per-slot mixture weights.
    pub probs: Vec<Var>,
    pub routed: Vec<RoutedLayer>,
    pub chosen: Vec<Option<usize>>,
}

#[derive(Debug)]
pub struct SearchNetwork {
    backbone: BackboneSpec,
    shape: NetShape,
    store: ParamStore,
    emb: Embeddings,
    blocks: Vec<SuperBlock>,
}

/// Builds the search network with independent weights for every option of
/// every slot and all-zero architecture weights.
pub fn build_search_network(
    backbone: &BackboneSpec,
    space: &SearchSpace,
    vocab: usize,
    max_seq_len: usize,
    rng: &mut RngStream,
) -> Result<SearchNetwork> {
    backbone.validate()?;
    if space.slots() != backbone.slots.len() {
        return Err(Error::Spec(format!(
            "search space has {} slot menus but the backbone has {} slots",
            space.slots(),
            backbone.slots.len()
        )));
    }
    space.validate(&backbone.dims)?;
    let shape = NetShape {
        dims: backbone.dims,
        vocab,
        max_seq_len,
    };
    let mut store = ParamStore::new();
    let emb = Embeddings::init(&mut store, &shape, rng);
    let mut blocks = Vec::with_capacity(space.slots());
    for (s, menu) in space.menus().iter().enumerate() {
        let mut weights = Vec::with_capacity(menu.len());
        for (i, spec) in menu.iter().enumerate() {
            weights.push(init_block(&mut store, &format!("slot{s}.opt{i}"), spec, &backbone.dims, rng)?);
        }
        let alpha = store.add(
            format!("slot{s}.alpha"),
            Tensor::zeros(&[menu.len()]),
            ParamGroup::Architecture,
        );
        blocks.push(SuperBlock {
            options: menu.clone(),
            weights,
            alpha,
        });
    }
    Ok(SearchNetwork {
        backbone: backbone.clone(),
        shape,
        store,
        emb,
        blocks,
    })
}

impl SearchNetwork {
    pub fn backbone(&self) -> &BackboneSpec {
        &self.backbone
    }

    pub fn shape(&self) -> &NetShape {
        &self.shape
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn blocks(&self) -> &[SuperBlock] {
        &self.blocks
    }

    pub fn options(&self) -> Vec<Vec<BlockSpec>> {
        self.blocks.iter().map(|b| b.options.clone()).collect()
    }

    pub fn alphas(&self) -> Vec<Vec<f64>> {
        self.blocks
            .iter()
            .map(|b| self.store.value(b.alpha).data().to_vec())
            .collect()
    }

    pub fn set_alpha(&mut self, slot: usize, values: &[f64]) -> Result<()> {
        let id = self.blocks[slot].alpha;
        let data = self.store.get_mut(id).value.data_mut();
        if data.len() != values.len() {
            return Err(Error::Dimension {
                op: "set_alpha",
                lhs: vec![data.len()],
                rhs: vec![values.len()],
            });
        }
        data.copy_from_slice(values);
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward(
        &self,
        g: &mut Graph,
        tokens: &[usize],
        batch: usize,
        seq: usize,
        temperature: f64,
        sampling: &Sampling,
        noise: &mut Noise<'_>,
        ctx: &mut ForwardCtx<'_>,
    ) -> Result<SearchOutput> {
        if let Sampling::Forced(idx) = sampling {
            if idx.len() != self.blocks.len() {
                return Err(Error::Parameter(format!(
                    "{} forced choices for {} slots",
                    idx.len(),
                    self.blocks.len()
                )));
            }
        }
        let mut x = self.emb.embed(g, &self.store, tokens, batch, seq)?;
        let mut probs = Vec::with_capacity(self.blocks.len());
        let mut routed = Vec::new();
        let mut chosen = Vec::with_capacity(self.blocks.len());
        for (s, sb) in self.blocks.iter().enumerate() {
            let mode = match sampling {
                Sampling::Soft => SampleMode::Soft,
                Sampling::Hard => SampleMode::Hard,
                Sampling::Forced(idx) => SampleMode::Forced(idx[s]),
            };
            let out = superblock_forward(g, &self.store, sb, x, temperature, mode, noise, ctx)?;
            x = out.y;
            probs.push(out.probs);
            routed.extend(out.routed);
            chosen.push(out.chosen);
        }
        let logits = self.emb.logits(g, &self.store, x)?;
        Ok(SearchOutput {
            logits,
            probs,
            routed,
            chosen,
        })
    }
}
