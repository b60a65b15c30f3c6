//! Oracles and fixtures shared by the integration tests and the acceptance
//! runner. Everything here is written independently of the library code it
//! checks: plain loops, finite differences, hand-built inputs.

#![allow(dead_code)]

use std::path::PathBuf;

use moe_nas::blocks::{BlockSpec, ModelDims};
use moe_nas::data::Batch;
use moe_nas::gumbel::{gumbel_softmax, Noise};
use moe_nas::latency::{LatencyEntry, LatencyTable, ProfileContext};
use moe_nas::{Graph, Result, RngStream, Tensor, Var};

pub fn corpus_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/corpus.txt")
}

pub fn normal_tensor(shape: &[usize], rng: &mut RngStream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// Normal values pushed at least `gap` away from zero.
fn away_from_zero(shape: &[usize], gap: f64, rng: &mut RngStream) -> Tensor {
    let mut t = normal_tensor(shape, rng);
    for x in t.data_mut() {
        *x = x.signum() * (x.abs() + gap);
    }
    t
}

fn dim(rng: &mut RngStream) -> usize {
    1 + rng.below(3)
}

// ----- finite-difference gradient check --------------------------------------

/// Inputs and side data for one random instance of an op.
pub struct Fixture {
    pub inputs: Vec<Tensor>,
    pub ids: Vec<usize>,
    pub axis: usize,
    pub shape: Vec<usize>,
    pub scalar: f64,
    pub seed: u64,
}

impl Fixture {
    fn new(inputs: Vec<Tensor>, seed: u64) -> Self {
        Self {
            inputs,
            ids: Vec::new(),
            axis: 0,
            shape: Vec::new(),
            scalar: 0.0,
            seed,
        }
    }
}

type Gen = fn(&mut RngStream, u64) -> Fixture;
type Build = fn(&mut Graph, &[Var], &Fixture) -> Result<Var>;

pub struct OpCase {
    pub name: &'static str,
    pub gen: Gen,
    pub build: Build,
}

macro_rules! case {
    ($name:literal, $gen:expr, $build:expr) => {
        OpCase {
            name: $name,
            gen: $gen,
            build: $build,
        }
    };
}

pub fn op_cases() -> Vec<OpCase> {
    vec![
        case!(
            "add",
            |r, s| {
                let sh = [dim(r), dim(r)];
                Fixture::new(vec![normal_tensor(&sh, r), normal_tensor(&sh, r)], s)
            },
            |g, v, _| g.add(v[0], v[1])
        ),
        case!(
            "sub",
            |r, s| {
                let sh = [dim(r), dim(r), dim(r)];
                Fixture::new(vec![normal_tensor(&sh, r), normal_tensor(&sh, r)], s)
            },
            |g, v, _| g.sub(v[0], v[1])
        ),
        case!(
            "mul",
            |r, s| {
                let sh = [dim(r), dim(r)];
                Fixture::new(vec![normal_tensor(&sh, r), normal_tensor(&sh, r)], s)
            },
            |g, v, _| g.mul(v[0], v[1])
        ),
        case!(
            "div",
            |r, s| {
                let sh = [dim(r), dim(r)];
                Fixture::new(vec![normal_tensor(&sh, r), away_from_zero(&sh, 0.5, r)], s)
            },
            |g, v, _| g.div(v[0], v[1])
        ),
        case!(
            "scale",
            |r, s| {
                let mut f = Fixture::new(vec![normal_tensor(&[dim(r), dim(r)], r)], s);
                f.scalar = r.normal(0.0, 2.0);
                f
            },
            |g, v, f| Ok(g.scale(v[0], f.scalar))
        ),
        case!(
            "add_row",
            |r, s| {
                let d = dim(r);
                Fixture::new(vec![normal_tensor(&[dim(r), dim(r), d], r), normal_tensor(&[d], r)], s)
            },
            |g, v, _| g.add_row(v[0], v[1])
        ),
        case!(
            "scale_rows",
            |r, s| {
                let n = dim(r);
                Fixture::new(vec![normal_tensor(&[n, dim(r)], r), normal_tensor(&[n], r)], s)
            },
            |g, v, _| g.scale_rows(v[0], v[1])
        ),
        case!(
            "mul_scalar",
            |r, s| Fixture::new(vec![normal_tensor(&[dim(r), dim(r)], r), normal_tensor(&[1], r)], s),
            |g, v, _| g.mul_scalar(v[0], v[1])
        ),
        case!(
            "relu",
            |r, s| Fixture::new(vec![away_from_zero(&[dim(r), dim(r)], 0.1, r)], s),
            |g, v, _| Ok(g.relu(v[0]))
        ),
        case!(
            "dropout",
            |r, s| Fixture::new(vec![normal_tensor(&[dim(r), 4], r)], s),
            |g, v, f| {
                let mut rng = RngStream::new(f.seed, 1000);
                g.dropout(v[0], 0.3, &mut rng, true)
            }
        ),
        case!(
            "matmul",
            |r, s| {
                let k = dim(r);
                Fixture::new(vec![normal_tensor(&[dim(r), dim(r), k], r), normal_tensor(&[k, dim(r)], r)], s)
            },
            |g, v, _| g.matmul(v[0], v[1])
        ),
        case!(
            "transpose",
            |r, s| Fixture::new(vec![normal_tensor(&[dim(r), dim(r)], r)], s),
            |g, v, _| g.transpose(v[0])
        ),
        case!(
            "reshape",
            |r, s| {
                let (a, b) = (dim(r), dim(r));
                let mut f = Fixture::new(vec![normal_tensor(&[a, b, 2], r)], s);
                f.shape = vec![2, a * b];
                f
            },
            |g, v, f| g.reshape(v[0], &f.shape)
        ),
        case!(
            "narrow",
            |r, s| {
                let sh = [dim(r) + 1, dim(r) + 1];
                let mut f = Fixture::new(vec![normal_tensor(&sh, r)], s);
                f.axis = r.below(2);
                let n = sh[f.axis];
                let start = r.below(n);
                f.ids = vec![start, 1 + r.below(n - start)];
                f
            },
            |g, v, f| g.narrow(v[0], f.axis, f.ids[0], f.ids[1])
        ),
        case!(
            "concat",
            |r, s| {
                let mut f = Fixture::new(Vec::new(), s);
                f.axis = r.below(2);
                let other = dim(r);
                for _ in 0..3 {
                    let sh = if f.axis == 0 { [dim(r), other] } else { [other, dim(r)] };
                    f.inputs.push(normal_tensor(&sh, r));
                }
                f
            },
            |g, v, f| g.concat(v, f.axis)
        ),
        case!(
            "sum",
            |r, s| Fixture::new(vec![normal_tensor(&[dim(r), dim(r)], r)], s),
            |g, v, _| Ok(g.sum(v[0]))
        ),
        case!(
            "mean",
            |r, s| Fixture::new(vec![normal_tensor(&[dim(r), dim(r)], r)], s),
            |g, v, _| Ok(g.mean(v[0]))
        ),
        case!(
            "sum_axis",
            |r, s| {
                let mut f = Fixture::new(vec![normal_tensor(&[dim(r), dim(r), dim(r)], r)], s);
                f.axis = r.below(3);
                f
            },
            |g, v, f| g.sum_axis(v[0], f.axis)
        ),
        case!(
            "mean_axis",
            |r, s| {
                let mut f = Fixture::new(vec![normal_tensor(&[dim(r), dim(r)], r)], s);
                f.axis = r.below(2);
                f
            },
            |g, v, f| g.mean_axis(v[0], f.axis)
        ),
        case!(
            "softmax",
            |r, s| {
                let mut f = Fixture::new(vec![normal_tensor(&[dim(r), dim(r) + 1], r)], s);
                f.axis = r.below(2);
                f
            },
            |g, v, f| g.softmax(v[0], f.axis)
        ),
        case!(
            "cross_entropy",
            |r, s| {
                let (n, c) = (dim(r), dim(r) + 1);
                let mut f = Fixture::new(vec![normal_tensor(&[n, c], r)], s);
                f.ids = (0..n).map(|_| r.below(c)).collect();
                f
            },
            |g, v, f| g.cross_entropy(v[0], &f.ids)
        ),
        case!(
            "layer_norm",
            |r, s| {
                let d = dim(r) + 1;
                Fixture::new(
                    vec![normal_tensor(&[dim(r), d], r), normal_tensor(&[d], r), normal_tensor(&[d], r)],
                    s,
                )
            },
            |g, v, _| g.layer_norm(v[0], v[1], v[2])
        ),
        case!(
            "embedding",
            |r, s| {
                let v = dim(r) + 1;
                let mut f = Fixture::new(vec![normal_tensor(&[v, dim(r)], r)], s);
                f.ids = (0..4).map(|_| r.below(v)).collect();
                f
            },
            |g, v, f| g.embedding(v[0], &f.ids)
        ),
        case!(
            "causal_mask",
            |r, s| {
                let t = dim(r) + 1;
                Fixture::new(vec![normal_tensor(&[dim(r), t, t], r)], s)
            },
            |g, v, _| {
                let m = g.causal_mask(v[0])?;
                g.softmax(m, 2)
            }
        ),
        case!(
            "take",
            |r, s| {
                let sh = [dim(r), dim(r)];
                let mut f = Fixture::new(vec![normal_tensor(&sh, r)], s);
                f.ids = (0..5).map(|_| r.below(sh[0] * sh[1])).collect();
                f
            },
            |g, v, f| g.take(v[0], &f.ids)
        ),
        case!(
            "gather_rows",
            |r, s| {
                let n = dim(r);
                let mut f = Fixture::new(vec![normal_tensor(&[n, dim(r)], r)], s);
                f.ids = (0..4).map(|_| r.below(n)).collect();
                f
            },
            |g, v, f| g.gather_rows(v[0], &f.ids)
        ),
        case!(
            "index_add_rows",
            |r, s| {
                let (n, d) = (dim(r), dim(r));
                let mut f = Fixture::new(vec![normal_tensor(&[n, d], r), normal_tensor(&[4, d], r)], s);
                f.ids = (0..4).map(|_| r.below(n)).collect();
                f
            },
            |g, v, f| g.index_add_rows(v[0], v[1], &f.ids)
        ),
        case!(
            "gumbel_softmax",
            |r, s| {
                let n = dim(r) + 1;
                let mut f = Fixture::new(vec![normal_tensor(&[n], r)], s);
                f.scalar = 0.5 + 1.5 * r.uniform();
                f
            },
            |g, v, f| {
                let mut rng = RngStream::new(f.seed, 1001);
                let n = g.value(v[0]).len();
                let noise: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
                gumbel_softmax(g, v[0], f.scalar, &mut Noise::Fixed(&noise), false)
            }
        ),
        case!(
            "attention_head",
            |r, s| {
                let (t, d) = (dim(r) + 1, dim(r) + 1);
                Fixture::new(
                    vec![
                        normal_tensor(&[t, d], r),
                        normal_tensor(&[d, 2], r),
                        normal_tensor(&[d, 2], r),
                        normal_tensor(&[d, 2], r),
                    ],
                    s,
                )
            },
            |g, v, _| {
                let q = g.matmul(v[0], v[1])?;
                let k = g.matmul(v[0], v[2])?;
                let val = g.matmul(v[0], v[3])?;
                let kt = g.transpose(k)?;
                let sc = g.matmul(q, kt)?;
                let sc = g.scale(sc, 0.5f64.sqrt());
                let sc = g.causal_mask(sc)?;
                let a = g.softmax(sc, 1)?;
                g.matmul(a, val)
            }
        ),
        case!(
            "routed_experts",
            |r, s| {
                let (n, d) = (dim(r) + 2, dim(r));
                let mut f = Fixture::new(
                    vec![
                        normal_tensor(&[n, d], r),
                        normal_tensor(&[d, 2], r),
                        normal_tensor(&[d, d], r),
                        normal_tensor(&[d, d], r),
                    ],
                    s,
                );
                f.ids = (0..n).map(|_| r.below(2)).collect();
                f
            },
            |g, v, f| {
                let logits = g.matmul(v[0], v[1])?;
                let p = g.softmax(logits, 1)?;
                let mut acc = v[0];
                for e in 0..2 {
                    let rows: Vec<usize> = (0..f.ids.len()).filter(|&t| f.ids[t] == e).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let sub = g.gather_rows(v[0], &rows)?;
                    let h = g.matmul(sub, v[2 + e])?;
                    let h = g.relu(h);
                    let flat: Vec<usize> = rows.iter().map(|&t| t * 2 + e).collect();
                    let w = g.take(p, &flat)?;
                    let h = g.scale_rows(h, w)?;
                    acc = g.index_add_rows(acc, h, &rows)?;
                }
                Ok(acc)
            }
        ),
    ]
}

/// `sum(op(inputs) * W)` for a fixed random `W`, and its gradients.
fn projected_loss(case: &OpCase, fx: &Fixture, inputs: &[Tensor], grads: bool) -> (f64, Vec<Vec<f64>>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = (case.build)(&mut g, &vars, fx).unwrap_or_else(|e| panic!("{}: {e}", case.name));
    let shape = g.shape(out).to_vec();
    let mut wr = RngStream::new(fx.seed, 1002);
    let w = g.input(normal_tensor(&shape, &mut wr));
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    let value = g.item(loss);
    if !grads {
        return (value, Vec::new());
    }
    g.backward(loss).unwrap();
    let gs = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    (value, gs)
}

/// Relative error with a small floor so exact zeros compare cleanly.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between the analytic gradient and a central
/// difference with step `h`, over every input element.
pub fn gradcheck(case: &OpCase, seed: u64, h: f64) -> f64 {
    let mut rng = RngStream::new(seed, 77);
    let fx = (case.gen)(&mut rng, seed);
    let (_, analytic) = projected_loss(case, &fx, &fx.inputs, true);
    let mut worst: f64 = 0.0;
    for (i, t) in fx.inputs.iter().enumerate() {
        for (j, &a) in analytic[i].iter().enumerate().take(t.len()) {
            let mut plus = fx.inputs.clone();
            plus[i].data_mut()[j] += h;
            let mut minus = fx.inputs.clone();
            minus[i].data_mut()[j] -= h;
            let fp = projected_loss(case, &fx, &plus, false).0;
            let fm = projected_loss(case, &fx, &minus, false).0;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

// ----- latency oracle ---------------------------------------------------------

/// `sum_b sum_i probs[b][i] * table[options[b][i]]`, one term at a time.
pub fn loop_latency(probs: &[Vec<f64>], options: &[Vec<BlockSpec>], table: &LatencyTable) -> f64 {
    let mut total = 0.0;
    for b in 0..probs.len() {
        for i in 0..probs[b].len() {
            let lat = table.entry(&options[b][i].key()).expect("covered").latency_us;
            total += probs[b][i] * lat;
        }
    }
    total
}

pub fn softmax_row(a: &[f64]) -> Vec<f64> {
    let m = a.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = a.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn entry(latency_us: f64) -> LatencyEntry {
    LatencyEntry {
        latency_us,
        reps: 10,
        warmup: 3,
        iqr_us: 0.0,
    }
}

/// Table with the given `(key, latency)` rows and a nominal context.
pub fn synthetic_table(dims: ModelDims, rows: &[(&str, f64)]) -> LatencyTable {
    let mut t = LatencyTable::new(ProfileContext::new(1, 1, dims));
    for &(k, v) in rows {
        t.insert(k, entry(v)).unwrap();
    }
    t
}

// ----- planted-winner task ------------------------------------------------------

pub const PLANTED_VOCAB: usize = 8;

/// Target at position `t` is `(x[t-1] + x[t]) mod V` (with `x[-1] = 0`): it
/// needs one look back and a nonlinear combination.
pub fn planted_batches(seed: u64, count: usize, batch_size: usize, seq_len: usize) -> Vec<Batch> {
    let mut rng = RngStream::new(seed, 500);
    (0..count)
        .map(|_| {
            let inputs: Vec<usize> = (0..batch_size * seq_len).map(|_| rng.below(PLANTED_VOCAB)).collect();
            let targets = inputs
                .chunks(seq_len)
                .flat_map(|row| {
                    (0..seq_len)
                        .map(|t| (if t == 0 { 0 } else { row[t - 1] } + row[t]) % PLANTED_VOCAB)
                        .collect::<Vec<_>>()
                })
                .collect();
            Batch {
                inputs,
                targets,
                batch_size,
                seq_len,
            }
        })
        .collect()
}

pub struct PlantedSetup {
    pub backbone: moe_nas::supernet::BackboneSpec,
    pub space: moe_nas::supernet::SearchSpace,
    pub table: LatencyTable,
    /// Option index of the planted winner in each slot.
    pub planted: Vec<usize>,
}

fn specs(keys: &[&str]) -> Vec<BlockSpec> {
    keys.iter().map(|k| k.parse().unwrap()).collect()
}

/// Slot 0 must look back one position, so only attention fits; slot 1 must
/// combine two symbols nonlinearly, so only the wide feed-forward fits.
/// Every option is no slower than the planted one, so the latency term
/// stays inactive at target ratio 1.
pub fn planted_setup() -> PlantedSetup {
    let dims = ModelDims {
        model_dim: 16,
        head_dim: 8,
    };
    let menus = vec![specs(&["skip", "ffl:d=4", "mha:h=2"]), specs(&["skip", "ffl:d=2", "ffl:d=64"])];
    let backbone = moe_nas::supernet::BackboneSpec::new(dims, specs(&["mha:h=2", "ffl:d=64"])).unwrap();
    let table = synthetic_table(
        dims,
        &[
            ("skip", 0.01),
            ("ffl:d=4", 40.0),
            ("mha:h=2", 100.0),
            ("ffl:d=2", 30.0),
            ("ffl:d=64", 90.0),
        ],
    );
    PlantedSetup {
        backbone,
        space: moe_nas::supernet::SearchSpace::per_slot(menus),
        table,
        planted: vec![2, 2],
    }
}

pub fn planted_config(seed: u64) -> moe_nas::search::Phase1Config {
    moe_nas::search::Phase1Config {
        epochs: 12,
        target_ratio: 1.0,
        seed,
        dropout: 0.0,
        moe_dropout: 0.0,
        ..Default::default()
    }
}

/// Runs the search on the planted task and returns the argmax choice per slot.
pub fn run_planted(seed: u64) -> (Vec<usize>, Vec<usize>) {
    let setup = planted_setup();
    let mut init = RngStream::new(seed, moe_nas::streams::INIT);
    let mut net =
        moe_nas::supernet::build_search_network(&setup.backbone, &setup.space, PLANTED_VOCAB, 16, &mut init).unwrap();
    let batches = planted_batches(seed, 40, 16, 8);
    moe_nas::search::run_phase1(&mut net, &setup.table, &planted_config(seed), &batches, None).unwrap();
    let chosen = net.alphas().iter().map(|a| moe_nas::tensor::argmax(a)).collect();
    (chosen, setup.planted)
}

// ----- balance enforcement --------------------------------------------------------

pub fn toy_dims() -> ModelDims {
    ModelDims {
        model_dim: 32,
        head_dim: 4,
    }
}

pub fn toy_batches(seed: u64, train: usize, valid: usize) -> (usize, Vec<Batch>, Vec<Batch>) {
    use moe_nas::data::{batches, BatchConfig, Corpus, Split};
    let corpus = Corpus::load(&corpus_path(), [0.8, 0.1, 0.1]).unwrap();
    let cfg = BatchConfig {
        batch_size: 8,
        seq_len: 32,
    };
    let mut tr = batches(&corpus, Split::Train, cfg, seed).unwrap();
    tr.truncate(train);
    let mut va = batches(&corpus, Split::Valid, cfg, seed).unwrap();
    va.truncate(valid);
    (corpus.vocab().len(), tr, va)
}

/// Summary of the last retraining epoch.
#[derive(Clone, Copy, Debug)]
pub struct FinalRouting {
    pub ce: f64,
    pub balance_loss: f64,
    pub max_fraction: f64,
}

pub fn last_epoch(outcome: &moe_nas::finalize::Phase2Outcome) -> FinalRouting {
    let last = outcome.history.last().expect("trained").epoch;
    let rows: Vec<_> = outcome.history.iter().filter(|r| r.epoch == last).collect();
    let n = rows.len() as f64;
    FinalRouting {
        ce: rows.iter().map(|r| r.ce).sum::<f64>() / n,
        balance_loss: rows.iter().map(|r| r.balance_loss).sum::<f64>() / n,
        max_fraction: rows.iter().map(|r| r.max_expert_fraction).sum::<f64>() / n,
    }
}

pub fn moe_architecture() -> Vec<BlockSpec> {
    specs(&["mha:h=8", "moe:d=128:e=4:k=1", "mha:h=8", "moe:d=128:e=4:k=1"])
}

/// Retrains the four-expert architecture with the given balance coefficient.
pub fn retrain_moe(seed: u64, coef: f64) -> (FinalRouting, moe_nas::finalize::Phase2Outcome) {
    use moe_nas::finalize::{instantiate, run_phase2, ArchitectureDescriptor, Phase2Config};
    let (vocab, train, valid) = toy_batches(seed, 40, 0);
    let arch = ArchitectureDescriptor::manual(toy_dims(), moe_architecture());
    let mut init = RngStream::new(seed, moe_nas::streams::INIT);
    let mut net = instantiate(&arch, vocab, 32, &mut init).unwrap();
    let cfg = Phase2Config {
        balance_coef: coef,
        seed,
        ..Default::default()
    };
    let out = run_phase2(&mut net, &train, &valid, &cfg).unwrap();
    (last_epoch(&out), out)
}

// ----- statistics and configs ------------------------------------------------------

pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Average ranks (1-based), ties share the mean of their positions.
pub fn rank_oracle(x: &[f64]) -> Vec<f64> {
    x.iter()
        .map(|&v| {
            let below = x.iter().filter(|&&u| u < v).count() as f64;
            let equal = x.iter().filter(|&&u| u == v).count() as f64;
            below + (equal + 1.0) / 2.0
        })
        .collect()
}

pub fn spearman_oracle(x: &[f64], y: &[f64]) -> f64 {
    pearson_oracle(&rank_oracle(x), &rank_oracle(y))
}

pub fn toy_config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml")
}

/// The toy run configuration writing into `output_dir`.
pub fn toy_config(output_dir: &std::path::Path) -> moe_nas::config::RunConfig {
    let mut cfg = moe_nas::config::RunConfig::load(&toy_config_path()).unwrap();
    cfg.output_dir = output_dir.to_path_buf();
    cfg.validate().unwrap();
    cfg
}

/// Copies the layer norm and feed-forward weights of `ffl` into every expert
/// of `moe`.
pub fn copy_ffl_into_moe(
    store: &mut moe_nas::ParamStore,
    ffl: &moe_nas::blocks::FflWeights,
    moe: &moe_nas::blocks::MoeWeights,
) {
    let mut copy = |from: moe_nas::ParamId, to: moe_nas::ParamId| {
        let v = store.value(from).clone();
        store.get_mut(to).value = v;
    };
    copy(ffl.ln.gamma, moe.ln.gamma);
    copy(ffl.ln.beta, moe.ln.beta);
    for e in &moe.experts {
        copy(ffl.ff.w1, e.w1);
        copy(ffl.ff.b1, e.b1);
        copy(ffl.ff.w2, e.w2);
        copy(ffl.ff.b2, e.b2);
    }
}

/// Max absolute difference between an FFL block and a MoE block whose experts
/// all carry the FFL's weights, on the same random input.
pub fn moe_vs_ffl_diff(moe_key: &str, seed: u64) -> f64 {
    use moe_nas::blocks::{forward_ffl, forward_moe, init_block, BlockWeights, ForwardCtx};
    let moe_spec: BlockSpec = moe_key.parse().unwrap();
    let BlockSpec::Moe { inner_dim, .. } = moe_spec else {
        panic!("not a MoE key: {moe_key}")
    };
    let dims = ModelDims {
        model_dim: 12,
        head_dim: 3,
    };
    let mut rng = RngStream::new(seed, 800);
    let mut store = moe_nas::ParamStore::new();
    let BlockWeights::Ffl(ffl) = init_block(&mut store, "ffl", &BlockSpec::Ffl { inner_dim }, &dims, &mut rng).unwrap()
    else {
        unreachable!()
    };
    let BlockWeights::Moe(moe) = init_block(&mut store, "moe", &moe_spec, &dims, &mut rng).unwrap() else {
        unreachable!()
    };
    // Non-trivial layer norm affine parameters.
    for id in [ffl.ln.gamma, ffl.ln.beta] {
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = normal_tensor(&shape, &mut rng);
    }
    copy_ffl_into_moe(&mut store, &ffl, &moe);
    let x = normal_tensor(&[2, 5, 12], &mut rng);
    let mut g = Graph::new();
    let xv = g.input(x);
    let mut r1 = RngStream::new(seed, 801);
    let a = forward_ffl(&mut g, &store, &ffl, xv, &mut ForwardCtx::eval(&mut r1)).unwrap();
    let mut r2 = RngStream::new(seed, 801);
    let (b, _) = forward_moe(&mut g, &store, &moe, xv, &mut ForwardCtx::eval(&mut r2)).unwrap();
    g.value(a)
        .data()
        .iter()
        .zip(g.value(b).data())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

/// A small, fast run configuration over the repository corpus.
pub fn tiny_config_text(output_dir: &std::path::Path) -> String {
    format!(
        r#"seed = 1
target_ratio = 0.8
output_dir = "{out}"
sweep_targets = [0.5, 0.9]

[data]
corpus = "{corpus}"
batch_size = 4
seq_len = 8
max_train_batches = 6
max_valid_batches = 2

[model]
model_dim = 8
head_dim = 2
backbone = ["mha:h=4", "ffl:d=16"]
menu = ["skip", "mha:h=1", "mha:h=4", "ffl:d=16", "moe:d=8:e=2:k=1"]

[profile]
batch = 2
seq_len = 8
reps = 10
warmup = 3

[phase1]
epochs = 2

[phase2]
epochs = 1
"#,
        out = output_dir.display(),
        corpus = corpus_path().canonicalize().unwrap().display()
    )
}

pub fn tiny_config(output_dir: &std::path::Path) -> moe_nas::config::RunConfig {
    let cfg = moe_nas::config::RunConfig::from_toml(&tiny_config_text(output_dir)).unwrap();
    cfg.validate().unwrap();
    cfg
}
