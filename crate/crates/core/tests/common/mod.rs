//! Independent oracles shared by the integration tests and the acceptance
//! harness. Each check returns a one-line detail on success and a reason on
//! failure.

#![allow(dead_code)]

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use graphbert::encoder::{EncoderConfig, PackedInput};
use graphbert::event::{make_mc_instance, Event, EventChain, McInstance};
use graphbert::experiments::pearson_rows;
use graphbert::graph::{build_graph, tutor_adjacency, AdjMatrix, DEFAULT_EPSILON};
use graphbert::head::{
    infer_adjacency, merge, GraphHeadParams, KlDirection, LossConfig, Model, ModelConfig, ModelVariant,
};
use graphbert::numerics::{
    kl_multinomial_rows, multi_head_attention, AttentionParams, AttnGroup, ParamSet, Tape, Tensor, Var,
};
use graphbert::training::{instance_loss, prepare, vocab_for, TrainConfig};

pub type Check = Result<String, String>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
}

pub fn rand_stochastic(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    let mut t = Tensor::from_fn(r, c, |_, _| rng.random_range(0.05..1.0));
    for i in 0..r {
        let s: f64 = t.row(i).iter().sum();
        t.row_mut(i).iter_mut().for_each(|v| *v /= s);
    }
    t
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax_in_place(row: &mut [f64], allowed: impl Fn(usize) -> bool) {
    let max = (0..row.len()).filter(|&j| allowed(j)).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for j in 0..row.len() {
        row[j] = if allowed(j) { (row[j] - max).exp() } else { 0.0 };
        z += row[j];
    }
    row.iter_mut().for_each(|v| *v /= z);
}

fn matmul_loop(a: &Tensor, b: &Tensor) -> Tensor {
    Tensor::from_fn(a.rows(), b.cols(), |i, j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
}

// ---------------------------------------------------------------- counting

fn random_corpus(seed: u64, chains: usize) -> Vec<EventChain> {
    let mut r = rng(seed);
    let pool: Vec<Event> = (0..40)
        .map(|i| Event::new(format!("s{}", i % 3), format!("p{i}"), format!("o{}", i % 7), "").unwrap())
        .collect();
    (0..chains)
        .map(|_| {
            let len = r.random_range(2..=12);
            EventChain::new((0..len).map(|_| pool[r.random_range(0..pool.len())].clone()).collect()).unwrap()
        })
        .collect()
}

/// Graph weights against a brute-force bigram tally over 1,000 chains.
pub fn counting_oracle() -> Check {
    let start = Instant::now();
    let chains = random_corpus(17, 1000);
    let g = build_graph(&chains).map_err(|e| e.to_string())?;
    let mut tally: HashMap<(String, String), u64> = HashMap::new();
    let mut out: HashMap<String, u64> = HashMap::new();
    for c in &chains {
        let ev = c.events();
        for w in 0..ev.len() - 1 {
            *tally.entry((ev[w].to_record(), ev[w + 1].to_record())).or_default() += 1;
            *out.entry(ev[w].to_record()).or_default() += 1;
        }
    }
    let records: Vec<Event> = {
        let mut v: Vec<Event> = chains.iter().flat_map(|c| c.events().iter().cloned()).collect();
        v.sort();
        v.dedup();
        v
    };
    if records.len() != g.num_nodes() {
        return Err(format!("{} distinct events, graph has {} nodes", records.len(), g.num_nodes()));
    }
    let mut worst: f64 = 0.0;
    for a in &records {
        let ia = g.node_id(a).ok_or("missing node")?;
        for b in &records {
            let ib = g.node_id(b).ok_or("missing node")?;
            let want = tally.get(&(a.to_record(), b.to_record())).copied().unwrap_or(0);
            if g.count(ia, ib) != want {
                return Err(format!("count {a} -> {b}: {} vs {want}", g.count(ia, ib)));
            }
            match (g.edge_weight(a, b), out.get(&a.to_record())) {
                (None, None) => {}
                (Some(w), Some(&total)) => worst = worst.max((w - want as f64 / total as f64).abs()),
                (w, total) => return Err(format!("edge {a} -> {b}: weight {w:?} with out total {total:?}")),
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    if worst > 1e-12 {
        return Err(format!("ratio error {worst:e}"));
    }
    if secs >= 5.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!(
        "{} nodes, {} edges exact; max ratio err {worst:e}; {secs:.2}s",
        g.num_nodes(),
        g.num_edges()
    ))
}

// ---------------------------------------------------------------- gradients

/// Below this norm a gradient is indistinguishable from zero under finite
/// differences of an order-one loss.
pub const GRAD_FLOOR: f64 = 1e-6;

/// Relative error of two gradient tensors,
/// `||a - b|| / max(||a||, ||b||, GRAD_FLOOR)`.
pub fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
    let norm = |t: &[f64]| t.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    let scale = norm(a.data()).max(norm(b.data())).max(GRAD_FLOOR);
    norm(&diff) / scale
}

/// Fourth-order central difference of `f` along one coordinate.
pub fn five_point(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    let h = 1e-4;
    let near = f(x + h) - f(x - h);
    let far = f(x + 2.0 * h) - f(x - 2.0 * h);
    (8.0 * near - far) / (12.0 * h)
}

type Graph = dyn Fn(&mut Tape, &[Var]) -> graphbert::Result<Var>;

/// Largest relative error between tape gradients and central differences of
/// every input.
pub fn grad_check(inputs: &[Tensor], f: &Graph) -> f64 {
    let eval = |inputs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.value(out).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    let grads = tape.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let mut num = Tensor::zeros(t.rows(), t.cols());
        let mut work = inputs.to_vec();
        for idx in 0..t.len() {
            let x = t.data()[idx];
            num.data_mut()[idx] = five_point(
                |v| {
                    work[k].data_mut()[idx] = v;
                    eval(&work)
                },
                x,
            );
            work[k].data_mut()[idx] = x;
        }
        let zeros = Tensor::zeros(t.rows(), t.cols());
        let ana = grads.get(vars[k]).unwrap_or(&zeros);
        worst = worst.max(rel_err(ana, &num));
    }
    worst
}

/// `sum(out * R)` for a fixed random `R`, so every output entry matters.
fn project(tape: &mut Tape, x: Var, seed: u64) -> graphbert::Result<Var> {
    let (r, c) = tape.value(x).shape();
    let w = tape.constant(rand_tensor(&mut rng(seed ^ 0xABCD), r, c));
    let p = tape.mul(x, w)?;
    Ok(tape.sum(p))
}

/// Uniform in `[-1, 1]` but at least 0.05 away from zero, keeping relu
/// inputs off the kink.
fn away_from_zero(rng: &mut impl Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_fn(r, c, |_, _| {
        let v: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

pub struct Primitive {
    pub name: &'static str,
    pub case: fn(u64) -> (Vec<Tensor>, Box<Graph>),
}

fn dims(r: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5))
}

pub fn primitives() -> Vec<Primitive> {
    vec![
        Primitive {
            name: "matmul",
            case: |s| {
                let mut r = rng(s);
                let (m, k, n) = dims(&mut r);
                let inputs = vec![rand_tensor(&mut r, m, k), rand_tensor(&mut r, k, n)];
                (inputs, Box::new(move |t, v| {
                    let o = t.matmul(v[0], v[1])?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "matmul_nt",
            case: |s| {
                let mut r = rng(s);
                let (m, k, n) = dims(&mut r);
                let inputs = vec![rand_tensor(&mut r, m, k), rand_tensor(&mut r, n, k)];
                (inputs, Box::new(move |t, v| {
                    let o = t.matmul_nt(v[0], v[1])?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "add/mul/scale",
            case: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let inputs = vec![rand_tensor(&mut r, m, n), rand_tensor(&mut r, m, n)];
                (inputs, Box::new(move |t, v| {
                    let a = t.add(v[0], v[1])?;
                    let b = t.mul(a, v[1])?;
                    let c = t.scale(b, -1.7);
                    project(t, c, s)
                }))
            },
        },
        Primitive {
            name: "add_row",
            case: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let inputs = vec![rand_tensor(&mut r, m, n), rand_tensor(&mut r, 1, n)];
                (inputs, Box::new(move |t, v| {
                    let o = t.add_row(v[0], v[1])?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "sigmoid/gelu",
            case: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let inputs = vec![Tensor::from_fn(m, n, |_, _| r.random_range(-4.0..4.0))];
                (inputs, Box::new(move |t, v| {
                    let a = t.sigmoid(v[0]);
                    let b = t.gelu(v[0]);
                    let c = t.add(a, b)?;
                    project(t, c, s)
                }))
            },
        },
        Primitive {
            name: "relu",
            case: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let inputs = vec![away_from_zero(&mut r, m, n)];
                (inputs, Box::new(move |t, v| {
                    let o = t.relu(v[0]);
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "transpose/concat/slice",
            case: |s| {
                let mut r = rng(s);
                let (m, n, k) = dims(&mut r);
                let inputs = vec![rand_tensor(&mut r, m, n), rand_tensor(&mut r, m, k), rand_tensor(&mut r, 2, n + k)];
                (inputs, Box::new(move |t, v| {
                    let c = t.concat_cols(&[v[0], v[1]])?;
                    let rws = t.concat_rows(&[c, v[2]])?;
                    let sl = t.slice_rows(rws, 1, m + 2)?;
                    let sc = t.slice_cols(sl, 1, n + k)?;
                    let tr = t.transpose(sc);
                    project(t, tr, s)
                }))
            },
        },
        Primitive {
            name: "mean_rows/sum/broadcast_add",
            case: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let inputs = vec![rand_tensor(&mut r, m, n), rand_tensor(&mut r, m, 1), rand_tensor(&mut r, 1, n)];
                (inputs, Box::new(move |t, v| {
                    let mr = t.mean_rows(v[0])?;
                    let b = t.broadcast_add(v[1], mr)?;
                    let c = t.broadcast_add(v[1], v[2])?;
                    let d = t.mul(b, c)?;
                    let p = project(t, d, s)?;
                    let q = t.sum(v[0]);
                    t.add(p, q)
                }))
            },
        },
        Primitive {
            name: "softmax_rows",
            case: |s| {
                let mut r = rng(s);
                let (m, _, _) = dims(&mut r);
                let n = m + 1;
                let inputs = vec![Tensor::from_fn(m, n, |_, _| r.random_range(-3.0..3.0))];
                let masked = s % 2 == 0;
                (inputs, Box::new(move |t, v| {
                    let mask: Vec<bool> = (0..m * n).map(|k| k / n != k % n).collect();
                    let o = t.softmax_rows(v[0], masked.then_some(&mask[..]))?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "layer_norm",
            case: |s| {
                let mut r = rng(s);
                let (m, _, _) = dims(&mut r);
                let d = r.random_range(2..6);
                let inputs = vec![
                    Tensor::from_fn(m, d, |_, _| r.random_range(-2.0..2.0)),
                    rand_tensor(&mut r, 1, d),
                    rand_tensor(&mut r, 1, d),
                ];
                (inputs, Box::new(move |t, v| {
                    let o = t.layer_norm(v[0], v[1], v[2])?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "gather_rows",
            case: |s| {
                let mut r = rng(s);
                let (m, n, _) = dims(&mut r);
                let ids: Vec<Option<usize>> = (0..m + 2)
                    .map(|_| r.random_bool(0.8).then(|| r.random_range(0..m)))
                    .collect();
                let inputs = vec![rand_tensor(&mut r, m, n)];
                (inputs, Box::new(move |t, v| {
                    let o = t.gather_rows(v[0], &ids)?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "kl_rows",
            case: |s| {
                let mut r = rng(s);
                let n = r.random_range(2..6);
                let mask: Vec<bool> = (0..n).map(|i| i == 0 || r.random_bool(0.7)).collect();
                let inputs = vec![rand_stochastic(&mut r, n, n), rand_stochastic(&mut r, n, n)];
                (inputs, Box::new(move |t, v| t.kl_rows(v[0], v[1], &mask)))
            },
        },
        Primitive {
            name: "bce_with_logits",
            case: |s| {
                let mut r = rng(s);
                let k = r.random_range(2..6);
                let labels: Vec<f64> = (0..k).map(|_| f64::from(u8::from(r.random_bool(0.4)))).collect();
                let inputs = vec![Tensor::from_fn(1, k, |_, _| r.random_range(-4.0..4.0))];
                (inputs, Box::new(move |t, v| t.bce_with_logits(v[0], &labels)))
            },
        },
        Primitive {
            name: "softmax_cross_entropy",
            case: |s| {
                let mut r = rng(s);
                let k = r.random_range(2..6);
                let gold = r.random_range(0..k);
                let inputs = vec![Tensor::from_fn(1, k, |_, _| r.random_range(-4.0..4.0))];
                (inputs, Box::new(move |t, v| t.softmax_cross_entropy(v[0], gold)))
            },
        },
        Primitive {
            name: "attention",
            case: |s| {
                let mut r = rng(s);
                let heads = r.random_range(1..3);
                let d = heads * r.random_range(1..4);
                let (m1, m2) = (r.random_range(1..4), r.random_range(1..4));
                let (n1, n2) = (r.random_range(1..4), r.random_range(1..4));
                let groups = vec![
                    AttnGroup { queries: 0..m1, keys: 0..n1 },
                    AttnGroup { queries: m1..m1 + m2, keys: n1..n1 + n2 },
                ];
                let inputs = vec![
                    rand_tensor(&mut r, m1 + m2, d),
                    rand_tensor(&mut r, n1 + n2, d),
                    rand_tensor(&mut r, n1 + n2, d),
                ];
                (inputs, Box::new(move |t, v| {
                    let o = t.attention(v[0], v[1], v[2], heads, &groups)?;
                    project(t, o, s)
                }))
            },
        },
        Primitive {
            name: "multi_head_attention",
            case: |s| {
                let mut r = rng(s);
                let heads = r.random_range(1..3);
                let d = heads * r.random_range(1..3);
                let (m, n) = (r.random_range(1..4), r.random_range(1..4));
                let mut inputs = vec![rand_tensor(&mut r, m, d), rand_tensor(&mut r, n, d)];
                for (rows, cols) in [(d, d), (1, d), (d, d), (d, d), (1, d), (d, d), (1, d)] {
                    inputs.push(rand_tensor(&mut r, rows, cols));
                }
                (inputs, Box::new(move |t, v| {
                    let w = graphbert::numerics::AttentionVars {
                        wq: v[2],
                        bq: v[3],
                        wk: v[4],
                        wv: v[5],
                        bv: v[6],
                        wo: v[7],
                        bo: v[8],
                    };
                    let o = multi_head_attention(t, v[0], v[1], v[1], &w, heads)?.out;
                    project(t, o, s)
                }))
            },
        },
    ]
}

/// Worst relative error of every primitive over `seeds` random cases.
pub fn primitive_gradients(seeds: u64) -> Result<Vec<(&'static str, f64)>, String> {
    let mut out = Vec::new();
    for p in primitives() {
        let mut worst: f64 = 0.0;
        for s in 0..seeds {
            let (inputs, f) = (p.case)(s);
            let e = grad_check(&inputs, &*f);
            if !e.is_finite() {
                return Err(format!("{} seed {s}: non-finite error", p.name));
            }
            worst = worst.max(e);
        }
        out.push((p.name, worst));
    }
    Ok(out)
}

pub fn tiny_model_config(variant: ModelVariant) -> ModelConfig {
    ModelConfig {
        variant,
        encoder: EncoderConfig {
            layers: 2,
            d_model: 8,
            heads: 2,
            maxlen: 32,
            ffn_mult: 2,
        },
        s0: 1,
        s1: 2,
        n_gat: 1,
        agg_heads: 2,
        merge_heads: 2,
    }
}

fn ev(p: &str) -> Event {
    Event::new("x", p, "y", "").unwrap()
}

/// A three-event toy (two context events plus each candidate), with a
/// graph that covers only some events so retrieval sees zero rows too.
pub fn toy(seed: u64) -> (McInstance, graphbert::graph::EventGraph) {
    let mut r = rng(seed);
    let names: Vec<String> = (0..6).map(|i| format!("e{i}")).collect();
    let pick = |r: &mut ChaCha8Rng| ev(&names[r.random_range(0..names.len())]);
    let chains: Vec<EventChain> = (0..8)
        .map(|_| EventChain::new((0..4).map(|_| pick(&mut r)).collect()).unwrap())
        .collect();
    let graph = build_graph(&chains).unwrap();
    let chain = EventChain::new(vec![ev("e0"), ev("e1"), ev("e2")]).unwrap();
    let inst = make_mc_instance(&chain, 2, &[ev("e3"), ev("unseen")], seed).unwrap();
    (inst, graph)
}

/// Whole-model loss gradient against central differences of every
/// parameter scalar, at initial parameters plus uniform noise so no block
/// sits in the near-uniform regime of a fresh model.
pub fn end_to_end_gradient(seed: u64) -> Result<f64, String> {
    let variant = if seed % 3 == 2 { ModelVariant::RetrievalBaseline } else { ModelVariant::Graphbert };
    let (inst, graph) = toy(seed);
    let mut cfg = TrainConfig::desk();
    cfg.model = tiny_model_config(variant);
    cfg.loss = LossConfig {
        lambda: 0.5,
        kl_direction: if seed % 2 == 0 { KlDirection::PredictedFirst } else { KlDirection::TutorFirst },
        softmax_over_candidates: seed % 4 == 1,
    };
    let vocab = vocab_for(std::slice::from_ref(&inst)).map_err(|e| e.to_string())?;
    let prep = prepare(&inst, &vocab, &graph, &cfg).map_err(|e| e.to_string())?;
    let (model, mut params) =
        Model::new(&cfg.model, vocab.len(), graph.num_nodes(), &mut rng(seed + 100)).map_err(|e| e.to_string())?;
    let mut jitter = rng(seed + 200);
    for id in params.ids().collect::<Vec<_>>() {
        params.get_mut(id).data_mut().iter_mut().for_each(|x| *x += jitter.random_range(-2.0..2.0));
    }
    let loss_of = |params: &ParamSet| {
        let mut tape = Tape::new();
        let (l, _) = instance_loss(&mut tape, &model, params, &prep, &cfg.loss).unwrap();
        tape.value(l.total).item()
    };
    let mut tape = Tape::new();
    let (l, _) = instance_loss(&mut tape, &model, &params, &prep, &cfg.loss).map_err(|e| e.to_string())?;
    let grads = tape.backward(l.total).map_err(|e| e.to_string())?;
    let mut analytic = params.zeros_like();
    grads.accumulate_into(&mut analytic);
    let mut worst: f64 = 0.0;
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let n = params.get(id).len();
        let mut num = Tensor::zeros(params.get(id).rows(), params.get(id).cols());
        for idx in 0..n {
            let x = params.get(id).data()[idx];
            num.data_mut()[idx] = five_point(
                |v| {
                    params.get_mut(id).data_mut()[idx] = v;
                    loss_of(&params)
                },
                x,
            );
            params.get_mut(id).data_mut()[idx] = x;
        }
        let e = rel_err(&analytic[id.0], &num);
        if e >= 1e-4 {
            let norm = |t: &Tensor| t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            return Err(format!(
                "seed {seed} {:?}: {} rel err {e:e} (analytic norm {:.3e}, numeric norm {:.3e})",
                variant,
                params.name(id),
                norm(&analytic[id.0]),
                norm(&num)
            ));
        }
        worst = worst.max(e);
    }
    Ok(worst)
}

pub fn gradient_suite() -> Check {
    let start = Instant::now();
    let prims = primitive_gradients(100)?;
    let worst_prim = prims.iter().map(|p| p.1).fold(0.0, f64::max);
    if let Some((name, e)) = prims.iter().find(|p| p.1 >= 1e-4) {
        return Err(format!("{name}: rel err {e:e}"));
    }
    let mut worst_e2e: f64 = 0.0;
    for seed in 0..10 {
        worst_e2e = worst_e2e.max(end_to_end_gradient(seed)?);
    }
    let secs = start.elapsed().as_secs_f64();
    if secs >= 120.0 {
        return Err(format!("took {secs:.1}s"));
    }
    Ok(format!(
        "{} primitive groups x 100 seeds max {worst_prim:.1e}; 10 end-to-end toys max {worst_e2e:.1e}; {secs:.1}s",
        prims.len()
    ))
}

// ---------------------------------------------------------------- normalization

pub fn random_pack(r: &mut ChaCha8Rng, vocab: usize, events: usize) -> PackedInput {
    let mut token_ids = vec![1];
    let mut spans = Vec::new();
    for _ in 0..events {
        let len = r.random_range(1..4);
        let s = token_ids.len();
        token_ids.extend((0..len).map(|_| r.random_range(4..vocab)));
        spans.push((s, s + len));
        token_ids.push(2);
    }
    PackedInput {
        token_ids,
        event_spans: spans,
    }
}

/// Row sums of predicted adjacencies, tutor matrices and every attention
/// map over 1,000 random forward passes, plus KL sanity.
pub fn normalization_suite() -> Check {
    let mut worst: f64 = 0.0;
    let mut rows = 0usize;
    let mut check = |t: &Tensor, mask: Option<&[bool]>| {
        for i in 0..t.rows() {
            if mask.is_none_or(|m| m[i]) {
                worst = worst.max((t.row(i).iter().sum::<f64>() - 1.0).abs());
                rows += 1;
            }
        }
    };
    let vocab = 20;
    for pass in 0..1000u64 {
        let mut r = rng(pass);
        let variant = if pass % 4 == 3 { ModelVariant::RetrievalBaseline } else { ModelVariant::Graphbert };
        let cfg = tiny_model_config(variant);
        let (model, params) = Model::new(&cfg, vocab, 6, &mut r).map_err(|e| e.to_string())?;
        let events = r.random_range(2..6);
        let packs: Vec<PackedInput> = (0..r.random_range(1..4)).map(|_| random_pack(&mut r, vocab, events)).collect();
        let retrieved: Vec<graphbert::head::Retrieved> = packs
            .iter()
            .map(|_| {
                let node_ids: Vec<Option<usize>> = (0..events).map(|_| r.random_bool(0.6).then(|| r.random_range(0..6))).collect();
                graphbert::head::Retrieved {
                    node_ids,
                    adjacency: AdjMatrix::unmasked(rand_stochastic(&mut r, events, events)),
                }
            })
            .collect();
        let mut tape = Tape::new();
        let batch = model
            .forward_batch(&mut tape, &params, &packs, Some(&retrieved))
            .map_err(|e| e.to_string())?;
        for tr in &batch.traces {
            check(tape.value(tr.a_hat), None);
        }
        for m in tape.stochastic_matrices() {
            check(m, None);
        }
    }
    for seed in 0..200u64 {
        let (inst, graph) = toy(seed);
        for c in 0..inst.candidates().len() {
            let a = tutor_adjacency(&graph, &inst.sequence(c), DEFAULT_EPSILON).map_err(|e| e.to_string())?;
            check(&a.values, Some(&a.row_mask));
        }
    }
    let mut kl_worst_self: f64 = 0.0;
    let mut kl_min = f64::INFINITY;
    for seed in 0..1000u64 {
        let mut r = rng(seed);
        let n = r.random_range(2..7);
        let (p, q) = (rand_stochastic(&mut r, n, n), rand_stochastic(&mut r, n, n));
        let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        kl_min = kl_min.min(kl_multinomial_rows(&p, &q, &mask).map_err(|e| e.to_string())?);
        kl_worst_self = kl_worst_self.max(kl_multinomial_rows(&p, &p, &mask).map_err(|e| e.to_string())?.abs());
    }
    if worst > 1e-9 {
        return Err(format!("row sum off by {worst:e}"));
    }
    if kl_min < 0.0 || kl_worst_self > 1e-12 {
        return Err(format!("KL min {kl_min:e}, KL(P,P) max {kl_worst_self:e}"));
    }
    Ok(format!(
        "{rows} rows within {worst:.1e} of 1; KL min {kl_min:.2e} >= 0; |KL(P,P)| <= {kl_worst_self:.1e}"
    ))
}

// ---------------------------------------------------------------- loop oracles

fn gat_loop(e: &Tensor, u: &Tensor, w: &Tensor) -> Tensor {
    let (n, d) = e.shape();
    let s = matmul_loop(e, w);
    let mut alpha = Tensor::zeros(n, n);
    for i in 0..n {
        let row = alpha.row_mut(i);
        for j in 0..n {
            let mut z = 0.0;
            for c in 0..d {
                z += s.get(i, c) * u.get(0, c) + s.get(j, c) * u.get(0, d + c);
            }
            row[j] = z.max(0.0);
        }
        softmax_in_place(row, |j| j != i);
    }
    matmul_loop(&alpha, &s).map(sigmoid)
}

fn infer_loop(e: &Tensor, head: &GraphHeadParams, params: &ParamSet) -> Tensor {
    let mut x = e.clone();
    for l in &head.gat {
        x = gat_loop(&x, params.get(l.u), params.get(l.w_alpha));
    }
    let wr = params.get(head.w_r);
    let n = x.rows();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut z = 0.0;
            for a in 0..x.cols() {
                for b in 0..x.cols() {
                    z += x.get(i, a) * wr.get(a, b) * x.get(j, b);
                }
            }
            out.set(i, j, z);
        }
        softmax_in_place(out.row_mut(i), |_| true);
    }
    out
}

fn mha_loop(q: &Tensor, kv: &Tensor, ap: &AttentionParams, params: &ParamSet, heads: usize) -> Tensor {
    let p = |id| params.get(id);
    let add_bias = |mut t: Tensor, b: &Tensor| {
        for i in 0..t.rows() {
            for j in 0..t.cols() {
                t.set(i, j, t.get(i, j) + b.get(0, j));
            }
        }
        t
    };
    let qp = add_bias(matmul_loop(q, p(ap.wq)), p(ap.bq));
    let kp = matmul_loop(kv, p(ap.wk));
    let vp = add_bias(matmul_loop(kv, p(ap.wv)), p(ap.bv));
    let d = q.cols();
    let dh = d / heads;
    let mut cat = Tensor::zeros(q.rows(), d);
    for h in 0..heads {
        for i in 0..q.rows() {
            let mut w: Vec<f64> = (0..kv.rows())
                .map(|j| (0..dh).map(|c| qp.get(i, h * dh + c) * kp.get(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            softmax_in_place(&mut w, |_| true);
            for c in 0..dh {
                cat.set(i, h * dh + c, (0..kv.rows()).map(|j| w[j] * vp.get(j, h * dh + c)).sum());
            }
        }
    }
    add_bias(matmul_loop(&cat, p(ap.wo)), p(ap.bo))
}

fn merge_loop(h: &Tensor, e: &Tensor, a: &Tensor, head: &GraphHeadParams, params: &ParamSet, heads: usize) -> Tensor {
    let eu = matmul_loop(&matmul_loop(a, e), params.get(head.w_u)).map(sigmoid);
    let sel = mha_loop(h, &eu, &head.merge_attn, params, heads);
    let (g, b) = (params.get(head.merge_ln.gain), params.get(head.merge_ln.bias));
    Tensor::from_fn(h.rows(), h.cols(), |i, j| {
        let row: Vec<f64> = (0..h.cols()).map(|c| sel.get(i, c) + h.get(i, c)).collect();
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / row.len() as f64;
        (row[j] - mean) / (var + 1e-5).sqrt() * g.get(0, j) + b.get(0, j)
    })
}

fn kl_loop(p: &Tensor, q: &Tensor, mask: &[bool]) -> f64 {
    let mut s = 0.0;
    for i in 0..p.rows() {
        if !mask[i] {
            continue;
        }
        for j in 0..p.cols() {
            if p.get(i, j) > 0.0 {
                s += p.get(i, j) * (p.get(i, j) / q.get(i, j)).ln();
            }
        }
    }
    s
}

fn pearson_loop(x: &AdjMatrix, y: &AdjMatrix) -> f64 {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for i in 0..x.row_mask.len() {
        if x.row_mask[i] && y.row_mask[i] {
            for j in 0..x.values.cols() {
                a.push(x.values.get(i, j));
                b.push(y.values.get(i, j));
            }
        }
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Max deviations of infer_adjacency, merge, kl and pearson from scalar
/// loops over `cases` random cases each.
pub fn loop_oracles(cases: u64) -> Result<[f64; 4], String> {
    let mut worst = [0.0f64; 4];
    for seed in 0..cases {
        let mut r = rng(1000 + seed);
        let mut cfg = tiny_model_config(ModelVariant::Graphbert);
        cfg.n_gat = 1 + (seed % 2) as usize;
        let (model, params) = Model::new(&cfg, 12, 0, &mut r).map_err(|e| e.to_string())?;
        let d = cfg.encoder.d_model;
        let n = r.random_range(2..6);
        let e0 = rand_tensor(&mut r, n, d);
        let mut tape = Tape::new();
        let e = tape.constant(e0.clone());
        let a_hat = infer_adjacency(&mut tape, &params, &model.head, e).map_err(|x| x.to_string())?;
        worst[0] = worst[0].max(tape.value(a_hat).max_abs_diff(&infer_loop(&e0, &model.head, &params)));

        let len = r.random_range(2..9);
        let h0 = rand_tensor(&mut r, len, d);
        let a0 = rand_stochastic(&mut r, n, n);
        let h = tape.constant(h0.clone());
        let a = tape.constant(a0.clone());
        let m = merge(&mut tape, &params, &model.head, cfg.merge_heads, h, e, a).map_err(|x| x.to_string())?;
        let want = merge_loop(&h0, &e0, &a0, &model.head, &params, cfg.merge_heads);
        worst[1] = worst[1].max(tape.value(m.hidden).max_abs_diff(&want));

        let (p, q) = (rand_stochastic(&mut r, n, n), rand_stochastic(&mut r, n, n));
        let mask: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
        let kl = kl_multinomial_rows(&p, &q, &mask).map_err(|x| x.to_string())?;
        let pv = tape.constant(p.clone());
        let qv = tape.constant(q.clone());
        let kl_tape = tape.kl_rows(pv, qv, &mask).map_err(|x| x.to_string())?;
        let want = kl_loop(&p, &q, &mask);
        worst[2] = worst[2].max((kl - want).abs()).max((tape.value(kl_tape).item() - want).abs());

        let mut x = AdjMatrix::unmasked(rand_stochastic(&mut r, n + 1, n + 1));
        let mut y = AdjMatrix::unmasked(rand_stochastic(&mut r, n + 1, n + 1));
        x.row_mask[n] = false;
        y.row_mask[0] = n < 3 || seed % 2 == 0;
        let got = pearson_rows(&x, &y).map_err(|x| x.to_string())?.r;
        worst[3] = worst[3].max((got - pearson_loop(&x, &y)).abs());
    }
    Ok(worst)
}

pub fn loop_oracle_suite() -> Check {
    let w = loop_oracles(50)?;
    let names = ["infer_adjacency", "merge", "kl_multinomial_rows", "pearson_rows"];
    if let Some(i) = (0..4).find(|&i| !(w[i] <= 1e-10)) {
        return Err(format!("{} deviates by {:e}", names[i], w[i]));
    }
    Ok(format!(
        "50 cases each; max abs dev {}",
        names.iter().zip(w).map(|(n, v)| format!("{n} {v:.1e}")).collect::<Vec<_>>().join(", ")
    ))
}
