//! Central finite-difference verification of every differentiable operation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::graph::{AttnLayout, Graph, Var};
use super::params::{Bound, ParamSet};
use super::tensor::Tensor;
use super::transformer::{init_decoder, init_embedding, init_encoder, init_fusion, init_head, SeqBatch, Transformer, TransformerConfig, Visual};
use crate::rng::{substream, Rng, RngExt};
use crate::Result;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const REL_FLOOR: f64 = 1e-5;

pub const OPS: &[&str] = &[
    "matmul",
    "add_bias",
    "add",
    "mul",
    "scale",
    "relu",
    "sigmoid",
    "layer_norm",
    "gather_rows",
    "attention",
    "attention_masked",
    "attention_causal",
    "attention_cross",
    "mean_pool",
    "row_sum",
    "sum",
    "softmax_xent",
    "bce_with_logits",
    "gate_add",
    "dropout",
    "encoder",
    "decoder_fused",
];

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub op: &'static str,
    pub seed: u64,
    pub shape: usize,
    pub dims: Vec<usize>,
    pub checked: usize,
    pub max_rel_err: f64,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    libm::fabs(a - n) / libm::fabs(a).max(libm::fabs(n)).max(REL_FLOOR)
}

/// Compares analytic gradients of `build(inputs)` against central
/// differences for every element of every input. Returns the element count
/// and the worst relative error.
pub fn check_graph<F>(inputs: &[Tensor], build: F) -> Result<(usize, f64)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(false);
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars)?;
    let grads = g.backward(loss)?;
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(false);
        let vars: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
        let l = build(&mut g, &vars)?;
        Ok(g.value(l).item())
    };
    let mut worst = 0.0f64;
    let mut count = 0;
    let mut work = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zero(&g, *v);
        for j in 0..inputs[i].len() {
            let x0 = inputs[i].data()[j];
            work[i].data_mut()[j] = x0 + STEP;
            let up = eval(&work)?;
            work[i].data_mut()[j] = x0 - STEP;
            let down = eval(&work)?;
            work[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[j], numeric));
            count += 1;
        }
    }
    Ok((count, worst))
}

fn rand_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.uniform(-1.0, 1.0)).collect()).expect("shape")
}

/// Values bounded away from zero so that no finite-difference step crosses a kink.
fn off_kink(rng: &mut Rng, shape: &[usize]) -> Tensor {
    let mut t = rand_tensor(rng, shape);
    for v in t.data_mut() {
        *v += if *v >= 0.0 { 0.05 } else { -0.05 };
    }
    t
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// Weighted sum of an output against fixed random weights, so every output
/// element receives a distinct upstream gradient.
fn project(g: &mut Graph, out: Var, rng_seed: u64) -> Result<Var> {
    let mut rng = substream(rng_seed, "gradcheck/readout");
    let w = rand_tensor(&mut rng, g.value(out).shape());
    let w = g.constant(w);
    let m = g.mul(out, w)?;
    g.sum(m)
}

/// Runs one check of `op` at the `shape`-th random shape for `seed`.
pub fn check(op: &'static str, seed: u64, shape: usize) -> Result<CheckResult> {
    let mut rng = substream(seed, &format!("gradcheck/{op}/{shape}"));
    let rs = seed ^ (shape as u64) << 16;
    let (dims, inputs, build): (Vec<usize>, Vec<Tensor>, alloc::boxed::Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>) = match op {
        "matmul" => {
            let (m, k, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
            let inputs = vec![rand_tensor(&mut rng, &[m, k]), rand_tensor(&mut rng, &[k, n])];
            (vec![m, k, n], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.matmul(v[0], v[1])?;
                project(g, o, rs)
            }))
        }
        "add_bias" => {
            let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
            let inputs = vec![rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[n])];
            (vec![m, n], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.add_bias(v[0], v[1])?;
                project(g, o, rs)
            }))
        }
        "add" | "mul" | "scale" | "relu" | "sigmoid" | "row_sum" | "sum" => {
            let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
            let c = rng.uniform(-2.0, 2.0);
            let inputs = if op == "relu" {
                vec![off_kink(&mut rng, &[m, n])]
            } else {
                vec![rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[m, n])]
            };
            (vec![m, n], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = match op {
                    "add" => g.add(v[0], v[1])?,
                    "mul" => g.mul(v[0], v[1])?,
                    "scale" => g.scale(v[0], c)?,
                    "relu" => g.relu(v[0])?,
                    "sigmoid" => g.sigmoid(v[0])?,
                    "row_sum" => g.row_sum(v[0])?,
                    _ => g.sum(v[0])?,
                };
                project(g, o, rs)
            }))
        }
        "layer_norm" => {
            let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 2, 6));
            let inputs = vec![rand_tensor(&mut rng, &[m, n]), rand_tensor(&mut rng, &[n]), rand_tensor(&mut rng, &[n])];
            (vec![m, n], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.layer_norm(v[0], v[1], v[2])?;
                project(g, o, rs)
            }))
        }
        "gather_rows" => {
            let (rows, cols, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 7));
            let idx: Vec<usize> = (0..n).map(|_| rng.below(rows)).collect();
            let inputs = vec![rand_tensor(&mut rng, &[rows, cols])];
            (vec![rows, cols, n], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.gather_rows(v[0], &idx)?;
                project(g, o, rs)
            }))
        }
        "attention" | "attention_masked" | "attention_causal" | "attention_cross" => {
            let batch = dim(&mut rng, 1, 3);
            let heads = dim(&mut rng, 1, 3);
            let d = heads * dim(&mut rng, 1, 3);
            let lq = dim(&mut rng, 1, 4);
            let lk = if op == "attention_cross" { dim(&mut rng, 1, 4) } else { lq };
            let mut key_valid = vec![true; batch * lk];
            if op == "attention_masked" {
                for b in 0..batch {
                    for j in 1..lk {
                        key_valid[b * lk + j] = rng.unit_f64() < 0.6;
                    }
                }
            }
            let layout = AttnLayout { batch, lq, lk, heads, key_valid, causal: op == "attention_causal" };
            let inputs = vec![
                rand_tensor(&mut rng, &[batch * lq, d]),
                rand_tensor(&mut rng, &[batch * lk, d]),
                rand_tensor(&mut rng, &[batch * lk, d]),
            ];
            (vec![batch, heads, d, lq, lk], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.attention(v[0], v[1], v[2], layout.clone())?;
                project(g, o, rs)
            }))
        }
        "mean_pool" => {
            let (groups, len, d) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 4));
            let valid: Vec<bool> = (0..groups * len).map(|i| i % len == 0 || rng.unit_f64() < 0.7).collect();
            let inputs = vec![rand_tensor(&mut rng, &[groups * len, d])];
            (vec![groups, len, d], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.mean_pool(v[0], len, &valid)?;
                project(g, o, rs)
            }))
        }
        "softmax_xent" => {
            let (rows, vocab) = (dim(&mut rng, 1, 5), dim(&mut rng, 2, 6));
            let mut targets: Vec<u32> = (0..rows).map(|_| rng.below(vocab) as u32).collect();
            if rows > 1 {
                targets[rng.below(rows)] = 99;
            }
            let inputs = vec![rand_tensor(&mut rng, &[rows, vocab])];
            (vec![rows, vocab], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| g.softmax_xent(v[0], &targets, Some(99))))
        }
        "bce_with_logits" => {
            let n = dim(&mut rng, 1, 8);
            let labels: Vec<f64> = (0..n).map(|_| if rng.unit_f64() < 0.5 { 1.0 } else { 0.0 }).collect();
            let mut logits = rand_tensor(&mut rng, &[n, 1]);
            for x in logits.data_mut() {
                *x *= 4.0;
            }
            (vec![n], vec![logits], alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| g.bce_with_logits(v[0], &labels)))
        }
        "gate_add" => {
            let (rows, d) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
            let open: Vec<bool> = (0..rows).map(|_| rng.unit_f64() < 0.7).collect();
            let inputs = vec![rand_tensor(&mut rng, &[rows, d]), rand_tensor(&mut rng, &[rows, d]), rand_tensor(&mut rng, &[rows, 1])];
            (vec![rows, d], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.gate_add(v[0], v[1], v[2], &open)?;
                project(g, o, rs)
            }))
        }
        "dropout" => {
            let (m, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
            let mask: Vec<f64> = (0..m * n).map(|_| if rng.unit_f64() < 0.3 { 0.0 } else { 1.0 / 0.7 }).collect();
            let inputs = vec![rand_tensor(&mut rng, &[m, n])];
            (vec![m, n], inputs, alloc::boxed::Box::new(move |g: &mut Graph, v: &[Var]| {
                let o = g.dropout_with_mask(v[0], mask.clone())?;
                project(g, o, rs)
            }))
        }
        "encoder" | "decoder_fused" => return check_transformer(op, seed, shape, &mut rng, rs),
        other => return Err(crate::Error::InvalidArgument(format!("no gradient check for {other}"))),
    };
    let (checked, max_rel_err) = check_graph(&inputs, build)?;
    Ok(CheckResult { op, seed, shape, dims, checked, max_rel_err })
}

fn check_transformer(op: &'static str, seed: u64, shape: usize, rng: &mut Rng, rs: u64) -> Result<CheckResult> {
    let heads = dim(rng, 1, 2);
    let d_model = if heads == 1 { dim(rng, 3, 5) } else { 2 * dim(rng, 2, 3) };
    let cfg = TransformerConfig {
        d_model,
        n_heads: heads,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_ff: dim(rng, 2, 5),
        dropout_rate: 0.0,
        max_len: 8,
        src_vocab: 7,
        tgt_vocab: 7,
        d_img: dim(rng, 1, 4),
    };
    let batch = dim(rng, 1, 2);
    let mut seqs = Vec::new();
    let mut tgts = Vec::new();
    for _ in 0..batch {
        let n = dim(rng, 1, 3);
        seqs.push((0..n).map(|_| 1 + rng.below(6) as u32).collect::<Vec<u32>>());
        let n = dim(rng, 1, 3);
        tgts.push((0..n).map(|_| 1 + rng.below(6) as u32).collect::<Vec<u32>>());
    }
    let src = SeqBatch::from_seqs(&seqs)?;
    let tgt = SeqBatch::from_seqs(&tgts)?;
    let mut p = ParamSet::new();
    init_embedding(&mut p, &cfg, "m", rng);
    init_encoder(&mut p, &cfg, "m", rng);
    if op == "decoder_fused" {
        init_decoder(&mut p, &cfg, "m", rng);
        init_fusion(&mut p, "m/dec_fusion", cfg.d_img, cfg.d_model, rng);
        init_head(&mut p, "m/out", cfg.d_model, cfg.tgt_vocab, rng);
        // a non-trivial head gives the logits room to move
        let w = rand_tensor(rng, &[cfg.d_model, cfg.tgt_vocab]);
        p.insert("m/out/w", w);
    }
    let names: Vec<String> = p.names().map(String::from).collect();
    let mut inputs: Vec<Tensor> = names.iter().map(|n| p.get(n).expect("present").clone()).collect();
    // perturb norms and biases away from their init so their gradients are generic
    for t in &mut inputs {
        for v in t.data_mut() {
            *v += 0.1 * rng.uniform(-1.0, 1.0);
        }
    }
    let visual = rand_tensor(rng, &[batch, cfg.d_img]);
    let open: Vec<bool> = (0..batch).map(|i| i == 0 || rng.unit_f64() < 0.5).collect();
    let dims = vec![cfg.d_model, heads, cfg.d_ff, cfg.d_img, batch, src.len, tgt.len];
    let build = move |g: &mut Graph, v: &[Var]| -> Result<Var> {
        let vars: BTreeMap<String, Var> = names.iter().cloned().zip(v.iter().copied()).collect();
        let b = Bound::from_vars(vars);
        let t = Transformer::new(&cfg, "m");
        let enc = t.encode(g, &b, &src, None)?;
        if op == "encoder" {
            return project(g, enc, rs);
        }
        let f = g.constant(visual.clone());
        let vis = Visual { features: f, open: open.clone() };
        let h = t.decode(g, &b, &tgt, enc, &src, Some(&vis), None)?;
        let logits = t.project(g, &b, h, "out")?;
        let targets: Vec<u32> = tgt.ids.iter().zip(&tgt.valid).map(|(&i, &ok)| if ok { i } else { 99 }).collect();
        g.softmax_xent(logits, &targets, Some(99))
    };
    let (checked, max_rel_err) = check_graph(&inputs, build)?;
    Ok(CheckResult { op, seed, shape, dims, checked, max_rel_err })
}

/// Every op in [`OPS`] at `shapes` random shapes for each seed.
pub fn run_suite(seeds: &[u64], shapes: usize) -> Result<Vec<CheckResult>> {
    let mut out = Vec::new();
    for &op in OPS {
        for &seed in seeds {
            for s in 0..shapes {
                out.push(check(op, seed, s)?);
            }
        }
    }
    Ok(out)
}
