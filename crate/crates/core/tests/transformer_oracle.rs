//! Straight-line re-implementation of the encoder and decoder equations,
//! compared against the graph-based forward passes.

use ssmmt_core::nnet::transformer::{
    decoder_forward, encoder_forward, gated_fusion, init_decoder, init_embedding, init_encoder, init_fusion, init_head,
    sinusoidal,
};
use ssmmt_core::nnet::{ParamSet, SeqBatch, Tensor, TransformerConfig};
use ssmmt_core::rng::{substream, RngExt};

type Mat = Vec<Vec<f64>>;

fn get(p: &ParamSet, name: &str) -> Mat {
    let t = p.get(name).unwrap();
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn vecp(p: &ParamSet, name: &str) -> Vec<f64> {
    p.get(name).unwrap().data().to_vec()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..b[0].len()).map(|j| row.iter().zip(b).map(|(x, br)| x * br[j]).sum()).collect())
        .collect()
}

fn lin(p: &ParamSet, name: &str, x: &Mat) -> Mat {
    let mut y = mm(x, &get(p, &format!("{name}/w")));
    let b = vecp(p, &format!("{name}/b"));
    for row in &mut y {
        for (v, bb) in row.iter_mut().zip(&b) {
            *v += bb;
        }
    }
    y
}

fn ln(p: &ParamSet, name: &str, x: &Mat) -> Mat {
    let g = vecp(p, &format!("{name}/g"));
    let b = vecp(p, &format!("{name}/b"));
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter().enumerate().map(|(i, v)| (v - mu) / (var + 1e-5).sqrt() * g[i] + b[i]).collect()
        })
        .collect()
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect()).collect()
}

/// Multi-head attention for one sequence; `allowed(i, j)` masks keys.
fn mha(p: &ParamSet, name: &str, xq: &Mat, xkv: &Mat, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let q = lin(p, &format!("{name}/q"), xq);
    let k = lin(p, &format!("{name}/k"), xkv);
    let v = lin(p, &format!("{name}/v"), xkv);
    let d = q[0].len();
    let dh = d / heads;
    let mut out = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        for i in 0..xq.len() {
            let scores: Vec<Option<f64>> = (0..xkv.len())
                .map(|j| {
                    allowed(i, j).then(|| (0..dh).map(|t| q[i][h * dh + t] * k[j][h * dh + t]).sum::<f64>() / (dh as f64).sqrt())
                })
                .collect();
            let m = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().flatten().map(|s| (s - m).exp()).sum();
            for (j, s) in scores.iter().enumerate() {
                if let Some(s) = s {
                    let w = (s - m).exp() / z;
                    for t in 0..dh {
                        out[i][h * dh + t] += w * v[j][h * dh + t];
                    }
                }
            }
        }
    }
    lin(p, &format!("{name}/o"), &out)
}

fn ffn(p: &ParamSet, name: &str, x: &Mat) -> Mat {
    let h: Mat = lin(p, &format!("{name}/1"), x).into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
    lin(p, &format!("{name}/2"), &h)
}

fn embed(p: &ParamSet, ids: &[u32], d: usize) -> Mat {
    let e = get(p, "m/embed");
    ids.iter()
        .enumerate()
        .map(|(pos, &i)| {
            let pe = sinusoidal(pos, d);
            e[i as usize].iter().zip(pe).map(|(x, s)| x * (d as f64).sqrt() + s).collect()
        })
        .collect()
}

fn oracle_encoder(cfg: &TransformerConfig, p: &ParamSet, ids: &[u32], valid: &[bool]) -> Mat {
    let mut x = embed(p, ids, cfg.d_model);
    for l in 0..cfg.n_layers_enc {
        let n = ln(p, &format!("m/enc/{l}/ln1"), &x);
        x = add(&x, &mha(p, &format!("m/enc/{l}/attn"), &n, &n, cfg.n_heads, &|_, j| valid[j]));
        let n = ln(p, &format!("m/enc/{l}/ln2"), &x);
        x = add(&x, &ffn(p, &format!("m/enc/{l}/ffn"), &n));
    }
    ln(p, "m/enc/ln", &x)
}

fn oracle_decoder(cfg: &TransformerConfig, p: &ParamSet, ids: &[u32], enc: &Mat, src_valid: &[bool], visual: Option<&[f64]>) -> Mat {
    let mut x = embed(p, ids, cfg.d_model);
    for l in 0..cfg.n_layers_dec {
        let n = ln(p, &format!("m/dec/{l}/ln1"), &x);
        x = add(&x, &mha(p, &format!("m/dec/{l}/self"), &n, &n, cfg.n_heads, &|i, j| j <= i));
        let n = ln(p, &format!("m/dec/{l}/ln2"), &x);
        x = add(&x, &mha(p, &format!("m/dec/{l}/cross"), &n, enc, cfg.n_heads, &|_, j| src_valid[j]));
        let n = ln(p, &format!("m/dec/{l}/ln3"), &x);
        x = add(&x, &ffn(p, &format!("m/dec/{l}/ffn"), &n));
    }
    let mut h = ln(p, "m/dec/ln", &x);
    if let Some(v) = visual {
        h = oracle_fusion(p, "m/dec_fusion", &h, v);
    }
    lin(p, "m/out", &h)
}

fn oracle_fusion(p: &ParamSet, name: &str, h: &Mat, v: &[f64]) -> Mat {
    let vp = lin(p, &format!("{name}/v_"), &vec![v.to_vec()]);
    let vp = &vp[0];
    let wgh = vecp(p, &format!("{name}/wgh"));
    let wgv = vecp(p, &format!("{name}/wgv"));
    let bg = vecp(p, &format!("{name}/bg"))[0];
    h.iter()
        .map(|row| {
            let z: f64 = row.iter().zip(&wgh).map(|(a, b)| a * b).sum::<f64>() + vp.iter().zip(&wgv).map(|(a, b)| a * b).sum::<f64>() + bg;
            let lam = 1.0 / (1.0 + (-z).exp());
            row.iter().zip(vp).map(|(a, b)| a + lam * b).collect()
        })
        .collect()
}

/// The fusion layer names its projection `wv`/`bv`; expose it to `lin` as `v_/w`, `v_/b`.
fn with_alias(mut p: ParamSet, name: &str) -> ParamSet {
    let w = p.get(&format!("{name}/wv")).unwrap().clone();
    let b = p.get(&format!("{name}/bv")).unwrap().clone();
    p.insert(format!("{name}/v_/w"), w);
    p.insert(format!("{name}/v_/b"), b);
    p
}

fn perturbed(p: &mut ParamSet, seed: u64) {
    let mut rng = substream(seed, "oracle/perturb");
    let names: Vec<String> = p.names().map(String::from).collect();
    for n in names {
        for v in p.get_mut(&n).unwrap().data_mut() {
            *v += 0.2 * rng.uniform(-1.0, 1.0);
        }
    }
}

fn model(seed: u64) -> (TransformerConfig, ParamSet) {
    let cfg = TransformerConfig {
        d_model: 8,
        n_heads: 2,
        n_layers_enc: 2,
        n_layers_dec: 2,
        d_ff: 12,
        dropout_rate: 0.0,
        max_len: 16,
        src_vocab: 11,
        tgt_vocab: 11,
        d_img: 5,
    };
    let mut rng = substream(seed, "oracle/init");
    let mut p = ParamSet::new();
    init_embedding(&mut p, &cfg, "m", &mut rng);
    init_encoder(&mut p, &cfg, "m", &mut rng);
    init_decoder(&mut p, &cfg, "m", &mut rng);
    init_fusion(&mut p, "m/dec_fusion", cfg.d_img, cfg.d_model, &mut rng);
    init_head(&mut p, "m/out", cfg.d_model, cfg.tgt_vocab, &mut rng);
    perturbed(&mut p, seed);
    (cfg, p)
}

fn max_diff(t: &Tensor, m: &[Vec<f64>]) -> f64 {
    m.iter().flatten().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

#[test]
fn encoder_matches_oracle() {
    for seed in 0..5 {
        let (cfg, p) = model(seed);
        let seqs = vec![vec![5, 6, 7, 8, 9], vec![2, 10, 3]];
        let x = SeqBatch::from_seqs(&seqs).unwrap();
        let got = encoder_forward(&cfg, &p, "m", &x).unwrap();
        for (b, s) in seqs.iter().enumerate() {
            let ids = &x.ids[b * x.len..(b + 1) * x.len];
            let valid = &x.valid[b * x.len..(b + 1) * x.len];
            let want = oracle_encoder(&cfg, &p, ids, valid);
            let rows = Tensor::matrix(x.len, cfg.d_model, got.data()[b * x.len * 8..(b + 1) * x.len * 8].to_vec()).unwrap();
            let d = max_diff(&rows, &want);
            assert!(d <= 1e-10, "seed {seed} seq {b} ({} tokens): {d}", s.len());
        }
    }
}

#[test]
fn decoder_matches_oracle_with_and_without_fusion() {
    for seed in 0..5 {
        let (cfg, p) = model(seed);
        let src = SeqBatch::single(&[5, 6, 7, 3]).unwrap();
        let tgt = SeqBatch::single(&[2, 8, 9, 10]).unwrap();
        let enc = encoder_forward(&cfg, &p, "m", &src).unwrap();
        let enc_m: Mat = (0..enc.rows()).map(|r| enc.row(r).to_vec()).collect();
        let v = vec![0.3, -0.2, 0.9, 0.1, -0.5];
        let vt = Tensor::matrix(1, 5, v.clone()).unwrap();
        let aliased = with_alias(p.clone(), "m/dec_fusion");
        for vis in [None, Some(&v[..])] {
            let got = decoder_forward(&cfg, &p, "m", &tgt, &enc, &src, vis.map(|_| &vt), vis.is_some()).unwrap();
            let want = oracle_decoder(&cfg, &aliased, &tgt.ids, &enc_m, &src.valid, vis);
            let d = max_diff(&got, &want);
            assert!(d <= 1e-10, "seed {seed} fused={}: {d}", vis.is_some());
        }
    }
}

#[test]
fn gated_fusion_hand_case() {
    // H is 2x4, v has 3 dims.
    let cfg = TransformerConfig { d_model: 4, n_heads: 1, d_img: 3, src_vocab: 1, tgt_vocab: 1, ..Default::default() };
    let mut p = ParamSet::new();
    let f = "t/dec_fusion";
    p.insert(format!("{f}/wv"), Tensor::matrix(3, 4, vec![1.0, 0.0, 0.0, 0.5, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, -0.5]).unwrap());
    p.insert(format!("{f}/bv"), Tensor::new(&[4], vec![0.0, 0.0, 0.0, 1.0]).unwrap());
    p.insert(format!("{f}/wgh"), Tensor::matrix(4, 1, vec![1.0, 0.0, 0.0, 0.0]).unwrap());
    p.insert(format!("{f}/wgv"), Tensor::matrix(4, 1, vec![0.0, 0.0, 0.0, 1.0]).unwrap());
    p.insert(format!("{f}/bg"), Tensor::new(&[1], vec![0.0]).unwrap());
    let h = Tensor::matrix(2, 4, vec![0.0, 1.0, 2.0, 3.0, 2.0, 0.0, -1.0, 1.0]).unwrap();
    let v = [2.0, -1.0, 4.0];
    // v' = (2, -1, 4, 1 + 1 - 2) = (2, -1, 4, 0)
    // row 0: z = 0 + 0 = 0, lambda = 0.5 -> (1, 0.5, 4, 3)
    // row 1: z = 2, lambda = 1/(1+e^-2)
    let lam1 = 1.0 / (1.0 + (-2.0f64).exp());
    let want = [1.0, 0.5, 4.0, 3.0, 2.0 + 2.0 * lam1, -lam1, -1.0 + 4.0 * lam1, 1.0];
    let got = gated_fusion(&cfg, &p, f, &h, &v).unwrap();
    for (a, b) in got.data().iter().zip(want) {
        assert!((a - b).abs() < 1e-15, "{a} vs {b}");
    }

    // closed gate: b_g = -40
    p.insert(format!("{f}/bg"), Tensor::new(&[1], vec![-40.0]).unwrap());
    p.insert(format!("{f}/wgh"), Tensor::zeros(&[4, 1]));
    p.insert(format!("{f}/wgv"), Tensor::zeros(&[4, 1]));
    let got = gated_fusion(&cfg, &p, f, &h, &v).unwrap();
    for (a, b) in got.data().iter().zip(h.data()) {
        assert!((a - b).abs() <= 1e-12);
    }

    // v' = 0 gives H exactly whatever the gate
    p.insert(format!("{f}/wv"), Tensor::zeros(&[3, 4]));
    p.insert(format!("{f}/bv"), Tensor::zeros(&[4]));
    p.insert(format!("{f}/bg"), Tensor::new(&[1], vec![3.0]).unwrap());
    assert_eq!(gated_fusion(&cfg, &p, f, &h, &v).unwrap(), h);

    assert!(gated_fusion(&cfg, &p, f, &h, &[f64::NAN, 0.0, 0.0]).is_err());
}
