use ssmmt_core::corpus::{BOS, EOS, MASK, N_SPECIALS};
use ssmmt_core::nnet::{ParamSet, TransformerConfig};
use ssmmt_core::rng::{substream, RngExt};
use ssmmt_core::translator::{
    beam_search, concat_pair, finetune, greedy, init_translator, mask_tokens, pretrain, tlm_loss, token_accuracy,
    translate, translation_logits, translation_loss, vtlm_loss, Example, Fusion, Objective, TrainConfig,
};

const V: usize = 12;

fn tiny() -> TransformerConfig {
    TransformerConfig {
        d_model: 16,
        n_heads: 2,
        n_layers_enc: 1,
        n_layers_dec: 1,
        d_ff: 32,
        dropout_rate: 0.0,
        max_len: 16,
        src_vocab: V,
        tgt_vocab: V,
        d_img: 4,
    }
}

fn random_seq(rng: &mut ssmmt_core::rng::Rng, len: usize) -> Vec<u32> {
    (0..len).map(|_| (rng.below(V - N_SPECIALS as usize) + N_SPECIALS as usize) as u32).collect()
}

fn random_example(rng: &mut ssmmt_core::rng::Rng, id: u64, d_img: usize) -> Example {
    let (a, b) = (2 + rng.below(4), 2 + rng.below(4));
    let visual = if rng.below(4) == 0 { None } else { Some((0..d_img).map(|_| rng.uniform(-1.0, 1.0)).collect()) };
    Example { id, src: random_seq(rng, a), tgt: random_seq(rng, b), visual }
}

/// Parameters with a non-trivial fusion path so gate tests cannot pass vacuously.
fn params_with_open_gate(cfg: &TransformerConfig, seed: u64) -> ParamSet {
    let mut p = init_translator(cfg, seed).unwrap();
    for name in ["translator/dec_fusion/bg", "translator/enc_fusion/bg"] {
        p.get_mut(name).unwrap().data_mut()[0] = 1.5;
    }
    p
}

#[test]
fn masking_replays_the_documented_protocol() {
    let v = 40usize;
    for seed in 0..30u64 {
        let mut r = substream(seed, "seq");
        let mut ids = concat_pair(&random_seq(&mut r, 6), &random_seq(&mut r, 5));
        ids = ids.into_iter().map(|t| if t >= N_SPECIALS { t + (seed % 20) as u32 } else { t }).collect();
        let got = mask_tokens(&ids, 0.15, v, &mut substream(seed, "mask")).unwrap();

        let mut o = substream(seed, "mask");
        let ns: Vec<usize> = (0..ids.len()).filter(|&i| ids[i] >= N_SPECIALS).collect();
        let mut pos = Vec::new();
        for &i in &ns {
            if o.unit_f64() < 0.15 {
                pos.push(i);
            }
        }
        if pos.is_empty() {
            pos.push(ns[o.below(ns.len())]);
        }
        let mut want = ids.clone();
        for &p in &pos {
            let u = o.unit_f64();
            if u < 0.8 {
                want[p] = MASK;
            } else if u < 0.9 {
                want[p] = (o.below(v - 5) + 5) as u32;
            }
        }
        assert_eq!(got.positions, pos);
        assert_eq!(got.ids, want);
        assert_eq!(got.originals, pos.iter().map(|&p| ids[p]).collect::<Vec<_>>());
        assert!(got.positions.iter().all(|&p| ids[p] >= N_SPECIALS));
    }
}

#[test]
fn masking_rates_match_the_recipe() {
    let mut rng = substream(99, "rates");
    let ids: Vec<u32> = (0..200).map(|i| N_SPECIALS + (i % 30)).collect();
    let (mut selected, mut total, mut masked, mut random, mut kept) = (0usize, 0usize, 0usize, 0usize, 0usize);
    for _ in 0..300 {
        let m = mask_tokens(&ids, 0.15, 64, &mut rng).unwrap();
        total += ids.len();
        selected += m.positions.len();
        for (&p, &orig) in m.positions.iter().zip(&m.originals) {
            match m.ids[p] {
                x if x == MASK => masked += 1,
                x if x == orig => kept += 1,
                _ => random += 1,
            }
        }
    }
    let rate = selected as f64 / total as f64;
    assert!((rate - 0.15).abs() < 0.005, "selection rate {rate}");
    let s = selected as f64;
    assert!((masked as f64 / s - 0.8).abs() < 0.01);
    // A random replacement can land on the original id (1 in 59 here).
    assert!(((random + kept) as f64 / s - 0.2).abs() < 0.01);
    assert!((kept as f64 / s - (0.1 + 0.1 / 59.0)).abs() < 0.01);
}

#[test]
fn untrained_losses_start_near_log_vocab() {
    let cfg = TransformerConfig { src_vocab: 200, tgt_vocab: 200, ..TransformerConfig::default() };
    let p = init_translator(&cfg, 5).unwrap();
    let mut r = substream(5, "x");
    let items: Vec<Example> = (0..8)
        .map(|i| Example { id: i, src: (0..6).map(|_| 5 + r.below(195) as u32).collect(), tgt: (0..6).map(|_| 5 + r.below(195) as u32).collect(), visual: None })
        .collect();
    let ln_v = (200f64).ln();
    let l = translation_loss(&cfg, &p, &items, Fusion::Off).unwrap();
    assert!((l - ln_v).abs() < 0.05 * ln_v, "{l} vs {ln_v}");
    let m = mask_tokens(&concat_pair(&items[0].src, &items[0].tgt), 0.3, 200, &mut r).unwrap();
    let l = tlm_loss(&cfg, &p, &m).unwrap();
    assert!((l - ln_v).abs() < 0.05 * ln_v, "{l} vs {ln_v}");
}

#[test]
fn loss_ignores_originals_hidden_behind_the_mask() {
    let cfg = tiny();
    let p = init_translator(&cfg, 3).unwrap();
    let ids = concat_pair(&[5, 6, 7, 8], &[9, 10, 11]);
    let mut hits = 0;
    for seed in 0..40 {
        let a = mask_tokens(&ids, 0.3, V, &mut substream(seed, "m")).unwrap();
        let Some(k) = a.positions.iter().position(|&p| a.ids[p] == MASK) else { continue };
        let mut other = ids.clone();
        other[a.positions[k]] = if ids[a.positions[k]] == 5 { 6 } else { 5 };
        let b = mask_tokens(&other, 0.3, V, &mut substream(seed, "m")).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.positions, b.positions);
        let mut same = b.clone();
        same.originals = a.originals.clone();
        assert_eq!(tlm_loss(&cfg, &p, &same).unwrap().to_bits(), tlm_loss(&cfg, &p, &a).unwrap().to_bits());
        hits += 1;
    }
    assert!(hits > 10);
}

#[test]
fn closed_gate_is_bit_identical_to_text_only() {
    let cfg = tiny();
    for batch in 0..50u64 {
        let p = params_with_open_gate(&cfg, batch);
        let mut r = substream(batch, "gate-batch");
        let items: Vec<Example> = (0..1 + r.below(4)).map(|i| random_example(&mut r, i as u64, cfg.d_img)).collect();
        let off = translation_loss(&cfg, &p, &items, Fusion::Off).unwrap();
        let closed = translation_loss(&cfg, &p, &items, Fusion::Closed).unwrap();
        assert_eq!(off.to_bits(), closed.to_bits(), "loss, batch {batch}");
        let lo = translation_logits(&cfg, &p, &items, Fusion::Off).unwrap();
        let lc = translation_logits(&cfg, &p, &items, Fusion::Closed).unwrap();
        assert!(lo.data().iter().zip(lc.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "logits, batch {batch}");
        let e = &items[0];
        let v = e.visual.as_deref();
        for beam in [1, 3] {
            let a = translate(&cfg, &p, &e.src, v, Fusion::Off, beam, 8).unwrap();
            let b = translate(&cfg, &p, &e.src, v, Fusion::Closed, beam, 8).unwrap();
            assert_eq!(a.tokens, b.tokens);
            assert_eq!(a.log_prob.to_bits(), b.log_prob.to_bits());
        }
        let m = mask_tokens(&concat_pair(&e.src, &e.tgt), 0.3, V, &mut r).unwrap();
        let visual: Vec<f64> = (0..cfg.d_img).map(|_| r.uniform(-1.0, 1.0)).collect();
        assert_eq!(tlm_loss(&cfg, &p, &m).unwrap().to_bits(), vtlm_loss(&cfg, &p, &m, &visual, false).unwrap().to_bits());
    }
}

#[test]
fn open_gate_changes_outputs() {
    let cfg = tiny();
    let p = params_with_open_gate(&cfg, 1);
    let e = Example { id: 0, src: vec![5, 6, 7], tgt: vec![8, 9], visual: Some(vec![1.0, -1.0, 0.5, 2.0]) };
    let off = translation_loss(&cfg, &p, core::slice::from_ref(&e), Fusion::Off).unwrap();
    let on = translation_loss(&cfg, &p, core::slice::from_ref(&e), Fusion::On).unwrap();
    assert!((off - on).abs() > 1e-6);
    let m = mask_tokens(&concat_pair(&e.src, &e.tgt), 0.5, V, &mut substream(0, "m")).unwrap();
    let v = e.visual.clone().unwrap();
    assert!((vtlm_loss(&cfg, &p, &m, &v, true).unwrap() - tlm_loss(&cfg, &p, &m).unwrap()).abs() > 1e-6);
}

/// Sum of token log-probabilities of `content` followed by eos under teacher forcing.
fn sequence_log_prob(cfg: &TransformerConfig, p: &ParamSet, src: &[u32], content: &[u32]) -> f64 {
    let e = Example { id: 0, src: src.to_vec(), tgt: content.to_vec(), visual: None };
    -translation_loss(cfg, p, &[e], Fusion::Off).unwrap() * (content.len() + 1) as f64
}

fn all_sequences(max_len: usize) -> Vec<Vec<u32>> {
    let alphabet: Vec<u32> = (0..5u32).filter(|&t| t != EOS).collect();
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for &t in &alphabet {
                let mut x: Vec<u32> = s.clone();
                x.push(t);
                next.push(x);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

#[test]
fn beam_search_against_exhaustive_enumeration() {
    // Five output tokens; eos is made likely enough for short hypotheses to finish.
    let cfg = TransformerConfig { src_vocab: 5, tgt_vocab: 5, ..tiny() };
    let max_len = 4;
    let seqs = all_sequences(max_len - 1);
    let mut finished_greedy = 0;
    for seed in 0..12u64 {
        let mut p = init_translator(&cfg, seed).unwrap();
        let w = p.get_mut("translator/out/w").unwrap();
        let mut r = substream(seed, "toy-head");
        for x in w.data_mut() {
            *x = r.uniform(-1.5, 1.5);
        }
        p.get_mut("translator/out/b").unwrap().data_mut()[EOS as usize] = 0.5;
        let src = [0u32, 1, 4];
        let brute = seqs.iter().map(|s| sequence_log_prob(&cfg, &p, &src, s)).fold(f64::NEG_INFINITY, f64::max);

        let g = greedy(&cfg, &p, &src, None, Fusion::Off, max_len).unwrap();
        let b4 = beam_search(&cfg, &p, &src, None, Fusion::Off, 4, max_len).unwrap();
        let best4 = b4.iter().filter(|h| h.finished).map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);
        let wide = beam_search(&cfg, &p, &src, None, Fusion::Off, 10_000, max_len).unwrap();
        let best_wide = wide.iter().filter(|h| h.finished).map(|h| h.log_prob).fold(f64::NEG_INFINITY, f64::max);

        assert!((best_wide - brute).abs() < 1e-9, "seed {seed}: wide beam {best_wide} vs brute force {brute}");
        assert!(best4 <= brute + 1e-9);
        if g.finished {
            finished_greedy += 1;
            let gl = sequence_log_prob(&cfg, &p, &src, g.content());
            assert!((gl - g.log_prob).abs() < 1e-9);
            assert!(best4 >= g.log_prob - 1e-12, "seed {seed}: beam {best4} < greedy {}", g.log_prob);
        }
        assert_eq!(translate(&cfg, &p, &src, None, Fusion::Off, 1, max_len).unwrap(), g);
        for h in &b4 {
            assert!(h.tokens.len() <= max_len);
            assert_eq!(h.finished, h.tokens.last() == Some(&EOS));
        }
        assert!(b4.windows(2).all(|w| w[0].score() >= w[1].score()));
    }
    assert!(finished_greedy >= 6);
}

#[test]
fn decoding_stops_at_max_len_and_flags_truncation() {
    let cfg = tiny();
    let mut p = init_translator(&cfg, 2).unwrap();
    p.get_mut("translator/out/b").unwrap().data_mut()[EOS as usize] = -50.0;
    let h = greedy(&cfg, &p, &[5, 6], None, Fusion::Off, 5).unwrap();
    assert_eq!(h.tokens.len(), 5);
    assert!(!h.finished);
    let b = translate(&cfg, &p, &[5, 6], None, Fusion::Off, 3, 5).unwrap();
    assert!(!b.finished && b.tokens.len() == 5);
    assert!(beam_search(&cfg, &p, &[5], None, Fusion::Off, 0, 5).is_err());
}

#[test]
fn overfit_model_reproduces_memorized_pairs() {
    let cfg = tiny();
    let data = vec![
        Example { id: 0, src: vec![5, 6, 7], tgt: vec![9, 8, 11], visual: None },
        Example { id: 1, src: vec![7, 6], tgt: vec![10, 10, 5, 6], visual: None },
        Example { id: 2, src: vec![11, 5, 9, 8], tgt: vec![7], visual: None },
    ];
    let train = TrainConfig { epochs: 250, lr: 1e-2, batch_size: 3, seed: 4, mask_prob: 0.15 };
    let (p, trace) = finetune(&cfg, init_translator(&cfg, 4).unwrap(), &data, Fusion::Off, &train).unwrap();
    assert!(trace.last().unwrap() < &0.05, "{trace:?}");
    assert_eq!(token_accuracy(&cfg, &p, &data, Fusion::Off).unwrap(), 1.0);
    for e in &data {
        assert_eq!(translate(&cfg, &p, &e.src, None, Fusion::Off, 1, 10).unwrap().content(), e.tgt.as_slice());
        assert_eq!(translate(&cfg, &p, &e.src, None, Fusion::Off, 4, 10).unwrap().content(), e.tgt.as_slice());
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let cfg = tiny();
    let mut r = substream(8, "data");
    let data: Vec<Example> = (0..12).map(|i| random_example(&mut r, i, cfg.d_img)).collect();
    let train = TrainConfig { epochs: 6, lr: 5e-3, batch_size: 4, seed: 8, mask_prob: 0.3 };
    for objective in [Objective::Tlm, Objective::Vtlm] {
        let (a, ta) = pretrain(&cfg, init_translator(&cfg, 8).unwrap(), &data, objective, &train).unwrap();
        let (b, tb) = pretrain(&cfg, init_translator(&cfg, 8).unwrap(), &data, objective, &train).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(ta.last().unwrap() < ta.first().unwrap());
    }
    let (a, ta) = finetune(&cfg, init_translator(&cfg, 8).unwrap(), &data, Fusion::On, &train).unwrap();
    let (b, tb) = finetune(&cfg, init_translator(&cfg, 8).unwrap(), &data, Fusion::On, &train).unwrap();
    assert_eq!((a, ta.clone()), (b, tb));
    assert!(ta.last().unwrap() < ta.first().unwrap());
}

#[test]
fn divergence_and_shape_errors_are_reported() {
    let cfg = tiny();
    let data = vec![Example { id: 0, src: vec![5, 6], tgt: vec![7], visual: Some(vec![0.0; 3]) }];
    let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(finetune(&cfg, init_translator(&cfg, 0).unwrap(), &data, Fusion::On, &train).is_err());
    assert!(finetune(&cfg, init_translator(&cfg, 0).unwrap(), &[], Fusion::On, &train).is_err());
    let mut p = init_translator(&cfg, 0).unwrap();
    p.get_mut("translator/out/w").unwrap().data_mut()[0] = f64::NAN;
    let ok = vec![Example { id: 0, src: vec![5, 6], tgt: vec![7], visual: None }];
    let err = finetune(&cfg, p, &ok, Fusion::Off, &train).unwrap_err();
    assert!(matches!(err, ssmmt_core::Error::Diverged { epoch: 0 }), "{err:?}");
    let other = TransformerConfig { src_vocab: V + 1, tgt_vocab: V + 1, ..tiny() };
    assert!(finetune(&other, init_translator(&cfg, 0).unwrap(), &ok, Fusion::Off, &train).is_err());
    assert_eq!(BOS, 2);
}
