//! Masked bilingual pretraining (text-only and visually conditioned),
//! multimodal fine-tuning with decoder-side gated fusion, and beam search.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{Vocabulary, BOS, EOS, MASK, N_SPECIALS};
use crate::nnet::transformer::{init_decoder, init_embedding, init_encoder, init_fusion, init_head};
use crate::nnet::{Adam, Bound, Graph, ParamSet, SeqBatch, Tensor, Transformer, TransformerConfig, Var, Visual};
use crate::rng::{substream, Rng, RngExt};
use crate::{Error, Result};

pub const PREFIX: &str = "translator";
/// Target id marking positions that carry no loss.
pub const IGNORE: u32 = u32::MAX;
pub const LENGTH_ALPHA: f64 = 0.6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PretrainBatch {
    /// Input ids after replacement.
    pub ids: Vec<u32>,
    /// Masked positions, ascending.
    pub positions: Vec<usize>,
    /// Original ids at `positions`.
    pub originals: Vec<u32>,
}

impl PretrainBatch {
    /// Per-position targets: the original id at masked positions, [`IGNORE`] elsewhere.
    pub fn targets(&self) -> Vec<u32> {
        let mut t = vec![IGNORE; self.ids.len()];
        for (&p, &o) in self.positions.iter().zip(&self.originals) {
            t[p] = o;
        }
        t
    }
}

/// Selects each non-special position with probability `mask_prob` (forcing
/// one if none is chosen), then replaces each selected token by the mask id
/// with probability 0.8, a random non-special token with probability 0.1,
/// and leaves it unchanged otherwise.
pub fn mask_tokens(ids: &[u32], mask_prob: f64, vocab_size: usize, rng: &mut Rng) -> Result<PretrainBatch> {
    if !(mask_prob > 0.0 && mask_prob < 1.0) {
        return Err(Error::InvalidArgument(format!("mask_prob {mask_prob} outside (0, 1)")));
    }
    if ids.len() < 2 {
        return Err(Error::InvalidArgument("sequence shorter than 2".into()));
    }
    if vocab_size <= N_SPECIALS as usize {
        return Err(Error::InvalidVocabulary("no non-special tokens".into()));
    }
    let nonspecial: Vec<usize> = (0..ids.len()).filter(|&i| !Vocabulary::is_special(ids[i])).collect();
    if nonspecial.is_empty() {
        return Err(Error::InvalidArgument("sequence holds only special tokens".into()));
    }
    let mut positions: Vec<usize> = nonspecial.iter().copied().filter(|_| rng.unit_f64() < mask_prob).collect();
    if positions.is_empty() {
        positions.push(nonspecial[rng.below(nonspecial.len())]);
    }
    let mut out = ids.to_vec();
    let originals = positions.iter().map(|&p| ids[p]).collect();
    for &p in &positions {
        let r = rng.unit_f64();
        if r < 0.8 {
            out[p] = MASK;
        } else if r < 0.9 {
            out[p] = (rng.below(vocab_size - N_SPECIALS as usize) + N_SPECIALS as usize) as u32;
        }
    }
    Ok(PretrainBatch { ids: out, positions, originals })
}

/// `[bos] src [eos] tgt [eos]`.
pub fn concat_pair(src: &[u32], tgt: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(src.len() + tgt.len() + 3);
    v.push(BOS);
    v.extend_from_slice(src);
    v.push(EOS);
    v.extend_from_slice(tgt);
    v.push(EOS);
    v
}

/// Fresh translator parameters. Every arm starts from the same values for a
/// given seed.
pub fn init_translator(cfg: &TransformerConfig, seed: u64) -> Result<ParamSet> {
    cfg.validate()?;
    let mut rng = substream(seed, "translator/init");
    let mut p = ParamSet::new();
    init_embedding(&mut p, cfg, PREFIX, &mut rng);
    init_encoder(&mut p, cfg, PREFIX, &mut rng);
    init_decoder(&mut p, cfg, PREFIX, &mut rng);
    init_head(&mut p, &format!("{PREFIX}/out"), cfg.d_model, cfg.tgt_vocab, &mut rng);
    init_head(&mut p, &format!("{PREFIX}/mlm"), cfg.d_model, cfg.src_vocab.max(cfg.tgt_vocab), &mut rng);
    init_fusion(&mut p, &format!("{PREFIX}/enc_fusion"), cfg.d_img, cfg.d_model, &mut rng);
    init_fusion(&mut p, &format!("{PREFIX}/dec_fusion"), cfg.d_img, cfg.d_model, &mut rng);
    Ok(p)
}

/// Checks that `params` fits `cfg`'s vocabulary and width.
pub fn check_compatible(cfg: &TransformerConfig, params: &ParamSet) -> Result<()> {
    let e = params.get(&format!("{PREFIX}/embed"))?;
    let want = [cfg.src_vocab.max(cfg.tgt_vocab), cfg.d_model];
    if e.shape() != want {
        return Err(Error::InvalidVocabulary(format!("checkpoint embedding {:?} does not match {:?}", e.shape(), want)));
    }
    Ok(())
}

/// One parallel sentence with its optional pooled visual context.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    /// `None` for sentences without visual candidates.
    pub visual: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Masked prediction over the concatenated pair.
    Tlm,
    /// The same with the visual context fused into the encoder states.
    Vtlm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub mask_prob: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 10, lr: 1e-3, batch_size: 16, seed: 13, mask_prob: 0.15 }
    }
}

/// How the decoder's gate treats the visual context during fine-tuning and
/// decoding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    /// Text only: no fusion layer at all.
    Off,
    /// Gated fusion for every sentence with a context.
    On,
    /// Fusion layer evaluated with every gate forced shut.
    Closed,
}

fn visual_rows(g: &mut Graph, cfg: &TransformerConfig, items: &[&Example], fusion: Fusion) -> Result<Option<Visual>> {
    if fusion == Fusion::Off {
        return Ok(None);
    }
    let d = cfg.d_img;
    let mut flat = Vec::with_capacity(items.len() * d);
    let mut open = Vec::with_capacity(items.len());
    for it in items {
        match &it.visual {
            Some(v) => {
                if v.len() != d {
                    return Err(Error::Dimension { expected: d, got: v.len() });
                }
                flat.extend_from_slice(v);
                open.push(fusion == Fusion::On);
            }
            None => {
                flat.extend(core::iter::repeat_n(0.0, d));
                open.push(false);
            }
        }
    }
    let features = g.constant(Tensor::matrix(items.len(), d, flat)?);
    Ok(Some(Visual { features, open }))
}

fn trainable_all(_: &str) -> bool {
    true
}

/// Masked-prediction loss of one batch of masked sequences.
pub fn pretrain_loss_graph(
    g: &mut Graph,
    cfg: &TransformerConfig,
    b: &Bound,
    batches: &[PretrainBatch],
    visual: Option<&Visual>,
    rng: Option<&mut Rng>,
) -> Result<Var> {
    let seqs: Vec<Vec<u32>> = batches.iter().map(|m| m.ids.clone()).collect();
    let x = SeqBatch::from_seqs(&seqs)?;
    let mut targets = Vec::with_capacity(x.ids.len());
    for m in batches {
        let t = m.targets();
        targets.extend_from_slice(&t);
        targets.extend(core::iter::repeat_n(IGNORE, x.len - t.len()));
    }
    let t = Transformer::new(cfg, PREFIX);
    let mut h = t.encode(g, b, &x, rng)?;
    if let Some(v) = visual {
        h = t.fuse(g, b, "enc_fusion", h, x.len, v)?;
    }
    let logits = t.project(g, b, h, "mlm")?;
    g.softmax_xent(logits, &targets, Some(IGNORE))
}

/// Loss of one example under a fixed mask, without visual input.
pub fn tlm_loss(cfg: &TransformerConfig, params: &ParamSet, batch: &PretrainBatch) -> Result<f64> {
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let l = pretrain_loss_graph(&mut g, cfg, &b, core::slice::from_ref(batch), None, None)?;
    Ok(g.value(l).item())
}

/// Loss of one example under a fixed mask with its visual context; `open`
/// false forces the gate shut.
pub fn vtlm_loss(cfg: &TransformerConfig, params: &ParamSet, batch: &PretrainBatch, visual: &[f64], open: bool) -> Result<f64> {
    if visual.len() != cfg.d_img {
        return Err(Error::Dimension { expected: cfg.d_img, got: visual.len() });
    }
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let features = g.constant(Tensor::matrix(1, visual.len(), visual.to_vec())?);
    let v = Visual { features, open: vec![open] };
    let l = pretrain_loss_graph(&mut g, cfg, &b, core::slice::from_ref(batch), Some(&v), None)?;
    Ok(g.value(l).item())
}

fn diverged(epoch: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite(_) => Error::Diverged { epoch },
        e => e,
    }
}

/// Masked pretraining; returns the parameters and the mean loss per epoch.
pub fn pretrain(
    cfg: &TransformerConfig,
    mut params: ParamSet,
    data: &[Example],
    objective: Objective,
    train: &TrainConfig,
) -> Result<(ParamSet, Vec<f64>)> {
    check_compatible(cfg, &params)?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let vocab = cfg.src_vocab.max(cfg.tgt_vocab);
    let mut opt = Adam::new(train.lr);
    let mut mask_rng = substream(train.seed, "masking");
    let mut drop_rng = substream(train.seed, "translator/dropout/pretrain");
    let mut trace = Vec::with_capacity(train.epochs);
    let fusion = if objective == Objective::Vtlm { Fusion::On } else { Fusion::Off };
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        substream(train.seed, &format!("translator/shuffle/pretrain/{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size.max(1)) {
            let items: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let masked: Vec<PretrainBatch> = items
                .iter()
                .map(|it| mask_tokens(&concat_pair(&it.src, &it.tgt), train.mask_prob, vocab, &mut mask_rng))
                .collect::<Result<_>>()?;
            let mut g = Graph::new(true);
            let b = params.bind(&mut g, trainable_all);
            let loss = (|| {
                let vis = visual_rows(&mut g, cfg, &items, fusion)?;
                let l = pretrain_loss_graph(&mut g, cfg, &b, &masked, vis.as_ref(), Some(&mut drop_rng))?;
                let grads = g.backward(l)?.named(&g, b.vars());
                opt.step(&mut params, &grads)?;
                Ok::<f64, Error>(g.value(l).item())
            })()
            .map_err(diverged(epoch))?;
            total += loss * chunk.len() as f64;
        }
        trace.push(total / data.len() as f64);
    }
    Ok((params, trace))
}

fn decoder_io(items: &[&Example]) -> Result<(SeqBatch, SeqBatch, Vec<u32>)> {
    let src: Vec<Vec<u32>> = items.iter().map(|it| it.src.clone()).collect();
    let dec: Vec<Vec<u32>> = items
        .iter()
        .map(|it| {
            let mut v = vec![BOS];
            v.extend_from_slice(&it.tgt);
            v
        })
        .collect();
    let src = SeqBatch::from_seqs(&src)?;
    let dec = SeqBatch::from_seqs(&dec)?;
    let mut targets = Vec::with_capacity(dec.ids.len());
    for it in items {
        targets.extend_from_slice(&it.tgt);
        targets.push(EOS);
        targets.extend(core::iter::repeat_n(IGNORE, dec.len - it.tgt.len() - 1));
    }
    Ok((src, dec, targets))
}

/// Teacher-forced logits `[batch*len x vocab]` and per-position targets.
#[allow(clippy::type_complexity)]
fn forced_logits(
    g: &mut Graph,
    cfg: &TransformerConfig,
    b: &Bound,
    items: &[&Example],
    fusion: Fusion,
    mut rng: Option<&mut Rng>,
) -> Result<(Var, Vec<u32>)> {
    let (src, dec, targets) = decoder_io(items)?;
    let t = Transformer::new(cfg, PREFIX);
    let enc = t.encode(g, b, &src, rng.as_deref_mut())?;
    let vis = visual_rows(g, cfg, items, fusion)?;
    let h = t.decode(g, b, &dec, enc, &src, vis.as_ref(), rng)?;
    Ok((t.project(g, b, h, "out")?, targets))
}

/// Mean teacher-forced cross-entropy of a batch.
pub fn translation_loss(cfg: &TransformerConfig, params: &ParamSet, items: &[Example], fusion: Fusion) -> Result<f64> {
    let refs: Vec<&Example> = items.iter().collect();
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let (logits, targets) = forced_logits(&mut g, cfg, &b, &refs, fusion, None)?;
    let l = g.softmax_xent(logits, &targets, Some(IGNORE))?;
    Ok(g.value(l).item())
}

/// Teacher-forced logits of a batch, for inspection.
pub fn translation_logits(cfg: &TransformerConfig, params: &ParamSet, items: &[Example], fusion: Fusion) -> Result<Tensor> {
    let refs: Vec<&Example> = items.iter().collect();
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let (logits, _) = forced_logits(&mut g, cfg, &b, &refs, fusion, None)?;
    Ok(g.value(logits).clone())
}

/// Fraction of target tokens (including the final eos) predicted by argmax
/// under teacher forcing.
pub fn token_accuracy(cfg: &TransformerConfig, params: &ParamSet, items: &[Example], fusion: Fusion) -> Result<f64> {
    let (mut right, mut total) = (0usize, 0usize);
    for chunk in items.chunks(32) {
        let refs: Vec<&Example> = chunk.iter().collect();
        let mut g = Graph::new(false);
        let b = params.bind(&mut g, |_| false);
        let (logits, targets) = forced_logits(&mut g, cfg, &b, &refs, fusion, None)?;
        let lv = g.value(logits);
        for (r, &t) in targets.iter().enumerate() {
            if t == IGNORE {
                continue;
            }
            total += 1;
            if argmax(lv.row(r)) == t as usize {
                right += 1;
            }
        }
    }
    Ok(right as f64 / total.max(1) as f64)
}

/// Teacher-forced fine-tuning; returns the parameters and the mean loss per epoch.
pub fn finetune(
    cfg: &TransformerConfig,
    mut params: ParamSet,
    data: &[Example],
    fusion: Fusion,
    train: &TrainConfig,
) -> Result<(ParamSet, Vec<f64>)> {
    check_compatible(cfg, &params)?;
    if data.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Adam::new(train.lr);
    let mut drop_rng = substream(train.seed, "translator/dropout/finetune");
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        substream(train.seed, &format!("translator/shuffle/finetune/{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(train.batch_size.max(1)) {
            let items: Vec<&Example> = chunk.iter().map(|&i| &data[i]).collect();
            let mut g = Graph::new(true);
            let b = params.bind(&mut g, trainable_all);
            let loss = (|| {
                let (logits, targets) = forced_logits(&mut g, cfg, &b, &items, fusion, Some(&mut drop_rng))?;
                let l = g.softmax_xent(logits, &targets, Some(IGNORE))?;
                let grads = g.backward(l)?.named(&g, b.vars());
                opt.step(&mut params, &grads)?;
                Ok::<f64, Error>(g.value(l).item())
            })()
            .map_err(diverged(epoch))?;
            total += loss * chunk.len() as f64;
        }
        trace.push(total / data.len() as f64);
    }
    Ok((params, trace))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z = libm::log(row.iter().map(|x| libm::exp(x - max)).sum::<f64>()) + max;
    row.iter().map(|x| x - z).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    /// Generated ids, ending with eos when finished.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities.
    pub log_prob: f64,
    pub finished: bool,
}

impl Hypothesis {
    /// Length-normalized score `log_prob / ((5 + len) / 6)^alpha`.
    pub fn score(&self) -> f64 {
        self.log_prob / libm::pow((5.0 + self.tokens.len() as f64) / 6.0, LENGTH_ALPHA)
    }

    /// Tokens without the trailing eos.
    pub fn content(&self) -> &[u32] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) if self.finished => rest,
            _ => &self.tokens,
        }
    }
}

/// Incremental decoder over one source sentence and its encoder states.
struct Stepper<'a> {
    cfg: &'a TransformerConfig,
    params: &'a ParamSet,
    src: SeqBatch,
    enc: Tensor,
    visual: Option<Vec<f64>>,
    fusion: Fusion,
}

impl<'a> Stepper<'a> {
    fn new(cfg: &'a TransformerConfig, params: &'a ParamSet, src: &[u32], visual: Option<&[f64]>, fusion: Fusion) -> Result<Self> {
        if let Some(v) = visual {
            if v.len() != cfg.d_img {
                return Err(Error::Dimension { expected: cfg.d_img, got: v.len() });
            }
        }
        let src = SeqBatch::single(src)?;
        let mut g = Graph::new(false);
        let b = params.bind(&mut g, |_| false);
        let enc = Transformer::new(cfg, PREFIX).encode(&mut g, &b, &src, None)?;
        let enc = g.value(enc).clone();
        Ok(Self { cfg, params, src, enc, visual: visual.map(<[f64]>::to_vec), fusion })
    }

    /// Next-token log-probabilities after each prefix (all of equal length).
    fn next(&self, prefixes: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let n = prefixes.len();
        let dec: Vec<Vec<u32>> = prefixes
            .iter()
            .map(|p| {
                let mut v = vec![BOS];
                v.extend_from_slice(p);
                v
            })
            .collect();
        let dec = SeqBatch::from_seqs(&dec)?;
        if dec.len > self.cfg.max_len {
            return Err(Error::SequenceTooLong { len: dec.len, max: self.cfg.max_len });
        }
        let mut enc = Vec::with_capacity(self.enc.len() * n);
        let mut src_ids = Vec::with_capacity(self.src.len * n);
        for _ in 0..n {
            enc.extend_from_slice(self.enc.data());
            src_ids.extend_from_slice(&self.src.ids);
        }
        let src = SeqBatch { ids: src_ids, batch: n, len: self.src.len, valid: vec![true; n * self.src.len] };
        let mut g = Graph::new(false);
        let b = self.params.bind(&mut g, |_| false);
        let enc = g.constant(Tensor::matrix(n * self.src.len, self.cfg.d_model, enc)?);
        let vis = match (&self.visual, self.fusion) {
            (_, Fusion::Off) => None,
            (Some(v), f) => {
                let mut flat = Vec::with_capacity(n * v.len());
                for _ in 0..n {
                    flat.extend_from_slice(v);
                }
                let features = g.constant(Tensor::matrix(n, v.len(), flat)?);
                Some(Visual { features, open: vec![f == Fusion::On; n] })
            }
            (None, _) => {
                let features = g.constant(Tensor::zeros(&[n, self.cfg.d_img]));
                Some(Visual { features, open: vec![false; n] })
            }
        };
        let t = Transformer::new(self.cfg, PREFIX);
        let h = t.decode(&mut g, &b, &dec, enc, &src, vis.as_ref(), None)?;
        let logits = t.project(&mut g, &b, h, "out")?;
        let lv = g.value(logits);
        Ok((0..n).map(|i| log_softmax(lv.row(i * dec.len + dec.len - 1))).collect())
    }
}

/// Greedy decoding: the most probable token at every step, lowest id on ties.
pub fn greedy(
    cfg: &TransformerConfig,
    params: &ParamSet,
    src: &[u32],
    visual: Option<&[f64]>,
    fusion: Fusion,
    max_len: usize,
) -> Result<Hypothesis> {
    let stepper = Stepper::new(cfg, params, src, visual, fusion)?;
    let mut h = Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false };
    while h.tokens.len() < max_len {
        let lp = stepper.next(core::slice::from_ref(&h.tokens))?.remove(0);
        let t = argmax(&lp);
        h.tokens.push(t as u32);
        h.log_prob += lp[t];
        if t as u32 == EOS {
            h.finished = true;
            break;
        }
    }
    Ok(h)
}

/// Beam search returning every finished hypothesis (plus the surviving
/// unfinished ones when `max_len` cuts the search short), best first by
/// length-normalized score.
pub fn beam_search(
    cfg: &TransformerConfig,
    params: &ParamSet,
    src: &[u32],
    visual: Option<&[f64]>,
    fusion: Fusion,
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::InvalidArgument("beam size must be at least 1".into()));
    }
    let stepper = Stepper::new(cfg, params, src, visual, fusion)?;
    let mut live = vec![Hypothesis { tokens: Vec::new(), log_prob: 0.0, finished: false }];
    let mut done: Vec<Hypothesis> = Vec::new();
    let mut step = 0;
    while !live.is_empty() && done.len() < beam && step < max_len {
        let prefixes: Vec<Vec<u32>> = live.iter().map(|h| h.tokens.clone()).collect();
        let lps = stepper.next(&prefixes)?;
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(live.len() * lps[0].len());
        for (bi, lp) in lps.iter().enumerate() {
            for (t, &l) in lp.iter().enumerate() {
                cands.push((live[bi].log_prob + l, bi, t));
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut next = Vec::with_capacity(beam);
        for &(lp, bi, t) in cands.iter().take(beam - done.len().min(beam - 1)) {
            let mut tokens = live[bi].tokens.clone();
            tokens.push(t as u32);
            let finished = t as u32 == EOS;
            let h = Hypothesis { tokens, log_prob: lp, finished };
            if finished {
                done.push(h);
            } else {
                next.push(h);
            }
        }
        live = next;
        step += 1;
    }
    if done.is_empty() {
        done = live;
    }
    done.sort_by(|a, b| b.score().total_cmp(&a.score()).then(b.log_prob.total_cmp(&a.log_prob)));
    Ok(done)
}

/// The best hypothesis of [`beam_search`]; `beam == 1` is exactly [`greedy`].
pub fn translate(
    cfg: &TransformerConfig,
    params: &ParamSet,
    src: &[u32],
    visual: Option<&[f64]>,
    fusion: Fusion,
    beam: usize,
    max_len: usize,
) -> Result<Hypothesis> {
    if beam == 1 {
        return greedy(cfg, params, src, visual, fusion, max_len);
    }
    Ok(beam_search(cfg, params, src, visual, fusion, beam, max_len)?.remove(0))
}
