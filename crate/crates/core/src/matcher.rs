//! The word/image self-supervised task: a pair is positive exactly when its
//! search keyword occurs in the sentence. A bilinear head scores the pooled
//! sentence encoding against an image feature.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{tokenize, Sentence};
use crate::features::{FeatureStore, ImageId};
use crate::nnet::transformer::{init_embedding, init_encoder};
use crate::nnet::{Adam, Graph, ParamSet, SeqBatch, Tensor, Transformer, TransformerConfig, Var};
use crate::retrieval::RetrievalManifest;
use crate::rng::{substream, RngExt};
use crate::{Error, Result};

pub const PREFIX: &str = "matcher";
const HEAD: &str = "matcher/head";

/// 1 when `keyword` occurs among the sentence tokens, compared after the same
/// normalization as tokenization.
pub fn label(keyword: &str, sentence: &Sentence) -> u8 {
    let toks = tokenize(keyword);
    match toks.as_slice() {
        [t] => u8::from(sentence.contains(t)),
        _ => 0,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchExample {
    pub sentence_id: u64,
    pub keyword: String,
    pub image_id: ImageId,
    pub label: u8,
}

/// Labels every manifest entry by the rule and, after each positive, adds
/// `negative_ratio` images drawn from the candidates of keywords absent from
/// that sentence.
pub fn build_pairs(
    manifest: &RetrievalManifest,
    corpus: &BTreeMap<u64, Sentence>,
    negative_ratio: usize,
    seed: u64,
) -> Result<Vec<MatchExample>> {
    for sid in manifest.sentence_ids() {
        if !corpus.contains_key(&sid) {
            return Err(Error::UnknownSentence(sid));
        }
    }
    let pool: Vec<(&str, ImageId)> = manifest.candidates().map(|c| (c.keyword.as_str(), c.image_id)).collect();
    let mut rng = substream(seed, "pairs");
    let mut out = Vec::new();
    for (sid, keyword, cands) in manifest.lists() {
        let sentence = &corpus[&sid];
        for c in cands {
            let y = label(keyword, sentence);
            out.push(MatchExample { sentence_id: sid, keyword: keyword.into(), image_id: c.image_id, label: y });
            if y == 0 || negative_ratio == 0 {
                continue;
            }
            if !pool.iter().any(|(kw, _)| label(kw, sentence) == 0) {
                return Err(Error::NoCandidates);
            }
            for _ in 0..negative_ratio {
                let (kw, img) = loop {
                    let (kw, img) = pool[rng.below(pool.len())];
                    if label(kw, sentence) == 0 {
                        break (kw, img);
                    }
                };
                out.push(MatchExample { sentence_id: sid, keyword: kw.into(), image_id: img, label: 0 });
            }
        }
    }
    Ok(out)
}

/// The bilinear scoring head.
#[derive(Debug, Clone, PartialEq)]
pub struct MatcherHead {
    /// `[d_model x d_match]`
    pub text: Tensor,
    /// `[d_img x d_match]`
    pub image: Tensor,
    pub bias: f64,
}

impl MatcherHead {
    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            text: p.get(&format!("{HEAD}/pt"))?.clone(),
            image: p.get(&format!("{HEAD}/pi"))?.clone(),
            bias: p.get(&format!("{HEAD}/bias"))?.item(),
        })
    }

    /// `(s P_t) . (f P_i) / sqrt(d_match) + bias`.
    pub fn logit(&self, s: &[f64], f: &[f64]) -> Result<f64> {
        if s.len() != self.text.rows() {
            return Err(Error::Dimension { expected: self.text.rows(), got: s.len() });
        }
        if f.len() != self.image.rows() {
            return Err(Error::Dimension { expected: self.image.rows(), got: f.len() });
        }
        let dm = self.text.cols();
        let project = |x: &[f64], w: &Tensor| -> Vec<f64> {
            (0..dm).map(|j| x.iter().enumerate().map(|(i, v)| v * w.data()[i * dm + j]).sum()).collect()
        };
        let (a, b) = (project(s, &self.text), project(f, &self.image));
        let z = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / libm::sqrt(dm as f64) + self.bias;
        if !z.is_finite() {
            return Err(Error::NonFinite("match logit".into()));
        }
        Ok(z)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherConfig {
    pub model: TransformerConfig,
    pub d_match: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub freeze_encoder: bool,
    pub seed: u64,
}

impl MatcherConfig {
    pub fn new(model: TransformerConfig) -> Self {
        Self { model, d_match: 64, epochs: 20, lr: 1e-3, batch_size: 32, freeze_encoder: false, seed: 13 }
    }
}

/// Fresh matcher parameters: a text encoder plus the scoring head.
pub fn init_matcher(cfg: &MatcherConfig) -> ParamSet {
    let mut rng = substream(cfg.seed, "matcher/init");
    let mut p = ParamSet::new();
    init_embedding(&mut p, &cfg.model, PREFIX, &mut rng);
    init_encoder(&mut p, &cfg.model, PREFIX, &mut rng);
    p.insert(format!("{HEAD}/pt"), crate::nnet::params::glorot(&mut rng, cfg.model.d_model, cfg.d_match));
    p.insert(format!("{HEAD}/pi"), crate::nnet::params::glorot(&mut rng, cfg.model.d_img, cfg.d_match));
    p.insert(format!("{HEAD}/bias"), Tensor::zeros(&[1]));
    p
}

/// Encoded sentences and image features the pairs refer to.
#[derive(Debug, Clone, Copy)]
pub struct PairData<'a> {
    pub sentences: &'a BTreeMap<u64, Vec<u32>>,
    pub features: &'a FeatureStore,
}

impl<'a> PairData<'a> {
    fn feature(&self, id: &ImageId) -> Result<Vec<f64>> {
        let f = self.features.get(id).ok_or_else(|| Error::InvalidArgument(format!("no feature for image {id}")))?;
        Ok(f.iter().map(|&x| f64::from(x)).collect())
    }

    fn sentence(&self, id: u64) -> Result<&'a Vec<u32>> {
        self.sentences.get(&id).ok_or(Error::UnknownSentence(id))
    }
}

/// Match logits `[n x 1]` for `(sentence, feature)` pairs. Each distinct
/// sentence is encoded once.
pub fn logits_graph(
    g: &mut Graph,
    cfg: &MatcherConfig,
    b: &crate::nnet::Bound,
    sentences: &[&[u32]],
    pair_sentence: &[usize],
    features: Tensor,
    rng: Option<&mut crate::rng::Rng>,
) -> Result<Var> {
    let seqs: Vec<Vec<u32>> = sentences.iter().map(|s| s.to_vec()).collect();
    let x = SeqBatch::from_seqs(&seqs)?;
    let t = Transformer::new(&cfg.model, PREFIX);
    let enc = t.encode(g, b, &x, rng)?;
    let pooled = t.pool(g, enc, &x)?;
    let s = g.gather_rows(pooled, pair_sentence)?;
    let ts = g.matmul(s, b.var(&format!("{HEAD}/pt"))?)?;
    let f = g.constant(features);
    let fi = g.matmul(f, b.var(&format!("{HEAD}/pi"))?)?;
    let prod = g.mul(ts, fi)?;
    let z = g.row_sum(prod)?;
    let z = g.scale(z, 1.0 / libm::sqrt(cfg.d_match as f64))?;
    g.add_bias(z, b.var(&format!("{HEAD}/bias"))?)
}

struct Batch<'s> {
    sentences: Vec<&'s [u32]>,
    pair_sentence: Vec<usize>,
    features: Tensor,
    labels: Vec<f64>,
}

fn make_batch<'s>(pairs: &[&MatchExample], data: &PairData<'s>, d_img: usize) -> Result<Batch<'s>> {
    let mut index: BTreeMap<u64, usize> = BTreeMap::new();
    let mut sentences = Vec::new();
    let mut pair_sentence = Vec::with_capacity(pairs.len());
    let mut feats = Vec::with_capacity(pairs.len() * d_img);
    let mut labels = Vec::with_capacity(pairs.len());
    for p in pairs {
        let next = index.len();
        let i = *index.entry(p.sentence_id).or_insert(next);
        if i == sentences.len() {
            sentences.push(data.sentence(p.sentence_id)?.as_slice());
        }
        pair_sentence.push(i);
        let f = data.feature(&p.image_id)?;
        if f.len() != d_img {
            return Err(Error::Dimension { expected: d_img, got: f.len() });
        }
        feats.extend(f);
        labels.push(f64::from(p.label));
    }
    Ok(Batch { sentences, pair_sentence, features: Tensor::matrix(pairs.len(), d_img, feats)?, labels })
}

/// Mean binary cross-entropy over every pair of the batch.
pub fn matcher_loss(cfg: &MatcherConfig, params: &ParamSet, pairs: &[MatchExample], data: &PairData) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let refs: Vec<&MatchExample> = pairs.iter().collect();
    let batch = make_batch(&refs, data, cfg.model.d_img)?;
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let z = logits_graph(&mut g, cfg, &b, &batch.sentences, &batch.pair_sentence, batch.features, None)?;
    let l = g.bce_with_logits(z, &batch.labels)?;
    Ok(g.value(l).item())
}

/// Logits for every pair, in input order.
pub fn score_pairs(cfg: &MatcherConfig, params: &ParamSet, pairs: &[MatchExample], data: &PairData) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(cfg.batch_size.max(1) * 4) {
        let refs: Vec<&MatchExample> = chunk.iter().collect();
        let batch = make_batch(&refs, data, cfg.model.d_img)?;
        let mut g = Graph::new(false);
        let b = params.bind(&mut g, |_| false);
        let z = logits_graph(&mut g, cfg, &b, &batch.sentences, &batch.pair_sentence, batch.features, None)?;
        out.extend_from_slice(g.value(z).data());
    }
    Ok(out)
}

/// Logits of one sentence against several image features.
pub fn score_sentence(cfg: &MatcherConfig, params: &ParamSet, sentence: &[u32], features: &[Vec<f64>]) -> Result<Vec<f64>> {
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let d = cfg.model.d_img;
    let mut flat = Vec::with_capacity(features.len() * d);
    for f in features {
        if f.len() != d {
            return Err(Error::Dimension { expected: d, got: f.len() });
        }
        flat.extend_from_slice(f);
    }
    let mut g = Graph::new(false);
    let b = params.bind(&mut g, |_| false);
    let idx = vec![0; features.len()];
    let z = logits_graph(&mut g, cfg, &b, &[sentence], &idx, Tensor::matrix(features.len(), d, flat)?, None)?;
    Ok(g.value(z).data().to_vec())
}

/// Area under the ROC curve by the rank-sum statistic; tied scores count one
/// half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleLabel);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if labels[k] == 1 {
                rank_sum += avg;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub heldout_auc: Option<f64>,
}

/// Adam training on `train`; AUC on `heldout` is logged after each epoch.
pub fn train_matcher(
    cfg: &MatcherConfig,
    mut params: ParamSet,
    train: &[MatchExample],
    heldout: &[MatchExample],
    data: &PairData,
) -> Result<(ParamSet, Vec<EpochLog>)> {
    cfg.model.validate()?;
    let labels: BTreeSet<u8> = train.iter().map(|p| p.label).collect();
    if labels.len() < 2 {
        return Err(Error::SingleLabel);
    }
    let mut opt = Adam::new(cfg.lr);
    let mut drop_rng = substream(cfg.seed, "matcher/dropout");
    let mut log = Vec::with_capacity(cfg.epochs);
    let freeze = cfg.freeze_encoder;
    let trainable = move |name: &str| !freeze || name.starts_with(HEAD);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        substream(cfg.seed, &format!("matcher/shuffle/{epoch}")).shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size.max(1)) {
            let refs: Vec<&MatchExample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = make_batch(&refs, data, cfg.model.d_img)?;
            let mut g = Graph::new(true);
            let b = params.bind(&mut g, trainable);
            let step = (|| {
                let z = logits_graph(&mut g, cfg, &b, &batch.sentences, &batch.pair_sentence, batch.features, Some(&mut drop_rng))?;
                let l = g.bce_with_logits(z, &batch.labels)?;
                let grads = g.backward(l)?.named(&g, b.vars());
                opt.step(&mut params, &grads)?;
                Ok::<f64, Error>(g.value(l).item())
            })();
            let loss = step.map_err(|e| match e {
                Error::NonFinite(_) => Error::Diverged { epoch },
                e => e,
            })?;
            total += loss * chunk.len() as f64;
        }
        let heldout_auc = if heldout.iter().any(|p| p.label == 1) && heldout.iter().any(|p| p.label == 0) {
            let scores = score_pairs(cfg, &params, heldout, data)?;
            let labels: Vec<u8> = heldout.iter().map(|p| p.label).collect();
            Some(auc(&scores, &labels)?)
        } else {
            None
        };
        log.push(EpochLog { epoch, loss: total / train.len().max(1) as f64, heldout_auc });
    }
    Ok((params, log))
}
