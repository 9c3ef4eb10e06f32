//! Relevance weighting of a sentence's candidate images and the pooled visual
//! context handed to the translator.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::features::{FeatureStore, ImageId};
use crate::matcher::{score_sentence, MatcherConfig};
use crate::nnet::ParamSet;
use crate::retrieval::RetrievalManifest;
use crate::{Error, Result};

/// Most candidates kept per sentence.
pub const MAX_CANDIDATES: usize = 16;

/// `softmax(logits / temperature)`.
pub fn relevance_weights(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::NoCandidates);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature {temperature} must be positive")));
    }
    if logits.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("relevance logits".into()));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&z| libm::exp((z - max) / temperature)).collect();
    let s: f64 = e.iter().sum();
    Ok(e.into_iter().map(|x| x / s).collect())
}

/// All mass on the first maximal logit.
pub fn hard_weights(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::NoCandidates);
    }
    let mut best = 0;
    for (i, &z) in logits.iter().enumerate() {
        if z > logits[best] {
            best = i;
        }
    }
    let mut w = vec![0.0; logits.len()];
    w[best] = 1.0;
    Ok(w)
}

/// Convex combination `sum_i w_i f_i`.
pub fn pool(features: &[Vec<f64>], weights: &[f64]) -> Result<Vec<f64>> {
    if features.len() != weights.len() {
        return Err(Error::Shape(format!("{} features for {} weights", features.len(), weights.len())));
    }
    let Some(first) = features.first() else {
        return Err(Error::NoCandidates);
    };
    let d = first.len();
    let mut out = vec![0.0; d];
    for (f, &w) in features.iter().zip(weights) {
        if f.len() != d {
            return Err(Error::Dimension { expected: d, got: f.len() });
        }
        for (o, x) in out.iter_mut().zip(f) {
            *o += w * x;
        }
    }
    Ok(out)
}

/// Shannon entropy in nats; zero weights contribute nothing.
pub fn entropy(weights: &[f64]) -> f64 {
    -weights.iter().filter(|&&w| w > 0.0).map(|&w| w * libm::log(w)).sum::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisualContext {
    pub sentence_id: u64,
    pub candidates: Vec<ImageId>,
    pub weights: Vec<f64>,
    pub pooled: Vec<f64>,
    pub entropy: f64,
    /// Set when the sentence had no candidates; `pooled` is then zero.
    pub no_visual: bool,
}

impl VisualContext {
    pub fn empty(sentence_id: u64, d_img: usize) -> Self {
        Self { sentence_id, candidates: Vec::new(), weights: Vec::new(), pooled: vec![0.0; d_img], entropy: 0.0, no_visual: true }
    }

    /// Index of the largest weight, first on ties.
    pub fn argmax(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, &w) in self.weights.iter().enumerate() {
            if best.is_none_or(|b| w > self.weights[b]) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Weighting {
    /// Softmax of matcher logits at the given temperature.
    Learned { temperature: f64 },
    /// One-hot on the top matcher logit.
    Hard,
    /// `1/K` over the candidates, ignoring the matcher.
    Uniform,
}

fn feature(store: &FeatureStore, id: &ImageId) -> Result<Vec<f64>> {
    let f = store.get(id).ok_or_else(|| Error::InvalidArgument(format!("no feature for image {id}")))?;
    Ok(f.iter().map(|&x| f64::from(x)).collect())
}

/// One context per sentence of `sentences`, in sentence-id order. Candidates
/// are the distinct images retrieved for any of the sentence's keywords; past
/// [`MAX_CANDIDATES`] only the highest-scoring are kept, in retrieval order.
pub fn build_contexts(
    manifest: &RetrievalManifest,
    sentences: &BTreeMap<u64, Vec<u32>>,
    store: &FeatureStore,
    matcher: &MatcherConfig,
    params: &ParamSet,
    weighting: Weighting,
) -> Result<Vec<VisualContext>> {
    let mut out = Vec::with_capacity(sentences.len());
    for (&sid, ids) in sentences {
        let mut cands = manifest.sentence_images(sid);
        if cands.is_empty() {
            out.push(VisualContext::empty(sid, store.dim()));
            continue;
        }
        let mut feats: Vec<Vec<f64>> = cands.iter().map(|c| feature(store, c)).collect::<Result<_>>()?;
        let needs_logits = !matches!(weighting, Weighting::Uniform) || cands.len() > MAX_CANDIDATES;
        let mut logits = if needs_logits { score_sentence(matcher, params, ids, &feats)? } else { Vec::new() };
        if cands.len() > MAX_CANDIDATES {
            let mut order: Vec<usize> = (0..cands.len()).collect();
            order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
            let mut keep = order[..MAX_CANDIDATES].to_vec();
            keep.sort_unstable();
            cands = keep.iter().map(|&i| cands[i]).collect();
            feats = keep.iter().map(|&i| feats[i].clone()).collect();
            logits = keep.iter().map(|&i| logits[i]).collect();
        }
        let weights = match weighting {
            Weighting::Learned { temperature } => relevance_weights(&logits, temperature)?,
            Weighting::Hard => hard_weights(&logits)?,
            Weighting::Uniform => vec![1.0 / cands.len() as f64; cands.len()],
        };
        let pooled = pool(&feats, &weights)?;
        out.push(VisualContext { sentence_id: sid, entropy: entropy(&weights), candidates: cands, weights, pooled, no_visual: false });
    }
    Ok(out)
}
