//! Corpus BLEU, the synthetic sense-disambiguation benchmark and the
//! baseline/system comparison.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::corpus::{Sentence, SentencePair};
use crate::features::ImageId;
use crate::fixture;
use crate::retrieval::QuerySet;
use crate::rng::{substream, RngExt};
use crate::{Error, Result};

/// Numerator used in place of a zero n-gram match count.
pub const SMOOTHING_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Corpus BLEU on a 0 to 100 scale.
    pub bleu: f64,
    /// Unsmoothed clipped precisions `p_1..p_max_n` (zero when no n-grams).
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

fn ngram_counts<T: Ord>(tokens: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Corpus-level BLEU with clipped counts and brevity penalty. A zero match
/// count is replaced by [`SMOOTHING_EPS`]; orders for which neither the
/// hypotheses nor the references contain any n-gram are left out of the mean.
pub fn bleu<T: Ord>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_n: usize) -> Result<BleuReport> {
    if hypotheses.is_empty() {
        return Err(Error::InvalidArgument("no hypotheses".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::InvalidArgument("max_n must be at least 1".into()));
    }
    if references.iter().all(Vec::is_empty) {
        return Err(Error::InvalidArgument("references are empty".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let mut ref_totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            ref_totals[n - 1] += rf.len().saturating_sub(n - 1);
            matches[n - 1] += hc.iter().map(|(g, &k)| k.min(rc.get(g).copied().unwrap_or(0))).sum::<usize>();
        }
    }
    let precisions: Vec<f64> =
        (0..max_n).map(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 }).collect();
    let mut log_sum = 0.0;
    let mut orders = 0usize;
    for i in 0..max_n {
        if totals[i] == 0 && ref_totals[i] == 0 {
            continue;
        }
        let num = if matches[i] == 0 { SMOOTHING_EPS } else { matches[i] as f64 };
        log_sum += libm::log(num / totals[i].max(1) as f64);
        orders += 1;
    }
    let bp = if c == 0 {
        0.0
    } else if c < r {
        libm::exp(1.0 - r as f64 / c as f64)
    } else {
        1.0
    };
    let score = if orders == 0 { 0.0 } else { 100.0 * bp * libm::exp(log_sum / orders as f64) };
    Ok(BleuReport { bleu: score.clamp(0.0, 100.0), precisions, brevity_penalty: bp, hyp_len: c, ref_len: r })
}

/// Word lists for the benchmark: `(source, first sense, second sense)`.
pub const AMBIGUOUS: [(&str, &str, &str); 8] = [
    ("bat", "fledermaus", "schlaeger"),
    ("bank", "ufer", "geldhaus"),
    ("plant", "pflanze", "fabrik"),
    ("mouse", "maus", "computermaus"),
    ("seal", "robbe", "siegel"),
    ("crane", "kranich", "baukran"),
    ("glasses", "brille", "glaeser"),
    ("nail", "nagel", "fingernagel"),
];
pub const SUBJECTS: [(&str, &str); 6] = [
    ("police", "polizei"),
    ("soldiers", "soldaten"),
    ("workers", "arbeiter"),
    ("children", "kinder"),
    ("farmers", "bauern"),
    ("students", "studenten"),
];
pub const VERBS: [(&str, &str); 4] = [("saw", "sahen"), ("found", "fanden"), ("painted", "malten"), ("photographed", "fotografierten")];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_sentences: usize,
    pub n_ambiguous_words: usize,
    pub senses_per_word: usize,
    /// Candidate images per sentence.
    pub k: usize,
    pub n_concepts: u32,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { n_sentences: 200, n_ambiguous_words: 4, senses_per_word: 2, k: 5, n_concepts: 16, seed: 13 }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_sentences == 0 || self.n_ambiguous_words == 0 {
            return Err(Error::InvalidArgument("synthetic counts must be at least 1".into()));
        }
        if self.senses_per_word != 2 {
            return Err(Error::InvalidArgument("senses_per_word is fixed at 2".into()));
        }
        if self.n_ambiguous_words > AMBIGUOUS.len() {
            return Err(Error::InvalidArgument(format!("at most {} ambiguous words", AMBIGUOUS.len())));
        }
        if self.k < 2 {
            return Err(Error::InvalidArgument("k must be at least 2".into()));
        }
        let senses = self.n_ambiguous_words * self.senses_per_word;
        if (self.n_concepts as usize) < senses {
            return Err(Error::InvalidArgument(format!("{} concepts cannot hold {senses} senses", self.n_concepts)));
        }
        if (self.n_concepts as usize) < self.k + 1 {
            return Err(Error::InvalidArgument(format!(
                "{} concepts leave too few unrelated concepts for k={}",
                self.n_concepts, self.k
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerKey {
    pub sentence_id: u64,
    pub word: String,
    /// 0 or 1.
    pub sense: u8,
    pub correct: String,
    pub wrong: String,
    /// Search term whose single result is the planted image.
    pub cue: String,
    /// Hex id of the planted image.
    pub planted_image: String,
    pub planted_concept: u32,
}

impl AnswerKey {
    pub fn planted_id(&self) -> Result<ImageId> {
        ImageId::from_hex(&self.planted_image)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Synth {
    pub spec: SynthSpec,
    pub pairs: Vec<SentencePair>,
    /// K terms per sentence; each retrieves one image.
    pub queries: Vec<QuerySet>,
    pub key: Vec<AnswerKey>,
    /// Concept of each `(word, sense)`.
    pub sense_concepts: BTreeMap<(String, u8), u32>,
}

/// A term of the form `{stem}{n}` whose fixture concept is `concept`.
fn nonce(seed: u64, stem: &str, concept: u32, n_concepts: u32, taken: &mut BTreeSet<String>) -> String {
    let mut attempt = 0u64;
    loop {
        let t = format!("{stem}{attempt}");
        if fixture::concept_of(seed, &t, n_concepts) == concept && taken.insert(t.clone()) {
            return t;
        }
        attempt += 1;
    }
}

/// Generates the benchmark. Each source sentence holds one ambiguous word and
/// a sentence-unique cue term; the cue's single fixture image carries the
/// concept of the correct sense. The other `k - 1` terms are absent from the
/// sentence and retrieve images of distinct concepts unrelated to the word.
/// Words and senses are balanced and independent of every other token, so
/// text alone predicts the sense at chance.
pub fn generate_synth(spec: &SynthSpec) -> Result<Synth> {
    spec.validate()?;
    let c = spec.n_concepts;
    let m = spec.n_ambiguous_words;
    let mut perm: Vec<u32> = (0..c).collect();
    substream(spec.seed, "synth/concepts").shuffle(&mut perm);
    let mut sense_concepts = BTreeMap::new();
    for (j, &(w, _, _)) in AMBIGUOUS[..m].iter().enumerate() {
        sense_concepts.insert((w.to_string(), 0u8), perm[2 * j]);
        sense_concepts.insert((w.to_string(), 1u8), perm[2 * j + 1]);
    }
    let mut combos: Vec<usize> = (0..spec.n_sentences).map(|i| i % (2 * m)).collect();
    let mut rng = substream(spec.seed, "synth/corpus");
    rng.shuffle(&mut combos);
    let mut taken = BTreeSet::new();
    let (mut pairs, mut queries, mut key) = (Vec::new(), Vec::new(), Vec::new());
    for (i, &combo) in combos.iter().enumerate() {
        let sid = i as u64;
        let (j, sense) = (combo / 2, (combo % 2) as u8);
        let (word, s0, s1) = AMBIGUOUS[j];
        let (correct, wrong) = if sense == 0 { (s0, s1) } else { (s1, s0) };
        let (subj, subj_t) = SUBJECTS[rng.below(SUBJECTS.len())];
        let (verb, verb_t) = VERBS[rng.below(VERBS.len())];
        let concept = sense_concepts[&(word.to_string(), sense)];
        let cue = nonce(spec.seed, &format!("cue{sid}n"), concept, c, &mut taken);
        let word_concepts = [sense_concepts[&(word.to_string(), 0)], sense_concepts[&(word.to_string(), 1)]];
        let mut others: Vec<u32> = (0..c).filter(|x| !word_concepts.contains(x)).collect();
        rng.shuffle(&mut others);
        let mut terms = vec![cue.clone()];
        for (d, &oc) in others.iter().take(spec.k - 1).enumerate() {
            terms.push(nonce(spec.seed, &format!("decoy{sid}d{d}n"), oc, c, &mut taken));
        }
        let src = Sentence::from_text(sid, &format!("the {subj} {verb} the {word} near {cue} ."))?;
        let tgt = Sentence::from_text(sid, &format!("die {subj_t} {verb_t} {correct} ."))?;
        pairs.push(SentencePair::new(src, tgt)?);
        queries.push(QuerySet { sentence_id: sid, keywords: terms });
        let planted = ImageId::of(&fixture::payload(spec.seed, &cue, 0, c));
        key.push(AnswerKey {
            sentence_id: sid,
            word: word.to_string(),
            sense,
            correct: correct.to_string(),
            wrong: wrong.to_string(),
            cue,
            planted_image: planted.to_hex(),
            planted_concept: concept,
        });
    }
    Ok(Synth { spec: spec.clone(), pairs, queries, key, sense_concepts })
}

/// Sentence-level sense decision: right when the hypothesis holds the correct
/// translation and not the other one.
pub fn sense_correct<S: AsRef<str>>(hypothesis: &[S], key: &AnswerKey) -> bool {
    let has = |t: &str| hypothesis.iter().any(|h| h.as_ref() == t);
    has(&key.correct) && !has(&key.wrong)
}

pub fn sense_accuracy<S: AsRef<str>>(hypotheses: &[Vec<S>], key: &[AnswerKey]) -> Result<f64> {
    if hypotheses.len() != key.len() || key.is_empty() {
        return Err(Error::InvalidArgument(format!("{} hypotheses for {} answer-key rows", hypotheses.len(), key.len())));
    }
    Ok(hypotheses.iter().zip(key).filter(|(h, k)| sense_correct(h, k)).count() as f64 / key.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Win,
    Loss,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceResult {
    pub index: usize,
    pub baseline_bleu: f64,
    pub system_bleu: f64,
    /// From the system's point of view.
    pub outcome: Outcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SenseAccuracy {
    pub baseline: f64,
    pub system: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: BleuReport,
    pub system: BleuReport,
    /// `system.bleu - baseline.bleu`.
    pub delta: f64,
    pub sense_accuracy: Option<SenseAccuracy>,
    pub sentences: Vec<SentenceResult>,
}

pub fn compare(
    baseline: &[Vec<String>],
    system: &[Vec<String>],
    references: &[Vec<String>],
    key: Option<&[AnswerKey]>,
) -> Result<Comparison> {
    if baseline.len() != references.len() || system.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "misaligned lists: baseline {}, system {}, references {}",
            baseline.len(),
            system.len(),
            references.len()
        )));
    }
    let b = bleu(baseline, references, 4)?;
    let s = bleu(system, references, 4)?;
    let mut sentences = Vec::with_capacity(references.len());
    for i in 0..references.len() {
        let r = core::slice::from_ref(&references[i]);
        let bs = bleu(core::slice::from_ref(&baseline[i]), r, 4)?.bleu;
        let ss = bleu(core::slice::from_ref(&system[i]), r, 4)?.bleu;
        let outcome = if ss > bs {
            Outcome::Win
        } else if ss < bs {
            Outcome::Loss
        } else {
            Outcome::Tie
        };
        sentences.push(SentenceResult { index: i, baseline_bleu: bs, system_bleu: ss, outcome });
    }
    let sense_accuracy = match key {
        Some(k) => Some(SenseAccuracy { baseline: sense_accuracy(baseline, k)?, system: sense_accuracy(system, k)? }),
        None => None,
    };
    Ok(Comparison { delta: s.bleu - b.bleu, baseline: b, system: s, sense_accuracy, sentences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tokenize;

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn bleu_short_hypothesis() {
        let h = vec![toks("the cat sat")];
        let r = vec![toks("the cat sat down")];
        let b3 = bleu(&h, &r, 3).unwrap();
        let bp = libm::exp(1.0 - 4.0 / 3.0);
        assert!((b3.brevity_penalty - bp).abs() < 1e-12);
        assert!((b3.bleu - 100.0 * bp).abs() < 1e-9);
        assert!((b3.bleu - 71.6531).abs() < 1e-4);
        let b4 = bleu(&h, &r, 4).unwrap();
        let want = 100.0 * bp * libm::pow(SMOOTHING_EPS, 0.25);
        assert!((b4.bleu - want).abs() < 1e-9 && b4.bleu < 1.0);
    }

    #[test]
    fn synth_rejects_too_few_concepts() {
        let spec = SynthSpec { n_concepts: 7, ..SynthSpec::default() };
        assert!(generate_synth(&spec).is_err());
        assert!(generate_synth(&SynthSpec { k: 1, ..SynthSpec::default() }).is_err());
    }
}
