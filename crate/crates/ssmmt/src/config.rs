//! Run configuration: one JSON file merged over defaults, then `--key value`
//! overrides addressed by dotted path (`--matcher.epochs 5`).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use ssmmt_core::nnet::TransformerConfig;

use crate::error::{Error, Result};
use crate::io::read_string;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of every random substream.
    pub seed: u64,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub synth: SynthConfig,
    pub fixture: FixtureConfig,
    pub retrieval: RetrievalConfig,
    pub model: ModelConfig,
    pub matcher: MatcherSettings,
    pub filter: FilterConfig,
    pub translator: TranslatorSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Output directory for every stage.
    pub work: PathBuf,
    pub src: Option<PathBuf>,
    pub tgt: Option<PathBuf>,
    /// Defaults to the bundled English list.
    pub stopwords: Option<PathBuf>,
    /// Search terms per sentence; defaults to the keywords written by `prepare`.
    pub queries: Option<PathBuf>,
    /// Synthetic answer key, enabling sense accuracy in reports.
    pub answer_key: Option<PathBuf>,
    pub cache: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub min_freq: usize,
    pub max_k: usize,
    /// Trailing fraction of the corpus held out for evaluation.
    pub test_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_sentences: usize,
    pub n_ambiguous_words: usize,
    /// Candidate images per sentence.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub n_concepts: u32,
    pub alpha: f64,
    pub noise: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClientKind {
    Fixture,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub client: ClientKind,
    pub endpoint: Option<String>,
    /// Results per query.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers_enc: usize,
    pub n_layers_dec: usize,
    pub d_ff: usize,
    pub dropout_rate: f64,
    pub max_len: usize,
    #[serde(rename = "D_img")]
    pub d_img: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatcherSettings {
    pub d_match: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub negative_ratio: usize,
    pub freeze_encoder: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingKind {
    Learned,
    Hard,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    pub temperature: f64,
    pub weighting: WeightingKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranslatorSettings {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub beam: usize,
    pub max_len: usize,
    /// Overrides the locally pretrained checkpoint as fine-tuning start point.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 13,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            synth: SynthConfig::default(),
            fixture: FixtureConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: ModelConfig::default(),
            matcher: MatcherSettings::default(),
            filter: FilterConfig::default(),
            translator: TranslatorSettings::default(),
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self { work: PathBuf::from("run"), src: None, tgt: None, stopwords: None, queries: None, answer_key: None, cache: None }
    }
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self { min_freq: 2, max_k: 3, test_fraction: 0.2 }
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { n_sentences: 200, n_ambiguous_words: 4, k: 5 }
    }
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self { n_concepts: 16, alpha: 4.0, noise: 0.1 }
    }
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self { client: ClientKind::Fixture, endpoint: None, k: 5 }
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        let t = TransformerConfig::default();
        Self {
            d_model: t.d_model,
            n_heads: t.n_heads,
            n_layers_enc: t.n_layers_enc,
            n_layers_dec: t.n_layers_dec,
            d_ff: t.d_ff,
            dropout_rate: t.dropout_rate,
            max_len: t.max_len,
            d_img: t.d_img,
        }
    }
}

impl Default for MatcherSettings {
    fn default() -> Self {
        Self { d_match: 64, epochs: 20, lr: 1e-3, batch_size: 32, negative_ratio: 1, freeze_encoder: false }
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self { temperature: 1.0, weighting: WeightingKind::Learned }
    }
}

impl Default for TranslatorSettings {
    fn default() -> Self {
        Self {
            pretrain_epochs: 30,
            finetune_epochs: 80,
            lr: 1e-3,
            batch_size: 16,
            mask_prob: 0.15,
            beam: 4,
            max_len: 64,
            init_checkpoint: None,
        }
    }
}

impl ModelConfig {
    /// The transformer shape for a joint vocabulary of `vocab` tokens.
    pub fn transformer(&self, vocab: usize) -> TransformerConfig {
        TransformerConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_layers_enc: self.n_layers_enc,
            n_layers_dec: self.n_layers_dec,
            d_ff: self.d_ff,
            dropout_rate: self.dropout_rate,
            max_len: self.max_len,
            src_vocab: vocab,
            tgt_vocab: vocab,
            d_img: self.d_img,
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, p) => *b = p,
    }
}

/// Parses an override value: JSON when it parses as JSON, else a plain string.
fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::usage(format!("config key {key:?} does not name a field")))?;
        let slot = obj.get_mut(*part).ok_or_else(|| Error::usage(format!("unknown config key {key:?}")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::usage(format!("config key {key:?} names a section, not a field")));
            }
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    unreachable!("split yields at least one part")
}

impl RunConfig {
    /// Defaults, then the optional JSON file, then overrides in order.
    pub fn load(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(Self::default()).expect("defaults serialize");
        if let Some(path) = file {
            if !path.exists() {
                return Err(Error::usage(format!("config file {} does not exist", path.display())));
            }
            let text = read_string(path).map_err(|e| Error::usage(e.message))?;
            let patch: Value =
                serde_json::from_str(&text).map_err(|e| Error::usage(format!("{}: invalid JSON: {e}", path.display())))?;
            if !patch.is_object() {
                return Err(Error::usage(format!("{}: config must be a JSON object", path.display())));
            }
            merge(&mut v, patch);
        }
        // shape check of the merged file before applying overrides
        let merged: Self = serde_json::from_value(v.clone()).map_err(|e| Error::usage(format!("config: {e}")))?;
        let mut v = serde_json::to_value(merged).expect("config serializes");
        for (k, raw) in overrides {
            set_path(&mut v, k, parse_value(raw))?;
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| Error::usage(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::usage(m));
        let positive = [
            ("corpus.min_freq", self.corpus.min_freq),
            ("corpus.max_k", self.corpus.max_k),
            ("synth.n_sentences", self.synth.n_sentences),
            ("synth.n_ambiguous_words", self.synth.n_ambiguous_words),
            ("retrieval.k", self.retrieval.k),
            ("model.d_model", self.model.d_model),
            ("model.n_heads", self.model.n_heads),
            ("model.n_layers_enc", self.model.n_layers_enc),
            ("model.n_layers_dec", self.model.n_layers_dec),
            ("model.d_ff", self.model.d_ff),
            ("model.max_len", self.model.max_len),
            ("model.D_img", self.model.d_img),
            ("matcher.d_match", self.matcher.d_match),
            ("matcher.epochs", self.matcher.epochs),
            ("matcher.batch_size", self.matcher.batch_size),
            ("matcher.negative_ratio", self.matcher.negative_ratio),
            ("translator.pretrain_epochs", self.translator.pretrain_epochs),
            ("translator.finetune_epochs", self.translator.finetune_epochs),
            ("translator.batch_size", self.translator.batch_size),
            ("translator.beam", self.translator.beam),
            ("translator.max_len", self.translator.max_len),
        ];
        for (name, v) in positive {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.synth.k < 2 {
            return bad("synth.k must be at least 2".into());
        }
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return bad(format!("corpus.test_fraction {} outside (0, 1)", self.corpus.test_fraction));
        }
        if self.model.d_model % self.model.n_heads != 0 {
            return bad(format!("model.d_model {} not divisible by model.n_heads {}", self.model.d_model, self.model.n_heads));
        }
        if !(0.0..1.0).contains(&self.model.dropout_rate) {
            return bad(format!("model.dropout_rate {} outside [0, 1)", self.model.dropout_rate));
        }
        for (name, lr) in [("matcher.lr", self.matcher.lr), ("translator.lr", self.translator.lr)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.translator.mask_prob > 0.0 && self.translator.mask_prob < 1.0) {
            return bad(format!("translator.mask_prob {} outside (0, 1)", self.translator.mask_prob));
        }
        if !(self.filter.temperature > 0.0 && self.filter.temperature.is_finite()) {
            return bad("filter.temperature must be positive".into());
        }
        if self.fixture.n_concepts == 0 || self.fixture.n_concepts as usize > self.model.d_img {
            return bad(format!("fixture.n_concepts must be in 1..={}", self.model.d_img));
        }
        if !(self.fixture.alpha > 0.0) || !(self.fixture.noise >= 0.0) {
            return bad("fixture.alpha must be positive and fixture.noise non-negative".into());
        }
        if self.retrieval.client == ClientKind::Http && self.retrieval.endpoint.as_deref().is_none_or(str::is_empty) {
            return bad("retrieval.endpoint is required for the http client".into());
        }
        Ok(())
    }

    fn work(&self, name: &str) -> PathBuf {
        self.paths.work.join(name)
    }

    pub fn src_path(&self) -> PathBuf {
        self.paths.src.clone().unwrap_or_else(|| self.work("corpus/src.txt"))
    }

    pub fn tgt_path(&self) -> PathBuf {
        self.paths.tgt.clone().unwrap_or_else(|| self.work("corpus/tgt.txt"))
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.paths.cache.clone().unwrap_or_else(|| self.work("cache"))
    }

    pub fn keywords_path(&self) -> PathBuf {
        self.work("keywords.jsonl")
    }

    pub fn queries_path(&self) -> PathBuf {
        self.paths.queries.clone().unwrap_or_else(|| self.keywords_path())
    }

    pub fn vocab_path(&self) -> PathBuf {
        self.work("vocab.txt")
    }

    pub fn features_path(&self) -> PathBuf {
        self.work("features.bin")
    }

    pub fn pairs_path(&self, split: &str) -> PathBuf {
        self.work(&format!("pairs.{split}.jsonl"))
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.work(&format!("checkpoints/{name}.ckpt"))
    }

    pub fn contexts_path(&self, weighting: WeightingKind) -> PathBuf {
        let w = serde_json::to_value(weighting).expect("enum serializes");
        self.work(&format!("contexts.{}.bin", w.as_str().expect("string")))
    }

    pub fn translations_dir(&self) -> PathBuf {
        self.work("translations")
    }

    pub fn report_path(&self) -> PathBuf {
        self.work("report.json")
    }

    pub fn log_path(&self, name: &str) -> PathBuf {
        self.work(&format!("logs/{name}.jsonl"))
    }

    pub fn echo_path(&self) -> PathBuf {
        self.work("config.json")
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }
}
