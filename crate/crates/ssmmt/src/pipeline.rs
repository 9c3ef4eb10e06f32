//! Pipeline stages. Every stage reads its inputs from and writes its outputs
//! to the files named by the [`RunConfig`], so running the stages one by one
//! and running `e2e` give identical artifacts.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use ssmmt_core::corpus::{build_vocab, extract_keywords, IdfTable, Sentence, SentencePair, Vocabulary};
use ssmmt_core::eval::{compare, generate_synth, AnswerKey, Comparison, SynthSpec};
use ssmmt_core::features::{extract, FeatureExtractor, FeatureStore, StubExtractor};
use ssmmt_core::filter::{build_contexts as core_contexts, VisualContext, Weighting};
use ssmmt_core::matcher::{build_pairs, init_matcher, train_matcher, EpochLog, MatcherConfig, PairData};
use ssmmt_core::nnet::{ParamSet, TransformerConfig};
use ssmmt_core::retrieval::{FixtureClient, QuerySet, RetrievalManifest, SearchClient};
use ssmmt_core::translator::{self, Example, Fusion, Objective, TrainConfig};

use crate::cache::{build_manifest, Cache};
use crate::config::{ClientKind, RunConfig, WeightingKind};
use crate::error::{Error, Result};
use crate::formats::checkpoint::Checkpoint;
use crate::formats::context::{self, ContextHeader};
use crate::formats::text::{join_tokens, read_parallel, read_stopwords, read_token_lines, read_vocab, write_lines, write_vocab};
use crate::formats::{features, jsonl};
use crate::http::HttpClient;
use crate::io::{file_sha256, write_atomic};

pub const MATCHER: &str = "matcher";
pub const TRANSLATOR: &str = "translator";

/// Fails with a usage error naming the first missing input.
pub fn require(paths: &[&Path]) -> Result<()> {
    for p in paths {
        if !p.exists() {
            return Err(Error::usage(format!("missing input {}", p.display())));
        }
    }
    Ok(())
}

/// Writes the effective configuration into the work directory.
pub fn echo_config(cfg: &RunConfig) -> Result<()> {
    write_atomic(&cfg.echo_path(), cfg.to_json().as_bytes())
}

/// Train and test sentence ids: the trailing `test_fraction` of the corpus is test.
pub fn split(n: usize, test_fraction: f64) -> Result<(BTreeSet<u64>, BTreeSet<u64>)> {
    if n < 2 {
        return Err(Error::data("at least two sentences are needed for a train/test split"));
    }
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let n_train = n - n_test;
    Ok(((0..n_train as u64).collect(), (n_train as u64..n as u64).collect()))
}

/// Corpus, vocabulary and split, as every training stage needs them.
pub struct Data {
    pub pairs: Vec<SentencePair>,
    pub vocab: Vocabulary,
    pub src: BTreeMap<u64, Vec<u32>>,
    pub tgt: BTreeMap<u64, Vec<u32>>,
    pub train: BTreeSet<u64>,
    pub test: BTreeSet<u64>,
}

impl Data {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let (s, t, v) = (cfg.src_path(), cfg.tgt_path(), cfg.vocab_path());
        require(&[&s, &t, &v])?;
        let pairs = read_parallel(&s, &t)?;
        let vocab = read_vocab(&v)?;
        let src = pairs.iter().map(|p| (p.id(), vocab.encode(p.src.tokens()))).collect();
        let tgt = pairs.iter().map(|p| (p.id(), vocab.encode(p.tgt.tokens()))).collect();
        let (train, test) = split(pairs.len(), cfg.corpus.test_fraction)?;
        Ok(Self { pairs, vocab, src, tgt, train, test })
    }

    pub fn model(&self, cfg: &RunConfig) -> TransformerConfig {
        cfg.model.transformer(self.vocab.len())
    }

    pub fn src_sentences(&self) -> BTreeMap<u64, Sentence> {
        self.pairs.iter().map(|p| (p.id(), p.src.clone())).collect()
    }

    fn subset(&self, ids: &BTreeSet<u64>) -> BTreeMap<u64, Vec<u32>> {
        self.src.iter().filter(|(k, _)| ids.contains(k)).map(|(k, v)| (*k, v.clone())).collect()
    }

    /// Translation examples for `ids`, visual contexts taken from `contexts`.
    pub fn examples(&self, ids: &BTreeSet<u64>, contexts: &BTreeMap<u64, VisualContext>) -> Vec<Example> {
        ids.iter()
            .map(|id| Example {
                id: *id,
                src: self.src[id].clone(),
                tgt: self.tgt[id].clone(),
                visual: contexts.get(id).filter(|c| !c.no_visual).map(|c| c.pooled.clone()),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SynthSummary {
    pub sentences: usize,
    pub src: PathBuf,
    pub tgt: PathBuf,
    pub queries: PathBuf,
    pub answer_key: PathBuf,
}

pub fn synth_queries_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.queries.clone().unwrap_or_else(|| cfg.paths.work.join("queries.synth.jsonl"))
}

pub fn answer_key_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.answer_key.clone().unwrap_or_else(|| cfg.paths.work.join("answer_key.jsonl"))
}

pub fn synth_spec(cfg: &RunConfig) -> SynthSpec {
    SynthSpec {
        n_sentences: cfg.synth.n_sentences,
        n_ambiguous_words: cfg.synth.n_ambiguous_words,
        senses_per_word: 2,
        k: cfg.synth.k,
        n_concepts: cfg.fixture.n_concepts,
        seed: cfg.seed,
    }
}

/// Writes the synthetic corpus, its search terms and the answer key.
pub fn synth(cfg: &RunConfig) -> Result<SynthSummary> {
    let s = generate_synth(&synth_spec(cfg)).map_err(|e| Error::usage(e.to_string()))?;
    let (src, tgt, queries, key) = (cfg.src_path(), cfg.tgt_path(), synth_queries_path(cfg), answer_key_path(cfg));
    write_lines(&src, &s.pairs.iter().map(|p| p.src.text()).collect::<Vec<_>>())?;
    write_lines(&tgt, &s.pairs.iter().map(|p| p.tgt.text()).collect::<Vec<_>>())?;
    jsonl::write_queries(&queries, &s.queries)?;
    jsonl::write(&key, &s.key)?;
    Ok(SynthSummary { sentences: s.pairs.len(), src, tgt, queries, answer_key: key })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PrepareSummary {
    pub sentences: usize,
    pub vocab: usize,
    pub flagged: usize,
}

/// Builds the joint vocabulary and extracts search keywords.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareSummary> {
    let (s, t) = (cfg.src_path(), cfg.tgt_path());
    require(&[&s, &t])?;
    if let Some(sw) = &cfg.paths.stopwords {
        require(&[sw])?;
    }
    let pairs = read_parallel(&s, &t)?;
    let stop = read_stopwords(cfg.paths.stopwords.as_deref())?;
    let vocab = build_vocab(pairs.iter().flat_map(|p| [&p.src, &p.tgt]), cfg.corpus.min_freq)?;
    let idf = IdfTable::from_corpus(pairs.iter().map(|p| &p.src));
    let mut rows = Vec::with_capacity(pairs.len());
    let mut flagged = 0;
    for p in &pairs {
        let k = extract_keywords(&p.src, &stop, &idf, cfg.corpus.max_k)?;
        flagged += usize::from(k.is_flagged());
        rows.push(QuerySet::from(k));
    }
    write_vocab(&cfg.vocab_path(), &vocab)?;
    jsonl::write_queries(&cfg.keywords_path(), &rows)?;
    Ok(PrepareSummary { sentences: pairs.len(), vocab: vocab.len(), flagged })
}

pub fn client(cfg: &RunConfig) -> Box<dyn SearchClient> {
    match cfg.retrieval.client {
        ClientKind::Fixture => Box::new(FixtureClient::new(cfg.seed, cfg.fixture.n_concepts)),
        ClientKind::Http => Box::new(HttpClient::from_env(cfg.retrieval.endpoint.clone().unwrap_or_default())),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RetrieveSummary {
    pub lists: usize,
    pub candidates: usize,
    pub short_lists: usize,
    pub client_calls: usize,
}

pub fn retrieve(cfg: &RunConfig) -> Result<RetrieveSummary> {
    let q = cfg.queries_path();
    require(&[&q])?;
    let queries = jsonl::read_queries(&q)?;
    let mut c = client(cfg);
    let r = build_manifest(&Cache::new(cfg.cache_dir()), c.as_mut(), &queries, cfg.retrieval.k)?;
    Ok(RetrieveSummary {
        lists: r.manifest.len(),
        candidates: r.total_candidates,
        short_lists: r.manifest.short_lists().count(),
        client_calls: r.client_calls,
    })
}

pub fn extractor(cfg: &RunConfig) -> StubExtractor {
    StubExtractor { dim: cfg.model.d_img, n_concepts: cfg.fixture.n_concepts, alpha: cfg.fixture.alpha, noise: cfg.fixture.noise }
}

fn load_manifest(cfg: &RunConfig) -> Result<RetrievalManifest> {
    let cache = Cache::new(cfg.cache_dir());
    require(&[&cache.manifest_path()])?;
    cache.load_manifest()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeatureSummary {
    pub images: usize,
    pub extracted: usize,
}

/// One feature per distinct manifest image; features already in the store
/// are kept.
pub fn extract_features(cfg: &RunConfig) -> Result<FeatureSummary> {
    let manifest = load_manifest(cfg)?;
    let cache = Cache::new(cfg.cache_dir());
    let ex = extractor(cfg);
    ex.validate().map_err(|e| Error::usage(e.to_string()))?;
    let path = cfg.features_path();
    let previous = if path.exists() { features::load(&path).ok() } else { None };
    let mut store = FeatureStore::new(ex.dim(), ex.id());
    let ids: BTreeSet<_> = manifest.candidates().map(|c| c.image_id).collect();
    let mut extracted = 0;
    for id in &ids {
        if let Some(v) = previous.as_ref().filter(|p| p.extractor_id() == ex.id()).and_then(|p| p.get(id)) {
            store.insert_vector(*id, v.to_vec())?;
            continue;
        }
        let payload = cache.get_blob(id)?;
        store.insert(extract(&payload, &ex)?)?;
        extracted += 1;
    }
    features::save(&path, &store)?;
    Ok(FeatureSummary { images: store.len(), extracted })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct MatcherMeta {
    model: TransformerConfig,
    d_match: usize,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    freeze_encoder: bool,
    negative_ratio: usize,
}

fn matcher_config(cfg: &RunConfig, model: TransformerConfig) -> MatcherConfig {
    MatcherConfig {
        model,
        d_match: cfg.matcher.d_match,
        epochs: cfg.matcher.epochs,
        lr: cfg.matcher.lr,
        batch_size: cfg.matcher.batch_size,
        freeze_encoder: cfg.matcher.freeze_encoder,
        seed: cfg.seed,
    }
}

fn load_features(cfg: &RunConfig) -> Result<FeatureStore> {
    let p = cfg.features_path();
    require(&[&p])?;
    let store = features::load(&p)?;
    if store.dim() != cfg.model.d_img {
        return Err(Error::data(format!("feature store has D_img {}, config says {}", store.dim(), cfg.model.d_img)));
    }
    Ok(store)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatcherSummary {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub final_loss: f64,
    pub heldout_auc: Option<f64>,
}

fn steps(n: usize, batch: usize, epochs: usize) -> u64 {
    (n.div_ceil(batch.max(1)) * epochs) as u64
}

pub fn train_matcher_stage(cfg: &RunConfig) -> Result<MatcherSummary> {
    let data = Data::load(cfg)?;
    let manifest = load_manifest(cfg)?;
    let store = load_features(cfg)?;
    let sentences = data.src_sentences();
    let train = build_pairs(&manifest.restrict(&data.train), &sentences, cfg.matcher.negative_ratio, cfg.seed)?;
    let heldout = build_pairs(&manifest.restrict(&data.test), &sentences, cfg.matcher.negative_ratio, cfg.seed)?;
    jsonl::write_pairs(&cfg.pairs_path("train"), &train)?;
    jsonl::write_pairs(&cfg.pairs_path("heldout"), &heldout)?;
    let mc = matcher_config(cfg, data.model(cfg));
    let labels: BTreeSet<u8> = heldout.iter().map(|p| p.label).collect();
    let heldout_eval = if labels.len() == 2 { heldout.as_slice() } else { &[] };
    let pd = PairData { sentences: &data.src, features: &store };
    let (params, log) = train_matcher(&mc, init_matcher(&mc), &train, heldout_eval, &pd)?;
    write_log(&cfg.log_path(MATCHER), &log.iter().map(|l| json!({"epoch": l.epoch, "loss": l.loss, "heldout_auc": l.heldout_auc})).collect::<Vec<_>>())?;
    let meta = MatcherMeta {
        model: mc.model.clone(),
        d_match: mc.d_match,
        epochs: mc.epochs,
        lr: mc.lr,
        batch_size: mc.batch_size,
        freeze_encoder: mc.freeze_encoder,
        negative_ratio: cfg.matcher.negative_ratio,
    };
    Checkpoint {
        kind: MATCHER.into(),
        config: serde_json::to_value(meta)?,
        seed: cfg.seed,
        step: steps(train.len(), mc.batch_size, mc.epochs),
        params,
    }
    .save(&cfg.checkpoint_path(MATCHER))?;
    let last: Option<&EpochLog> = log.last();
    Ok(MatcherSummary {
        train_pairs: train.len(),
        heldout_pairs: heldout.len(),
        final_loss: last.map_or(f64::NAN, |l| l.loss),
        heldout_auc: last.and_then(|l| l.heldout_auc),
    })
}

fn write_log(path: &Path, rows: &[serde_json::Value]) -> Result<()> {
    jsonl::write(path, rows)
}

fn load_matcher(cfg: &RunConfig, data: &Data) -> Result<(MatcherConfig, ParamSet)> {
    let p = cfg.checkpoint_path(MATCHER);
    require(&[&p])?;
    let ck = Checkpoint::load_kind(&p, MATCHER)?;
    let meta: MatcherMeta = ck.config_as()?;
    if meta.model.src_vocab != data.vocab.len() {
        return Err(Error::data(format!("matcher checkpoint vocabulary {} does not match {}", meta.model.src_vocab, data.vocab.len())));
    }
    let mut mc = matcher_config(cfg, meta.model);
    mc.d_match = meta.d_match;
    Ok((mc, ck.params))
}

fn weighting(kind: WeightingKind, temperature: f64) -> Weighting {
    match kind {
        WeightingKind::Learned => Weighting::Learned { temperature },
        WeightingKind::Hard => Weighting::Hard,
        WeightingKind::Uniform => Weighting::Uniform,
    }
}

fn kind_name(kind: WeightingKind) -> String {
    serde_json::to_value(kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContextSummary {
    pub sentences: usize,
    pub no_visual: usize,
    /// Mean weight entropy over test sentences with candidates.
    pub test_mean_entropy: f64,
}

/// Builds and saves contexts for every sentence under the given weighting.
pub fn build_contexts(cfg: &RunConfig, kind: WeightingKind) -> Result<ContextSummary> {
    let data = Data::load(cfg)?;
    let manifest = load_manifest(cfg)?;
    let store = load_features(cfg)?;
    let (mc, params) = load_matcher(cfg, &data)?;
    let ctx = core_contexts(&manifest, &data.src, &store, &mc, &params, weighting(kind, cfg.filter.temperature))?;
    let header = ContextHeader {
        d_img: store.dim(),
        temperature: cfg.filter.temperature,
        weighting: kind_name(kind),
        matcher_ckpt_hash: file_sha256(&cfg.checkpoint_path(MATCHER))?,
        count: ctx.len(),
    };
    context::save(&cfg.contexts_path(kind), &header, &ctx)?;
    let test: Vec<&VisualContext> = ctx.iter().filter(|c| data.test.contains(&c.sentence_id) && !c.no_visual).collect();
    Ok(ContextSummary {
        sentences: ctx.len(),
        no_visual: ctx.iter().filter(|c| c.no_visual).count(),
        test_mean_entropy: test.iter().map(|c| c.entropy).sum::<f64>() / test.len().max(1) as f64,
    })
}

fn load_contexts(cfg: &RunConfig, kind: WeightingKind, data: &Data) -> Result<BTreeMap<u64, VisualContext>> {
    let p = cfg.contexts_path(kind);
    require(&[&p])?;
    let (h, ctx) = context::load(&p)?;
    if h.d_img != cfg.model.d_img {
        return Err(Error::data(format!("contexts have D_img {}, config says {}", h.d_img, cfg.model.d_img)).at(&p));
    }
    let map: BTreeMap<u64, VisualContext> = ctx.into_iter().map(|c| (c.sentence_id, c)).collect();
    if let Some(id) = data.src.keys().find(|id| !map.contains_key(id)) {
        return Err(Error::data(format!("contexts do not cover sentence {id}")).at(&p));
    }
    Ok(map)
}

fn train_config(cfg: &RunConfig, epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        lr: cfg.translator.lr,
        batch_size: cfg.translator.batch_size,
        seed: cfg.seed,
        mask_prob: cfg.translator.mask_prob,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TranslatorMeta {
    model: TransformerConfig,
    stage: String,
    arm: String,
    fusion: String,
    contexts: Option<String>,
    epochs: usize,
    lr: f64,
    batch_size: usize,
    mask_prob: f64,
    init: Option<String>,
}

fn objective_name(o: Objective) -> &'static str {
    match o {
        Objective::Tlm => "tlm",
        Objective::Vtlm => "vtlm",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub name: String,
    pub examples: usize,
    pub final_loss: f64,
}

pub fn pretrain_stage(cfg: &RunConfig, objective: Objective) -> Result<TrainSummary> {
    let data = Data::load(cfg)?;
    let model = data.model(cfg);
    let contexts = match objective {
        Objective::Tlm => BTreeMap::new(),
        Objective::Vtlm => load_contexts(cfg, cfg.filter.weighting, &data)?,
    };
    let examples = data.examples(&data.train, &contexts);
    let tc = train_config(cfg, cfg.translator.pretrain_epochs);
    let init = translator::init_translator(&model, cfg.seed)?;
    let (params, trace) = translator::pretrain(&model, init, &examples, objective, &tc)?;
    let name = objective_name(objective);
    write_log(&cfg.log_path(name), &trace.iter().enumerate().map(|(e, l)| json!({"epoch": e, "loss": l})).collect::<Vec<_>>())?;
    let meta = TranslatorMeta {
        model,
        stage: "pretrain".into(),
        arm: name.into(),
        fusion: if objective == Objective::Vtlm { "encoder".into() } else { "off".into() },
        contexts: (objective == Objective::Vtlm).then(|| kind_name(cfg.filter.weighting)),
        epochs: tc.epochs,
        lr: tc.lr,
        batch_size: tc.batch_size,
        mask_prob: tc.mask_prob,
        init: None,
    };
    Checkpoint {
        kind: TRANSLATOR.into(),
        config: serde_json::to_value(meta)?,
        seed: cfg.seed,
        step: steps(examples.len(), tc.batch_size, tc.epochs),
        params,
    }
    .save(&cfg.checkpoint_path(name))?;
    Ok(TrainSummary { name: name.into(), examples: examples.len(), final_loss: trace.last().copied().unwrap_or(f64::NAN) })
}

/// The fine-tuned systems compared in the report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arm {
    /// Text-only, from the TLM checkpoint.
    Baseline,
    /// Gated visual fusion with learned relevance weights, from the VTLM checkpoint.
    System,
    /// As `System` but with uniform weights over the candidates.
    Ablation,
}

impl Arm {
    pub const ALL: [Arm; 3] = [Arm::Baseline, Arm::System, Arm::Ablation];

    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::System => "system",
            Arm::Ablation => "ablation",
        }
    }

    fn init(self) -> &'static str {
        match self {
            Arm::Baseline => "tlm",
            _ => "vtlm",
        }
    }

    fn fusion(self) -> Fusion {
        match self {
            Arm::Baseline => Fusion::Off,
            _ => Fusion::On,
        }
    }

    fn contexts(self, cfg: &RunConfig) -> Option<WeightingKind> {
        match self {
            Arm::Baseline => None,
            Arm::System => Some(cfg.filter.weighting),
            Arm::Ablation => Some(WeightingKind::Uniform),
        }
    }
}

fn arm_contexts(cfg: &RunConfig, arm: Arm, data: &Data) -> Result<BTreeMap<u64, VisualContext>> {
    match arm.contexts(cfg) {
        Some(k) => load_contexts(cfg, k, data),
        None => Ok(BTreeMap::new()),
    }
}

pub fn finetune_stage(cfg: &RunConfig, arm: Arm) -> Result<TrainSummary> {
    let data = Data::load(cfg)?;
    let model = data.model(cfg);
    let init_path = cfg.translator.init_checkpoint.clone().unwrap_or_else(|| cfg.checkpoint_path(arm.init()));
    require(&[&init_path])?;
    let ck = Checkpoint::load_kind(&init_path, TRANSLATOR)?;
    translator::check_compatible(&model, &ck.params).map_err(|e| Error::from(e).at(&init_path))?;
    let mut params = translator::init_translator(&model, cfg.seed)?;
    params.load_matching(&ck.params);
    let contexts = arm_contexts(cfg, arm, &data)?;
    let examples = data.examples(&data.train, &contexts);
    let tc = train_config(cfg, cfg.translator.finetune_epochs);
    let (params, trace) = translator::finetune(&model, params, &examples, arm.fusion(), &tc)?;
    write_log(&cfg.log_path(arm.name()), &trace.iter().enumerate().map(|(e, l)| json!({"epoch": e, "loss": l})).collect::<Vec<_>>())?;
    let meta = TranslatorMeta {
        model,
        stage: "finetune".into(),
        arm: arm.name().into(),
        fusion: if arm.fusion() == Fusion::Off { "off".into() } else { "decoder".into() },
        contexts: arm.contexts(cfg).map(kind_name),
        epochs: tc.epochs,
        lr: tc.lr,
        batch_size: tc.batch_size,
        mask_prob: tc.mask_prob,
        init: Some(file_sha256(&init_path)?),
    };
    Checkpoint {
        kind: TRANSLATOR.into(),
        config: serde_json::to_value(meta)?,
        seed: cfg.seed,
        step: steps(examples.len(), tc.batch_size, tc.epochs),
        params,
    }
    .save(&cfg.checkpoint_path(arm.name()))?;
    Ok(TrainSummary { name: arm.name().into(), examples: examples.len(), final_loss: trace.last().copied().unwrap_or(f64::NAN) })
}

pub fn translation_path(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.translations_dir().join(format!("{name}.txt"))
}

pub fn reference_path(cfg: &RunConfig) -> PathBuf {
    translation_path(cfg, "reference")
}

/// Answer-key rows of the test split, aligned with the references.
pub fn test_key_path(cfg: &RunConfig) -> PathBuf {
    cfg.translations_dir().join("answer_key.test.jsonl")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TranslateSummary {
    pub name: String,
    pub sentences: usize,
    pub truncated: usize,
}

/// Decodes the test split with `arm`'s checkpoint. `contexts` overrides the
/// arm's own visual contexts; outputs are named `name`.
pub fn translate_stage(cfg: &RunConfig, arm: Arm, contexts: Option<WeightingKind>, name: &str) -> Result<TranslateSummary> {
    let data = Data::load(cfg)?;
    let model = data.model(cfg);
    let ck_path = cfg.checkpoint_path(arm.name());
    require(&[&ck_path])?;
    let ck = Checkpoint::load_kind(&ck_path, TRANSLATOR)?;
    translator::check_compatible(&model, &ck.params).map_err(|e| Error::from(e).at(&ck_path))?;
    let ctx = match contexts.or(arm.contexts(cfg)) {
        Some(k) if arm.fusion() != Fusion::Off => load_contexts(cfg, k, &data)?,
        _ => BTreeMap::new(),
    };
    let examples = data.examples(&data.test, &ctx);
    let mut lines = Vec::with_capacity(examples.len());
    let mut rows = Vec::with_capacity(examples.len());
    let mut truncated = 0;
    for e in &examples {
        let h = translator::translate(&model, &ck.params, &e.src, e.visual.as_deref(), arm.fusion(), cfg.translator.beam, cfg.translator.max_len)?;
        truncated += usize::from(!h.finished);
        let text = join_tokens(&data.vocab.decode(h.content())?);
        rows.push(jsonl::TranslationRow { id: e.id, text: text.clone(), log_prob: h.log_prob, finished: h.finished, no_visual: e.visual.is_none() });
        lines.push(text);
    }
    write_lines(&translation_path(cfg, name), &lines)?;
    jsonl::write(&cfg.translations_dir().join(format!("{name}.jsonl")), &rows)?;
    let refs: Vec<String> = data.test.iter().map(|id| data.pairs[*id as usize].tgt.text()).collect();
    write_lines(&reference_path(cfg), &refs)?;
    if let Some(key) = test_key(cfg, &data.test)? {
        jsonl::write(&test_key_path(cfg), &key)?;
    }
    Ok(TranslateSummary { name: name.into(), sentences: lines.len(), truncated })
}

/// Answer-key rows aligned with the test split, when a key is configured.
pub fn test_key(cfg: &RunConfig, test: &BTreeSet<u64>) -> Result<Option<Vec<AnswerKey>>> {
    let path = answer_key_path(cfg);
    if cfg.paths.answer_key.is_none() && !path.exists() {
        return Ok(None);
    }
    require(&[&path])?;
    let by_id: BTreeMap<u64, AnswerKey> = jsonl::read::<AnswerKey>(&path)?.into_iter().map(|k| (k.sentence_id, k)).collect();
    test.iter()
        .map(|id| by_id.get(id).cloned().ok_or_else(|| Error::data(format!("answer key lacks sentence {id}")).at(&path)))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

/// Compares two translation files against references.
pub fn evaluate_files(baseline: &Path, system: &Path, references: &Path, key: Option<&Path>) -> Result<Comparison> {
    require(&[baseline, system, references])?;
    let b = read_token_lines(baseline)?;
    let s = read_token_lines(system)?;
    let r = read_token_lines(references)?;
    let key = match key {
        Some(k) => {
            require(&[k])?;
            Some(jsonl::read::<AnswerKey>(k)?)
        }
        None => None,
    };
    if let Some(k) = &key {
        if k.len() != r.len() {
            return Err(Error::data(format!("answer key has {} rows for {} references", k.len(), r.len())));
        }
    }
    Ok(compare(&b, &s, &r, key.as_deref())?)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Fine-tuned with uniform weights over the candidates.
    pub bleu: f64,
    pub sense_accuracy: Option<f64>,
    /// `system.bleu - bleu`.
    pub gap: f64,
    /// The system checkpoint decoded with uniform-weight contexts.
    pub test_time_uniform_bleu: f64,
    pub test_time_uniform_sense_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcentrationReport {
    pub sentences: usize,
    /// Share of test sentences whose top-weighted candidate is the planted image.
    pub argmax_planted_rate: Option<f64>,
    pub mean_entropy: f64,
    pub untrained_mean_entropy: f64,
    pub ln_k: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    #[serde(flatten)]
    pub comparison: Comparison,
    pub ablation: AblationReport,
    pub matcher_heldout_auc: Option<f64>,
    pub concentration: ConcentrationReport,
}

/// Concentration of the learned weights on the test split, against the
/// untrained matcher's weights on the same candidates.
pub fn concentration(cfg: &RunConfig, key: Option<&[AnswerKey]>) -> Result<ConcentrationReport> {
    let data = Data::load(cfg)?;
    let learned = load_contexts(cfg, WeightingKind::Learned, &data).or_else(|_| -> Result<_> {
        let manifest = load_manifest(cfg)?;
        let store = load_features(cfg)?;
        let (mc, params) = load_matcher(cfg, &data)?;
        let ctx = core_contexts(&manifest, &data.subset(&data.test), &store, &mc, &params, Weighting::Learned { temperature: cfg.filter.temperature })?;
        Ok(ctx.into_iter().map(|c| (c.sentence_id, c)).collect())
    })?;
    let manifest = load_manifest(cfg)?;
    let store = load_features(cfg)?;
    let (mc, _) = load_matcher(cfg, &data)?;
    let mut untrained = init_matcher(&mc);
    untrained.round_to_f32();
    let test = data.subset(&data.test);
    let fresh = core_contexts(&manifest, &test, &store, &mc, &untrained, Weighting::Learned { temperature: cfg.filter.temperature })?;
    let ctx: Vec<&VisualContext> = data.test.iter().filter_map(|id| learned.get(id)).filter(|c| !c.no_visual).collect();
    let n = ctx.len().max(1) as f64;
    let argmax_planted_rate = match key {
        Some(k) => {
            let planted: BTreeMap<u64, String> = k.iter().map(|k| (k.sentence_id, k.planted_image.clone())).collect();
            let hits = ctx
                .iter()
                .filter(|c| c.argmax().is_some_and(|i| planted.get(&c.sentence_id) == Some(&c.candidates[i].to_hex())))
                .count();
            Some(hits as f64 / n)
        }
        None => None,
    };
    let fresh: Vec<&VisualContext> = fresh.iter().filter(|c| !c.no_visual).collect();
    Ok(ConcentrationReport {
        sentences: ctx.len(),
        argmax_planted_rate,
        mean_entropy: ctx.iter().map(|c| c.entropy).sum::<f64>() / n,
        untrained_mean_entropy: fresh.iter().map(|c| c.entropy).sum::<f64>() / fresh.len().max(1) as f64,
        ln_k: (cfg.synth.k as f64).ln(),
    })
}

fn text_report(r: &Report) -> String {
    let mut s = String::new();
    let sa = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    s.push_str(&format!("baseline BLEU    {:.2}\n", r.comparison.baseline.bleu));
    s.push_str(&format!("system BLEU      {:.2}\n", r.comparison.system.bleu));
    s.push_str(&format!("delta            {:+.2}\n", r.comparison.delta));
    if let Some(a) = &r.comparison.sense_accuracy {
        s.push_str(&format!("sense accuracy   baseline {:.3}  system {:.3}\n", a.baseline, a.system));
    }
    s.push_str(&format!(
        "uniform weights  BLEU {:.2} (gap {:+.2}), sense {}\n",
        r.ablation.bleu,
        r.ablation.gap,
        sa(r.ablation.sense_accuracy)
    ));
    s.push_str(&format!(
        "system with uniform contexts at test time  BLEU {:.2}, sense {}\n",
        r.ablation.test_time_uniform_bleu,
        sa(r.ablation.test_time_uniform_sense_accuracy)
    ));
    s.push_str(&format!("matcher held-out AUC {}\n", sa(r.matcher_heldout_auc)));
    s.push_str(&format!(
        "concentration    planted argmax {}, entropy {:.3} (untrained {:.3}, ln K {:.3})\n",
        sa(r.concentration.argmax_planted_rate),
        r.concentration.mean_entropy,
        r.concentration.untrained_mean_entropy,
        r.concentration.ln_k
    ));
    let (w, l) = r.comparison.sentences.iter().fold((0, 0), |(w, l), x| match x.outcome {
        ssmmt_core::eval::Outcome::Win => (w + 1, l),
        ssmmt_core::eval::Outcome::Loss => (w, l + 1),
        ssmmt_core::eval::Outcome::Tie => (w, l),
    });
    s.push_str(&format!("per sentence     {w} wins, {l} losses, {} ties\n", r.comparison.sentences.len() - w - l));
    s
}

/// Effective configuration of an `e2e` run: synthetic inputs in the work
/// directory and one image per search term.
pub fn e2e_config(cfg: &RunConfig) -> RunConfig {
    let mut c = cfg.clone();
    let w = c.paths.work.clone();
    c.paths.src = Some(w.join("corpus/src.txt"));
    c.paths.tgt = Some(w.join("corpus/tgt.txt"));
    c.paths.queries = Some(w.join("queries.synth.jsonl"));
    c.paths.answer_key = Some(w.join("answer_key.jsonl"));
    c.retrieval.client = ClientKind::Fixture;
    c.retrieval.k = 1;
    c.filter.weighting = WeightingKind::Learned;
    c
}

/// Runs every stage on the synthetic benchmark and writes the report.
pub fn e2e(cfg: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<Report> {
    let cfg = e2e_config(cfg);
    cfg.validate()?;
    echo_config(&cfg)?;
    progress("synth");
    synth(&cfg)?;
    progress("prepare");
    prepare(&cfg)?;
    progress("retrieve");
    retrieve(&cfg)?;
    progress("extract-features");
    extract_features(&cfg)?;
    progress("train-matcher");
    let m = train_matcher_stage(&cfg)?;
    progress("build-contexts");
    build_contexts(&cfg, WeightingKind::Learned)?;
    build_contexts(&cfg, WeightingKind::Uniform)?;
    progress("pretrain");
    pretrain_stage(&cfg, Objective::Tlm)?;
    pretrain_stage(&cfg, Objective::Vtlm)?;
    progress("finetune");
    for arm in Arm::ALL {
        finetune_stage(&cfg, arm)?;
    }
    progress("translate");
    for arm in Arm::ALL {
        translate_stage(&cfg, arm, None, arm.name())?;
    }
    translate_stage(&cfg, Arm::System, Some(WeightingKind::Uniform), "system.uniform_contexts")?;
    progress("evaluate");
    let data = Data::load(&cfg)?;
    let key = test_key(&cfg, &data.test)?;
    let key_path = key.as_ref().map(|_| test_key_path(&cfg));
    let refs = reference_path(&cfg);
    let t = |n: &str| translation_path(&cfg, n);
    let comparison = evaluate_files(&t("baseline"), &t("system"), &refs, key_path.as_deref())?;
    let abl = evaluate_files(&t("ablation"), &t("system"), &refs, key_path.as_deref())?;
    let swap = evaluate_files(&t("system.uniform_contexts"), &t("system"), &refs, key_path.as_deref())?;
    let report = Report {
        ablation: AblationReport {
            bleu: abl.baseline.bleu,
            sense_accuracy: abl.sense_accuracy.as_ref().map(|s| s.baseline),
            gap: comparison.system.bleu - abl.baseline.bleu,
            test_time_uniform_bleu: swap.baseline.bleu,
            test_time_uniform_sense_accuracy: swap.sense_accuracy.as_ref().map(|s| s.baseline),
        },
        matcher_heldout_auc: m.heldout_auc,
        concentration: concentration(&cfg, key.as_deref())?,
        comparison,
    };
    write_json(&cfg.report_path(), &report)?;
    write_atomic(&cfg.paths.work.join("report.txt"), text_report(&report).as_bytes())?;
    Ok(report)
}
