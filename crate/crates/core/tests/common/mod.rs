#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use ssmmt_core::corpus::{build_vocab, Sentence, Vocabulary};
use ssmmt_core::eval::{generate_synth, Synth, SynthSpec};
use ssmmt_core::features::{extract, FeatureStore, StubExtractor};
use ssmmt_core::matcher::{build_pairs, MatchExample, MatcherConfig};
use ssmmt_core::nnet::TransformerConfig;
use ssmmt_core::retrieval::{retrieve, FixtureClient, RetrievalManifest};

pub struct World {
    pub synth: Synth,
    pub vocab: Vocabulary,
    pub src: BTreeMap<u64, Vec<u32>>,
    pub tgt: BTreeMap<u64, Vec<u32>>,
    pub src_sentences: BTreeMap<u64, Sentence>,
    pub manifest: RetrievalManifest,
    pub store: FeatureStore,
    pub train_ids: BTreeSet<u64>,
    pub test_ids: BTreeSet<u64>,
}

impl World {
    pub fn new(spec: &SynthSpec) -> Self {
        let synth = generate_synth(spec).unwrap();
        let all: Vec<&Sentence> = synth.pairs.iter().flat_map(|p| [&p.src, &p.tgt]).collect();
        let vocab = build_vocab(all, 2).unwrap();
        let src = synth.pairs.iter().map(|p| (p.id(), vocab.encode(p.src.tokens()))).collect();
        let tgt = synth.pairs.iter().map(|p| (p.id(), vocab.encode(p.tgt.tokens()))).collect();
        let src_sentences = synth.pairs.iter().map(|p| (p.id(), p.src.clone())).collect();
        let mut client = FixtureClient::new(spec.seed, spec.n_concepts);
        let (manifest, payloads) = retrieve(&mut client, &synth.queries, 1, "0").unwrap();
        let ex = StubExtractor { n_concepts: spec.n_concepts, ..StubExtractor::default() };
        let mut store = FeatureStore::new(ex.dim, ssmmt_core::features::FeatureExtractor::id(&ex));
        for p in payloads.values() {
            store.insert(extract(p, &ex).unwrap()).unwrap();
        }
        let n_train = spec.n_sentences * 4 / 5;
        let train_ids = (0..n_train as u64).collect();
        let test_ids = (n_train as u64..spec.n_sentences as u64).collect();
        Self { synth, vocab, src, tgt, src_sentences, manifest, store, train_ids, test_ids }
    }

    pub fn model(&self) -> TransformerConfig {
        TransformerConfig { src_vocab: self.vocab.len(), tgt_vocab: self.vocab.len(), ..TransformerConfig::default() }
    }

    pub fn matcher_config(&self) -> MatcherConfig {
        MatcherConfig::new(self.model())
    }

    pub fn pairs(&self, ids: &BTreeSet<u64>, seed: u64) -> Vec<MatchExample> {
        build_pairs(&self.manifest.restrict(ids), &self.src_sentences, 1, seed).unwrap()
    }

    pub fn subset(&self, ids: &BTreeSet<u64>) -> BTreeMap<u64, Vec<u32>> {
        self.src.iter().filter(|(k, _)| ids.contains(k)).map(|(k, v)| (*k, v.clone())).collect()
    }
}
