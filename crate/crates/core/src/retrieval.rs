//! Image queries, ranked candidates and the retrieval manifest, plus the
//! search-client interface with its deterministic fixture implementation.
//! Caching and network clients live in the std crate.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::corpus::KeywordSet;
use crate::features::ImageId;
use crate::{fixture, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct ImageQuery {
    pub sentence_id: u64,
    pub keyword: String,
    pub k: usize,
}

impl ImageQuery {
    pub fn new(sentence_id: u64, keyword: impl Into<String>, k: usize) -> Result<Self> {
        let keyword = keyword.into();
        if k == 0 {
            return Err(Error::InvalidArgument("k must be at least 1".into()));
        }
        if keyword.is_empty() {
            return Err(Error::InvalidArgument(format!("empty keyword for sentence {sentence_id}")));
        }
        Ok(Self { sentence_id, keyword, k })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageCandidate {
    pub image_id: ImageId,
    pub sentence_id: u64,
    pub keyword: String,
    pub rank: u32,
    pub source: String,
}

/// The search terms issued for one sentence. Keyword sets extracted from the
/// sentence are the usual case; the synthetic benchmark also issues terms
/// that do not occur in the sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuerySet {
    pub sentence_id: u64,
    pub keywords: Vec<String>,
}

impl From<KeywordSet> for QuerySet {
    fn from(k: KeywordSet) -> Self {
        Self { sentence_id: k.sentence_id, keywords: k.keywords }
    }
}

/// Ordered candidates per `(sentence_id, keyword)`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RetrievalManifest {
    pub client: String,
    pub created: String,
    pub k: usize,
    lists: BTreeMap<(u64, String), Vec<ImageCandidate>>,
    short: BTreeSet<(u64, String)>,
}

impl RetrievalManifest {
    pub fn new(client: impl Into<String>, created: impl Into<String>, k: usize) -> Self {
        Self { client: client.into(), created: created.into(), k, ..Self::default() }
    }

    /// Records a ranked list; lists shorter than `k` are flagged short.
    pub fn insert(&mut self, sentence_id: u64, keyword: &str, candidates: Vec<ImageCandidate>) -> Result<()> {
        if candidates.len() > self.k {
            return Err(Error::Manifest(format!(
                "{} candidates for ({sentence_id}, {keyword}) exceeds k={}",
                candidates.len(),
                self.k
            )));
        }
        for (i, c) in candidates.iter().enumerate() {
            if c.rank as usize != i || c.sentence_id != sentence_id || c.keyword != keyword {
                return Err(Error::Manifest(format!("non-contiguous ranks for ({sentence_id}, {keyword})")));
            }
        }
        let key = (sentence_id, String::from(keyword));
        if candidates.len() < self.k {
            self.short.insert(key.clone());
        } else {
            self.short.remove(&key);
        }
        self.lists.insert(key, candidates);
        Ok(())
    }

    pub fn get(&self, sentence_id: u64, keyword: &str) -> Option<&[ImageCandidate]> {
        self.lists.get(&(sentence_id, String::from(keyword))).map(Vec::as_slice)
    }

    pub fn is_short(&self, sentence_id: u64, keyword: &str) -> bool {
        self.short.contains(&(sentence_id, String::from(keyword)))
    }

    pub fn short_lists(&self) -> impl Iterator<Item = &(u64, String)> {
        self.short.iter()
    }

    /// Lists in `(sentence_id, keyword)` order.
    pub fn lists(&self) -> impl Iterator<Item = (u64, &str, &[ImageCandidate])> {
        self.lists.iter().map(|((s, k), v)| (*s, k.as_str(), v.as_slice()))
    }

    /// Every candidate in list order then rank order.
    pub fn candidates(&self) -> impl Iterator<Item = &ImageCandidate> {
        self.lists.values().flatten()
    }

    pub fn total_candidates(&self) -> usize {
        self.lists.values().map(Vec::len).sum()
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn sentence_ids(&self) -> BTreeSet<u64> {
        self.lists.keys().map(|(s, _)| *s).collect()
    }

    /// Distinct images retrieved for any keyword of the sentence, in first
    /// appearance order (keyword order, then rank).
    pub fn sentence_images(&self, sentence_id: u64) -> Vec<ImageId> {
        let mut seen = BTreeSet::new();
        self.lists
            .range((sentence_id, String::new())..)
            .take_while(|((s, _), _)| *s == sentence_id)
            .flat_map(|(_, v)| v)
            .filter(|c| seen.insert(c.image_id))
            .map(|c| c.image_id)
            .collect()
    }

    /// The sub-manifest for a subset of sentences.
    pub fn restrict(&self, ids: &BTreeSet<u64>) -> Self {
        let keep = |(s, _): &(u64, String)| ids.contains(s);
        Self {
            client: self.client.clone(),
            created: self.created.clone(),
            k: self.k,
            lists: self.lists.iter().filter(|(key, _)| keep(key)).map(|(k, v)| (k.clone(), v.clone())).collect(),
            short: self.short.iter().filter(|key| keep(key)).cloned().collect(),
        }
    }
}

/// An image search engine: ranked `(payload, source)` pairs for a keyword.
pub trait SearchClient {
    /// Stable identity recorded in manifests.
    fn identity(&self) -> String;
    fn fetch(&mut self, keyword: &str, k: usize) -> Result<Vec<(Vec<u8>, String)>>;
}

/// Offline client whose results are a pure function of its seed.
#[derive(Debug, Clone)]
pub struct FixtureClient {
    pub seed: u64,
    pub n_concepts: u32,
    calls: usize,
}

impl FixtureClient {
    pub fn new(seed: u64, n_concepts: u32) -> Self {
        Self { seed, n_concepts, calls: 0 }
    }

    /// Number of `fetch` calls served so far.
    pub fn calls(&self) -> usize {
        self.calls
    }
}

impl SearchClient for FixtureClient {
    fn identity(&self) -> String {
        format!("fixture:{}:c{}", self.seed, self.n_concepts)
    }

    fn fetch(&mut self, keyword: &str, k: usize) -> Result<Vec<(Vec<u8>, String)>> {
        self.calls += 1;
        Ok(fixture::results(self.seed, keyword, k, self.n_concepts))
    }
}

/// Issues every query through `client` and assembles the manifest, returning
/// the payload of each distinct image alongside it. Repeated keywords within a
/// sentence are queried once.
pub fn retrieve(
    client: &mut dyn SearchClient,
    queries: &[QuerySet],
    k: usize,
    created: &str,
) -> Result<(RetrievalManifest, BTreeMap<ImageId, Vec<u8>>)> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    let mut manifest = RetrievalManifest::new(client.identity(), created, k);
    let mut payloads = BTreeMap::new();
    for q in queries {
        for kw in &q.keywords {
            let query = ImageQuery::new(q.sentence_id, kw.as_str(), k)?;
            if manifest.get(query.sentence_id, &query.keyword).is_some() {
                continue;
            }
            let results = client.fetch(&query.keyword, k)?;
            let mut list = Vec::with_capacity(results.len().min(k));
            for (rank, (payload, source)) in results.into_iter().take(k).enumerate() {
                let image_id = ImageId::of(&payload);
                list.push(ImageCandidate {
                    image_id,
                    sentence_id: q.sentence_id,
                    keyword: query.keyword.clone(),
                    rank: rank as u32,
                    source,
                });
                payloads.entry(image_id).or_insert(payload);
            }
            manifest.insert(q.sentence_id, &query.keyword, list)?;
        }
    }
    Ok((manifest, payloads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn cand(s: u64, kw: &str, rank: u32, byte: u8) -> ImageCandidate {
        ImageCandidate { image_id: ImageId([byte; 32]), sentence_id: s, keyword: kw.into(), rank, source: "t".into() }
    }

    #[test]
    fn insert_validates_and_flags_short_lists() {
        let mut m = RetrievalManifest::new("t", "0", 3);
        m.insert(1, "a", vec![cand(1, "a", 0, 1), cand(1, "a", 1, 2), cand(1, "a", 2, 3)]).unwrap();
        m.insert(1, "b", vec![cand(1, "b", 0, 2)]).unwrap();
        assert!(!m.is_short(1, "a"));
        assert!(m.is_short(1, "b"));
        assert_eq!(m.total_candidates(), 4);
        assert_eq!(m.sentence_images(1), vec![ImageId([1; 32]), ImageId([2; 32]), ImageId([3; 32])]);
        assert!(m.insert(2, "c", vec![cand(2, "c", 1, 1)]).is_err());
        assert!(m.insert(2, "c", vec![cand(2, "c", 0, 1); 4]).is_err());
        let r = m.restrict(&[2].into_iter().collect());
        assert!(r.is_empty());
    }

    #[test]
    fn fixture_counts_calls() {
        let mut c = FixtureClient::new(7, 16);
        let a = c.fetch("police", 5).unwrap();
        let b = c.fetch("police", 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 5);
        assert_eq!(c.calls(), 2);
        assert!(ImageQuery::new(0, "", 5).is_err());
        assert!(ImageQuery::new(0, "x", 0).is_err());
    }

    #[test]
    fn retrieve_dedups_keywords() {
        let mut c = FixtureClient::new(3, 16);
        let qs = vec![
            QuerySet { sentence_id: 0, keywords: vec!["bat".into(), "bat".into(), "cave".into()] },
            QuerySet { sentence_id: 1, keywords: vec!["bat".into()] },
        ];
        let (m, payloads) = retrieve(&mut c, &qs, 2, "0").unwrap();
        assert_eq!(c.calls(), 3);
        assert_eq!(m.len(), 3);
        // "bat" returns the same images for both sentences
        assert_eq!(payloads.len(), 4);
        assert_eq!(m.get(0, "bat"), m.get(0, "bat"));
        assert_eq!(m.client, "fixture:3:c16");
    }
}
