//! Content-addressed retrieval cache.
//!
//! Layout under the cache directory:
//! - `blobs/<sha256>`: raw payload bytes, named by their hash;
//! - `queries/<sha256(client | keyword)>.json`: the ranked result list a client
//!   returned for a keyword, so repeated queries never reach the client;
//! - `manifest.json`: the manifest of the last build.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use ssmmt_core::features::ImageId;
use ssmmt_core::retrieval::{retrieve, ImageCandidate, QuerySet, RetrievalManifest, SearchClient};

use crate::error::{Context, Error, Result};
use crate::io::{read, read_string, sha256_hex, write_atomic};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Cache {
    pub dir: PathBuf,
}

#[derive(Debug, Serialize, Deserialize)]
struct QueryRecord {
    client: String,
    keyword: String,
    /// Number of results asked for.
    requested: usize,
    results: Vec<ResultRef>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResultRef {
    image_id: String,
    source: String,
}

impl Cache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.dir.join("manifest.json")
    }

    pub fn blob_path(&self, id: &ImageId) -> PathBuf {
        self.dir.join("blobs").join(id.to_hex())
    }

    fn query_path(&self, client: &str, keyword: &str) -> PathBuf {
        let key = sha256_hex(format!("{client}\n{keyword}").as_bytes());
        self.dir.join("queries").join(format!("{key}.json"))
    }

    /// Stores a payload under its hash. Existing blobs are left alone.
    pub fn put_blob(&self, payload: &[u8]) -> Result<ImageId> {
        let id = ImageId::of(payload);
        let path = self.blob_path(&id);
        if !path.exists() {
            write_atomic(&path, payload)?;
        }
        Ok(id)
    }

    /// Reads a payload, verifying that its hash matches its name.
    pub fn get_blob(&self, id: &ImageId) -> Result<Vec<u8>> {
        let path = self.blob_path(id);
        if !path.exists() {
            return Err(Error::data(format!("missing blob for image {id}")));
        }
        let bytes = read(&path)?;
        if ImageId::of(&bytes) != *id {
            return Err(Error::data(format!("corrupt blob for image {id}: hash mismatch")).at(&path));
        }
        Ok(bytes)
    }

    fn lookup(&self, client: &str, keyword: &str, k: usize) -> Result<Option<Vec<(Vec<u8>, String)>>> {
        let path = self.query_path(client, keyword);
        if !path.exists() {
            return Ok(None);
        }
        let rec: QueryRecord = serde_json::from_str(&read_string(&path)?).at(&path)?;
        if rec.client != client || rec.keyword != keyword {
            return Err(Error::data("query index collision").at(&path));
        }
        // a shorter answer than requested means the client had no more
        if rec.requested < k && rec.results.len() == rec.requested {
            return Ok(None);
        }
        let mut out = Vec::new();
        for r in rec.results.into_iter().take(k) {
            let id = ImageId::from_hex(&r.image_id)?;
            out.push((self.get_blob(&id)?, r.source));
        }
        Ok(Some(out))
    }

    fn record(&self, client: &str, keyword: &str, k: usize, results: &[(Vec<u8>, String)]) -> Result<()> {
        let mut refs = Vec::with_capacity(results.len());
        for (payload, source) in results {
            refs.push(ResultRef { image_id: self.put_blob(payload)?.to_hex(), source: source.clone() });
        }
        let rec = QueryRecord { client: client.into(), keyword: keyword.into(), requested: k, results: refs };
        write_atomic(&self.query_path(client, keyword), &serde_json::to_vec(&rec)?)
    }

    pub fn save_manifest(&self, m: &RetrievalManifest) -> Result<()> {
        write_atomic(&self.manifest_path(), &encode_manifest(m)?)
    }

    pub fn load_manifest(&self) -> Result<RetrievalManifest> {
        let path = self.manifest_path();
        decode_manifest(&read(&path)?).at(&path)
    }
}

/// Wraps a client so that every keyword is fetched at most once per cache.
pub struct CachedClient<'a> {
    cache: &'a Cache,
    inner: &'a mut dyn SearchClient,
    misses: usize,
}

impl<'a> CachedClient<'a> {
    pub fn new(cache: &'a Cache, inner: &'a mut dyn SearchClient) -> Self {
        Self { cache, inner, misses: 0 }
    }

    /// Queries forwarded to the wrapped client.
    pub fn misses(&self) -> usize {
        self.misses
    }
}

fn to_core(e: Error) -> ssmmt_core::Error {
    ssmmt_core::Error::Manifest(e.to_string())
}

impl SearchClient for CachedClient<'_> {
    fn identity(&self) -> String {
        self.inner.identity()
    }

    fn fetch(&mut self, keyword: &str, k: usize) -> ssmmt_core::Result<Vec<(Vec<u8>, String)>> {
        let id = self.inner.identity();
        if let Some(hit) = self.cache.lookup(&id, keyword, k).map_err(to_core)? {
            return Ok(hit);
        }
        self.misses += 1;
        let results = self.inner.fetch(keyword, k)?;
        self.cache.record(&id, keyword, k, &results).map_err(to_core)?;
        Ok(results)
    }
}

/// Result of [`build_manifest`].
#[derive(Debug)]
pub struct BuildReport {
    pub manifest: RetrievalManifest,
    pub client_calls: usize,
    pub total_candidates: usize,
}

/// Retrieves every query through the cache and writes `manifest.json`.
/// Interrupted builds resume from the cached query results.
pub fn build_manifest(cache: &Cache, client: &mut dyn SearchClient, queries: &[QuerySet], k: usize) -> Result<BuildReport> {
    if queries.is_empty() {
        return Err(Error::data("no queries to retrieve"));
    }
    let created = match cache.load_manifest() {
        Ok(m) if m.client == client.identity() && m.k == k => m.created,
        _ => {
            let secs = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
            format!("unix:{secs}")
        }
    };
    let mut cached = CachedClient::new(cache, client);
    let (manifest, _) = retrieve(&mut cached, queries, k, &created)?;
    let client_calls = cached.misses();
    cache.save_manifest(&manifest)?;
    Ok(BuildReport { total_candidates: manifest.total_candidates(), manifest, client_calls })
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestFile {
    version: u32,
    client: String,
    created: String,
    k: usize,
    entries: Vec<Entry>,
    short_lists: Vec<ShortList>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    sentence_id: u64,
    keyword: String,
    rank: u32,
    image_id: String,
    source: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct ShortList {
    sentence_id: u64,
    keyword: String,
    count: usize,
}

pub fn encode_manifest(m: &RetrievalManifest) -> Result<Vec<u8>> {
    let entries = m
        .candidates()
        .map(|c| Entry {
            sentence_id: c.sentence_id,
            keyword: c.keyword.clone(),
            rank: c.rank,
            image_id: c.image_id.to_hex(),
            source: c.source.clone(),
        })
        .collect();
    let short_lists = m
        .short_lists()
        .map(|(s, kw)| ShortList { sentence_id: *s, keyword: kw.clone(), count: m.get(*s, kw).map_or(0, <[_]>::len) })
        .collect();
    let file = ManifestFile { version: MANIFEST_VERSION, client: m.client.clone(), created: m.created.clone(), k: m.k, entries, short_lists };
    let mut out = serde_json::to_vec_pretty(&file)?;
    out.push(b'\n');
    Ok(out)
}

pub fn decode_manifest(bytes: &[u8]) -> Result<RetrievalManifest> {
    let f: ManifestFile = serde_json::from_slice(bytes)?;
    if f.version != MANIFEST_VERSION {
        return Err(Error::data(format!("manifest version {}, expected {MANIFEST_VERSION}", f.version)));
    }
    let mut m = RetrievalManifest::new(f.client, f.created, f.k);
    let mut lists: std::collections::BTreeMap<(u64, String), Vec<ImageCandidate>> = Default::default();
    for e in f.entries {
        let c = ImageCandidate {
            image_id: ImageId::from_hex(&e.image_id)?,
            sentence_id: e.sentence_id,
            keyword: e.keyword.clone(),
            rank: e.rank,
            source: e.source,
        };
        lists.entry((e.sentence_id, e.keyword)).or_default().push(c);
    }
    let mut short = BTreeSet::new();
    for s in f.short_lists {
        lists.entry((s.sentence_id, s.keyword.clone())).or_default();
        short.insert((s.sentence_id, s.keyword, s.count));
    }
    for ((sid, kw), mut list) in lists {
        list.sort_by_key(|c| c.rank);
        m.insert(sid, &kw, list)?;
    }
    let recorded: BTreeSet<(u64, String)> = short.iter().map(|(s, k, _)| (*s, k.clone())).collect();
    let actual: BTreeSet<(u64, String)> = m.short_lists().cloned().collect();
    if recorded != actual {
        return Err(Error::data("short-list records disagree with entries"));
    }
    for (sid, kw, count) in short {
        if m.get(sid, &kw).map_or(0, <[_]>::len) != count {
            return Err(Error::data(format!("short-list count for ({sid}, {kw}) disagrees with entries")));
        }
    }
    Ok(m)
}

/// Removes the cache directory entirely.
pub fn clear(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).at(dir)?;
    }
    Ok(())
}
