use std::cell::RefCell;
use std::collections::BTreeSet;
use std::rc::Rc;
use std::time::Duration;

use ssmmt::cache::{build_manifest, decode_manifest, encode_manifest, Cache};
use ssmmt::http::{request_count, HttpClient, Transport, UreqTransport, ATTEMPTS, DENY_ENV};
use ssmmt::Kind;
use ssmmt_core::features::ImageId;
use ssmmt_core::fixture;
use ssmmt_core::retrieval::{FixtureClient, QuerySet, SearchClient};

fn queries(n: u64) -> Vec<QuerySet> {
    (0..n)
        .map(|i| QuerySet { sentence_id: i, keywords: vec![format!("kw{}", i % 3), "police".into()] })
        .collect()
}

/// Counts the distinct and total keywords a client is asked for.
struct Counting {
    inner: FixtureClient,
    calls: Vec<String>,
}

impl SearchClient for Counting {
    fn identity(&self) -> String {
        self.inner.identity()
    }
    fn fetch(&mut self, keyword: &str, k: usize) -> ssmmt_core::Result<Vec<(Vec<u8>, String)>> {
        self.calls.push(keyword.to_string());
        self.inner.fetch(keyword, k)
    }
}

#[test]
fn cache_serves_repeated_queries_without_client_calls() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path());
    let mut c = Counting { inner: FixtureClient::new(7, 16), calls: Vec::new() };
    let q = queries(10);
    let first = build_manifest(&cache, &mut c, &q, 3).unwrap();
    let distinct: BTreeSet<&String> = c.calls.iter().collect();
    assert_eq!(c.calls.len(), distinct.len());
    assert_eq!(distinct.len(), 4);
    assert_eq!(first.client_calls, 4);
    assert_eq!(first.total_candidates, 10 * 2 * 3);
    let bytes = std::fs::read(cache.manifest_path()).unwrap();

    let second = build_manifest(&cache, &mut c, &q, 3).unwrap();
    assert_eq!(second.client_calls, 0);
    assert_eq!(c.calls.len(), 4);
    assert_eq!(second.manifest, first.manifest);
    assert_eq!(std::fs::read(cache.manifest_path()).unwrap(), bytes);
    assert_eq!(decode_manifest(&bytes).unwrap(), first.manifest);
    assert_eq!(encode_manifest(&first.manifest).unwrap(), bytes);
}

#[test]
fn fixture_payloads_match_the_seeded_oracle() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path());
    let q = vec![QuerySet { sentence_id: 0, keywords: vec!["police".into()] }];
    let r = build_manifest(&cache, &mut FixtureClient::new(7, 16), &q, 5).unwrap();
    let list = r.manifest.get(0, "police").unwrap();
    assert_eq!(list.len(), 5);
    // Computed separately with Python's hashlib from the documented layout.
    let oracle = [
        ("53534d4d544658310f0000000000000012b82723ddcd802423cecde851d32caffc7cf4f0922cca314d81aaef1c0f1ecd", "680d61654983000952a58a098c1a6e40eb18d095dbf9204464f98d520bb87cbd"),
        ("53534d4d544658310f0000000100000053553094545405e46dcf537bf50a3bad10a4c50afa117f171b879145a7a41b15", "f387b17777863c44cc1d38aa45f4afc6871ce91d37c096f0fe148396347e4650"),
        ("53534d4d544658310f00000002000000dd4f2b01b009e69cd90c69090f4ee67ab90a93685248854b516bf1cacaa529f6", "bb68006c4e803d8df7f61a50ae3c9920521cc1b609d8741cb74c04ebd087a1ab"),
        ("53534d4d544658310f0000000300000052218aa006ed59bfc3b720eb833a05666a9676495eb42b75f7ee0faee1668a36", "9f5edcb895048fba806b078bf8fce5632cc257bd12f54fe72a7aff9a2a110075"),
        ("53534d4d544658310f00000004000000d50c1cda23c2d6857421bb35c10810437d23be1aa7708c0f255467423f138408", "f710820d5147542d2e8b059533a15432ee0fc7d81b45eb09d5ad2ebc737a3822"),
    ];
    for (rank, (c, (payload, image))) in list.iter().zip(oracle).enumerate() {
        assert_eq!(c.image_id.to_hex(), image);
        assert_eq!(hex::encode(cache.get_blob(&c.image_id).unwrap()), payload);
        assert_eq!(c.rank as usize, rank);
    }
    assert_eq!(fixture::concept_of(7, "police", 16), 15);
    assert_eq!(list[0].image_id, ImageId::of(&fixture::payload(7, "police", 0, 16)));
}

#[test]
fn interrupted_builds_resume_from_the_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path());
    let all: Vec<QuerySet> = (0..6).map(|i| QuerySet { sentence_id: i, keywords: vec![format!("w{i}")] }).collect();
    let mut c = Counting { inner: FixtureClient::new(1, 16), calls: Vec::new() };
    build_manifest(&cache, &mut c, &all[..4], 2).unwrap();
    let r = build_manifest(&cache, &mut c, &all, 2).unwrap();
    assert_eq!(r.client_calls, 2);
    assert_eq!(c.calls, vec!["w0", "w1", "w2", "w3", "w4", "w5"]);
    let fresh_dir = tempfile::tempdir().unwrap();
    let fresh = build_manifest(&Cache::new(fresh_dir.path()), &mut FixtureClient::new(1, 16), &all, 2).unwrap();
    assert_eq!(fresh.manifest.total_candidates(), r.manifest.total_candidates());
    let ids = |m: &ssmmt_core::retrieval::RetrievalManifest| m.candidates().map(|c| c.image_id).collect::<Vec<_>>();
    assert_eq!(ids(&fresh.manifest), ids(&r.manifest));
}

#[test]
fn corrupt_blobs_and_manifests_are_detected() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path());
    let q = vec![QuerySet { sentence_id: 0, keywords: vec!["bat".into()] }];
    let r = build_manifest(&cache, &mut FixtureClient::new(2, 16), &q, 1).unwrap();
    let id = r.manifest.candidates().next().unwrap().image_id;
    std::fs::write(cache.blob_path(&id), b"tampered").unwrap();
    assert_eq!(cache.get_blob(&id).unwrap_err().kind, Kind::Data);
    assert!(build_manifest(&cache, &mut FixtureClient::new(2, 16), &q, 1).is_err());

    let text = String::from_utf8(std::fs::read(cache.manifest_path()).unwrap()).unwrap();
    assert!(decode_manifest(text.replace("\"version\": 1", "\"version\": 9").as_bytes()).is_err());
    assert!(decode_manifest(b"[]").is_err());
}

type Log = Rc<RefCell<Vec<String>>>;

/// Answers the search endpoint with `urls` after `failures` failed attempts.
struct Mock {
    failures: RefCell<usize>,
    urls: Vec<String>,
    log: Log,
}

impl Transport for Mock {
    fn get(&self, url: &str, query: &[(String, String)], headers: &[(String, String)]) -> Result<Vec<u8>, String> {
        self.log.borrow_mut().push(url.to_string());
        if url == "http://search" {
            assert!(headers.iter().any(|(k, v)| k == "X-Api-Key" && v == "secret"));
            assert_eq!(query[0], ("q".to_string(), "bat".to_string()));
            let mut f = self.failures.borrow_mut();
            if *f > 0 {
                *f -= 1;
                return Err("503".into());
            }
            let results: Vec<_> = self.urls.iter().map(|u| serde_json::json!({ "url": u })).collect();
            return Ok(serde_json::to_vec(&serde_json::json!({ "results": results })).unwrap());
        }
        Ok(url.as_bytes().to_vec())
    }
}

fn client(failures: usize, urls: &[&str]) -> (HttpClient, Log) {
    let log = Log::default();
    let t = Mock { failures: RefCell::new(failures), urls: urls.iter().map(|s| s.to_string()).collect(), log: log.clone() };
    (HttpClient::new("http://search", Some("secret".into()), Box::new(t)).with_backoff(Duration::from_millis(1)), log)
}

#[test]
fn http_client_retries_then_succeeds() {
    let (mut c, log) = client(2, &["http://img/1", "http://img/2", "http://img/3"]);
    let r = c.fetch("bat", 2).unwrap();
    assert_eq!(r, vec![(b"http://img/1".to_vec(), "http://img/1".to_string()), (b"http://img/2".to_vec(), "http://img/2".to_string())]);
    assert_eq!(log.borrow().iter().filter(|u| *u == "http://search").count(), 3);
    assert_eq!(c.identity(), "http:http://search");
}

#[test]
fn http_client_gives_up_after_three_attempts() {
    let (mut c, log) = client(10, &[]);
    let e = c.fetch("bat", 2).unwrap_err();
    match e {
        ssmmt_core::Error::Search { keyword, attempts, .. } => {
            assert_eq!(keyword, "bat");
            assert_eq!(attempts, ATTEMPTS);
        }
        other => panic!("{other:?}"),
    }
    assert_eq!(log.borrow().len(), 3);
}

#[test]
fn short_result_lists_are_flagged_not_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cache = Cache::new(dir.path());
    let (mut c, _) = client(0, &["http://img/1"]);
    let q = vec![QuerySet { sentence_id: 3, keywords: vec!["bat".into()] }];
    let r = build_manifest(&cache, &mut c, &q, 4).unwrap();
    assert!(r.manifest.is_short(3, "bat"));
    assert_eq!(r.total_candidates, 1);
    let back = cache.load_manifest().unwrap();
    assert!(back.is_short(3, "bat"));
}

#[test]
fn denied_network_makes_no_requests() {
    std::env::set_var(DENY_ENV, "1");
    let before = request_count();
    let mut c = HttpClient::new("http://127.0.0.1:9/search", None, Box::new(UreqTransport::new(Duration::from_secs(1))))
        .with_backoff(Duration::from_millis(1));
    assert!(c.fetch("bat", 1).is_err());
    assert_eq!(request_count(), before);
}
