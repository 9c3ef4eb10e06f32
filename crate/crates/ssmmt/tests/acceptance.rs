//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints exactly one PASS or FAIL line; exits non-zero if any fails.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ssmmt::config::RunConfig;
use ssmmt::formats::checkpoint::Checkpoint;
use ssmmt::formats::{features, jsonl};
use ssmmt::cache::Cache;
use ssmmt::pipeline::{self, Data, Report};
use ssmmt_core::corpus::{tokenize, Sentence};
use ssmmt_core::eval::{bleu, SMOOTHING_EPS};
use ssmmt_core::features::FeatureStore;
use ssmmt_core::matcher::{auc, init_matcher, label, train_matcher, MatchExample, MatcherConfig, PairData};
use ssmmt_core::nnet::gradcheck::run_suite;
use ssmmt_core::rng::{substream, RngExt};
use ssmmt_core::translator::{translate, translation_logits, translation_loss, Example, Fusion};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

type Check = Result<Outcome, String>;

fn e(x: impl std::fmt::Display) -> String {
    x.to_string()
}

fn gradient_suite() -> Check {
    let t = Instant::now();
    let results = run_suite(&[1, 2, 3], 20).map_err(e)?;
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let ops: std::collections::BTreeSet<_> = results.iter().map(|r| r.op).collect();
    let secs = t.elapsed().as_secs_f64();
    let pass = worst <= 1e-4 && secs < 120.0 && results.iter().all(|r| r.checked > 0);
    Ok(outcome(pass, format!("{} ops x 20 shapes x 3 seeds, worst relative error {worst:.2e}, {secs:.1} s", ops.len())))
}

fn labeling_rule() -> Check {
    const WORDS: [&str; 14] =
        ["the", "police", "were", "raiding", "building", ".", "griffen", "hielt", "bank", "bat", "near", "river", "a", "crane"];
    let fig = Sentence::from_text(0, "the police were raiding the building .").map_err(e)?;
    let mut total = 0usize;
    for (kw, want) in [("raiding", 1), ("hielt", 0)] {
        total += 1;
        if label(kw, &fig) != want {
            return Ok(outcome(false, format!("{kw:?} labeled {} in the reference sentence", label(kw, &fig))));
        }
    }
    let mut rng = substream(4, "acceptance/labels");
    for i in 0..10_000u64 {
        let n = 1 + rng.below(9);
        let toks: Vec<String> = (0..n).map(|_| WORDS[rng.below(WORDS.len())].to_string()).collect();
        let s = Sentence::new(i, toks.clone()).map_err(e)?;
        let kw = WORDS[rng.below(WORDS.len())];
        total += 1;
        if label(kw, &s) != u8::from(toks.iter().any(|t| t == kw)) {
            return Ok(outcome(false, format!("disagreement on {kw:?} in {toks:?}")));
        }
    }
    Ok(outcome(true, format!("{total}/{total} pairs agree with set membership, including the raiding positive and a negative")))
}

/// Held-out AUC of an L2-regularized logistic regression on
/// `bag_of_words(sentence) (x) image_feature`, fit by full-batch gradient descent.
fn logistic_oracle(train: &[MatchExample], heldout: &[MatchExample], data: &Data, store: &FeatureStore) -> Result<f64, String> {
    let v = data.vocab.len();
    let d = store.dim();
    let phi = |p: &MatchExample| -> Result<Vec<f64>, String> {
        let f = store.get(&p.image_id).ok_or("missing feature")?;
        let mut bow = vec![0.0; v];
        for &t in &data.src[&p.sentence_id] {
            bow[t as usize] = 1.0;
        }
        let mut x = Vec::with_capacity(v * d + 1);
        for b in &bow {
            x.extend(f.iter().map(|&fi| b * f64::from(fi)));
        }
        x.push(1.0);
        Ok(x)
    };
    let xs: Vec<Vec<f64>> = train.iter().map(phi).collect::<Result<_, _>>()?;
    let ys: Vec<f64> = train.iter().map(|p| f64::from(p.label)).collect();
    let dim = v * d + 1;
    let mut w = vec![0.0; dim];
    let (lr, l2) = (0.5, 1e-4);
    for _ in 0..400 {
        let mut g = vec![0.0; dim];
        for (x, y) in xs.iter().zip(&ys) {
            let z: f64 = x.iter().zip(&w).map(|(a, b)| a * b).sum();
            let r = 1.0 / (1.0 + (-z).exp()) - y;
            for (gi, xi) in g.iter_mut().zip(x) {
                *gi += r * xi;
            }
        }
        for (wi, gi) in w.iter_mut().zip(&g) {
            *wi -= lr * (gi / xs.len() as f64 + l2 * *wi);
        }
    }
    let scores: Vec<f64> =
        heldout.iter().map(|p| phi(p).map(|x| x.iter().zip(&w).map(|(a, b)| a * b).sum())).collect::<Result<_, _>>()?;
    let labels: Vec<u8> = heldout.iter().map(|p| p.label).collect();
    auc(&scores, &labels).map_err(e)
}

fn matcher_learnability(run: &Run) -> Check {
    let cfg = &run.config;
    let data = Data::load(cfg).map_err(e)?;
    let store = features::load(&cfg.features_path()).map_err(e)?;
    let train = jsonl::read_pairs(&cfg.pairs_path("train")).map_err(e)?;
    let heldout = jsonl::read_pairs(&cfg.pairs_path("heldout")).map_err(e)?;
    let mc = MatcherConfig {
        model: data.model(cfg),
        d_match: cfg.matcher.d_match,
        epochs: cfg.matcher.epochs,
        lr: cfg.matcher.lr,
        batch_size: cfg.matcher.batch_size,
        freeze_encoder: cfg.matcher.freeze_encoder,
        seed: cfg.seed,
    };
    let t = Instant::now();
    let pd = PairData { sentences: &data.src, features: &store };
    let (_, log) = train_matcher(&mc, init_matcher(&mc), &train, &heldout, &pd).map_err(e)?;
    let secs = t.elapsed().as_secs_f64();
    let aucs: Vec<f64> = log.iter().filter_map(|l| l.heldout_auc).collect();
    let first = aucs.iter().position(|&a| a >= 0.95);
    let last = aucs.last().copied().unwrap_or(0.0);
    let logged: Vec<serde_json::Value> = jsonl::read(&cfg.log_path("matcher")).map_err(e)?;
    let consistent = logged.last().and_then(|l| l["heldout_auc"].as_f64()) == Some(last);
    let oracle = logistic_oracle(&train, &heldout, &data, &store)?;
    let pass = first.is_some() && mc.epochs <= 20 && last >= 0.95 && oracle >= 0.95 && secs < 180.0 && consistent;
    Ok(outcome(
        pass,
        format!(
            "matcher AUC {last:.3} after {} epochs (first >= 0.95 at epoch {}), logistic oracle AUC {oracle:.3}, {} train / {} held-out pairs, {secs:.1} s",
            mc.epochs,
            first.map_or("never".into(), |f| (f + 1).to_string()),
            train.len(),
            heldout.len()
        ),
    ))
}

fn concentration(report: &Report) -> Check {
    let c = &report.concentration;
    let ln5 = 5f64.ln();
    let hit = c.argmax_planted_rate.ok_or("no answer key in report")?;
    let pass = hit >= 0.9 && c.mean_entropy <= 0.5 * ln5 && c.untrained_mean_entropy >= 0.9 * ln5 && (c.ln_k - ln5).abs() < 1e-12;
    Ok(outcome(
        pass,
        format!(
            "planted argmax {:.1}% of {} sentences, mean entropy {:.3} (bound {:.3}), untrained {:.3} (bound {:.3})",
            100.0 * hit,
            c.sentences,
            c.mean_entropy,
            0.5 * ln5,
            c.untrained_mean_entropy,
            0.9 * ln5
        ),
    ))
}

fn translation_contrast(run: &Run) -> Check {
    let r = &run.report.comparison;
    let s = r.sense_accuracy.as_ref().ok_or("no sense accuracy in report")?;
    let secs = run.elapsed.as_secs_f64();
    let pass = r.delta >= 5.0 && s.system >= 0.85 && s.baseline <= 0.65 && secs < 600.0;
    Ok(outcome(
        pass,
        format!(
            "BLEU {:.2} vs baseline {:.2} (delta {:+.2}), sense accuracy {:.3} vs {:.3}, full e2e {secs:.0} s",
            r.system.bleu, r.baseline.bleu, r.delta, s.system, s.baseline
        ),
    ))
}

fn ablation(report: &Report) -> Check {
    let a = &report.ablation;
    let sys = report.comparison.system.bleu;
    Ok(outcome(
        a.bleu < sys,
        format!(
            "uniform weights BLEU {:.2} vs learned {:.2} (gap {:+.2}); system decoded with uniform contexts {:.2}",
            a.bleu, sys, a.gap, a.test_time_uniform_bleu
        ),
    ))
}

fn gate_closed(run: &Run) -> Check {
    let cfg = &run.config;
    let data = Data::load(cfg).map_err(e)?;
    let model = data.model(cfg);
    let ck = Checkpoint::load_kind(&cfg.checkpoint_path("system"), "translator").map_err(e)?;
    let contexts = ssmmt::formats::context::load(&cfg.contexts_path(cfg.filter.weighting)).map_err(e)?.1;
    let ctx: BTreeMap<u64, _> = contexts.into_iter().map(|c| (c.sentence_id, c)).collect();
    let ids: std::collections::BTreeSet<u64> = data.src.keys().copied().collect();
    let examples: Vec<Example> = data.examples(&ids, &ctx);
    let mut rng = substream(cfg.seed, "acceptance/gate");
    let mut open_differs = 0;
    for batch in 0..50 {
        let n = 1 + rng.below(8);
        let items: Vec<Example> = (0..n).map(|_| examples[rng.below(examples.len())].clone()).collect();
        let p = &ck.params;
        let l_off = translation_loss(&model, p, &items, Fusion::Off).map_err(e)?;
        let l_closed = translation_loss(&model, p, &items, Fusion::Closed).map_err(e)?;
        let g_off = translation_logits(&model, p, &items, Fusion::Off).map_err(e)?;
        let g_closed = translation_logits(&model, p, &items, Fusion::Closed).map_err(e)?;
        if l_off.to_bits() != l_closed.to_bits() || g_off.data().iter().zip(g_closed.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            return Ok(outcome(false, format!("batch {batch}: loss or logits differ")));
        }
        let x = &items[0];
        let a = translate(&model, p, &x.src, x.visual.as_deref(), Fusion::Off, cfg.translator.beam, cfg.translator.max_len).map_err(e)?;
        let b = translate(&model, p, &x.src, x.visual.as_deref(), Fusion::Closed, cfg.translator.beam, cfg.translator.max_len).map_err(e)?;
        if a != b || a.log_prob.to_bits() != b.log_prob.to_bits() {
            return Ok(outcome(false, format!("batch {batch}: decoded output differs")));
        }
        let l_on = translation_loss(&model, p, &items, Fusion::On).map_err(e)?;
        open_differs += usize::from(l_on != l_off);
    }
    Ok(outcome(true, format!("50/50 batches bit-identical in loss, logits and beam output; open gate changes the loss in {open_differs}/50")))
}

fn bleu_oracle() -> Check {
    let t = |s: &str| tokenize(s);
        let b3 = bleu(&[t("the cat sat")], &[t("the cat sat down")], 3).map_err(e)?;
    let b4 = bleu(&[t("the cat sat")], &[t("the cat sat down")], 4).map_err(e)?;
    let aaa = bleu(&[t("a a a")], &[t("a b c")], 4).map_err(e)?;
    let bp = (1.0f64 - 4.0 / 3.0).exp();
    let want_b3 = 100.0 * bp;
    let want_b4 = 100.0 * bp * SMOOTHING_EPS.powf(0.25);
    let want_aaa = 100.0 * (((1.0f64 / 3.0).ln() + (SMOOTHING_EPS / 2.0).ln() + SMOOTHING_EPS.ln()) / 3.0).exp();
    let examples_ok = (b3.bleu - want_b3).abs() <= 1e-6
        && (b3.bleu - 71.6531).abs() < 1e-4
        && (b3.brevity_penalty - 0.716531).abs() < 1e-6
        && (b4.bleu - want_b4).abs() <= 1e-6
        && (aaa.precisions[0] - 1.0 / 3.0).abs() <= 1e-6
        && (aaa.bleu - want_aaa).abs() <= 1e-6
        && aaa.bleu < 1.0;
    let mut rng = substream(8, "acceptance/bleu");
    let mut perfect = 0;
    for _ in 0..100 {
        let n = 1 + rng.below(10);
        let corpus: Vec<Vec<u32>> = (0..n).map(|_| (0..1 + rng.below(12)).map(|_| rng.below(20) as u32).collect()).collect();
        if (bleu(&corpus, &corpus, 4).map_err(e)?.bleu - 100.0).abs() < 1e-9 {
            perfect += 1;
        }
    }
    Ok(outcome(
        examples_ok && perfect == 100,
        format!("BLEU-3 {:.4}, smoothed BLEU-4 {:.3e}, \"a a a\" {:.3e}; bleu(h,h)=100 on {perfect}/100 corpora", b3.bleu, b4.bleu, aaa.bleu),
    ))
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir).map(|r| r.filter_map(|e| e.ok().map(|e| e.path())).collect()).unwrap_or_default();
    v.sort();
    v
}

fn determinism(a: &Run, b: &Run) -> Check {
    let ca = files(&a.config.paths.work.join("checkpoints"));
    let cb = files(&b.config.paths.work.join("checkpoints"));
    if ca.len() != cb.len() || ca.is_empty() {
        return Ok(outcome(false, format!("{} vs {} checkpoints", ca.len(), cb.len())));
    }
    for (x, y) in ca.iter().zip(&cb) {
        if x.file_name() != y.file_name() || std::fs::read(x).map_err(e)? != std::fs::read(y).map_err(e)? {
            return Ok(outcome(false, format!("{} differs", x.display())));
        }
    }
    let ra = std::fs::read(a.config.report_path()).map_err(e)?;
    let rb = std::fs::read(b.config.report_path()).map_err(e)?;
    Ok(outcome(ra == rb, format!("{} checkpoints and report JSON ({} bytes) byte-identical across two runs", ca.len(), ra.len())))
}

fn hermeticity(runs: &[&Run], scratch: &Path) -> Check {
    let mut pass = runs.iter().all(|r| r.exit_ok);
    let mut reference = None;
    for r in runs {
        let m = Cache::new(r.config.cache_dir()).load_manifest().map_err(e)?;
        pass &= m.client.starts_with("fixture:");
        reference.get_or_insert(m);
    }
    let mut cfg = runs[0].config.clone();
    cfg.paths.cache = Some(scratch.join("fresh-cache"));
    let summary = pipeline::retrieve(&cfg).map_err(e)?;
    let mut fresh = Cache::new(cfg.cache_dir()).load_manifest().map_err(e)?;
    let mut reference = reference.ok_or("no runs")?;
    fresh.created.clear();
    reference.created.clear();
    let requests = ssmmt::http::request_count();
    pass &= requests == 0 && summary.client_calls > 0 && fresh == reference;
    let how = if runs.iter().all(|r| matches!(r.sandbox, Sandbox::Namespace(_))) {
        "inside an empty network namespace"
    } else {
        "with HTTP disabled via SSMMT_DENY_NETWORK (no network namespace available)"
    };
    Ok(outcome(
        pass,
        format!(
            "{} e2e runs completed {how} with the fixture client; an in-process rebuild made {} fixture calls and {requests} HTTP requests, identical manifest",
            runs.len(),
            summary.client_calls
        ),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Sandbox {
    Namespace(&'static str),
    EnvOnly,
}

struct Run {
    config: RunConfig,
    report: Report,
    elapsed: Duration,
    exit_ok: bool,
    sandbox: Sandbox,
}

/// `unshare` flags that can start the binary in a fresh network namespace.
fn namespace_flags(bin: &str) -> Option<&'static str> {
    ["-n", "-rn"].into_iter().find(|f| {
        Command::new("unshare").args([f, bin, "--version"]).output().map(|o| o.status.success()).unwrap_or(false)
    })
}

fn e2e(work: &Path, sandbox: Sandbox) -> Result<Run, String> {
    let bin = env!("CARGO_BIN_EXE_ssmmt");
    let mut cmd = match sandbox {
        Sandbox::Namespace(flags) => {
            let mut c = Command::new("unshare");
            c.args([flags, bin]);
            c
        }
        Sandbox::EnvOnly => {
            let mut c = Command::new(bin);
            c.env("SSMMT_DENY_NETWORK", "1");
            c
        }
    };
    cmd.args(["e2e", "--quiet", "--seed", "13", "--work"]).arg(work).env_remove("SSMMT_SEARCH_KEY");
    let t = Instant::now();
    let out = cmd.output().map_err(e)?;
    let elapsed = t.elapsed();
    if !out.status.success() {
        return Err(format!("e2e failed: {}", String::from_utf8_lossy(&out.stderr)));
    }
    let config = RunConfig::load(Some(&work.join("config.json")), &[]).map_err(e)?;
    let report: Report = serde_json::from_slice(&std::fs::read(config.report_path()).map_err(e)?).map_err(e)?;
    Ok(Run { config, report, elapsed, exit_ok: out.status.success(), sandbox })
}

fn print(n: usize, name: &str, r: &Check) -> bool {
    let (tag, detail) = match r {
        Ok(o) => (if o.pass { "PASS" } else { "FAIL" }, o.detail.clone()),
        Err(msg) => ("FAIL", format!("error: {msg}")),
    };
    println!("criterion {n:>2} [{tag}] {name}: {detail}");
    tag == "PASS"
}

fn main() {
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let mut ok = true;
    ok &= print(1, "gradient suite", &gradient_suite());
    ok &= print(2, "labeling rule", &labeling_rule());
    ok &= print(8, "BLEU oracle", &bleu_oracle());

    let tmp = tempfile::tempdir().expect("temp dir");
    let sandbox = namespace_flags(env!("CARGO_BIN_EXE_ssmmt")).map_or(Sandbox::EnvOnly, Sandbox::Namespace);
    let a = e2e(&tmp.path().join("run-a"), sandbox);
    let b = e2e(&tmp.path().join("run-b"), sandbox);
    match (&a, &b) {
        (Ok(a), Ok(b)) => {
            ok &= print(3, "matcher learnability", &matcher_learnability(a));
            ok &= print(4, "concentration", &concentration(&a.report));
            ok &= print(5, "translation contrast", &translation_contrast(a));
            ok &= print(6, "ablation", &ablation(&a.report));
            ok &= print(7, "gate-closed equivalence", &gate_closed(a));
            ok &= print(9, "determinism", &determinism(a, b));
            ok &= print(10, "retrieval hermeticity", &hermeticity(&[a, b], tmp.path()));
        }
        _ => {
            let msg = [&a, &b].iter().find_map(|r| r.as_ref().err().cloned()).unwrap_or_default();
            for (n, name) in [(3, "matcher learnability"), (4, "concentration"), (5, "translation contrast"), (6, "ablation"), (7, "gate-closed equivalence"), (9, "determinism"), (10, "retrieval hermeticity")] {
                ok &= print(n, name, &Err(msg.clone()));
            }
        }
    }
    if !ok {
        std::process::exit(1);
    }
}
