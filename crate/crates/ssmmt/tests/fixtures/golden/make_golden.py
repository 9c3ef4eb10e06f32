"""Regenerates golden.json from the text fixtures with a standalone BLEU."""
import json
import math
from collections import Counter

EPS = 1e-9


def lines(name):
    with open(name) as f:
        return [l.split() for l in f.read().splitlines()]


def ngrams(toks, n):
    return Counter(tuple(toks[i:i + n]) for i in range(len(toks) - n + 1))


def bleu(hyps, refs, max_n=4):
    match = [0] * max_n
    total = [0] * max_n
    ref_total = [0] * max_n
    c = sum(len(h) for h in hyps)
    r = sum(len(x) for x in refs)
    for h, x in zip(hyps, refs):
        for n in range(1, max_n + 1):
            hc, rc = ngrams(h, n), ngrams(x, n)
            match[n - 1] += sum(min(k, rc[g]) for g, k in hc.items())
            total[n - 1] += max(len(h) - n + 1, 0)
            ref_total[n - 1] += max(len(x) - n + 1, 0)
    logs = []
    for m, t, rt in zip(match, total, ref_total):
        if t == 0 and rt == 0:
            continue
        logs.append(math.log((m if m else EPS) / max(t, 1)))
    bp = 0.0 if c == 0 else (math.exp(1 - r / c) if c < r else 1.0)
    score = 100 * bp * math.exp(sum(logs) / len(logs)) if logs else 0.0
    return {
        "bleu": score,
        "precisions": [m / t if t else 0.0 for m, t in zip(match, total)],
        "brevity_penalty": bp,
        "hyp_len": c,
        "ref_len": r,
    }


def sense(hyps, key):
    ok = sum(1 for h, k in zip(hyps, key) if k["correct"] in h and k["wrong"] not in h)
    return ok / len(key)


refs = lines("reference.txt")
base = lines("baseline.txt")
system = lines("system.txt")
with open("answer_key.jsonl") as f:
    key = [json.loads(l) for l in f if l.strip()]
b, s = bleu(base, refs), bleu(system, refs)
out = {
    "baseline": b,
    "system": s,
    "delta": s["bleu"] - b["bleu"],
    "sense_accuracy": {"baseline": sense(base, key), "system": sense(system, key)},
}
with open("golden.json", "w") as f:
    json.dump(out, f, indent=2)
    f.write("\n")
