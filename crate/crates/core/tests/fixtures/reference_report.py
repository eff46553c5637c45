#!/usr/bin/env python3
"""Compute the expected evaluation report for golden_config.json from scratch.

Shares no code with the library: planner-output normalization, BM25, the
dependent persona-then-documents retrieval, BLEU-1, Rouge-L, the lexical
entailment rule and the calibrated consistency means are all written out here
from their definitions. Writes golden_report.json.
"""
import json
import math
import os
import re

HERE = os.path.dirname(os.path.abspath(__file__))


def load_jsonl(name):
    with open(os.path.join(HERE, name)) as f:
        return [json.loads(line) for line in f if line.strip()]


def fsum_left(values):
    total = 0.0
    for v in values:
        total += v
    return total


def fmean(values):
    return fsum_left(values) / len(values) if values else 0.0


def longest_prefix(replay, prompt):
    best = None
    for key, value in replay.items():
        if prompt.startswith(key) and (best is None or len(key) > len(best[0])):
            best = (key, value)
    if best is None:
        raise KeyError(prompt[:60])
    return best[1]


def parse_plan(raw):
    m = re.search(r"\[SOURCE\](.*?)(\[EOS\]|$)", raw, re.S)
    span = m.group(1) if m else raw
    words = [w.upper() for w in re.split(r"[^A-Za-z0-9_]+", span) if w]
    has_p = "PERSONA" in words
    has_d = "DOCUMENTS" in words
    if has_d and not has_p:
        return "NULL"
    if has_p and has_d:
        return "BOTH"
    if has_p:
        return "PERSONA"
    return "NULL"


def bm25_rank(texts, query, k1=1.2, b=0.75):
    docs = [t.split() for t in texts]
    n = len(docs)
    avg = sum(len(d) for d in docs) / n
    scores = []
    for d in docs:
        s = 0.0
        for term in query.split():
            df = sum(1 for other in docs if term in other)
            if df == 0 or term not in d:
                continue
            idf = math.log((n - df + 0.5) / (df + 0.5) + 1.0)
            tf = d.count(term)
            s += idf * tf * (k1 + 1.0) / (tf + k1 * (1.0 - b + b * len(d) / avg))
        scores.append(s)
    order = sorted((i for i in range(n) if scores[i] > 0), key=lambda i: (-scores[i], i))
    return order


def bleu1(cand, ref):
    c, r = cand.split(), ref.split()
    if not c:
        return 0.0
    clipped = 0
    for tok in set(c):
        clipped += min(c.count(tok), r.count(tok))
    bp = min(1.0, math.exp(1.0 - len(r) / len(c)))
    return clipped / len(c) * bp


def lcs(a, b):
    table = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            if a[i - 1] == b[j - 1]:
                table[i][j] = table[i - 1][j - 1] + 1
            else:
                table[i][j] = max(table[i - 1][j], table[i][j - 1])
    return table[-1][-1]


def rouge_l(cand, ref, beta):
    c, r = cand.split(), ref.split()
    if not c or not r:
        return 0.0
    l = lcs(c, r)
    p, rec = l / len(c), l / len(r)
    if rec + beta * beta * p == 0:
        return 0.0
    return (1 + beta * beta) * p * rec / (rec + beta * beta * p)


def entails(response, grounding, stopwords, threshold):
    have = set(response.split())
    want = []
    for t in grounding.split():
        if t not in stopwords and t not in want:
            want.append(t)
    if not want:
        return False
    return sum(1 for t in want if t in have) >= threshold * len(want)


def consistency(gold_text, used, stopwords, threshold, response):
    if gold_text is not None and used:
        return 1.0 if entails(response, gold_text, stopwords, threshold) else 0.0
    if gold_text is None and not used:
        return 1.0
    return 0.0


def main():
    with open(os.path.join(HERE, "golden_config.json")) as f:
        cfg = json.load(f)
    dialogues = load_jsonl(cfg["dataset_path"])
    replay = {r["prompt_key"]: r["response"] for r in load_jsonl(cfg["backend"]["replay_path"])}
    with open(os.path.join(HERE, cfg["judge"]["stopwords_path"])) as f:
        stopwords = {line.strip() for line in f if line.strip()}
    threshold = cfg["judge"]["threshold"]
    window = cfg["retrieval"]["context_window_turns"]
    beta = 1.2

    pairs, responses, bleu, rouge, pc, kc = [], [], [], [], [], []
    hits = {"PERSONA": [0, 0], "DOCUMENTS": [0, 0]}
    for d in dialogues:
        turns = d["turns"]
        for i, turn in enumerate(turns):
            if turn["speaker"] != "SYSTEM":
                continue
            ctx = turns[:i]
            transcript = "\n".join(("User: " if t["speaker"] == "USER" else "System: ") + t["text"] for t in ctx)
            g = turn["grounding"]
            gold = {0: "NULL", 1: "PERSONA", 2: "BOTH"}[len(g["sources"])]
            pred = parse_plan(longest_prefix(replay, "Dialogue:\n" + transcript + "\n\n"))
            response = longest_prefix(replay, "The dialogue is as follows:\n" + transcript + "\n\n")
            pairs.append((gold, pred))
            responses.append(response)
            bleu.append(bleu1(response, turn["text"]))
            rouge.append(rouge_l(response, turn["text"], beta))

            query = " ".join(t["text"] for t in ctx[-window:])
            if gold != "NULL":
                hits["PERSONA"][1] += 1
                ranked = bm25_rank(d["persona"], query)
                top = ranked[0] if ranked else None
                hits["PERSONA"][0] += int(top == g["persona_index"])
                if gold == "BOTH":
                    hits["DOCUMENTS"][1] += 1
                    if top is not None:
                        docs = bm25_rank(d["documents"][top], query)
                        ok = bool(docs) and top == g["persona_index"] and docs[0] in g["knowledge_indices"]
                        hits["DOCUMENTS"][0] += int(ok)

            gold_p = d["persona"][g["persona_index"]] if gold != "NULL" else None
            gold_k = (
                " ".join(d["documents"][g["persona_index"]][k] for k in g["knowledge_indices"])
                if gold == "BOTH"
                else None
            )
            pc.append(consistency(gold_p, pred != "NULL", stopwords, threshold, response))
            kc.append(consistency(gold_k, pred == "BOTH", stopwords, threshold, response))

    f1 = {}
    for c in ["NULL", "PERSONA", "BOTH"]:
        tp = sum(1 for g, p in pairs if g == c and p == c)
        predicted = sum(1 for _, p in pairs if p == c)
        gold_n = sum(1 for g, _ in pairs if g == c)
        prec = tp / predicted if predicted else 0.0
        rec = tp / gold_n if gold_n else 0.0
        f1[c] = {
            "f1": 2.0 * prec * rec / (prec + rec) if prec + rec else 0.0,
            "predicted": predicted,
            "gold": gold_n,
        }
    report = {
        "m": len(pairs),
        "errors": 0,
        "f1_per_class": f1,
        "recall_at_1": {s: hits[s][0] / hits[s][1] for s in ["DOCUMENTS", "PERSONA"] if hits[s][1]},
        "recall_eligible": {s: hits[s][1] for s in ["DOCUMENTS", "PERSONA"] if hits[s][1]},
        "bleu1": fmean(bleu),
        "rouge_l": fmean(rouge),
        "pc": fmean(pc),
        "kc": fmean(kc),
        "empty_candidates": sum(1 for r in responses if not r.split()),
    }
    with open(os.path.join(HERE, "golden_report.json"), "w") as f:
        f.write(json.dumps(report, indent=2) + "\n")


if __name__ == "__main__":
    main()
