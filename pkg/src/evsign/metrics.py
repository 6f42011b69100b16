"""Recognition and translation evaluation: WER, corpus BLEU, ROUGE-L.

Tokens are opaque hashables (strings or ints); annotation files arrive
pre-tokenized, so no tokenization happens here. BLEU is reported on the
0-100 scale, ROUGE-L in [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class WerBreakdown:
    wer: float
    n_sub: int
    n_ins: int
    n_del: int
    n_ref: int

    def to_dict(self) -> dict:
        return {"wer": self.wer, "n_sub": self.n_sub, "n_ins": self.n_ins,
                "n_del": self.n_del, "n_ref": self.n_ref}


def wer(ref: list, hyp: list) -> WerBreakdown:
    """Levenshtein alignment with unit costs and a fixed-tie-break
    traceback (match > substitution > deletion > insertion)."""
    if not ref:
        raise ValueError("reference must be non-empty")
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            same = ref[i - 1] == hyp[j - 1]
            d[i, j] = min(d[i - 1, j - 1] + (0 if same else 1),
                          d[i - 1, j] + 1,
                          d[i, j - 1] + 1)
    n_sub = n_ins = n_del = 0
    i, j = n, m
    while i > 0 or j > 0:
        if i > 0 and j > 0 and ref[i - 1] == hyp[j - 1] and \
                d[i, j] == d[i - 1, j - 1]:
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + 1:
            n_sub += 1
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            n_del += 1
            i -= 1
        else:
            n_ins += 1
            j -= 1
    return WerBreakdown((n_sub + n_ins + n_del) / n, n_sub, n_ins, n_del, n)


def _ngram_counts(tokens: list, order: int) -> dict:
    counts: dict = {}
    for i in range(len(tokens) - order + 1):
        key = tuple(tokens[i:i + order])
        counts[key] = counts.get(key, 0) + 1
    return counts


def bleu(refs: list[list], hyps: list[list], max_n: int = 4) -> list[float]:
    """Corpus BLEU-1..max_n: clipped modified n-gram precision, geometric
    mean, brevity penalty exp(1 - r/c) for c <= r. Any zero precision at
    an order zeroes that BLEU-n (no smoothing). Scale 0-100."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must pair up")
    if not refs:
        raise ValueError("empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    ref_len = 0
    hyp_len = 0
    for ref, hyp in zip(refs, hyps):
        ref_len += len(ref)
        hyp_len += len(hyp)
        for order in range(1, max_n + 1):
            rc = _ngram_counts(ref, order)
            hc = _ngram_counts(hyp, order)
            totals[order - 1] += max(0, len(hyp) - order + 1)
            matches[order - 1] += sum(min(c, rc.get(g, 0)) for g, c in hc.items())
    if hyp_len == 0:
        return [0.0] * max_n
    bp = 1.0 if hyp_len > ref_len else float(np.exp(1.0 - ref_len / hyp_len))
    precisions = [matches[k] / totals[k] if totals[k] else 0.0
                  for k in range(max_n)]
    scores = []
    for order in range(1, max_n + 1):
        if any(precisions[k] == 0.0 for k in range(order)):
            scores.append(0.0)
            continue
        log_mean = sum(np.log(precisions[k]) for k in range(order)) / order
        scores.append(100.0 * bp * float(np.exp(log_mean)))
    return scores


def _lcs_len(a: list, b: list) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(refs: list[list], hyps: list[list], beta: float = 1.0) -> float:
    """Mean LCS F-score over pairs: F = (1+b^2)RP / (R + b^2 P)."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must pair up")
    if not refs:
        raise ValueError("empty corpus")
    scores = []
    for ref, hyp in zip(refs, hyps):
        if not ref:
            raise ValueError("reference must be non-empty")
        if not hyp:
            scores.append(0.0)
            continue
        lcs = _lcs_len(ref, hyp)
        if lcs == 0:
            scores.append(0.0)
            continue
        recall = lcs / len(ref)
        precision = lcs / len(hyp)
        b2 = beta * beta
        scores.append((1 + b2) * recall * precision / (recall + b2 * precision))
    return float(np.mean(scores))


@dataclass
class ClipScore:
    clip_id: str
    gloss_ref: list
    gloss_hyp: list
    wer: WerBreakdown
    text_ref: list | None = None
    text_hyp: list | None = None

    def to_dict(self) -> dict:
        row = {"clip_id": self.clip_id,
               "gloss_ref": list(self.gloss_ref),
               "gloss_hyp": list(self.gloss_hyp),
               "wer": self.wer.to_dict()}
        if self.text_ref is not None:
            row["text_ref"] = list(self.text_ref)
            row["text_hyp"] = list(self.text_hyp or [])
        return row


@dataclass
class ScoreReport:
    split: str
    n_clips: int
    wer: float
    wer_breakdown: dict
    wer_macro: float
    bleu: list[float] = field(default_factory=lambda: [0.0] * 4)
    rouge_l: float = 0.0

    def to_dict(self) -> dict:
        return {"split": self.split, "n_clips": self.n_clips, "wer": self.wer,
                "wer_breakdown": dict(self.wer_breakdown),
                "wer_macro": self.wer_macro,
                "bleu": list(self.bleu), "rouge_l": self.rouge_l}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ScoreReport":
        d = json.loads(text)
        return ScoreReport(d["split"], d["n_clips"], d["wer"],
                           d["wer_breakdown"], d["wer_macro"], d["bleu"],
                           d["rouge_l"])


def aggregate(split: str, rows: list[ClipScore],
              with_translation: bool = False) -> ScoreReport:
    """Micro-averaged WER (total edits / total reference tokens), corpus
    BLEU, mean ROUGE-L; per-clip macro WER kept for diagnostics."""
    if not rows:
        raise ValueError("empty split")
    n_sub = sum(r.wer.n_sub for r in rows)
    n_ins = sum(r.wer.n_ins for r in rows)
    n_del = sum(r.wer.n_del for r in rows)
    n_ref = sum(r.wer.n_ref for r in rows)
    micro = (n_sub + n_ins + n_del) / n_ref
    macro = float(np.mean([r.wer.wer for r in rows]))
    report = ScoreReport(split, len(rows), micro,
                         {"n_sub": n_sub, "n_ins": n_ins, "n_del": n_del,
                          "n_ref": n_ref},
                         macro)
    if with_translation:
        refs = [r.text_ref or [] for r in rows]
        hyps = [r.text_hyp or [] for r in rows]
        report.bleu = bleu(refs, hyps)
        report.rouge_l = rouge_l(refs, hyps)
    return report
