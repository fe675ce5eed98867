"""Corpus BLEU and phrase-production accuracy."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

MAX_N = 4


@dataclass
class BleuReport:
    precisions: list[float]  # p1..p4
    brevity_penalty: float
    bleu: float
    bleu4_only: float  # BP * p4
    sentences: int
    candidate_length: int
    reference_length: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def format(self) -> str:
        ps = " ".join(f"p{n}={p:.4f}" for n, p in enumerate(self.precisions, 1))
        return (
            f"BLEU={self.bleu:.4f} 4gram={self.bleu4_only:.4f} BP={self.brevity_penalty:.4f} {ps} "
            f"sentences={self.sentences} c={self.candidate_length} r={self.reference_length}"
        )


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> BleuReport:
    """Unsmoothed corpus BLEU with one reference per sentence, case-folded."""
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ValueError("empty corpus")
    matched = [0] * MAX_N
    total = [0] * MAX_N
    c_len = r_len = 0
    for cand, ref in zip(candidates, references):
        cand = [t.lower() for t in cand]
        ref = [t.lower() for t in ref]
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, MAX_N + 1):
            cc, rc = _ngrams(cand, n), _ngrams(ref, n)
            matched[n - 1] += sum(min(k, rc[g]) for g, k in cc.items())
            total[n - 1] += max(len(cand) - n + 1, 0)
    precisions = [m / t if t else 0.0 for m, t in zip(matched, total)]
    if c_len == 0:
        bp = 0.0
    elif c_len < r_len:
        bp = math.exp(1.0 - r_len / c_len)
    else:
        bp = 1.0
    if min(precisions) > 0:
        bleu = bp * math.exp(sum(math.log(p) for p in precisions) / MAX_N)
    else:
        bleu = 0.0
    return BleuReport(precisions, bp, bleu, bp * precisions[-1], len(candidates), c_len, r_len)


@dataclass
class PhraseAccuracy:
    recall: float
    position_rate: float
    total: int
    oov_recall: float
    oov_position_rate: float
    oov_total: int

    def to_dict(self) -> dict:
        return asdict(self)


def _occurs(tokens: Sequence[str], phrase: Sequence[str], left: str | None, right: str | None) -> tuple[bool, bool]:
    found = placed = False
    n = len(phrase)
    for i in range(len(tokens) - n + 1):
        if list(tokens[i : i + n]) == list(phrase):
            found = True
            lt = tokens[i - 1] if i > 0 else None
            rt = tokens[i + n] if i + n < len(tokens) else None
            if lt == left and rt == right:
                placed = True
                break
    return found, placed


def phrase_accuracy(
    candidates: Sequence[Sequence[str]],
    references: Sequence[Sequence[str]],
    metadata: Sequence[Sequence[Mapping]],
) -> PhraseAccuracy:
    """Fraction of expected target phrases produced, and produced in place.

    ``metadata[i]`` lists the phrases planted in sentence i, each with a
    ``target_span`` [begin, end) into ``references[i]`` and an ``oov`` flag.
    A phrase is in place when its left and right neighbours (or sentence
    boundaries) match the reference.
    """
    if not len(candidates) == len(references) == len(metadata):
        raise ValueError("candidates, references and metadata differ in length")
    counts = Counter()
    for cand, ref, items in zip(candidates, references, metadata):
        for item in items:
            b, e = item["target_span"]
            left = ref[b - 1] if b > 0 else None
            right = ref[e] if e < len(ref) else None
            found, placed = _occurs(cand, ref[b:e], left, right)
            keys = ("all", "oov") if item.get("oov") else ("all",)
            for k in keys:
                counts[k, "n"] += 1
                counts[k, "found"] += found
                counts[k, "placed"] += placed

    def rate(k, what):
        return counts[k, what] / counts[k, "n"] if counts[k, "n"] else 0.0

    return PhraseAccuracy(
        rate("all", "found"), rate("all", "placed"), counts["all", "n"],
        rate("oov", "found"), rate("oov", "placed"), counts["oov", "n"],
    )
