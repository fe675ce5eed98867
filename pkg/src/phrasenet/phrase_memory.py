"""Symbolic phrase memory: rule table, source matching and sentence annotation."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

DEFAULT_N_P = 10


class PhraseTableError(ValueError):
    """Malformed phrase table file."""


@dataclass(frozen=True)
class Rule:
    id: int
    source_tokens: tuple[str, ...]
    target_tokens: tuple[str, ...]

    def __post_init__(self):
        if not self.source_tokens or not self.target_tokens:
            raise ValueError("rule sides must be non-empty")
        for tok in self.source_tokens + self.target_tokens:
            if not tok or any(ch.isspace() for ch in tok):
                raise ValueError(f"invalid token {tok!r}")


class PhraseTable:
    """Immutable list of rules with a first-token index.

    Each source phrase has exactly one translation; later duplicates are
    dropped with a warning.
    """

    def __init__(self, pairs: Iterable[tuple[Sequence[str], Sequence[str]]] = ()):
        rules: list[Rule] = []
        seen: dict[tuple[str, ...], int] = {}
        for src, tgt in pairs:
            src, tgt = tuple(src), tuple(tgt)
            if src in seen:
                logger.warning("duplicate source phrase %r ignored (keeping rule %d)", " ".join(src), seen[src])
                continue
            seen[src] = len(rules)
            rules.append(Rule(len(rules), src, tgt))
        self.rules: tuple[Rule, ...] = tuple(rules)
        index: dict[str, list[int]] = defaultdict(list)
        for rule in self.rules:
            index[rule.source_tokens[0]].append(rule.id)
        self.index: dict[str, tuple[int, ...]] = {k: tuple(v) for k, v in index.items()}

    def __len__(self) -> int:
        return len(self.rules)

    def __getitem__(self, rule_id: int) -> Rule:
        return self.rules[rule_id]

    def __iter__(self):
        return iter(self.rules)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for rule in self.rules:
                fh.write(" ".join(rule.source_tokens) + "\t" + " ".join(rule.target_tokens) + "\n")


def load_table(path) -> PhraseTable:
    """Read ``source<TAB>target`` lines; ``#`` starts a comment line."""
    pairs = []
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "\t" not in line:
            raise PhraseTableError(f"{path}:{lineno}: missing TAB separator")
        src, _, tgt = line.partition("\t")
        src_toks, tgt_toks = src.split(), tgt.split()
        if not src_toks or not tgt_toks:
            raise PhraseTableError(f"{path}:{lineno}: empty source or target phrase")
        pairs.append((src_toks, tgt_toks))
    return PhraseTable(pairs)


# ------------------------------------------------------------------ matching


@dataclass(frozen=True, order=True)
class Match:
    begin: int
    end: int
    rule_id: int

    @property
    def length(self) -> int:
        return self.end - self.begin

    def overlaps(self, other: "Match") -> bool:
        return self.begin < other.end and other.begin < self.end


def match_all(table: PhraseTable, sentence: Sequence[str]) -> list[Match]:
    """Every occurrence of every rule's source phrase, by (begin, longer first)."""
    out = []
    n = len(sentence)
    for i, tok in enumerate(sentence):
        for rid in table.index.get(tok, ()):
            src = table.rules[rid].source_tokens
            if i + len(src) <= n and tuple(sentence[i : i + len(src)]) == src:
                out.append(Match(i, i + len(src), rid))
    out.sort(key=lambda m: (m.begin, -m.length))
    return out


def _priority(m: Match) -> tuple[int, int]:
    # longer first; equal length -> leftmost survives
    return (-m.length, m.begin)


def resolve_overlaps(matches: Sequence[Match]) -> list[Match]:
    """Drop the shorter span of every overlapping pair until none overlap."""
    kept: list[Match] = []
    for m in sorted(matches, key=_priority):
        if not any(m.overlaps(k) for k in kept):
            kept.append(m)
    kept.sort()
    return kept


@dataclass(frozen=True)
class PhraseOccurrence:
    rule_id: int
    begin: int
    end: int
    slot: int


def select_candidates(matches: Sequence[Match], n_p: int = DEFAULT_N_P) -> list[PhraseOccurrence]:
    """Keep at most ``n_p`` non-overlapping matches with maximum token coverage.

    Coverage ties go to the lexicographically earliest begin positions.
    Slots are numbered in source order.
    """
    chosen = sorted(matches, key=_priority)[:n_p] if len(matches) > n_p else list(matches)
    chosen.sort()
    return [PhraseOccurrence(m.rule_id, m.begin, m.end, slot) for slot, m in enumerate(chosen)]


# ---------------------------------------------------------------- annotation


@dataclass(frozen=True)
class GoldPhrase:
    slot: int
    rule_id: int
    target_begin: int
    target_end: int


@dataclass
class SentenceAnnotation:
    occurrences: list[PhraseOccurrence]
    tag_matrix: np.ndarray
    gold: list[GoldPhrase] = field(default_factory=list)
    source_words: list[int] = field(default_factory=list)
    target_words: list[int] = field(default_factory=list)

    @property
    def n_p(self) -> int:
        return self.tag_matrix.shape[1]

    def occurrence(self, slot: int) -> PhraseOccurrence:
        return self.occurrences[slot]

    def to_json(self, table: PhraseTable | None = None) -> dict:
        rec = {
            "occurrences": [
                {"rule": o.rule_id, "span": [o.begin, o.end], "slot": o.slot} for o in self.occurrences
            ],
            "gold": [
                {"rule": g.rule_id, "slot": g.slot, "target_span": [g.target_begin, g.target_end]}
                for g in self.gold
            ],
            "source_words": self.source_words,
            "target_words": self.target_words,
        }
        if table is not None:
            for occ in rec["occurrences"]:
                rule = table[occ["rule"]]
                occ["source"] = " ".join(rule.source_tokens)
                occ["target"] = " ".join(rule.target_tokens)
        return rec


def tag_matrix(n_tokens: int, occurrences: Sequence[PhraseOccurrence], n_p: int) -> np.ndarray:
    tags = np.zeros((n_tokens, n_p))
    for occ in occurrences:
        tags[occ.begin : occ.end, occ.slot] = 1.0
    return tags


def _find_all(haystack: Sequence[str], needle: Sequence[str]) -> list[int]:
    k = len(needle)
    needle = tuple(needle)
    return [i for i in range(len(haystack) - k + 1) if tuple(haystack[i : i + k]) == needle]


def annotate(
    table: PhraseTable,
    source: Sequence[str],
    reference: Sequence[str] | None = None,
    n_p: int = DEFAULT_N_P,
) -> SentenceAnnotation:
    occurrences = select_candidates(resolve_overlaps(match_all(table, source)), n_p)
    covered = set()
    for occ in occurrences:
        covered.update(range(occ.begin, occ.end))
    ann = SentenceAnnotation(
        occurrences=occurrences,
        tag_matrix=tag_matrix(len(source), occurrences, n_p),
        source_words=[i for i in range(len(source)) if i not in covered],
    )
    if reference is None:
        return ann

    claimed: list[tuple[int, int]] = []
    for occ in occurrences:
        target = table[occ.rule_id].target_tokens
        starts = [s for s in _find_all(reference, target) if (s, s + len(target)) not in claimed]
        if not starts:
            continue
        span = (starts[0], starts[0] + len(target))
        if any(span[0] < e and b < span[1] for b, e in claimed):
            continue
        claimed.append(span)
        ann.gold.append(GoldPhrase(occ.slot, occ.rule_id, span[0], span[1]))
    in_phrase = set()
    for b, e in claimed:
        in_phrase.update(range(b, e))
    ann.target_words = [i for i in range(len(reference)) if i not in in_phrase]
    return ann


def dump_annotations(records: Iterable[SentenceAnnotation], path, table: PhraseTable | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ann in records:
            fh.write(json.dumps(ann.to_json(table), sort_keys=True) + "\n")
