"""Vocabularies, parallel examples and batching."""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .phrase_memory import DEFAULT_N_P, PhraseTable, SentenceAnnotation, annotate, tag_matrix

logger = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = 0, 1, 2, 3
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


class Vocabulary:
    def __init__(self, tokens: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {t: i for i, t in enumerate(self.itos)}
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)
        self.coverage: float | None = None

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, token: str) -> bool:
        return token in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.itos[i] for i in ids]

    def to_list(self) -> list[str]:
        return self.itos[len(RESERVED):]

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.to_list()), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        return cls(line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip())


def build_vocab(corpus: Iterable[Sequence[str]], max_size: int) -> Vocabulary:
    """The ``max_size`` most frequent tokens (ties broken lexicographically).

    Reserved ids come first and are not counted in ``max_size``.
    """
    if max_size <= len(RESERVED):
        raise ValueError(f"max_size must exceed {len(RESERVED)}")
    counts = Counter()
    for sent in corpus:
        counts.update(sent)
    if not counts:
        raise ValueError("cannot build a vocabulary from an empty corpus")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))[:max_size]
    vocab = Vocabulary(tok for tok, _ in ranked)
    vocab.coverage = sum(c for _, c in ranked) / sum(counts.values())
    logger.info("vocabulary of %d types covers %.1f%% of tokens", len(vocab), 100 * vocab.coverage)
    return vocab


# ------------------------------------------------------------------ examples


@dataclass
class ParallelExample:
    source_tokens: list[str]
    target_tokens: list[str] | None
    source_ids: list[int]
    target_ids: list[int] | None  # EOS-terminated
    annotation: SentenceAnnotation
    # per slot: target phrase ids (OOV -> UNK), raw tokens, and whether all tokens are in-vocabulary
    phrase_ids: list[tuple[int, ...]] = field(default_factory=list)
    phrase_tokens: list[tuple[str, ...]] = field(default_factory=list)
    phrase_known: list[bool] = field(default_factory=list)


def make_example(
    source: Sequence[str],
    target: Sequence[str] | None,
    src_vocab: Vocabulary,
    tgt_vocab: Vocabulary,
    table: PhraseTable | None = None,
    n_p: int = DEFAULT_N_P,
) -> ParallelExample:
    if not source:
        raise ValueError("empty source sentence")
    source = list(source)
    if table is None:
        ann = SentenceAnnotation([], tag_matrix(len(source), [], n_p), source_words=list(range(len(source))))
        if target is not None:
            ann.target_words = list(range(len(target)))
    else:
        ann = annotate(table, source, None if target is None else list(target), n_p)
    ex = ParallelExample(
        source_tokens=source,
        target_tokens=None if target is None else list(target),
        source_ids=src_vocab.encode(source),
        target_ids=None if target is None else tgt_vocab.encode(target) + [EOS],
        annotation=ann,
    )
    for occ in ann.occurrences:
        toks = table[occ.rule_id].target_tokens
        ex.phrase_tokens.append(toks)
        ex.phrase_ids.append(tuple(tgt_vocab.encode(toks)))
        ex.phrase_known.append(all(t in tgt_vocab for t in toks))
    return ex


def read_lines(path) -> list[list[str]]:
    return [line.split() for line in Path(path).read_text(encoding="utf-8").splitlines()]


def write_lines(path, sentences: Iterable[Sequence[str]]) -> None:
    Path(path).write_text("".join(" ".join(s) + "\n" for s in sentences), encoding="utf-8")


def read_parallel(source_path, target_path) -> tuple[list[list[str]], list[list[str]]]:
    src, tgt = read_lines(source_path), read_lines(target_path)
    if len(src) != len(tgt):
        raise ValueError(f"{source_path} and {target_path} differ in line count ({len(src)} vs {len(tgt)})")
    return src, tgt


# ------------------------------------------------------------------ batching


@dataclass
class Batch:
    examples: list[ParallelExample]
    source_ids: np.ndarray  # (B, Tx), PAD-filled
    source_mask: np.ndarray  # (B, Tx) 1.0 on real tokens
    target_ids: np.ndarray  # (B, Ty)
    target_mask: np.ndarray

    def __len__(self) -> int:
        return len(self.examples)


def pad(seqs: Sequence[Sequence[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), PAD, dtype=np.int64)
    mask = np.zeros((len(seqs), width))
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        mask[i, : len(s)] = 1.0
    return ids, mask


def collate(examples: Sequence[ParallelExample]) -> Batch:
    src, src_mask = pad([e.source_ids for e in examples])
    if all(e.target_ids is not None for e in examples):
        tgt, tgt_mask = pad([e.target_ids for e in examples])
    else:
        tgt, tgt_mask = np.zeros((len(examples), 0), dtype=np.int64), np.zeros((len(examples), 0))
    return Batch(list(examples), src, src_mask, tgt, tgt_mask)


def make_batches(
    examples: Sequence[ParallelExample],
    batch_size: int,
    max_len: int = 50,
    rng: np.random.Generator | int | None = 0,
) -> list[Batch]:
    """Length-filter, shuffle with a seeded generator, and pad per batch."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    keep = [
        e for e in examples
        if len(e.source_tokens) <= max_len and (e.target_tokens is None or len(e.target_tokens) <= max_len)
    ]
    if len(keep) < len(examples):
        logger.info("dropped %d examples longer than %d tokens", len(examples) - len(keep), max_len)
    if not keep:
        logger.warning("no examples survive the length filter (max_len=%d)", max_len)
        return []
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    order = rng.permutation(len(keep))
    return [collate([keep[i] for i in order[s : s + batch_size]]) for s in range(0, len(keep), batch_size)]
