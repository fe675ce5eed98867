"""Template-based synthetic parallel corpus with planted phrase pairs.

Ordinary words translate one-to-one and in order (``s17`` -> ``t17``).
Each rule maps a source phrase of 1-3 rule-specific tokens to a target
phrase of 1-3 tokens. A fraction of rules use target tokens that are left
out of the target vocabulary, so a word-level model can only produce UNK
for them.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .corpus import RESERVED, write_lines
from .phrase_memory import PhraseTable

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class SyntheticConfig:
    vocab_size: int = 120  # target vocabulary, reserved ids included
    n_templates: int = 60
    n_rules: int = 40
    oov_fraction: float = 0.25
    n_pairs: int = 2000  # training pairs
    n_dev: int = 200
    n_test: int = 200
    min_len: int = 4  # template slots
    max_len: int = 9
    max_phrases: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("vocab_size", "n_templates", "n_rules", "n_pairs", "min_len", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.n_dev < 0 or self.n_test < 0:
            raise ValueError("split sizes must be >= 0")
        if not 0.0 <= self.oov_fraction <= 1.0:
            raise ValueError(f"oov_fraction must lie in [0, 1], got {self.oov_fraction}")
        if self.min_len > self.max_len:
            raise ValueError("min_len exceeds max_len")
        if not 0 <= self.max_phrases <= self.n_rules:
            raise ValueError("max_phrases must lie in [0, n_rules]")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synthetic config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class PlantedPhrase:
    rule_id: int
    source_span: tuple[int, int]
    target_span: tuple[int, int]
    oov: bool


@dataclass
class SyntheticPair:
    source: list[str]
    target: list[str]
    phrases: list[PlantedPhrase] = field(default_factory=list)

    def metadata(self) -> list[dict]:
        return [
            {"rule_id": p.rule_id, "source_span": list(p.source_span), "target_span": list(p.target_span), "oov": p.oov}
            for p in self.phrases
        ]


@dataclass
class SyntheticCorpus:
    config: SyntheticConfig
    splits: dict[str, list[SyntheticPair]]
    table: PhraseTable
    oov_rules: frozenset[int]
    source_vocab: list[str]
    target_vocab: list[str]

    def write(self, directory) -> None:
        """train/dev/test .src/.tgt/.meta.jsonl, phrases.tsv, vocab.src, vocab.tgt."""
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for name, pairs in self.splits.items():
            write_lines(out / f"{name}.src", [p.source for p in pairs])
            write_lines(out / f"{name}.tgt", [p.target for p in pairs])
            with open(out / f"{name}.meta.jsonl", "w", encoding="utf-8") as fh:
                for p in pairs:
                    fh.write(json.dumps(p.metadata()) + "\n")
        self.table.write(out / "phrases.tsv")
        (out / "vocab.src").write_text("".join(t + "\n" for t in self.source_vocab), encoding="utf-8")
        (out / "vocab.tgt").write_text("".join(t + "\n" for t in self.target_vocab), encoding="utf-8")
        (out / "synth.json").write_text(json.dumps(asdict(self.config), indent=2) + "\n", encoding="utf-8")


def read_metadata(path) -> list[list[dict]]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def generate_synthetic(config: SyntheticConfig | None = None) -> SyntheticCorpus:
    cfg = config or SyntheticConfig()
    rng = np.random.default_rng(cfg.seed)

    n_oov = int(round(cfg.oov_fraction * cfg.n_rules))
    oov_rules = frozenset(int(r) for r in rng.choice(cfg.n_rules, size=n_oov, replace=False))
    rules = []
    for r in range(cfg.n_rules):
        src = [f"p{r}_{k}" for k in range(rng.integers(1, 4))]
        prefix = "x" if r in oov_rules else "q"
        tgt = [f"{prefix}{r}_{k}" for k in range(rng.integers(1, 4))]
        rules.append((src, tgt))
    phrase_tokens = [t for r, (_, tgt) in enumerate(rules) if r not in oov_rules for t in tgt]
    n_words = cfg.vocab_size - len(RESERVED) - len(phrase_tokens)
    if n_words < 1:
        raise ValueError(
            f"vocab_size {cfg.vocab_size} leaves no room for ordinary words "
            f"({len(phrase_tokens)} in-vocabulary phrase tokens)"
        )

    templates = []
    for _ in range(cfg.n_templates):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        n_phr = int(rng.integers(0, min(cfg.max_phrases, length) + 1))
        kinds = ["phrase"] * n_phr + ["word"] * (length - n_phr)
        rng.shuffle(kinds)
        # fixed words give templates an identity; free slots vary per sentence
        slots = [
            ("phrase", None) if k == "phrase" else ("fixed", int(rng.integers(n_words))) if rng.random() < 0.5 else ("free", None)
            for k in kinds
        ]
        templates.append(slots)

    def sample() -> SyntheticPair:
        slots = templates[rng.integers(len(templates))]
        n_phr = sum(k == "phrase" for k, _ in slots)
        chosen = iter(rng.choice(cfg.n_rules, size=n_phr, replace=False).tolist())
        pair = SyntheticPair([], [])
        for kind, word in slots:
            if kind == "phrase":
                r = next(chosen)
                src, tgt = rules[r]
                sb, tb = len(pair.source), len(pair.target)
                pair.source += src
                pair.target += tgt
                pair.phrases.append(PlantedPhrase(r, (sb, len(pair.source)), (tb, len(pair.target)), r in oov_rules))
            else:
                w = word if kind == "fixed" else int(rng.integers(n_words))
                pair.source.append(f"s{w}")
                pair.target.append(f"t{w}")
        return pair

    sizes = {"train": cfg.n_pairs, "dev": cfg.n_dev, "test": cfg.n_test}
    splits = {name: [sample() for _ in range(sizes[name])] for name in SPLITS}
    source_vocab = [f"s{w}" for w in range(n_words)] + [t for src, _ in rules for t in src]
    target_vocab = [f"t{w}" for w in range(n_words)] + phrase_tokens
    return SyntheticCorpus(cfg, splits, PhraseTable(rules), oov_rules, source_vocab, target_vocab)
