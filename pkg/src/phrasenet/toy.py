"""A fixed two-sentence batch for gradient checks.

Sentence one carries a gold phrase whose target is in the vocabulary (both
mixture paths are live); sentence two carries one whose target contains an
out-of-vocabulary token (phrase path only).
"""

from __future__ import annotations

from .corpus import ParallelExample, Vocabulary, make_example
from .phrase_memory import PhraseTable

TOY_SOURCE = [
    "s1 a b s2 s3".split(),
    "s4 c s5 s6".split(),
]
TOY_TARGET = [
    "t1 X Y t2 t3".split(),
    "t4 Q zz t5".split(),
]
TOY_RULES = [
    (["a", "b"], ["X", "Y"]),
    (["c"], ["Q", "zz"]),  # "zz" is kept out of the target vocabulary
]


def toy_vocabularies(size: int = 20) -> tuple[Vocabulary, Vocabulary]:
    """Source and target vocabularies of exactly ``size`` entries each."""
    src = ["a", "b", "c"] + [f"s{i}" for i in range(size - 7)]
    tgt = ["X", "Y", "Q"] + [f"t{i}" for i in range(size - 7)]
    return Vocabulary(src), Vocabulary(tgt)


def toy_batch(n_p: int = 3, size: int = 20) -> tuple[list[ParallelExample], Vocabulary, Vocabulary, PhraseTable]:
    sv, tv = toy_vocabularies(size)
    table = PhraseTable(TOY_RULES)
    examples = [make_example(s, t, sv, tv, table, n_p) for s, t in zip(TOY_SOURCE, TOY_TARGET)]
    return examples, sv, tv, table
