"""Random model/example builders shared by the test modules."""

import numpy as np

from phrasenet.corpus import Vocabulary, make_example
from phrasenet.model import PhraseNet
from phrasenet.params import ModelConfig, init_params
from phrasenet.phrase_memory import PhraseTable


def random_instance(rng, n_gold=None, n_words=8, n_rules=4, oov_prob=0.4):
    """A random phrase table plus one example with up to 3 gold phrases.

    Returns (example, source vocab, target vocab, table). Rule sources use
    dedicated tokens so every planted phrase is matched exactly once.
    """
    rules = []
    tgt_known = []
    for r in range(n_rules):
        src = [f"p{r}_{k}" for k in range(rng.integers(1, 3))]
        oov = rng.random() < oov_prob
        tgt = [f"{'x' if oov else 'q'}{r}_{k}" for k in range(rng.integers(1, 4))]
        if not oov:
            tgt_known += tgt
        rules.append((src, tgt))
    table = PhraseTable(rules)
    sv = Vocabulary([f"s{i}" for i in range(n_words)] + [t for s, _ in rules for t in s])
    tv = Vocabulary([f"t{i}" for i in range(n_words)] + tgt_known)

    n_gold = int(rng.integers(0, 4)) if n_gold is None else n_gold
    picked = rng.choice(n_rules, size=min(n_gold, n_rules), replace=False)
    src, tgt = [], []
    pieces = ["w"] * int(rng.integers(1, 4)) + [int(r) for r in picked]
    rng.shuffle(pieces)
    for piece in pieces:
        if piece == "w":
            w = int(rng.integers(n_words))
            src.append(f"s{w}")
            tgt.append(f"t{w}")
        else:
            src += rules[piece][0]
            tgt += rules[piece][1]
    # an extra matched phrase whose translation is absent from the reference
    if rng.random() < 0.3:
        unused = [r for r in range(n_rules) if r not in picked]
        if unused:
            src += rules[unused[0]][0]
    return make_example(src, tgt, sv, tv, table, n_p=3), sv, tv, table


def random_model(variant, sv, tv, rng, scale=0.5, d_e=6, d_h=8, n_p=3, gate_word_factor=True):
    cfg = ModelConfig(len(sv), len(tv), variant, d_e, d_h, n_p, gate_word_factor)
    return PhraseNet(cfg, init_params(cfg, rng, scale=scale))


def shared_baseline(model):
    """A baseline model reusing the gate model's encoder, attention and word head."""
    cfg = ModelConfig(
        model.config.src_vocab_size, model.config.tgt_vocab_size, "baseline",
        model.config.d_e, model.config.d_h, model.config.n_p,
    )
    names = PhraseNet(cfg).params.keys()
    return PhraseNet(cfg, {k: model.params[k] for k in names})


def assert_bitwise(a, b):
    a, b = np.asarray(a), np.asarray(b)
    assert a.shape == b.shape
    assert np.array_equal(a, b), np.max(np.abs(a - b))
