import math
from fractions import Fraction as F

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from phrasenet.evaluation import corpus_bleu, phrase_accuracy


def split(lines):
    return [line.split() for line in lines]


# Each fixture lists its n-gram match/total counts as worked out by hand.
FIXTURES = {
    "overlap": dict(
        cand=["the cat sat on the mat", "a b c d e", "one two three four"],
        ref=["the cat is on the mat", "a b c d e f", "one two three four"],
        p=[F(14, 15), F(10, 12), F(6, 9), F(3, 6)],
        c=15,
        r=16,
    ),
    "case_and_clipping": dict(
        cand=["The THE the cat", "x y z w v", "Hello World"],
        ref=["the cat the dog", "x y z w v u q", "hello there world"],
        p=[F(10, 11), F(5, 8), F(3, 5), F(2, 3)],
        c=11,
        r=14,
    ),
    "long_candidates": dict(
        cand=["a b a b a", "k l", "p q r s t"],
        ref=["a b a b", "k m", "p q r"],
        p=[F(8, 12), F(5, 9), F(3, 6), F(1, 4)],
        c=12,
        r=9,
    ),
}


@pytest.mark.parametrize("name", sorted(FIXTURES))
def test_bleu_matches_hand_counts(name):
    fx = FIXTURES[name]
    rep = corpus_bleu(split(fx["cand"]), split(fx["ref"]))
    bp = 1.0 if fx["c"] >= fx["r"] else math.exp(1 - fx["r"] / fx["c"])
    expected = bp * math.exp(sum(math.log(p) for p in fx["p"]) / 4)
    assert rep.precisions == pytest.approx([float(p) for p in fx["p"]], abs=1e-15)
    assert (rep.candidate_length, rep.reference_length) == (fx["c"], fx["r"])
    assert abs(rep.brevity_penalty - bp) < 1e-15
    assert abs(rep.bleu - expected) < 1e-9
    assert abs(rep.bleu4_only - bp * float(fx["p"][3])) < 1e-12


def test_identical_corpora_score_one():
    lines = split(["a b c d e", "the quick brown fox jumps", "x y"])
    rep = corpus_bleu(lines, lines)
    assert rep.bleu == 1.0 and rep.brevity_penalty == 1.0


def test_no_four_gram_overlap_scores_zero():
    rep = corpus_bleu(split(["a b c d e"]), split(["a b c x d e"]))
    assert rep.precisions[3] == 0.0 and rep.bleu == 0.0


def test_four_gram_score_equals_bp_for_identical_segments():
    cand = split(["a b c d", "e f g h i"])
    ref = split(["a b c d", "e f g h i"])
    rep = corpus_bleu(cand, ref)
    assert rep.bleu4_only == rep.brevity_penalty == 1.0


def test_bleu_errors():
    with pytest.raises(ValueError):
        corpus_bleu([], [])
    with pytest.raises(ValueError):
        corpus_bleu([["a"]], [["a"], ["b"]])


sentences = st.lists(st.sampled_from(list("abcde")), min_size=1, max_size=8)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(sentences, sentences), min_size=1, max_size=6), st.randoms(use_true_random=False))
def test_bleu_is_order_invariant(pairs, rnd):
    shuffled = list(pairs)
    rnd.shuffle(shuffled)
    a = corpus_bleu([c for c, _ in pairs], [r for _, r in pairs])
    b = corpus_bleu([c for c, _ in shuffled], [r for _, r in shuffled])
    assert a.precisions == pytest.approx(b.precisions, abs=0) and a.bleu == pytest.approx(b.bleu, rel=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(sentences, sentences), min_size=1, max_size=6), sentences)
def test_adding_a_perfect_pair_never_lowers_precisions(pairs, extra):
    a = corpus_bleu([c for c, _ in pairs], [r for _, r in pairs])
    b = corpus_bleu([c for c, _ in pairs] + [extra], [r for _, r in pairs] + [extra])
    for pa, pb in zip(a.precisions, b.precisions):
        assert pb >= pa - 1e-15 or pa == 0.0


# ---------------------------------------------------------- phrase accuracy


META = [
    [{"rule_id": 0, "target_span": [1, 3], "oov": True}, {"rule_id": 1, "target_span": [4, 5], "oov": False}],
    [{"rule_id": 2, "target_span": [0, 1], "oov": False}],
]
REFS = split(["t1 X Y t2 Q t3", "Z t4 t5"])


def test_perfect_output():
    acc = phrase_accuracy(REFS, REFS, META)
    assert (acc.recall, acc.position_rate, acc.total) == (1.0, 1.0, 3)
    assert (acc.oov_recall, acc.oov_position_rate, acc.oov_total) == (1.0, 1.0, 1)


def test_phrases_in_the_wrong_places():
    cands = split(["Q t1 t2 X Y t3", "t4 Z t5"])
    acc = phrase_accuracy(cands, REFS, META)
    assert acc.recall == 1.0
    assert acc.position_rate < 1.0


def test_missing_phrases_and_length_errors():
    cands = split(["t1 t2 Q t3", "t4 t5"])
    acc = phrase_accuracy(cands, REFS, META)
    assert acc.recall == pytest.approx(1 / 3) and acc.oov_recall == 0.0
    with pytest.raises(ValueError):
        phrase_accuracy(cands[:1], REFS, META)
