"""Greedy and beam decoding over words and phrase candidates.

A decision either emits one vocabulary word or a whole phrase; phrases are
replayed token by token through the idle run. Scores are sums of
log-probabilities of the decisions taken. PAD and BOS are never emitted.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .corpus import BOS, EOS, PAD, ParallelExample, Vocabulary
from .decoder import DecodeState, Session

_BLOCKED = (PAD, BOS)


@dataclass
class Choice:
    mode: str  # "word" or "phrase"
    index: int  # token id or phrase slot
    logprob: float


@dataclass
class TraceStep:
    t: int
    mode: str
    output: list[str]
    top_words: list[tuple[str, float]]
    phrases: list[tuple[int, str, float]]  # slot, target text, probability
    gate: float | None

    def format(self) -> str:
        words = " ".join(f"{w}:{p:.4f}" for w, p in self.top_words)
        phr = " ".join(f"[{k}]{txt}:{p:.4f}" for k, txt, p in self.phrases) or "-"
        gate = "-" if self.gate is None else f"{self.gate:.4f}"
        return f"t={self.t}\tmode={self.mode}\tout={' '.join(self.output)}\tgate={gate}\twords={words}\tphrases={phr}"


@dataclass
class Hypothesis:
    ids: list[int]  # emitted ids, phrase tokens included, EOS included when finished
    tokens: list[str]  # emitted surface tokens, EOS excluded
    logprob: float
    choices: list[Choice] = field(default_factory=list)
    finished: bool = False
    state: DecodeState | None = field(default=None, repr=False)
    alphas: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def length(self) -> int:
        return len(self.ids)

    def score(self) -> float:
        """Log-probability per emitted token (EOS counts as a token)."""
        return self.logprob / max(self.length, 1)

    def attention(self) -> np.ndarray:
        """(emitted tokens, source length) weights used to predict each token."""
        if not self.alphas:
            width = 0 if self.state is None or self.state.alpha is None else len(self.state.alpha)
            return np.zeros((0, width))
        return np.array(self.alphas)


def _decision_vector(sess: Session, state: DecodeState) -> tuple[np.ndarray, int]:
    lp = sess.logprobs(state)
    word = lp.word_joint().data.copy()
    word[list(_BLOCKED)] = -np.inf
    if lp.phrase is None:
        return word, len(word)
    phrase = np.where(state.live, lp.phrase.data, -np.inf)
    return np.concatenate([word, phrase]), len(word)


def _trace_step(sess: Session, state: DecodeState, mode: str, output: list[str], vocab: Vocabulary) -> TraceStep:
    dist = sess.distribution(state)
    order = np.argsort(-dist.word_probs, kind="stable")[:5]
    top = [(vocab.itos[i], float(dist.word_probs[i])) for i in order]
    phrases = [
        (k, " ".join(sess.candidates[k].target_tokens), float(p)) for k, p in zip(dist.slots, dist.phrase_probs)
    ]
    return TraceStep(state.t, mode, output, top, phrases, dist.mode_prior)


def _expand(sess: Session, hyp: Hypothesis, index: int, V: int, logprob: float, vocab: Vocabulary) -> Hypothesis:
    state = hyp.state
    if index < V:
        choice = Choice("word", index, logprob)
        ids = hyp.ids + [index]
        if index == EOS:
            return Hypothesis(ids, hyp.tokens, hyp.logprob + logprob, hyp.choices + [choice], True, state, hyp.alphas)
        toks = hyp.tokens + [vocab.itos[index]]
        alphas = hyp.alphas + [state.alpha]
        return Hypothesis(ids, toks, hyp.logprob + logprob, hyp.choices + [choice], False, sess.feed(state, index), alphas)
    slot = index - V
    cand = sess.candidates[slot]
    trajectory: list[DecodeState] = []
    after = sess.emit_phrase(state, slot, trajectory)
    alphas = hyp.alphas + [state.alpha] + [s.alpha for s in trajectory[:-1]]
    return Hypothesis(
        hyp.ids + list(cand.target_ids),
        hyp.tokens + list(cand.target_tokens),
        hyp.logprob + logprob,
        hyp.choices + [Choice("phrase", slot, logprob)],
        False,
        after,
        alphas,
    )


def decode_greedy(
    model,
    example: ParallelExample,
    vocab: Vocabulary,
    max_len: int = 50,
    trace: list[TraceStep] | None = None,
) -> Hypothesis:
    """Argmax decoding; ties go to the lowest index (words before phrases)."""
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with ad.no_grad():
        sess = model.session(example)
        hyp = Hypothesis([], [], 0.0, state=sess.initial)
        while not hyp.finished and hyp.length < max_len:
            vec, V = _decision_vector(sess, hyp.state)
            best = int(np.argmax(vec))
            prev = hyp
            hyp = _expand(sess, hyp, best, V, float(vec[best]), vocab)
            if trace is not None:
                mode = "word" if best < V else "phrase"
                out = ["</s>"] if best == EOS else hyp.tokens[len(prev.tokens):]
                trace.append(_trace_step(sess, prev.state, mode, out, vocab))
        return hyp


def decode_beam(
    model,
    example: ParallelExample,
    vocab: Vocabulary,
    beam: int = 4,
    max_len: int = 50,
) -> Hypothesis:
    """Beam search ranked by cumulative log-probability.

    Each round keeps the ``beam`` best expansions (ties by parent rank, then
    index); finished ones leave the beam. The returned hypothesis maximizes
    the length-normalized score among finished ones, so ``beam=1`` follows
    the greedy path.
    """
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    with ad.no_grad():
        sess = model.session(example)
        live = [Hypothesis([], [], 0.0, state=sess.initial)]
        done: list[Hypothesis] = []
        while live:
            pool = []
            for rank, hyp in enumerate(live):
                vec, V = _decision_vector(sess, hyp.state)
                for idx in np.flatnonzero(np.isfinite(vec)):
                    pool.append((-(hyp.logprob + vec[idx]), rank, int(idx), float(vec[idx]), V))
            parents, live = live, []
            for _, rank, idx, lp, V in heapq.nsmallest(beam, pool):
                child = _expand(sess, parents[rank], idx, V, lp, vocab)
                if child.finished or child.length >= max_len:
                    done.append(child)
                else:
                    live.append(child)
        return max(done, key=lambda h: h.score())
