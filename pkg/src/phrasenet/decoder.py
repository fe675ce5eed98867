"""Decoder heads, per-step mixture distributions and the idle run.

A decision step sees S_t = (s_t, c_t, e_{y_{t-1}}). The gate variant mixes
a word softmax and a phrase softmax with a learned mode probability; the
softmax variant puts words and candidate phrases in one normalization.
All log-probabilities are kept in the log domain; candidates that are not
live carry -inf.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .attention import attend, attention_keys
from .autodiff import Tensor
from .encoder import embed, gru_cell, run_gru

NEG_INF = -np.inf


def step_state(params: Mapping[str, Tensor], s_prev, c_t, e_prev) -> Tensor:
    """s_t = GRU(s_{t-1}, [c_t; e_{y_{t-1}}])."""
    return gru_cell(params, "dec", ad.concat([c_t, e_prev], axis=-1), s_prev)


def readout(params, prefix: str, s, c, e_prev, phrase_emb=None) -> Tensor:
    weights = [params[f"{prefix}.U"], params[f"{prefix}.C"], params[f"{prefix}.V"]]
    if phrase_emb is None:
        return ad.affine([s, c, e_prev], weights, act="tanh")
    pre = ad.affine([s, c, e_prev], weights)
    pre = ad.reshape(pre, pre.shape[:-1] + (1, pre.shape[-1])) + ad.linear(phrase_emb, params[f"{prefix}.R"])
    return ad.tanh(pre)


def word_scores(params, s, c, e_prev, variant: str = "gate") -> Tensor:
    prefix = "word_w" if variant == "softmax" else "word_o"
    return ad.linear(readout(params, prefix, s, c, e_prev), params[f"{prefix}.W"])


def gate_logit(params, s, c, e_prev) -> Tensor:
    """Pre-sigmoid mode score of the two-hidden-layer gate network."""
    x = ad.concat([s, c, e_prev], axis=-1)
    h1 = ad.affine([x], [params["gate.W1"]], params["gate.b1"], act="tanh")
    h2 = ad.affine([h1], [params["gate.W2"]], params["gate.b2"], act="tanh")
    out = ad.affine([h2], [params["gate.w"]], params["gate.b"])
    return out[..., 0]


def gate_phrase_scores(params, s, c, e_prev) -> Tensor:
    """One score per tag slot."""
    return ad.linear(readout(params, "phrase_p", s, c, e_prev), params["phrase_p.W"])


def softmax_phrase_scores(params, s, c, e_prev, phrase_emb) -> Tensor:
    hidden = readout(params, "phrase_q", s, c, e_prev, phrase_emb=phrase_emb)
    return ad.linear(hidden, params["phrase_q.W"])[..., 0]


def embed_phrases(params, phrases: Sequence[Sequence[int]]) -> Tensor:
    """Backward-GRU final state for each phrase (token ids), shape (N, d_h)."""
    width = max(len(p) for p in phrases)
    ids = np.zeros((len(phrases), width), dtype=np.int64)
    mask = np.zeros((len(phrases), width))
    for i, p in enumerate(phrases):
        if not p:
            raise ValueError("empty target phrase")
        ids[i, : len(p)] = p
        mask[i, : len(p)] = 1.0
    states = run_gru(params, "pemb", embed(params["tgt_emb"], ids), mask, reverse=True)
    return states[0]


def embed_phrase(params, target_ids: Sequence[int]) -> Tensor:
    return embed_phrases(params, [target_ids])[0]


def slot_embeddings(params, per_row: Sequence[Sequence[Sequence[int]]], n_p: int, d_h: int) -> Tensor:
    """Phrase embeddings laid out as (rows, n_p, d_h); empty slots are zero."""
    flat = [p for row in per_row for p in row]
    index = np.zeros((len(per_row), n_p), dtype=np.int64)
    k = 1
    for r, row in enumerate(per_row):
        for slot in range(len(row)):
            index[r, slot] = k
            k += 1
    table = Tensor(np.zeros((1, d_h))) if not flat else ad.concat([Tensor(np.zeros((1, d_h))), embed_phrases(params, flat)], axis=0)
    return table[index]


# ----------------------------------------------------------- step mixtures


@dataclass
class StepLogProbs:
    word: Tensor  # log p(y | word mode), or the joint-softmax word entries
    z0: Tensor | None  # log p(z=0); None when the mode is absorbed or absent
    phrase: Tensor | None  # log p(z=1, slot); -inf off the live set
    gate: np.ndarray | None = None  # p(z=1), gate variant only

    def word_joint(self) -> Tensor:
        if self.z0 is None:
            return self.word
        return self.word + ad.reshape(self.z0, self.z0.shape + (1,))


def _dead_mask(live: np.ndarray) -> np.ndarray:
    return np.where(live, 0.0, NEG_INF)


def gate_combine(logit, w_scores, p_scores, live: np.ndarray, pinned: bool = False) -> StepLogProbs:
    """Mix word and phrase softmaxes with p(z=1) = sigmoid(logit).

    Rows without a live candidate force z=0, leaving the plain word softmax.
    """
    live = np.asarray(live, dtype=bool)
    has_live = live.any(axis=-1) & (not pinned)
    word = ad.log_softmax(w_scores, axis=-1)
    z0 = ad.log_sigmoid(-logit) * has_live.astype(np.float64)
    if not has_live.any():
        phrase = Tensor(np.full(live.shape, NEG_INF))
        return StepLogProbs(word, z0, phrase, gate=np.zeros(live.shape[:-1]))
    # rows without live slots are normalized over all slots, then wiped
    safe = np.where(has_live[..., None], _dead_mask(live), 0.0)
    z1 = ad.log_sigmoid(logit)
    phrase = ad.log_softmax(p_scores + safe, axis=-1) + ad.reshape(z1, z1.shape + (1,))
    phrase = phrase + np.where(has_live[..., None], 0.0, NEG_INF)
    gate = np.where(has_live, np.exp(z1.data), 0.0)
    return StepLogProbs(word, z0, phrase, gate=gate)


def joint_combine(w_scores, p_scores, live: np.ndarray, pinned: bool = False) -> StepLogProbs:
    """One softmax over [word scores; live phrase scores]."""
    live = np.asarray(live, dtype=bool) & (not pinned)
    V = w_scores.shape[-1]
    joint = ad.log_softmax(ad.concat([w_scores, p_scores + _dead_mask(live)], axis=-1), axis=-1)
    return StepLogProbs(joint[..., :V], None, joint[..., V:])


def step_logprobs(params, variant: str, s, c, e_prev, live, phrase_emb=None, pinned: bool = False) -> StepLogProbs:
    ws = word_scores(params, s, c, e_prev, variant)
    if variant == "baseline":
        return StepLogProbs(ad.log_softmax(ws, axis=-1), None, None)
    if variant == "gate":
        return gate_combine(gate_logit(params, s, c, e_prev), ws, gate_phrase_scores(params, s, c, e_prev), live, pinned)
    if phrase_emb is None:
        raise ValueError("softmax variant needs phrase embeddings")
    return joint_combine(ws, softmax_phrase_scores(params, s, c, e_prev, phrase_emb), live, pinned)


@dataclass
class StepDistribution:
    word_probs: np.ndarray
    phrase_probs: np.ndarray  # aligned with ``slots``
    slots: list[int]
    mode_prior: float | None = None

    def total(self) -> float:
        return float(self.word_probs.sum() + self.phrase_probs.sum())

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.word_probs, self.phrase_probs])


def to_distribution(lp: StepLogProbs, live: np.ndarray) -> StepDistribution:
    """Single-row log-probabilities to a probability vector over words + live slots."""
    slots = [int(i) for i in np.flatnonzero(live)]
    word = np.exp(lp.word_joint().data)
    phrase = np.exp(lp.phrase.data[slots]) if lp.phrase is not None else np.zeros(0)
    if lp.phrase is None:
        slots = []
    prior = None if lp.gate is None else float(lp.gate)
    return StepDistribution(word, phrase, slots, prior)


def gate_step(params, s, c, e_prev, live, pinned: bool = False) -> StepDistribution:
    live = np.asarray(live, dtype=bool)
    lp = step_logprobs(params, "gate", s, c, e_prev, live, pinned=pinned)
    return to_distribution(lp, live)


def softmax_step(params, s, c, e_prev, live, phrase_emb, pinned: bool = False) -> StepDistribution:
    live = np.asarray(live, dtype=bool)
    lp = step_logprobs(params, "softmax", s, c, e_prev, live, phrase_emb=phrase_emb, pinned=pinned)
    return to_distribution(lp, live)


def segment_logprob(word_terms: Sequence[Tensor], phrase_term: Tensor | None, known: bool) -> Tensor:
    """log(I_unk * prod_i p(z=0, y_i) + p(z=1, phrase)) from per-token log terms.

    ``known`` is I_unk (every phrase token in the vocabulary); without it the
    word path is dropped. A missing phrase term drops the phrase path.
    """
    paths = [] if phrase_term is None else [phrase_term]
    if known:
        word_path = word_terms[0]
        for term in word_terms[1:]:
            word_path = word_path + term
        paths.append(word_path)
    if not paths:
        raise ValueError("segment has neither a word path nor a phrase path")
    if len(paths) == 1:
        return paths[0]
    return ad.logsumexp(ad.stack(paths), axis=-1)


# ------------------------------------------------- single-sentence decoding


class ContractError(RuntimeError):
    """An operation was invoked outside its precondition."""


@dataclass
class Candidate:
    slot: int
    begin: int
    end: int
    target_ids: tuple[int, ...]
    target_tokens: tuple[str, ...]
    known: bool


@dataclass
class DecodeState:
    s: Tensor
    c: Tensor
    e_prev: Tensor
    y_prev: int
    t: int
    tags: np.ndarray
    live: np.ndarray  # bool per slot
    pending_phrase: tuple[int, ...] = ()
    alpha: np.ndarray | None = None  # attention weights used by the last feed
    _memory: tuple[Tensor, Tensor] | None = field(default=None, repr=False)  # (h', attention keys)

    @property
    def candidates_left(self) -> int:
        return int(self.live.sum())


class Session:
    """Decoding context for one source sentence.

    Holds the encoder output, the phrase candidates and (softmax variant)
    their embeddings. States are values; ``feed`` and ``emit_phrase``
    return new states and never mutate their argument.
    """

    def __init__(self, model, encoded, candidates: Sequence[Candidate], bos: int):
        self.model = model
        self.params = model.params
        self.variant = model.config.variant
        self.encoded = encoded
        self.candidates = {c.slot: c for c in candidates}
        n_p = model.config.n_p
        self.phrase_emb = None
        if self.variant == "softmax":
            rows = [[c.target_ids for c in sorted(candidates, key=lambda c: c.slot)]]
            self.phrase_emb = slot_embeddings(self.params, rows, n_p, model.config.d_h)[0]
        live = np.zeros(n_p, dtype=bool)
        if self.variant != "baseline":
            for c in candidates:
                live[c.slot] = True
        s0 = ad.tanh(ad.linear(encoded.backward_first, self.params["dec_init.W"]))
        start = DecodeState(s=s0, c=None, e_prev=None, y_prev=bos, t=-1, tags=encoded.tags.copy(), live=live)
        self.initial = self.feed(start, bos)

    def memory(self, state: DecodeState) -> tuple[Tensor, Tensor]:
        if state._memory is None:
            h = ad.concat([self.encoded.h, Tensor(state.tags)], axis=-1)
            state._memory = (h, attention_keys(self.params, h))
        return state._memory

    def h_tagged(self, state: DecodeState) -> Tensor:
        return self.memory(state)[0]

    def feed(self, state: DecodeState, token_id: int) -> DecodeState:
        """Condition on ``token_id`` as y_{t-1}: attend, then update the state."""
        e = embed(self.params["tgt_emb"], token_id)
        h, keys = self.memory(state)
        c, alpha = attend(self.params, state.s, h, e, self.encoded.mask, keys=keys)
        s = step_state(self.params, state.s, c, e)
        return replace(state, s=s, c=c, e_prev=e, y_prev=token_id, t=state.t + 1, pending_phrase=(), alpha=alpha.data)

    def attention(self, state: DecodeState, token_id: int) -> np.ndarray:
        e = embed(self.params["tgt_emb"], token_id)
        h, keys = self.memory(state)
        _, alpha = attend(self.params, state.s, h, e, self.encoded.mask, keys=keys)
        return alpha.data

    def logprobs(self, state: DecodeState) -> StepLogProbs:
        if state.pending_phrase:
            raise ContractError("no decision is taken during an idle run")
        return step_logprobs(
            self.params, self.variant, state.s, state.c, state.e_prev, state.live,
            phrase_emb=self.phrase_emb, pinned=self.model.phrase_mode_off,
        )

    def distribution(self, state: DecodeState) -> StepDistribution:
        return to_distribution(self.logprobs(state), state.live)

    def consume(self, state: DecodeState, slot: int) -> DecodeState:
        cand = self.candidates[slot]
        tags = state.tags.copy()
        tags[cand.begin : cand.end, :] = 0.0
        live = state.live.copy()
        live[slot] = False
        return replace(state, tags=tags, live=live, _memory=None)

    def emit_phrase(self, state: DecodeState, slot: int, trajectory: list | None = None) -> DecodeState:
        """Idle run: feed every target token in order, then consume the occurrence."""
        if slot not in self.candidates or not state.live[slot]:
            raise ContractError(f"phrase slot {slot} is not a live candidate")
        if state.pending_phrase:
            raise ContractError("already inside an idle run")
        ids = self.candidates[slot].target_ids
        for i, tok in enumerate(ids):
            state = replace(self.feed(state, tok), pending_phrase=ids[i + 1 :])
            if trajectory is not None:
                trajectory.append(state)
        return self.consume(state, slot)

    def phrase_segment_logprob(self, state: DecodeState, slot: int) -> tuple[Tensor, DecodeState]:
        """Mixture log-probability of a gold phrase starting at ``state``.

        word path: product over phrase tokens of p(z=0, y_i) along the idle-run
        trajectory, admitted only when every token is in-vocabulary;
        phrase path: p(z=1, phrase) at the first step.
        """
        cand = self.candidates[slot]
        word_terms = []
        phrase_path = None
        cur = state
        for i, tok in enumerate(cand.target_ids):
            lp = self.logprobs(cur)
            if i == 0 and lp.phrase is not None:
                phrase_path = lp.phrase[slot]
            word_terms.append(lp.word_joint()[tok])
            cur = self.feed(cur, tok)
        after = self.consume(cur, slot)
        return segment_logprob(word_terms, phrase_path, cand.known or self.model.words_only), after
