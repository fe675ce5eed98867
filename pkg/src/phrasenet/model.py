"""The phraseNet model: shared trunk plus a variant-specific decoder head.

Training uses a batched teacher-forced pass. Because the gold segmentation
of every target is known in advance, the tag-zeroing and live-candidate
schedules are fixed before the pass starts, so one graph serves the whole
batch.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .attention import attend, attention_keys
from .autodiff import Tensor
from .corpus import BOS, Batch, ParallelExample, collate
from .decoder import Candidate, Session, slot_embeddings, step_logprobs, step_state
from .encoder import embed, encode
from .params import ModelConfig, init_params, param_shapes


@dataclass
class Segment:
    row: int
    begin: int  # target positions [begin, end)
    end: int
    slot: int
    known: bool


@dataclass
class NLLResult:
    loss: Tensor  # mean over sentences of -log p(y|x)
    logp: Tensor  # (B,) per-sentence log-likelihood
    n_words: int  # W_y positions, EOS included
    word_logp_sum: float
    gate_values: list[float] = field(default_factory=list)


@dataclass
class ForwardCache:
    """Stage outputs kept between calls of ``batch_nll`` on one batch.

    Stages named in ``reuse`` ("encoder", "decoder") are computed once per
    combination of parameter dtypes and then replayed. Only valid while the parameters those
    stages read stay fixed; the gradient check uses it to skip work that a
    perturbed head parameter cannot affect.
    """

    reuse: frozenset = frozenset()
    stored: dict = field(default_factory=dict)


@dataclass
class _Trajectory:
    s: Tensor  # (B, Ty, d_h) decoder states
    c: Tensor  # (B, Ty, d_ctx) contexts
    e: Tensor  # (B, Ty, d_e) previous-token embeddings
    live: np.ndarray  # (B, Ty, n_p)


def gold_segments(examples: Sequence[ParallelExample]) -> list[Segment]:
    segs = []
    for row, ex in enumerate(examples):
        for g in sorted(ex.annotation.gold, key=lambda g: g.target_begin):
            segs.append(Segment(row, g.target_begin, g.target_end, g.slot, ex.phrase_known[g.slot]))
    return segs


class PhraseNet:
    def __init__(self, config: ModelConfig, params: dict[str, Tensor] | None = None, rng=0):
        self.config = config
        self.params = init_params(config, rng) if params is None else params
        expected = param_shapes(config)
        if set(expected) != set(self.params):
            missing = sorted(set(expected) ^ set(self.params))
            raise ValueError(f"parameter set does not match config: {missing}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValueError(f"{name}: shape {self.params[name].shape} != {shape}")
        # pins p(z=1) to 0 (gate) or phrase scores to -inf (softmax)
        self.phrase_mode_off = False

    @property
    def variant(self) -> str:
        return self.config.variant

    @property
    def words_only(self) -> bool:
        """True when every target token is scored on the word path, OOV ones as UNK."""
        return self.variant == "baseline" or self.phrase_mode_off

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def initial_state(self, encoded) -> Tensor:
        return ad.tanh(ad.linear(encoded.backward_first, self.params["dec_init.W"]))

    # ------------------------------------------------------------ training

    def batch_nll(self, batch: Batch | Sequence[ParallelExample], cache: "ForwardCache | None" = None) -> NLLResult:
        if not isinstance(batch, Batch):
            batch = collate(batch)
        cfg = self.config
        B, Ty = batch.target_ids.shape
        if Ty == 0:
            raise ValueError("batch has no targets")
        if batch.target_ids.max() >= cfg.tgt_vocab_size or batch.target_ids.min() < 0:
            raise ValueError("target token id out of range")
        segs = gold_segments(batch.examples)
        enc = self._stage(cache, "encoder", lambda: self._encode(batch))
        traj = self._stage(cache, "decoder", lambda: self._trajectory(batch, segs, enc))
        return self._heads(batch, segs, traj)

    def _stage(self, cache, name, compute):
        if cache is None:
            return compute()
        dtype = frozenset(p.data.dtype for p in self.params.values())
        hit = cache.stored.get(name)
        if name in cache.reuse and hit is not None and hit[0] == dtype:
            return hit[1]
        out = compute()
        cache.stored[name] = (dtype, out)
        return out

    def _encode(self, batch: Batch):
        tags0 = np.zeros(batch.source_ids.shape + (self.config.n_p,))
        for r, ex in enumerate(batch.examples):
            tags0[r, : len(ex.source_ids)] = ex.annotation.tag_matrix
        return encode(self.params, batch.source_ids, tags0, batch.source_mask)

    def _trajectory(self, batch: Batch, segs: list[Segment], enc) -> "_Trajectory":
        """Teacher-forced decoder states; the tag and live schedules follow the gold segments."""
        params, examples = self.params, batch.examples
        B, Ty = batch.target_ids.shape
        live0 = np.zeros((B, self.config.n_p), dtype=bool)
        if self.variant != "baseline":
            for r, ex in enumerate(examples):
                live0[r, [o.slot for o in ex.annotation.occurrences]] = True
        s = self.initial_state(enc)
        states, contexts, inputs, lives = [], [], [], []
        h_tagged, tag_key = None, None
        for t in range(Ty):
            zeroed = tuple(k for k, sg in enumerate(segs) if sg.end < t)
            if h_tagged is None or zeroed != tag_key:
                tags = enc.tags.copy()
                for k in zeroed:
                    occ = examples[segs[k].row].annotation.occurrence(segs[k].slot)
                    tags[segs[k].row, occ.begin : occ.end, :] = 0.0
                h_tagged, tag_key = ad.concat([enc.h, Tensor(tags)], axis=-1), zeroed
                keys = attention_keys(params, h_tagged)
            live = live0.copy()
            for sg in segs:
                if sg.end <= t:
                    live[sg.row, sg.slot] = False
            y_prev = np.full(B, BOS) if t == 0 else batch.target_ids[:, t - 1]
            e = embed(params["tgt_emb"], y_prev)
            c, _ = attend(params, s, h_tagged, e, batch.source_mask, keys=keys)
            s = step_state(params, s, c, e)
            states.append(s)
            contexts.append(c)
            inputs.append(e)
            lives.append(live)
        stack = lambda xs: ad.stack(xs, axis=1)  # noqa: E731
        return _Trajectory(stack(states), stack(contexts), stack(inputs), np.stack(lives, axis=1))

    def _heads(self, batch: Batch, segs: list[Segment], traj: "_Trajectory") -> NLLResult:
        """Output distributions for every (row, step) at once, then the segment mixture."""
        cfg, params, examples = self.config, self.params, batch.examples
        B, Ty = batch.target_ids.shape
        phrase_emb = None
        if self.variant == "softmax":
            emb = slot_embeddings(params, [ex.phrase_ids for ex in examples], cfg.n_p, cfg.d_h)
            phrase_emb = ad.reshape(emb, (B, 1) + emb.shape[1:])
        lp = step_logprobs(params, self.variant, traj.s, traj.c, traj.e, traj.live,
                           phrase_emb=phrase_emb, pinned=self.phrase_mode_off)
        rows, steps = np.meshgrid(np.arange(B), np.arange(Ty), indexing="ij")
        WL = lp.word[rows, steps, batch.target_ids]
        joint = WL if lp.z0 is None else WL + lp.z0

        lengths = batch.target_mask.sum(axis=1).astype(int)
        on = traj.live.any(axis=-1) & (np.arange(Ty)[None, :] < lengths[:, None])
        gate_values: list[float] = []
        if lp.gate is not None:
            gate_values = lp.gate.T[on.T].tolist()
        elif lp.phrase is not None:
            gate_values = np.exp(lp.phrase.data).sum(axis=-1).T[on.T].tolist()

        in_seg = np.zeros((B, Ty), dtype=bool)
        for sg in segs:
            in_seg[sg.row, sg.begin : sg.end] = True
        valid = batch.target_mask > 0
        if self.words_only:
            word_mask = valid.astype(float)
        else:
            word_mask = (valid & ~in_seg).astype(float)
        word_src = joint if (cfg.gate_word_factor or lp.z0 is None) else WL
        logp = ad.sum(word_src * word_mask, axis=1)
        if segs and not self.words_only:
            K = len(segs)
            span = np.zeros((B * Ty, K))
            owner = np.zeros((K, B))
            for k, sg in enumerate(segs):
                span[sg.row * Ty + sg.begin : sg.row * Ty + sg.end, k] = 1.0
                owner[k, sg.row] = 1.0
            seg_word = ad.matmul(ad.reshape(joint, (B * Ty,)), span)
            log_known = np.array([0.0 if sg.known else -np.inf for sg in segs])
            seg_phrase = lp.phrase[[sg.row for sg in segs], [sg.begin for sg in segs], [sg.slot for sg in segs]]
            seg_total = ad.logsumexp(ad.stack([seg_word + log_known, seg_phrase], axis=-1), axis=-1)
            logp = logp + ad.matmul(seg_total, owner)
        loss = -ad.sum(logp) * (1.0 / B)
        n_words = int(word_mask.sum())
        word_logp_sum = float((word_src.data * word_mask).sum())
        return NLLResult(loss, logp, n_words, word_logp_sum, gate_values)

    def sequence_nll(self, example: ParallelExample) -> Tensor:
        return self.batch_nll([example]).loss

    # ----------------------------------------------------------- decoding

    def session(self, example: ParallelExample) -> Session:
        ann = example.annotation
        encoded = encode(self.params, example.source_ids, ann.tag_matrix)
        cands = [
            Candidate(o.slot, o.begin, o.end, example.phrase_ids[o.slot], example.phrase_tokens[o.slot], example.phrase_known[o.slot])
            for o in ann.occurrences
        ]
        return Session(self, encoded, cands, BOS)

    def session_nll(self, example: ParallelExample) -> Tensor:
        """-log p(y|x) computed one sentence at a time along the decoding path."""
        sess = self.session(example)
        state = sess.initial
        y = example.target_ids
        by_start = {g.target_begin: g for g in example.annotation.gold}
        ends = {g.target_end: g.slot for g in example.annotation.gold}
        total = None
        t = 0
        while t < len(y):
            if t in by_start and not self.words_only:
                g = by_start[t]
                term, state = sess.phrase_segment_logprob(state, g.slot)
                t = g.target_end
            else:
                lp = sess.logprobs(state)
                term = (lp.word_joint() if self.config.gate_word_factor else lp.word)[y[t]]
                state = sess.feed(state, y[t])
                t += 1
                if self.words_only and t in ends:
                    state = sess.consume(state, ends[t])
            total = term if total is None else total + term
        return -total
