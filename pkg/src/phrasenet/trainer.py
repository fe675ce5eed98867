"""Mini-batch training, gradient verification and checkpoints."""

from __future__ import annotations

import csv
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import CheckpointConsistencyError, read_checkpoint, write_checkpoint
from .corpus import Batch, ParallelExample, Vocabulary, collate, make_batches
from .model import ForwardCache, PhraseNet
from .params import ModelConfig, group_of, param_shapes

logger = logging.getLogger(__name__)

METRIC_FIELDS = ("step", "loss", "perplexity", "gate_rate")


class TrainingError(RuntimeError):
    pass


@dataclass
class OptimizerState:
    """Adam moments plus settings; moments mirror the parameter shapes."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 5.0
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], **settings) -> "OptimizerState":
        opt = cls(**settings)
        for name, p in params.items():
            opt.m[name] = np.zeros_like(p.data)
            opt.v[name] = np.zeros_like(p.data)
        return opt

    def settings(self) -> dict:
        return dict(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps, clip_norm=self.clip_norm, step=self.step)


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def adam_update(params: dict[str, Tensor], grads: dict[str, np.ndarray], opt: OptimizerState) -> None:
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    c1, c2 = 1.0 - b1**opt.step, 1.0 - b2**opt.step
    for name, p in params.items():
        g = grads[name]
        opt.m[name] = b1 * opt.m[name] + (1.0 - b1) * g
        opt.v[name] = b2 * opt.v[name] + (1.0 - b2) * g * g
        p.data -= opt.lr * (opt.m[name] / c1) / (np.sqrt(opt.v[name] / c2) + opt.eps)


@dataclass
class StepMetrics:
    step: int
    loss: float
    perplexity: float
    gate_rate: float
    words: int = 0
    word_logp: float = 0.0

    def row(self) -> dict:
        return {"step": self.step, "loss": repr(self.loss), "perplexity": repr(self.perplexity), "gate_rate": repr(self.gate_rate)}


def _gate_rate(values: Sequence[float]) -> float:
    return float(np.mean(values)) if len(values) else float("nan")


def _perplexity(word_logp: float, words: int) -> float:
    return math.exp(-word_logp / words) if words else float("nan")


def batch_gradients(model: PhraseNet, batch: Batch | Sequence[ParallelExample], scale: float | None = None):
    """Loss and gradients of the mean NLL; ``scale`` overrides 1/B (used for shards)."""
    model.zero_grad()
    res = model.batch_nll(batch)
    loss = res.loss if scale is None else -ad.sum(res.logp) * scale
    ad.backward(loss)
    grads = {k: p.grad.copy() for k, p in model.params.items()}
    return float(loss.data), grads, res


@dataclass
class _Totals:
    n_words: int
    word_logp_sum: float
    gate_values: list[float]


def _shard_worker(args):
    config, arrays, examples, scale, off = args
    model = PhraseNet(ModelConfig.from_dict(config), {k: Tensor(v, requires_grad=True) for k, v in arrays.items()})
    model.phrase_mode_off = off
    loss, grads, res = batch_gradients(model, examples, scale)
    return loss, grads, res.n_words, res.word_logp_sum, res.gate_values


class MetricsLog:
    """Append-only CSV of per-step metrics."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists() or self.path.stat().st_size == 0
        self._fh = open(self.path, "a", newline="", encoding="utf-8")
        self._writer = csv.DictWriter(self._fh, fieldnames=METRIC_FIELDS)
        if new:
            self._writer.writeheader()

    def write(self, m: StepMetrics) -> None:
        self._writer.writerow(m.row())
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


@dataclass
class TrainerConfig:
    batch_size: int = 32
    max_len: int = 50
    lr: float = 1e-3
    clip_norm: float = 5.0
    seed: int = 0
    workers: int = 1
    log_every: int = 50


class Trainer:
    """Owns the optimizer, the data order and the step counter.

    Batch order for epoch k is drawn from a generator seeded with
    ``seed``; the generator state at the start of the current epoch and the
    offset into it are checkpointed, so a resumed run replays the same
    batches an uninterrupted run would have seen.
    """

    def __init__(self, model: PhraseNet, config: TrainerConfig | None = None, metrics_path=None):
        self.model = model
        self.config = config or TrainerConfig()
        if self.config.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.config.workers < 1:
            raise ValueError("workers must be >= 1")
        self.optimizer = OptimizerState.for_params(model.params, lr=self.config.lr, clip_norm=self.config.clip_norm)
        self.rng = np.random.default_rng(self.config.seed)
        self.epoch = 0
        self.offset = 0  # batches already consumed in the current epoch
        self._epoch_rng_state = self.rng.bit_generator.state
        self.metrics = MetricsLog(metrics_path) if metrics_path else None
        self.history: list[StepMetrics] = []
        self.vocabs: tuple[Vocabulary, Vocabulary] | None = None
        self._pool: ProcessPoolExecutor | None = None

    @property
    def step(self) -> int:
        return self.optimizer.step

    # ------------------------------------------------------------- update

    def _gradients(self, batch: Batch):
        w = self.config.workers
        if w == 1 or len(batch.examples) < 2:
            return batch_gradients(self.model, batch)
        if self._pool is None:
            self._pool = ProcessPoolExecutor(max_workers=w)
        B = len(batch.examples)
        shards = [list(s) for s in np.array_split(np.arange(B), min(w, B))]
        arrays = {k: p.data for k, p in self.model.params.items()}
        cfg = self.model.config.to_dict()
        jobs = [(cfg, arrays, [batch.examples[i] for i in s], 1.0 / B, self.model.phrase_mode_off) for s in shards]
        loss, grads, words, wlp, gates = 0.0, None, 0, 0.0, []
        for l_, g_, n_, w_, gv in self._pool.map(_shard_worker, jobs):
            loss += l_
            words += n_
            wlp += w_
            gates += gv
            grads = g_ if grads is None else {k: grads[k] + g_[k] for k in grads}
        return loss, grads, _Totals(words, wlp, gates)

    def train_step(self, batch: Batch, batch_id: int | str = "?") -> StepMetrics:
        loss, grads, res = self._gradients(batch)
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} in batch {batch_id} (step {self.step + 1})")
        clip_by_global_norm(grads, self.optimizer.clip_norm)
        adam_update(self.model.params, grads, self.optimizer)
        m = StepMetrics(
            self.step, loss, _perplexity(res.word_logp_sum, res.n_words), _gate_rate(res.gate_values),
            res.n_words, res.word_logp_sum,
        )
        self.history.append(m)
        if self.metrics:
            self.metrics.write(m)
        if self.config.log_every and self.step % self.config.log_every == 0:
            logger.info("step %d loss %.4f ppl %.3f gate %.3f", m.step, m.loss, m.perplexity, m.gate_rate)
        return m

    def _epoch_batches(self, examples) -> list[Batch]:
        self.rng.bit_generator.state = self._epoch_rng_state
        seed = int(self.rng.integers(2**63 - 1))
        return make_batches(examples, self.config.batch_size, self.config.max_len, rng=seed)

    def train_epoch(self, examples: Sequence[ParallelExample], max_steps: int | None = None) -> list[StepMetrics]:
        """Run the rest of the current epoch (or until ``max_steps`` total steps)."""
        batches = self._epoch_batches(examples)
        if not batches:
            raise TrainingError("no training batches (all examples filtered out)")
        out = []
        while self.offset < len(batches):
            if max_steps is not None and self.step >= max_steps:
                return out
            out.append(self.train_step(batches[self.offset], f"epoch {self.epoch} batch {self.offset}"))
            self.offset += 1
        self.epoch += 1
        self.offset = 0
        self._epoch_rng_state = self.rng.bit_generator.state
        return out

    def fit(
        self,
        examples: Sequence[ParallelExample],
        epochs: int | None = None,
        max_steps: int | None = None,
        dev: Sequence[ParallelExample] | None = None,
        patience: int | None = None,
        checkpoint_path=None,
    ) -> list[StepMetrics]:
        """Train until ``epochs`` epochs or ``max_steps`` steps (whichever comes first).

        With ``dev`` and ``patience``, stops after ``patience`` epochs without
        dev-loss improvement.
        """
        if epochs is None and max_steps is None:
            raise ValueError("give epochs or max_steps")
        best, stale = math.inf, 0
        try:
            while (epochs is None or self.epoch < epochs) and (max_steps is None or self.step < max_steps):
                self.train_epoch(examples, max_steps)
                if checkpoint_path:
                    self.save(checkpoint_path)
                if dev and patience is not None and self.offset == 0:
                    dev_loss = evaluate_nll(self.model, dev, self.config.batch_size)
                    logger.info("epoch %d dev loss %.4f", self.epoch, dev_loss)
                    if dev_loss < best - 1e-9:
                        best, stale = dev_loss, 0
                    else:
                        stale += 1
                        if stale >= patience:
                            logger.info("dev loss stalled for %d epochs; stopping", patience)
                            break
        finally:
            self.close()
        return self.history

    def close(self) -> None:
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None

    # -------------------------------------------------------- checkpoints

    def save(self, path) -> None:
        save_checkpoint(self.model, path, trainer=self)

    @classmethod
    def resume(cls, path, config: TrainerConfig | None = None, metrics_path=None, variant: str | None = None) -> "Trainer":
        ckpt = load_checkpoint(path, variant=variant)
        t = cls(ckpt.model, config, metrics_path)
        t.vocabs = ckpt.vocabs
        state = ckpt.trainer_state
        if state:
            opt = state["optimizer"]
            t.optimizer = OptimizerState(**opt, m=ckpt.moments["m"], v=ckpt.moments["v"])
            if config is not None:
                t.optimizer.lr, t.optimizer.clip_norm = config.lr, config.clip_norm
            t.epoch, t.offset = state["epoch"], state["offset"]
            t._epoch_rng_state = state["rng"]
            t.rng.bit_generator.state = state["rng"]
        return t


def evaluate_nll(model: PhraseNet, examples: Sequence[ParallelExample], batch_size: int = 32) -> float:
    """Mean per-sentence NLL without gradient tracking."""
    total, n = 0.0, 0
    with ad.no_grad():
        for s in range(0, len(examples), batch_size):
            chunk = list(examples[s : s + batch_size])
            res = model.batch_nll(collate(chunk))
            total += -float(res.logp.data.sum())
            n += len(chunk)
    return total / max(n, 1)


# ------------------------------------------------------------ checkpoints


@dataclass
class LoadedCheckpoint:
    model: PhraseNet
    vocabs: tuple[Vocabulary, Vocabulary] | None
    trainer_state: dict | None
    moments: dict[str, dict[str, np.ndarray]]
    header: dict


def save_checkpoint(model: PhraseNet, path, trainer: Trainer | None = None, vocabs=None) -> None:
    header: dict = {"config": model.config.to_dict()}
    vocabs = vocabs or (trainer.vocabs if trainer else None)
    if vocabs is not None:
        header["vocab"] = {"source": vocabs[0].to_list(), "target": vocabs[1].to_list()}
    tensors = {f"param/{k}": p.data for k, p in model.params.items()}
    if trainer is not None:
        header["trainer"] = {
            "optimizer": trainer.optimizer.settings(),
            "epoch": trainer.epoch,
            "offset": trainer.offset,
            "rng": trainer._epoch_rng_state,
            "seed": trainer.config.seed,
        }
        header["step"] = trainer.step
        for k in model.params:
            tensors[f"adam.m/{k}"] = trainer.optimizer.m[k]
            tensors[f"adam.v/{k}"] = trainer.optimizer.v[k]
    write_checkpoint(path, header, tensors)


def load_checkpoint(path, variant: str | None = None) -> LoadedCheckpoint:
    """Read and validate a checkpoint; nothing is built unless all checks pass."""
    data = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(data.header["config"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointConsistencyError(f"{path}: invalid model config: {exc}") from exc
    if variant is not None and cfg.variant != variant:
        raise CheckpointConsistencyError(f"{path}: checkpoint holds a {cfg.variant} model, not {variant}")
    expected = param_shapes(cfg)
    params = data.group("param")
    if set(params) != set(expected):
        raise CheckpointConsistencyError(f"{path}: parameter names disagree with the config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise CheckpointConsistencyError(f"{path}: {name} has shape {params[name].shape}, config says {shape}")
    moments = {"m": data.group("adam.m"), "v": data.group("adam.v")}
    trainer_state = data.header.get("trainer")
    if trainer_state is not None:
        for key in ("m", "v"):
            if set(moments[key]) != set(expected) or any(moments[key][k].shape != expected[k] for k in expected):
                raise CheckpointConsistencyError(f"{path}: optimizer moments disagree with the parameters")
    model = PhraseNet(cfg, {k: Tensor(params[k], requires_grad=True, name=k) for k in expected})
    vocabs = None
    if "vocab" in data.header:
        vocabs = (Vocabulary(data.header["vocab"]["source"]), Vocabulary(data.header["vocab"]["target"]))
        if len(vocabs[0]) != cfg.src_vocab_size or len(vocabs[1]) != cfg.tgt_vocab_size:
            raise CheckpointConsistencyError(f"{path}: stored vocabularies disagree with the config")
    return LoadedCheckpoint(model, vocabs, trainer_state, moments, data.header)


# ---------------------------------------------------- gradient verification


@dataclass
class GradientReport:
    tol: float
    groups: dict[str, float]  # worst relative error per parameter group
    params: dict[str, float]

    @property
    def failed_groups(self) -> list[str]:
        return [g for g, e in self.groups.items() if not e <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failed_groups

    def format(self) -> str:
        lines = [f"{g:10s} {e:.3e} {'ok' if e <= self.tol else 'FAIL'}" for g, e in self.groups.items()]
        return "\n".join(lines)


def verify_gradients(
    model: PhraseNet,
    examples: Iterable[ParallelExample],
    tol: float = 1e-4,
    step: float = 1e-5,
    extended: bool = True,
) -> GradientReport:
    """Central-difference check of the batch NLL for every parameter entry.

    Parameters are probed stage by stage: while a head parameter moves, the
    encoder output and the teacher-forced decoder states cannot change, so
    they are computed once and replayed. The numbers are the same as a full
    forward pass per probe, only cheaper.
    """
    examples = list(examples)
    if not examples:
        raise ValueError("no examples to check")
    batch = collate(examples)
    by_stage: dict[frozenset, dict[str, Tensor]] = {}
    for name, p in model.params.items():
        by_stage.setdefault(_reusable_stages(group_of(name)), {})[name] = p
    errors: dict[str, float] = {}
    for reuse, params in by_stage.items():
        cache = ForwardCache(reuse)
        rep = ad.finite_diff_check(
            lambda: model.batch_nll(batch, cache).loss, params, step=step, tol=tol, extended=extended
        )
        errors.update(rep.max_rel_err)
    groups: dict[str, float] = {}
    for name in model.params:
        g = group_of(name)
        groups[g] = max(groups.get(g, 0.0), errors[name])
    return GradientReport(tol, groups, {k: errors[k] for k in model.params})


_ENCODER_GROUPS = {"src_emb", "enc_f", "enc_b"}
_DECODER_GROUPS = {"tgt_emb", "dec_init", "att", "dec"}


def _reusable_stages(group: str) -> frozenset:
    if group in _ENCODER_GROUPS:
        return frozenset()
    if group in _DECODER_GROUPS:
        return frozenset({"encoder"})
    return frozenset({"encoder", "decoder"})
