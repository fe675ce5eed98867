"""Model configuration and named parameter construction."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from .autodiff import Tensor

VARIANTS = ("gate", "softmax", "baseline")


@dataclass(frozen=True)
class ModelConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    variant: str = "gate"
    d_e: int = 16
    d_h: int = 32
    n_p: int = 10
    # W_y words in the gate variant carry the p(z=0) factor
    gate_word_factor: bool = True

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        for name in ("src_vocab_size", "tgt_vocab_size", "d_e", "d_h", "n_p"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    @property
    def d_ctx(self) -> int:
        """Width of a tagged annotation h'_i."""
        return 2 * self.d_h + self.n_p

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


PAPER_SCALE = {"d_e": 620, "d_h": 1000, "n_p": 10}


def _gru_shapes(prefix: str, d_in: int, d_h: int) -> dict[str, tuple[int, ...]]:
    return {
        f"{prefix}.W": (3 * d_h, d_in),
        f"{prefix}.U_zr": (2 * d_h, d_h),
        f"{prefix}.U_c": (d_h, d_h),
        f"{prefix}.b": (3 * d_h,),
    }


def _readout_shapes(prefix: str, cfg: ModelConfig, n_out: int, with_phrase: bool = False) -> dict:
    shapes = {
        f"{prefix}.U": (cfg.d_h, cfg.d_h),
        f"{prefix}.C": (cfg.d_h, cfg.d_ctx),
        f"{prefix}.V": (cfg.d_h, cfg.d_e),
    }
    if with_phrase:
        shapes[f"{prefix}.R"] = (cfg.d_h, cfg.d_h)
    shapes[f"{prefix}.W"] = (n_out, cfg.d_h)
    return shapes


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d_h, d_e = cfg.d_h, cfg.d_e
    shapes: dict[str, tuple[int, ...]] = {
        "src_emb": (cfg.src_vocab_size, d_e),
        "tgt_emb": (cfg.tgt_vocab_size, d_e),
    }
    shapes.update(_gru_shapes("enc_f", d_e, d_h))
    shapes.update(_gru_shapes("enc_b", d_e, d_h))
    shapes["dec_init.W"] = (d_h, d_h)
    shapes.update({
        "att.W_s": (d_h, d_h),
        "att.W_h": (d_h, cfg.d_ctx),
        "att.W_e": (d_h, d_e),
        "att.b": (d_h,),
        "att.v": (d_h,),
    })
    shapes.update(_gru_shapes("dec", cfg.d_ctx + d_e, d_h))
    if cfg.variant in ("gate", "baseline"):
        shapes.update(_readout_shapes("word_o", cfg, cfg.tgt_vocab_size))
    if cfg.variant == "gate":
        shapes.update({
            "gate.W1": (d_h, d_h + cfg.d_ctx + d_e),
            "gate.b1": (d_h,),
            "gate.W2": (d_h, d_h),
            "gate.b2": (d_h,),
            "gate.w": (1, d_h),
            "gate.b": (1,),
        })
        shapes.update(_readout_shapes("phrase_p", cfg, cfg.n_p))
    if cfg.variant == "softmax":
        shapes.update(_readout_shapes("word_w", cfg, cfg.tgt_vocab_size))
        shapes.update(_readout_shapes("phrase_q", cfg, 1, with_phrase=True))
        shapes.update(_gru_shapes("pemb", d_e, d_h))
    return shapes


def is_bias(name: str) -> bool:
    leaf = name.rsplit(".", 1)[-1]
    return leaf.startswith("b")


def init_params(cfg: ModelConfig, rng: np.random.Generator | int = 0, scale: float = 0.08) -> dict[str, Tensor]:
    """Uniform(-scale, scale) weights, zero biases, in a fixed name order."""
    rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    params = {}
    for name, shape in param_shapes(cfg).items():
        data = np.zeros(shape) if is_bias(name) else rng.uniform(-scale, scale, size=shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def group_of(name: str) -> str:
    return name.split(".", 1)[0]
