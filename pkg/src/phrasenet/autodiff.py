"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every model computation in this package is composed from the primitives
below, so gradients of the training loss are exact up to round-off.
Graphs are dynamic: each forward pass records the nodes it creates and
``backward`` walks them in reverse creation order.
"""

from __future__ import annotations

import contextlib
import itertools
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DTYPE = np.float64
# kept as-is when handed to Tensor; used for high-precision reference evaluations
_WIDE = (np.dtype(np.float64), np.dtype(np.longdouble))

_counter = itertools.count()
_grad_enabled = True


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class NumericError(ArithmeticError):
    """Non-finite values where finite ones are required."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference, finite differences)."""
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_id")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        if type(data) is not np.ndarray:
            data = np.asarray(data)
        if data.dtype not in _WIDE:
            data = data.astype(DTYPE)
        self.data = data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self._id = next(_counter)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x) -> Tensor:
    return x if type(x) is Tensor else Tensor(x)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_enabled and any([p.requires_grad for p in parents]):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=DTYPE, copy=True)
    else:
        t.grad += g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary(op, a: Tensor, b: Tensor, kind: str) -> np.ndarray:
    try:
        return op(a.data, b.data)
    except ValueError:
        raise DimensionError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.add, a, b, "add")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out, (a, b), _bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.subtract, a, b, "sub")

    def _bw(g):
        _accumulate(a, _unbroadcast(g, a.shape))
        _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out, (a, b), _bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = _binary(np.multiply, a, b, "mul")

    def _bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out, (a, b), _bw)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: _accumulate(a, -g))


def matmul(a, b) -> Tensor:
    """Matrix product. ``a`` may carry leading batch axes; ``b`` is 1-D or 2-D."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim not in (1, 2) or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    out = a.data @ b.data

    def _bw(g):
        if b.ndim == 1:
            if a.requires_grad:
                _accumulate(a, g[..., None] * b.data)
            if b.requires_grad:
                _accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1))
            return
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            if a.ndim == 1:
                _accumulate(b, np.outer(a.data, g))
            else:
                _accumulate(b, a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, b.shape[1]))

    return _make(out, (a, b), _bw)


def linear(x, w) -> Tensor:
    """``x @ w.T`` for a weight stored as (out, in)."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise DimensionError(f"linear: input {x.shape} does not match weight {w.shape}")
    out = x.data @ w.data.T

    def _bw(g):
        if x.requires_grad:
            _accumulate(x, g @ w.data)
        if w.requires_grad:
            _accumulate(w, g.reshape(-1, w.shape[0]).T @ x.data.reshape(-1, w.shape[1]))

    return _make(out, (x, w), _bw)


# -------------------------------------------------------------- elementwise


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * (1.0 - y * y)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    y = _sigmoid(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * y * (1.0 - y)))


def log_sigmoid(a) -> Tensor:
    """log(sigmoid(a)) without overflow."""
    a = as_tensor(a)
    y = -np.logaddexp(0.0, -a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * _sigmoid(-a.data)))


def exp(a) -> Tensor:
    a = as_tensor(a)
    y = np.exp(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g * y))


def log(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(divide="ignore"):
        y = np.log(a.data)
    return _make(y, (a,), lambda g: _accumulate(a, g / a.data))


def elementwise(kind: str, *operands) -> Tensor:
    """Dispatch by name: tanh, sigmoid, add, mul, concat_rows."""
    table = {"tanh": tanh, "sigmoid": sigmoid, "add": add, "mul": mul}
    if kind == "concat_rows":
        return concat(operands, axis=0)
    if kind not in table:
        raise ValueError(f"unknown elementwise kind {kind!r}")
    return table[kind](*operands)


# -------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(out, (a,), _bw)


def _check_finite(x: np.ndarray, what: str, axis: int = -1) -> None:
    # -inf is a legal mask value as long as each row keeps a finite entry
    if np.isnan(x).any() or np.isposinf(x).any():
        raise NumericError(f"{what}: non-finite input")
    if x.size and not np.isfinite(x).any(axis=axis).all():
        raise NumericError(f"{what}: every entry of a row is -inf")


def softmax(a, axis: int = -1) -> Tensor:
    """Max-shifted softmax. Entries at -inf receive exactly zero probability."""
    a = as_tensor(a)
    _check_finite(a.data, "softmax", axis)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        _accumulate(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

    return _make(y, (a,), _bw)


def logsumexp(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.exp(a.data - m).sum(axis=axis, keepdims=True)) + m

    def _bw(g):
        w = np.exp(a.data - out)
        _accumulate(a, np.expand_dims(g, axis) * w)

    return _make(np.squeeze(out, axis=axis), (a,), _bw)


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    _check_finite(a.data, "log_softmax", axis)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse

    def _bw(g):
        _accumulate(a, g - np.exp(y) * g.sum(axis=axis, keepdims=True))

    return _make(y, (a,), _bw)


# ---------------------------------------------------------------- structure


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat: shapes {[t.shape for t in ts]} ({exc})") from None
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def _bw(g):
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[ax] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(out, ts, _bw)


def _is_advanced(index) -> bool:
    parts = index if isinstance(index, tuple) else (index,)
    return any(isinstance(p, (list, np.ndarray)) for p in parts)


def getitem(a, index) -> Tensor:
    """Basic or integer-array indexing; backward scatters with accumulation."""
    a = as_tensor(a)
    out = a.data[index]

    advanced = _is_advanced(index)

    def _bw(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, index, g)
        else:
            full[index] += g
        _accumulate(a, full)

    return _make(np.array(out), (a,), _bw)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in ts], axis=axis)

    def _bw(g):
        for i, t in enumerate(ts):
            if t.requires_grad:
                _accumulate(t, np.take(g, i, axis=axis))

    return _make(out, ts, _bw)


# --------------------------------------------------------------- recurrent


def gru(x_proj, s, u_zr, u_c) -> Tensor:
    """Fused GRU update.

    ``x_proj`` holds the input projections plus biases for the update,
    reset and candidate gates, stacked as (..., 3h). With z, r the gate
    activations and c = tanh(x_c + U_c (r*s)), returns (1 - z) * s + z * c.
    """
    x_proj, s, u_zr, u_c = (as_tensor(t) for t in (x_proj, s, u_zr, u_c))
    h = u_c.shape[0]
    if s.shape[-1] != h or x_proj.shape[-1] != 3 * h or u_zr.shape != (2 * h, h):
        raise DimensionError(
            f"gru: state {s.shape}, projections {x_proj.shape}, U_zr {u_zr.shape}, U_c {u_c.shape}"
        )
    xp, sd = x_proj.data, s.data
    # gate activations only need absolute accuracy, so the tanh form suffices
    zr = 0.5 + 0.5 * np.tanh(0.5 * (xp[..., : 2 * h] + sd @ u_zr.data.T))
    z, r = zr[..., :h], zr[..., h:]
    rs = r * sd
    c = np.tanh(xp[..., 2 * h :] + rs @ u_c.data.T)
    out = (1.0 - z) * sd + z * c

    def _bw(g):
        dz = g * (c - sd)
        dac = g * z * (1.0 - c * c)
        drs = dac @ u_c.data
        daz = dz * z * (1.0 - z)
        dar = drs * sd * r * (1.0 - r)
        dgh = np.concatenate([daz, dar], axis=-1)
        if x_proj.requires_grad:
            _accumulate(x_proj, np.concatenate([daz, dar, dac], axis=-1))
        if s.requires_grad:
            _accumulate(s, g * (1.0 - z) + drs * r + dgh @ u_zr.data)
        if u_zr.requires_grad:
            _accumulate(u_zr, dgh.reshape(-1, 2 * h).T @ sd.reshape(-1, h))
        if u_c.requires_grad:
            _accumulate(u_c, dac.reshape(-1, h).T @ rs.reshape(-1, h))

    return _make(out, (x_proj, s, u_zr, u_c), _bw)


# ------------------------------------------------------------ fused layers


def affine(inputs, weights, bias=None, act: str | None = None) -> Tensor:
    """act(sum_i x_i @ W_i.T + b) as one node; ``act`` is None or "tanh".

    Every input shares the same leading axes; weights are stored (out, in).
    """
    inputs = [as_tensor(x) for x in inputs]
    weights = [as_tensor(w) for w in weights]
    if not inputs or len(inputs) != len(weights):
        raise ValueError("affine: need one weight per input")
    if act not in (None, "tanh"):
        raise ValueError(f"affine: unknown activation {act!r}")
    out = None
    for x, w in zip(inputs, weights):
        if w.ndim != 2 or x.shape[-1] != w.shape[1]:
            raise DimensionError(f"affine: input {x.shape} does not match weight {w.shape}")
        term = x.data @ w.data.T
        out = term if out is None else out + term
    parents = list(inputs) + list(weights)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data
        parents.append(bias)
    if act == "tanh":
        out = np.tanh(out)
    n_out = weights[0].shape[0]

    def _bw(g):
        if act == "tanh":
            g = g * (1.0 - out * out)
        g2 = g.reshape(-1, n_out)
        for x, w in zip(inputs, weights):
            if x.requires_grad:
                _accumulate(x, g @ w.data)
            if w.requires_grad:
                _accumulate(w, g2.T @ x.data.reshape(-1, w.shape[1]))
        if bias is not None and bias.requires_grad:
            _accumulate(bias, _unbroadcast(g, bias.shape))

    return _make(out, parents, _bw)


def additive_attention(query, keys, v, values, log_mask=None) -> tuple[Tensor, Tensor]:
    """Additive attention pooling as one node.

    scores_j = v . tanh(keys_j + query) (+ log_mask_j), alpha = softmax(scores),
    context = sum_j alpha_j values_j. ``query`` is (..., a), ``keys`` (..., T, a),
    ``values`` (..., T, D). Returns the context and alpha; alpha carries no graph.
    """
    query, keys, v, values = (as_tensor(t) for t in (query, keys, v, values))
    if keys.shape[-1] != query.shape[-1] or v.shape != (keys.shape[-1],) or keys.shape[:-1] != values.shape[:-1]:
        raise DimensionError(
            f"attention: query {query.shape}, keys {keys.shape}, v {v.shape}, values {values.shape}"
        )
    hidden = np.tanh(keys.data + query.data[..., None, :])
    scores = hidden @ v.data
    if log_mask is not None:
        scores = scores + log_mask
    _check_finite(scores, "attention")
    e = np.exp(scores - scores.max(axis=-1, keepdims=True))
    alpha = e / e.sum(axis=-1, keepdims=True)
    ctx = (alpha[..., None] * values.data).sum(axis=-2)

    def _bw(g):
        g_exp = g[..., None, :]
        if values.requires_grad:
            _accumulate(values, alpha[..., None] * g_exp)
        da = (values.data * g_exp).sum(axis=-1)
        ds = alpha * (da - (alpha * da).sum(axis=-1, keepdims=True))
        if v.requires_grad:
            _accumulate(v, (ds[..., None] * hidden).reshape(-1, v.shape[0]).sum(axis=0))
        dpre = ds[..., None] * v.data * (1.0 - hidden * hidden)
        if keys.requires_grad:
            _accumulate(keys, dpre)
        if query.requires_grad:
            _accumulate(query, dpre.sum(axis=-2))

    return _make(ctx, (query, keys, v, values), _bw), Tensor(alpha)


# ----------------------------------------------------------------- backward


def backward(loss: Tensor) -> None:
    """Accumulate dloss/dleaf into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_ = [loss]
    while stack_:
        node = stack_.pop()
        if node._id in seen:
            continue
        seen.add(node._id)
        order.append(node)
        stack_.extend(p for p in node._parents if p.requires_grad and p._id not in seen)
    # creation order is a topological order of the DAG
    order.sort(key=lambda t: t._id, reverse=True)
    loss.grad = np.ones_like(loss.data)
    for node in order:
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        # interior grads are not retained
        node.grad = None


# ------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    step: float
    tol: float
    max_rel_err: dict[str, float] = field(default_factory=dict)

    @property
    def failures(self) -> list[str]:
        return [name for name, err in self.max_rel_err.items() if not err <= self.tol]

    @property
    def passed(self) -> bool:
        return not self.failures

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_err, key=lambda k: self.max_rel_err[k])
        return name, self.max_rel_err[name]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def finite_diff_check(
    f: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    step: float = 1e-5,
    tol: float = 1e-6,
    extended: bool = False,
) -> GradCheckReport:
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` closes over ``params`` and must rebuild its graph on every call.
    With ``extended`` the difference quotients are evaluated on long-double
    copies of the parameters, which pushes the cancellation noise of the
    quotient (about eps * |f| / step) far below the tolerance even for
    near-zero gradient entries. Analytic gradients stay in float64.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    for p in params.values():
        p.zero_grad()
    backward(f())
    analytic = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
        for name, p in params.items()
    }
    report = GradCheckReport(step=step, tol=tol)
    saved = {name: p.data for name, p in params.items()}
    if extended:
        for p in params.values():
            p.data = p.data.astype(np.longdouble)
    try:
        with no_grad():
            for name, p in params.items():
                flat = p.data.reshape(-1)
                numeric = np.empty(flat.size)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + step
                    fp = f().data
                    flat[i] = orig - step
                    fm = f().data
                    flat[i] = orig
                    numeric[i] = (fp - fm) / (2.0 * step)
                err = relative_error(analytic[name].reshape(-1), numeric)
                report.max_rel_err[name] = float(err.max()) if err.size else 0.0
    finally:
        for name, p in params.items():
            p.data = saved[name]
    return report
