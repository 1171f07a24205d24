"""Reverse-mode automatic differentiation on float64 numpy arrays.

A ``Tensor`` wraps an ndarray; a ``Tape`` records every primitive applied
while it is active (a ``with`` block) and replays the records in reverse to
accumulate exact gradients.  Ops run outside any tape compute values only,
so inference code pays no recording overhead.

Broadcasting is deliberately restricted: elementwise ops accept equal
shapes, a python scalar, or a trailing-shape operand against a leading
batch dim (e.g. ``(B, D) + (D,)`` for biases).  Everything is float64.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "ShapeError",
    "Tensor",
    "Tape",
    "make_rng",
    "matmul",
    "add",
    "sub",
    "mul",
    "neg",
    "exp",
    "log",
    "square",
    "tanh",
    "sigmoid",
    "gelu",
    "clip",
    "layer_norm",
    "softmax",
    "concat",
    "mse",
    "gaussian_nll",
    "kl_diag_gaussians",
    "grad_check",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)
_LOG_2PI = math.log(2.0 * math.pi)


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested op."""


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``(seed, *stream)``.

    Streams derived from distinct tuples are statistically independent, so
    parallel workers can draw from (seed, worker_index) without coordination.
    """
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


class Tensor:
    """Float64 array node.  ``requires_grad`` marks trainable leaves."""

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"zero-sized dim in shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    def __getitem__(self, key) -> "Tensor":
        return take(self, key)

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

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------

_TAPE_STACK: list["Tape"] = []


class Tape:
    """Execution-ordered record of primitives for one backward pass.

    Records are appended in forward execution order, which is a valid
    topological order, so a single reversed sweep propagates gradients.
    A leaf consumed k times receives the sum of its k contributions.
    """

    def __init__(self):
        self._records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self._tracked: set[int] = set()

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _TAPE_STACK.pop()
        assert popped is self, "tapes must unwind in LIFO order"

    def _tracks(self, t: Tensor) -> bool:
        return t.requires_grad or id(t) in self._tracked

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], vjp: Callable) -> None:
        self._records.append((out, inputs, vjp))
        self._tracked.add(id(out))

    def grad(self, loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
        """Gradients of scalar ``loss`` w.r.t. every tensor in ``params``."""
        if loss.data.ndim != 0:
            raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        for out, inputs, vjp in reversed(self._records):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            for t, gi in zip(inputs, vjp(g)):
                if gi is None or not self._tracks(t):
                    continue
                acc = grads.get(id(t))
                grads[id(t)] = gi if acc is None else acc + gi
        return {
            name: grads.get(id(p), np.zeros_like(p.data)) for name, p in params.items()
        }


def _tape_for(*tensors: Tensor) -> Tape | None:
    if not _TAPE_STACK:
        return None
    tape = _TAPE_STACK[-1]
    if any(tape._tracks(t) for t in tensors):
        return tape
    return None


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# elementwise binary ops (restricted broadcasting)
# ---------------------------------------------------------------------------


def _binary_mode(a: np.ndarray, b: np.ndarray, opname: str) -> str:
    """'same', 'b_scalar', 'a_scalar', 'b_trailing', or 'a_trailing'."""
    if a.shape == b.shape:
        return "same"
    if b.ndim == 0:
        return "b_scalar"
    if a.ndim == 0:
        return "a_scalar"
    if a.ndim == b.ndim + 1 and a.shape[1:] == b.shape:
        return "b_trailing"
    if b.ndim == a.ndim + 1 and b.shape[1:] == a.shape:
        return "a_trailing"
    raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} do not conform")


def _reduce_to(g: np.ndarray, mode: str, side: str) -> np.ndarray:
    """Collapse an output-shaped gradient onto the operand named by ``side``."""
    if mode == "same" or (mode == "b_trailing" and side == "a") or (
        mode == "a_trailing" and side == "b"
    ):
        return g
    if mode.startswith(side):  # scalar or trailing operand
        if mode.endswith("scalar"):
            return g.sum()
        return g.sum(axis=0)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a.data, b.data, "add")
    out = Tensor(a.data + b.data)
    tape = _tape_for(a, b)
    if tape is not None:
        tape.record(
            out,
            (a, b),
            lambda g: (_reduce_to(g, mode, "a"), _reduce_to(g, mode, "b")),
        )
    return out


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a.data, b.data, "sub")
    out = Tensor(a.data - b.data)
    tape = _tape_for(a, b)
    if tape is not None:
        tape.record(
            out,
            (a, b),
            lambda g: (_reduce_to(g, mode, "a"), -_reduce_to(g, mode, "b")),
        )
    return out


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    mode = _binary_mode(a.data, b.data, "mul")
    out = Tensor(a.data * b.data)
    tape = _tape_for(a, b)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(
            out,
            (a, b),
            lambda g: (_reduce_to(g * bd, mode, "a"), _reduce_to(g * ad, mode, "b")),
        )
    return out


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    tape = _tape_for(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (-g,))
    return out


# ---------------------------------------------------------------------------
# elementwise unary ops
# ---------------------------------------------------------------------------


def _unary(a, value: np.ndarray, dvalue: np.ndarray) -> Tensor:
    out = Tensor(value)
    tape = _tape_for(a)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * dvalue,))
    return out


def exp(a) -> Tensor:
    a = _as_tensor(a)
    v = np.exp(a.data)
    return _unary(a, v, v)


def log(a) -> Tensor:
    a = _as_tensor(a)
    return _unary(a, np.log(a.data), 1.0 / a.data)


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _unary(a, a.data * a.data, 2.0 * a.data)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    v = np.tanh(a.data)
    return _unary(a, v, 1.0 - v * v)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    v = 1.0 / (1.0 + np.exp(-a.data))
    return _unary(a, v, v * (1.0 - v))


def gelu(a) -> Tensor:
    """Exact (erf-based) GELU: x * Phi(x)."""
    a = _as_tensor(a)
    x = a.data
    phi = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return _unary(a, x * phi, phi + x * pdf)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp with zero gradient outside the open interval (lo, hi)."""
    a = _as_tensor(a)
    v = np.clip(a.data, lo, hi)
    inside = ((a.data > lo) & (a.data < hi)).astype(np.float64)
    return _unary(a, v, inside)


# ---------------------------------------------------------------------------
# matmul / reductions / structure
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    out = Tensor(a.data @ b.data)
    tape = _tape_for(a, b)
    if tape is not None:
        ad, bd = a.data, b.data
        tape.record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g))
    return out


def _reduce(a: Tensor, axis: int | None, mean: bool) -> Tensor:
    if axis is None:
        n = a.data.size
        val = a.data.mean() if mean else a.data.sum()
        out = Tensor(val)
        tape = _tape_for(a)
        if tape is not None:
            shape = a.data.shape
            scale = 1.0 / n if mean else 1.0
            tape.record(out, (a,), lambda g: (np.full(shape, g * scale),))
        return out
    val = a.data.mean(axis=axis) if mean else a.data.sum(axis=axis)
    out = Tensor(val)
    tape = _tape_for(a)
    if tape is not None:
        n = a.data.shape[axis]
        scale = 1.0 / n if mean else 1.0
        ax = axis

        def vjp(g):
            return (np.repeat(np.expand_dims(g * scale, ax), n, axis=ax),)

        tape.record(out, (a,), vjp)
    return out


def take(a, key) -> Tensor:
    """Basic slicing/indexing with gradient scatter-add."""
    a = _as_tensor(a)
    out = Tensor(a.data[key])
    tape = _tape_for(a)
    if tape is not None:
        shape = a.data.shape

        def vjp(g):
            full = np.zeros(shape)
            full[key] += g
            return (full,)

        tape.record(out, (a,), vjp)
    return out


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in ts], axis=axis))
    tape = _tape_for(*ts)
    if tape is not None:
        sizes = [t.data.shape[axis] for t in ts]
        splits = np.cumsum(sizes)[:-1]
        tape.record(out, tuple(ts), lambda g: tuple(np.split(g, splits, axis=axis)))
    return out


def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)
    tape = _tape_for(a)
    if tape is not None:
        tape.record(
            out,
            (a,),
            lambda g: ((g - (g * y).sum(axis=axis, keepdims=True)) * y,),
        )
    return out


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(
            f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs input {x.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv_std
    out = Tensor(xhat * gain.data + bias.data)
    tape = _tape_for(x, gain, bias)
    if tape is not None:
        gd = gain.data
        batch_axes = tuple(range(x.ndim - 1))

        def vjp(g):
            dxhat = g * gd
            dx = inv_std * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
            dgain = (g * xhat).sum(axis=batch_axes)
            dbias = g.sum(axis=batch_axes)
            return (dx, dgain, dbias)

        tape.record(out, (x, gain, bias), vjp)
    return out


# ---------------------------------------------------------------------------
# loss-style primitives (compositions; gradients come from the tape)
# ---------------------------------------------------------------------------


def mse(pred, target) -> Tensor:
    """Mean over all elements of the squared error."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: shapes {pred.shape} and {target.shape} differ")
    return square(sub(pred, target)).mean()


def gaussian_nll(mean, log_std, x) -> Tensor:
    """Negative log density of ``x`` under N(mean, exp(log_std)^2), summed
    over the last axis.  ``log_std`` may be a scalar constant or a tensor."""
    mean = _as_tensor(mean)
    log_std = _as_tensor(log_std)
    x = _as_tensor(x)
    z = mul(sub(x, mean), exp(neg(log_std)))
    per = add(add(mul(square(z), 0.5), log_std), 0.5 * _LOG_2PI)
    return per.sum(axis=-1)


def kl_diag_gaussians(mu_q, log_std_q, mu_p, log_std_p) -> Tensor:
    """KL(q || p) between diagonal Gaussians, summed over the last axis.

    Per element: (ls_p - ls_q) + 0.5*exp(2(ls_q - ls_p))
                 + 0.5*(mu_q - mu_p)^2*exp(-2*ls_p) - 0.5
    """
    mu_q, mu_p = _as_tensor(mu_q), _as_tensor(mu_p)
    log_std_q, log_std_p = _as_tensor(log_std_q), _as_tensor(log_std_p)
    dls = sub(log_std_q, log_std_p)
    var_ratio = exp(mul(dls, 2.0))
    dmu = sub(mu_q, mu_p)
    maha = mul(square(dmu), exp(mul(log_std_p, -2.0)))
    per = add(add(neg(dls), mul(add(var_ratio, maha), 0.5)), -0.5)
    return per.sum(axis=-1)


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def grad_check(
    f: Callable[[], Tensor],
    params: dict[str, Tensor],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` must be a deterministic scalar-valued closure over ``params``;
    it is re-evaluated 2x per parameter element with the element nudged by
    +/- eps.  Relative error uses max(|analytic|, |numeric|, 1e-6) in the
    denominator so exact zeros compare as zero error.
    """
    if not (0.0 < eps <= 1e-2):
        raise ValueError(f"eps must be in (0, 1e-2], got {eps}")
    with Tape() as tape:
        loss = f()
    analytic = tape.grad(loss, params)
    worst = 0.0
    for name, p in params.items():
        flat = p.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(f().data)
            flat[i] = orig - eps
            f_minus = float(f().data)
            flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise FloatingPointError(
                    f"non-finite objective while perturbing {name}[{i}]: "
                    f"f(+eps)={f_plus}, f(-eps)={f_minus}"
                )
            numeric = (f_plus - f_minus) / (2.0 * eps)
            err = abs(ana[i] - numeric) / max(abs(ana[i]), abs(numeric), 1e-6)
            worst = max(worst, err)
    return worst
