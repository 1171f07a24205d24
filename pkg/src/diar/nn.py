"""Network building blocks on top of the autodiff core.

Dense layers use GELU nonlinearities followed by LayerNorm between linear
maps; recurrent encoding uses a standard-gate GRU cell.  Parameters are
plain ``Tensor`` leaves discovered by name via ``Module.params()`` so the
optimizer and the checkpoint writer share one flat view.
"""

from __future__ import annotations

import math

import numpy as np

from .autodiff import (
    Tape,
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    sigmoid,
    sub,
    tanh,
)

__all__ = [
    "Module",
    "Linear",
    "LayerNorm",
    "MLP",
    "GRUCell",
    "BiGRUEncoder",
    "Adam",
    "StepDecaySchedule",
    "sinusoidal_embedding",
]


class Module:
    """Parameter container: collects requires_grad tensors by dotted name."""

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for key, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    out[key] = val
            elif isinstance(val, Module):
                for sub_key, sub_val in val.params().items():
                    out[f"{key}.{sub_key}"] = sub_val
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        for sub_key, sub_val in item.params().items():
                            out[f"{key}.{i}.{sub_key}"] = sub_val
        return out

    def load_params(self, values: dict[str, np.ndarray]) -> None:
        own = self.params()
        missing = set(own) - set(values)
        extra = set(values) - set(own)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, tensor in own.items():
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.data.shape:
                raise ValueError(f"{name}: shape {arr.shape} != {tensor.data.shape}")
            tensor.data = arr.copy()

    def copy_from(self, other: "Module") -> None:
        self.load_params({k: v.data for k, v in other.params().items()})


class Linear(Module):
    def __init__(self, rng: np.random.Generator, in_dim: int, out_dim: int):
        bound = 1.0 / math.sqrt(in_dim)
        self.w = Tensor(rng.uniform(-bound, bound, (in_dim, out_dim)), requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.w), self.b)


class LayerNorm(Module):
    def __init__(self, dim: int):
        self.gain = Tensor(np.ones(dim), requires_grad=True)
        self.bias = Tensor(np.zeros(dim), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


class MLP(Module):
    """Linear -> GELU -> LayerNorm per hidden layer, linear output head."""

    def __init__(self, rng, in_dim: int, hidden: tuple[int, ...], out_dim: int):
        dims = (in_dim, *hidden)
        self.layers = [Linear(rng, dims[i], dims[i + 1]) for i in range(len(hidden))]
        self.norms = [LayerNorm(d) for d in hidden]
        self.head = Linear(rng, dims[-1], out_dim)

    def __call__(self, x: Tensor) -> Tensor:
        for lin, norm in zip(self.layers, self.norms):
            x = norm(gelu(lin(x)))
        return self.head(x)


class GRUCell(Module):
    """Single GRU step: h' = (1 - u) * h + u * cand.

    Gates: u = sigmoid(x Wxu + h Whu + bu), r = sigmoid(x Wxr + h Whr + br),
    cand = tanh(x Wxc + (r * h) Whc + bc).
    """

    def __init__(self, rng, in_dim: int, hidden_dim: int):
        self.x_proj = Linear(rng, in_dim, 3 * hidden_dim)
        bound = 1.0 / math.sqrt(hidden_dim)
        self.w_h_gates = Tensor(
            rng.uniform(-bound, bound, (hidden_dim, 2 * hidden_dim)), requires_grad=True
        )
        self.w_h_cand = Tensor(
            rng.uniform(-bound, bound, (hidden_dim, hidden_dim)), requires_grad=True
        )
        self.hidden_dim = hidden_dim

    def __call__(self, x: Tensor, h: Tensor) -> Tensor:
        if x.shape[0] != h.shape[0]:
            from .autodiff import ShapeError

            raise ShapeError(f"gru_cell: batch dims {x.shape} vs {h.shape}")
        n = self.hidden_dim
        xg = self.x_proj(x)
        hg = matmul(h, self.w_h_gates)
        u = sigmoid(add(xg[:, :n], hg[:, :n]))
        r = sigmoid(add(xg[:, n : 2 * n], hg[:, n:]))
        cand = tanh(add(xg[:, 2 * n :], matmul(mul(r, h), self.w_h_cand)))
        return add(mul(sub(1.0, u), h), mul(u, cand))


class BiGRUEncoder(Module):
    """Stacked bidirectional GRU; returns the concat of all final states.

    Layer l runs forward and backward over the sequence; its per-step
    outputs (concatenated directions) feed layer l+1.  The summary vector
    concatenates the 2*n_layers final hidden states, so its width is
    2 * n_layers * hidden_dim.
    """

    def __init__(self, rng, in_dim: int, hidden_dim: int, n_layers: int = 2):
        self.cells_fwd = []
        self.cells_bwd = []
        d = in_dim
        for _ in range(n_layers):
            self.cells_fwd.append(GRUCell(rng, d, hidden_dim))
            self.cells_bwd.append(GRUCell(rng, d, hidden_dim))
            d = 2 * hidden_dim
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers

    @property
    def out_dim(self) -> int:
        return 2 * self.n_layers * self.hidden_dim

    def __call__(self, steps: list[Tensor]) -> Tensor:
        """``steps`` is a length-L list of (B, in_dim) tensors."""
        batch = steps[0].shape[0]
        finals: list[Tensor] = []
        seq = steps
        for fwd, bwd in zip(self.cells_fwd, self.cells_bwd):
            h_f = Tensor(np.zeros((batch, self.hidden_dim)))
            outs_f = []
            for x in seq:
                h_f = fwd(x, h_f)
                outs_f.append(h_f)
            h_b = Tensor(np.zeros((batch, self.hidden_dim)))
            outs_b = []
            for x in reversed(seq):
                h_b = bwd(x, h_b)
                outs_b.append(h_b)
            outs_b.reverse()
            finals.extend([h_f, h_b])
            seq = [concat([f, b], axis=1) for f, b in zip(outs_f, outs_b)]
        return concat(finals, axis=1)


def gru_cell(x: Tensor, h: Tensor, cell: GRUCell) -> Tensor:
    """Functional alias for a single GRU update."""
    return cell(x, h)


def sinusoidal_embedding(t: np.ndarray, dim: int, max_period: float = 10_000.0) -> np.ndarray:
    """Classic sin/cos position features for integer timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Adam(Module):
    """Bias-corrected Adam over a named parameter dict."""

    def __init__(
        self,
        params: dict[str, Tensor],
        lr: float,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self._params = params
        self.lr = float(lr)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self._m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self._v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for name, p in self._params.items():
            g = grads[name]
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for parameter '{name}'")
            m = self._m[name]
            v = self._v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def state(self) -> dict:
        return {"t": self.t, "m": self._m, "v": self._v}


class StepDecaySchedule:
    """lr(e) = base_lr * factor**floor(e / step_size); monotone non-increasing."""

    def __init__(self, base_lr: float, step_size: int, factor: float):
        if step_size < 1:
            raise ValueError("step_size must be >= 1")
        if not (0.0 < factor <= 1.0):
            raise ValueError("factor must be in (0, 1]")
        self.base_lr = float(base_lr)
        self.step_size = int(step_size)
        self.factor = float(factor)

    def lr_at(self, epoch: int) -> float:
        return self.base_lr * self.factor ** (epoch // self.step_size)


def soft_update(target: Module, online: Module, rho: float) -> None:
    """target <- rho * target + (1 - rho) * online, parameterwise."""
    tgt = target.params()
    src = online.params()
    for name, p in tgt.items():
        p.data *= rho
        p.data += (1.0 - rho) * src[name].data
