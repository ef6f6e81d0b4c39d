"""Parameter containers, layers, and the Adam optimizer.

A ``Module`` discovers its parameters by walking instance attributes
(parameters, submodules, and lists/dicts of either), producing stable
slash-joined names. Frozen parameters stay in the name table, keep requiring
gradients off, and are skipped by optimizers.
"""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor, attention, gelu, layer_norm

__all__ = ["Parameter", "Module", "Linear", "LayerNorm", "MultiheadAttention", "FeedForward", "Adam"]


class Parameter:
    """A named, trainable array. ``frozen`` excludes it from optimizer updates
    and from gradient accumulation."""

    __slots__ = ("tensor", "name", "_frozen")

    def __init__(self, data: np.ndarray, name: str = "", frozen: bool = False):
        self.tensor = Tensor(data, requires_grad=not frozen)
        self.name = name
        self._frozen = frozen

    @property
    def frozen(self) -> bool:
        return self._frozen

    @frozen.setter
    def frozen(self, value: bool) -> None:
        self._frozen = bool(value)
        self.tensor.requires_grad = not self._frozen
        if self._frozen:
            self.tensor.grad = None

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @data.setter
    def data(self, value: np.ndarray) -> None:
        self.tensor.data = np.asarray(value, dtype=self.tensor.dtype)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    def __repr__(self) -> str:
        state = "frozen" if self._frozen else "trainable"
        return f"Parameter({self.name or '<unnamed>'}, shape={self.shape}, {state})"


class Module:
    """Base class providing parameter discovery, naming, and (de)serialization."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, param in self._walk(prefix.rstrip("/")):
            param.name = name
            yield name, param

    def _walk(self, prefix: str) -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}/{attr}" if prefix else attr
            yield from _walk_value(path, value)

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_frozen(self, frozen: bool) -> None:
        for _, p in self.named_parameters():
            p.frozen = frozen

    def zero_grad(self) -> None:
        for _, p in self.named_parameters():
            p.tensor.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if tuple(arr.shape) != tuple(p.shape):
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk_value(path: str, value) -> Iterator[tuple[str, Parameter]]:
    if isinstance(value, Parameter):
        yield path, value
    elif isinstance(value, Module):
        yield from value._walk(path)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            yield from _walk_value(f"{path}/{i}", item)
    elif isinstance(value, dict):
        for key in value:
            yield from _walk_value(f"{path}/{key}", value[key])


def normal_init(rng: np.random.Generator, shape: tuple[int, ...], std: float = 0.02, dtype=np.float32) -> np.ndarray:
    return (rng.standard_normal(shape) * std).astype(dtype)


class Linear(Module):
    """y = x @ weight (+ bias). Weight is laid out (in_features, out_features)."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator, bias: bool = True, std: float = 0.02, dtype=np.float32):
        self.weight = Parameter(normal_init(rng, (in_features, out_features), std, dtype))
        self.bias = Parameter(np.zeros(out_features, dtype=dtype)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = x @ self.weight.tensor
        if self.bias is not None:
            out = out + self.bias.tensor
        return out


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5, dtype=np.float32):
        self.gain = Parameter(np.ones(dim, dtype=dtype))
        self.bias = Parameter(np.zeros(dim, dtype=dtype))
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain.tensor, self.bias.tensor, self.eps)


class MultiheadAttention(Module):
    """Multi-head attention with bias-free query/key/value/output projections.

    Queries may live in a different width than keys/values; both are projected
    into ``dim`` and the output is projected back to the query width.
    """

    def __init__(self, query_dim: int, kv_dim: int, dim: int, num_heads: int, rng: np.random.Generator, dtype=np.float32):
        if dim % num_heads != 0:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.to_q = Linear(query_dim, dim, rng, bias=False, dtype=dtype)
        self.to_k = Linear(kv_dim, dim, rng, bias=False, dtype=dtype)
        self.to_v = Linear(kv_dim, dim, rng, bias=False, dtype=dtype)
        self.to_out = Linear(dim, query_dim, rng, bias=False, dtype=dtype)
        self.num_heads = num_heads

    def forward(self, query: Tensor, key: Tensor, value: Tensor, mask: np.ndarray | None = None) -> Tensor:
        q = self.to_q(query)
        k = self.to_k(key)
        v = self.to_v(value)
        out = attention(q, k, v, self.num_heads, mask=mask)
        return self.to_out(out)


class FeedForward(Module):
    """Two-layer MLP with GELU; hidden width defaults to 4x the input."""

    def __init__(self, dim: int, rng: np.random.Generator, hidden: int | None = None, dtype=np.float32):
        hidden = 4 * dim if hidden is None else hidden
        self.fc1 = Linear(dim, hidden, rng, dtype=dtype)
        self.fc2 = Linear(hidden, dim, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(gelu(self.fc1(x)))


class Adam:
    """Adam with bias correction. Frozen parameters are excluded at
    construction and double-checked at step time."""

    def __init__(self, params: Iterable[Parameter], lr: float = 1e-3, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.params = [p for p in params if not p.frozen]
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.tensor.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        for i, p in enumerate(self.params):
            if p.frozen:
                continue
            g = p.tensor.grad
            if g is None:
                continue
            self._m[i] = self.beta1 * self._m[i] + (1.0 - self.beta1) * g
            self._v[i] = self.beta2 * self._v[i] + (1.0 - self.beta2) * g * g
            m_hat = self._m[i] / (1.0 - self.beta1 ** t)
            v_hat = self._v[i] / (1.0 - self.beta2 ** t)
            p.tensor.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Optimizer moments keyed by parameter name, for checkpointing."""
        out: dict[str, np.ndarray] = {}
        for i, p in enumerate(self.params):
            out[f"opt/m/{p.name}"] = self._m[i]
            out[f"opt/v/{p.name}"] = self._v[i]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for i, p in enumerate(self.params):
            self._m[i] = np.asarray(arrays[f"opt/m/{p.name}"], dtype=p.tensor.dtype)
            self._v[i] = np.asarray(arrays[f"opt/v/{p.name}"], dtype=p.tensor.dtype)
        self.step_count = step_count
