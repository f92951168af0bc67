"""Parameter containers and the neural blocks shared by every pipeline stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor


class ConfigError(ValueError):
    """Invalid block configuration (widths, head counts, encoding sizes)."""


class ParameterSet:
    """Ordered mapping of dotted parameter paths to trainable tensors."""

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, path: str, value, requires_grad: bool = True) -> Tensor:
        if path in self._items:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=requires_grad)
        self._items[path] = t
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._items[path]

    def __contains__(self, path: str) -> bool:
        return path in self._items

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def items(self):
        return self._items.items()

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self._items if p.startswith(prefix)]

    def set(self, path: str, value) -> None:
        t = self._items[path]
        value = np.asarray(value, dtype=np.float64)
        if value.shape != t.shape:
            raise ValueError(f"{path}: shape {value.shape} != {t.shape}")
        t.data = value.copy()

    def copy(self) -> "ParameterSet":
        out = ParameterSet()
        for path, t in self._items.items():
            out.add(path, t.data.copy(), t.requires_grad)
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {p: t.data.copy() for p, t in self._items.items()}

    def load_state(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = [p for p in self._items if p not in state]
        if strict and missing:
            raise KeyError(f"missing parameters: {missing[:5]}")
        for path, value in state.items():
            if path in self._items:
                self.set(path, value)
            elif strict:
                raise KeyError(f"unknown parameter {path!r}")

    def freeze(self, prefix: str = "") -> None:
        for p in self.paths(prefix):
            self._items[p].requires_grad = False

    def unfreeze(self, prefix: str = "") -> None:
        for p in self.paths(prefix):
            self._items[p].requires_grad = True

    def grads(self, loss: Tensor) -> dict[str, np.ndarray]:
        """Gradient of ``loss`` for every parameter; zeros where unused."""
        leaf_grads = T.backward(loss)
        return {p: leaf_grads.get(id(t), np.zeros_like(t.data)) for p, t in self._items.items()}


def init_linear(params: ParameterSet, prefix: str, fan_in: int, fan_out: int,
                rng: np.random.Generator) -> None:
    bound = 1.0 / math.sqrt(fan_in)
    params.add(f"{prefix}.w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    params.add(f"{prefix}.b", rng.uniform(-bound, bound, size=(fan_out,)))


def linear(x, params: ParameterSet, prefix: str) -> Tensor:
    return as_tensor(x) @ params[f"{prefix}.w"] + params[f"{prefix}.b"]


_ACTIVATIONS = {"relu": T.relu, "gelu": T.gelu, "none": lambda x: x}


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths ``[in, hidden..., out]`` and one activation per hidden layer."""

    widths: tuple[int, ...]
    activations: tuple[str, ...] = field(default=())

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        object.__setattr__(self, "widths", widths)
        if len(widths) < 2 or any(w <= 0 for w in widths):
            raise ConfigError(f"MLP needs >=1 layer of positive widths, got {widths}")
        acts = tuple(self.activations) or ("relu",) * (len(widths) - 2)
        if len(acts) != len(widths) - 2:
            raise ConfigError("one activation per hidden layer required")
        for a in acts:
            if a not in _ACTIVATIONS:
                raise ConfigError(f"unknown activation {a!r}")
        object.__setattr__(self, "activations", acts)

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]


def init_mlp(params: ParameterSet, prefix: str, spec: MlpSpec, rng: np.random.Generator) -> None:
    for i in range(spec.n_layers):
        init_linear(params, f"{prefix}.{i}", spec.widths[i], spec.widths[i + 1], rng)


def mlp_forward(x, spec: MlpSpec, params: ParameterSet, prefix: str) -> Tensor:
    x = as_tensor(x)
    if x.shape[-1] != spec.in_width:
        raise ConfigError(f"MLP {prefix}: input width {x.shape[-1]} != {spec.in_width}")
    for i in range(spec.n_layers):
        x = linear(x, params, f"{prefix}.{i}")
        if i < spec.n_layers - 1:
            x = _ACTIVATIONS[spec.activations[i]](x)
    return x


# -- attention ------------------------------------------------------------------
_PROJ = ("q", "k", "v", "o")


def init_attention(params: ParameterSet, prefix: str, d: int, rng: np.random.Generator) -> None:
    for name in _PROJ:
        init_linear(params, f"{prefix}.{name}", d, d, rng)


def set_identity_attention(params: ParameterSet, prefix: str) -> None:
    for name in _PROJ:
        w = params[f"{prefix}.{name}.w"]
        params.set(f"{prefix}.{name}.w", np.eye(w.shape[0]))
        params.set(f"{prefix}.{name}.b", np.zeros(w.shape[1]))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    # (..., n, d) -> (..., heads, n, d/heads)
    *lead, n, d = x.shape
    x = x.reshape(*lead, n, heads, d // heads)
    nd = len(lead)
    return T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dh = x.shape
    nd = len(lead)
    x = T.transpose(x, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    return x.reshape(*lead, n, h * dh)


def mha_cross_attention(queries, keys, values, heads: int, params: ParameterSet, prefix: str,
                        key_mask: np.ndarray | None = None) -> Tensor:
    """Multi-head scaled dot-product cross-attention.

    Works on ``(N, d)`` inputs or batched ``(B, N, d)`` inputs.  ``key_mask``
    (shape ``(M,)`` or ``(B, M)``) marks padded keys that must be ignored.
    """
    queries, keys, values = as_tensor(queries), as_tensor(keys), as_tensor(values)
    d = queries.shape[-1]
    if heads <= 0 or d % heads:
        raise ConfigError(f"embedding width {d} not divisible by {heads} heads")
    if keys.shape[-2] == 0:
        raise ValueError("attention over an empty key set")
    q = _split_heads(linear(queries, params, f"{prefix}.q"), heads)
    k = _split_heads(linear(keys, params, f"{prefix}.k"), heads)
    v = _split_heads(linear(values, params, f"{prefix}.v"), heads)
    scores = (q @ k.T) * (1.0 / math.sqrt(d // heads))
    if key_mask is not None:
        m = np.asarray(key_mask, dtype=bool)
        # broadcast (B, M) -> (B, 1, 1, M)
        m = m.reshape(m.shape[:-1] + (1, 1, m.shape[-1]))
        scores = T.masked_fill(scores, m, -1e30)
    attn = T.softmax(scores, axis=-1)
    return linear(_merge_heads(attn @ v), params, f"{prefix}.o")


# -- sinusoidal encodings ---------------------------------------------------------
def sinusoidal_encode(t, dim: int, base: float = 10000.0) -> np.ndarray:
    """Interleaved ``[sin(w0 t), cos(w0 t), sin(w1 t), ...]`` with ``w_i = base**(-2i/dim)``.

    ``t`` may be a scalar (returns ``(dim,)``) or an array (returns ``t.shape + (dim,)``).
    """
    if dim <= 0 or dim % 2:
        raise ConfigError(f"encoding width must be a positive even number, got {dim}")
    if base <= 1:
        raise ConfigError("encoding base must exceed 1")
    freqs = base ** (-2.0 * np.arange(dim // 2) / dim)
    angles = np.asarray(t, dtype=np.float64)[..., None] * freqs
    out = np.empty(angles.shape[:-1] + (dim,))
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return out


def position_encode(points: np.ndarray, dim_per_axis: int, base: float, scale: float = 1.0) -> np.ndarray:
    """Concatenated per-axis sinusoidal codes of ``(N, 3)`` points -> ``(N, 3*dim_per_axis)``."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3) / scale
    return sinusoidal_encode(points, dim_per_axis, base).reshape(len(points), 3 * dim_per_axis)
