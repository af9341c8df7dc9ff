"""Parameter trees and the small set of layers the model is built from.

Layers hold only configuration and a name prefix. Their weights live in a
:class:`ParamTree` passed to every call, so one architecture can run with the
student's trainable parameters or the teacher's frozen copies.
"""

from __future__ import annotations

import math
from typing import Iterator, Mapping

import numpy as np

from . import numerics as nx
from .numerics import Parameter, Tensor


class ParamTreeError(ValueError):
    pass


class ParamTree(Mapping[str, Tensor]):
    """Ordered name -> tensor map with ``<module>/<block>/<leaf>`` names."""

    def __init__(self, entries: Mapping[str, Tensor] | None = None):
        self._entries: dict[str, Tensor] = {}
        for name, t in (entries or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> None:
        if name in self._entries:
            raise ParamTreeError(f"duplicate parameter name {name!r}")
        self._entries[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        try:
            return self._entries[name]
        except KeyError:
            raise KeyError(f"no parameter named {name!r}") from None

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def subtree(self, *prefixes: str) -> ParamTree:
        return ParamTree(
            {k: v for k, v in self._entries.items() if any(k.startswith(p + "/") for p in prefixes)}
        )

    def merged(self, other: Mapping[str, Tensor]) -> ParamTree:
        out = ParamTree(self._entries)
        for k, v in other.items():
            out.add(k, v)
        return out

    def parameters(self) -> list[Parameter]:
        return [t for t in self._entries.values() if isinstance(t, Parameter)]

    def numel(self) -> int:
        return int(sum(t.size for t in self._entries.values()))

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._entries.items()}

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def trainable(self) -> ParamTree:
        """Copy whose leaves are fresh :class:`Parameter` objects."""
        return ParamTree({k: Parameter(k, v.data.copy()) for k, v in self._entries.items()})

    def frozen(self) -> ParamTree:
        """Copy whose leaves are constant tensors (no gradients flow into them)."""
        return ParamTree({k: Tensor(v.data.copy()) for k, v in self._entries.items()})

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], trainable: bool = True) -> ParamTree:
        make = (lambda k, a: Parameter(k, np.array(a, dtype=np.float64))) if trainable else (
            lambda k, a: Tensor(np.array(a, dtype=np.float64))
        )
        return cls({k: make(k, a) for k, a in arrays.items()})

    def summary(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for k, v in self._entries.items():
            top = k.split("/", 1)[0]
            counts[top] = counts.get(top, 0) + v.size
        return counts


# ---------------------------------------------------------------- modules


class Module:
    """Base class: declares leaves via ``self.declare`` and nests other modules."""

    def __init__(self, name: str):
        self.name = name
        self._leaves: list[tuple[str, tuple[int, ...], str]] = []

    def declare(self, leaf: str, shape: tuple[int, ...], init: str) -> None:
        self._leaves.append((leaf, tuple(shape), init))

    def p(self, params: Mapping[str, Tensor], leaf: str) -> Tensor:
        return params[f"{self.name}/{leaf}"]

    def children(self) -> Iterator[Module]:
        for value in vars(self).values():
            if isinstance(value, Module):
                yield value
            elif isinstance(value, (list, tuple)):
                yield from (v for v in value if isinstance(v, Module))
            elif isinstance(value, dict):
                yield from (v for v in value.values() if isinstance(v, Module))

    def param_specs(self) -> Iterator[tuple[str, tuple[int, ...], str]]:
        for leaf, shape, init in self._leaves:
            yield f"{self.name}/{leaf}", shape, init
        for child in self.children():
            yield from child.param_specs()

    def init(self, rng: np.random.Generator, trainable: bool = True) -> ParamTree:
        arrays = {name: _initialise(shape, init, rng) for name, shape, init in self.param_specs()}
        return ParamTree.from_arrays(arrays, trainable=trainable)


def _initialise(shape: tuple[int, ...], init: str, rng: np.random.Generator) -> np.ndarray:
    if init == "zeros":
        return np.zeros(shape)
    if init == "ones":
        return np.ones(shape)
    if init == "xavier":
        fan_in, fan_out = shape[0], shape[-1]
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape)
    if init.startswith("normal:"):
        return rng.normal(0.0, float(init.split(":", 1)[1]), size=shape)
    raise ValueError(f"unknown initialiser {init!r}")


class Linear(Module):
    def __init__(self, name: str, d_in: int, d_out: int, bias: bool = True):
        super().__init__(name)
        self.d_in, self.d_out, self.bias = d_in, d_out, bias
        self.declare("weight", (d_in, d_out), "xavier")
        if bias:
            self.declare("bias", (d_out,), "zeros")

    def __call__(self, params, x: Tensor) -> Tensor:
        if x.shape[-1] != self.d_in:
            raise nx.ShapeMismatchError(f"{self.name}", x.shape, (self.d_in, self.d_out))
        y = nx.matmul(x, self.p(params, "weight")) if x.ndim >= 2 else nx.matmul(
            nx.reshape(x, (1, -1)), self.p(params, "weight")
        ).reshape(self.d_out)
        if self.bias:
            y = y + self.p(params, "bias")
        return y


class LayerNorm(Module):
    def __init__(self, name: str, d: int):
        super().__init__(name)
        self.declare("scale", (d,), "ones")
        self.declare("shift", (d,), "zeros")

    def __call__(self, params, x: Tensor) -> Tensor:
        return nx.layer_norm(x, axis=-1, eps=1e-6) * self.p(params, "scale") + self.p(params, "shift")


class MLP(Module):
    """Linear -> GELU -> Linear."""

    def __init__(self, name: str, d_in: int, d_hidden: int, d_out: int):
        super().__init__(name)
        self.fc1 = Linear(f"{name}/fc1", d_in, d_hidden)
        self.fc2 = Linear(f"{name}/fc2", d_hidden, d_out)

    def __call__(self, params, x: Tensor) -> Tensor:
        return self.fc2(params, nx.gelu(self.fc1(params, x)))


class MultiHeadAttention(Module):
    def __init__(self, name: str, d: int, heads: int):
        super().__init__(name)
        if d % heads:
            raise ValueError(f"{name}: width {d} not divisible by {heads} heads")
        self.d, self.heads, self.dh = d, heads, d // heads
        self.q = Linear(f"{name}/q", d, d)
        self.kv = Linear(f"{name}/kv", d, 2 * d)
        self.out = Linear(f"{name}/out", d, d)

    def __call__(self, params, xq: Tensor, xkv: Tensor, return_weights: bool = False, allowed=None):
        # xq: (B, Lq, d), xkv: (B, Lk, d); allowed: optional boolean (Lq, Lk) attention mask
        B, Lq, _ = xq.shape
        Lk = xkv.shape[1]
        H, dh = self.heads, self.dh
        q = self.q(params, xq).reshape(B, Lq, H, dh).transpose(0, 2, 1, 3)
        kv = self.kv(params, xkv).reshape(B, Lk, 2, H, dh).transpose(2, 0, 3, 1, 4)
        k, v = kv[0], kv[1]
        scores = nx.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
        if allowed is not None:
            allowed = np.asarray(allowed, dtype=bool)
            if not allowed.any(axis=-1).all():
                raise ValueError(f"{self.name}: every query needs at least one visible key")
            scores = scores + np.where(allowed, 0.0, -1e30)
        attn = nx.softmax(scores, axis=-1)
        ctx = nx.matmul(attn, v).transpose(0, 2, 1, 3).reshape(B, Lq, self.d)
        out = self.out(params, ctx)
        return (out, attn) if return_weights else out


class SelfAttentionBlock(Module):
    """Pre-norm transformer block."""

    def __init__(self, name: str, d: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__(name)
        self.norm1 = LayerNorm(f"{name}/norm1", d)
        self.attn = MultiHeadAttention(f"{name}/attn", d, heads)
        self.norm2 = LayerNorm(f"{name}/norm2", d)
        self.mlp = MLP(f"{name}/mlp", d, int(d * mlp_ratio), d)

    def __call__(self, params, x: Tensor) -> Tensor:
        h = self.norm1(params, x)
        x = x + self.attn(params, h, h)
        return x + self.mlp(params, self.norm2(params, x))


class CrossAttentionBlock(Module):
    def __init__(self, name: str, d: int, heads: int, mlp_ratio: float = 2.0):
        super().__init__(name)
        self.norm_q = LayerNorm(f"{name}/norm_q", d)
        self.norm_kv = LayerNorm(f"{name}/norm_kv", d)
        self.attn = MultiHeadAttention(f"{name}/attn", d, heads)
        self.norm2 = LayerNorm(f"{name}/norm2", d)
        self.mlp = MLP(f"{name}/mlp", d, int(d * mlp_ratio), d)

    def __call__(self, params, queries: Tensor, context: Tensor, allowed=None) -> Tensor:
        q = queries + self.attn(params, self.norm_q(params, queries), self.norm_kv(params, context), allowed=allowed)
        return q + self.mlp(params, self.norm2(params, q))


class Stack(Module):
    def __init__(self, name: str, d: int, heads: int, depth: int, mlp_ratio: float = 2.0):
        super().__init__(name)
        self.blocks = [SelfAttentionBlock(f"{name}/block{i}", d, heads, mlp_ratio) for i in range(depth)]

    def __call__(self, params, x: Tensor) -> Tensor:
        for block in self.blocks:
            x = block(params, x)
        return x
