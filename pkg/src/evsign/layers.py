"""Parameterized building blocks shared by the temporal model and heads."""

from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


class Module:
    """Explicit-registration module tree with named parameters/buffers."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, "Module"] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self.training = True

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        self._params[name] = tensor
        return tensor

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def add_buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        return array

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(prefix + cname + ".")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(prefix + cname + ".")

    def set_buffer(self, name: str, array: np.ndarray):
        head, _, rest = name.partition(".")
        if rest:
            self._children[head].set_buffer(rest, array)
        else:
            self._buffers[name][...] = array

    def set_training(self, flag: bool):
        self.training = flag
        for child in self._children.values():
            child.set_training(flag)


def xavier_uniform(rng: np.random.Generator, fan_in: int, fan_out: int,
                   shape=None) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    shape = (fan_in, fan_out) if shape is None else shape
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator,
                 bias: bool = True):
        super().__init__()
        self.weight = self.add_param(
            "weight", Tensor(xavier_uniform(rng, n_in, n_out), requires_grad=True))
        self.bias = None
        if bias:
            self.bias = self.add_param(
                "bias", Tensor(np.zeros(n_out, dtype=np.float32), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        out = ad.matmul(x, self.weight)
        if self.bias is not None:
            out = ad.add(out, self.bias)
        return out


class FeedForward(Module):
    """Two linear maps with a ReLU between them."""

    def __init__(self, dim: int, hidden: int, rng: np.random.Generator):
        super().__init__()
        self.fc1 = self.add_child("fc1", Linear(dim, hidden, rng))
        self.fc2 = self.add_child("fc2", Linear(hidden, dim, rng))

    def __call__(self, x: Tensor) -> Tensor:
        return self.fc2(ad.relu(self.fc1(x)))


class LayerNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gain = self.add_param(
            "gain", Tensor(np.ones(dim, dtype=np.float32), requires_grad=True))
        self.bias = self.add_param(
            "bias", Tensor(np.zeros(dim, dtype=np.float32), requires_grad=True))

    def __call__(self, x: Tensor) -> Tensor:
        return ad.add(ad.mul(ad.layer_norm(x, axis=-1, eps=self.eps), self.gain),
                      self.bias)


class Embedding(Module):
    def __init__(self, n_rows: int, dim: int, rng: np.random.Generator):
        super().__init__()
        table = rng.normal(0.0, 0.02, size=(n_rows, dim)).astype(np.float32)
        self.table = self.add_param("weight", Tensor(table, requires_grad=True))

    def __call__(self, ids) -> Tensor:
        return ad.embedding_lookup(self.table, ids)


class MultiHeadAttention(Module):
    """Scaled-dot-product attention with h heads over 2-D token matrices.

    `mult_mask` multiplies raw scores before the softmax (all heads share
    it); `causal=True` instead adds a large negative bias above the
    diagonal. The two masking styles are intentionally distinct.
    """

    def __init__(self, dim: int, heads: int, rng: np.random.Generator):
        super().__init__()
        if dim % heads != 0:
            raise ad.ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.q = self.add_child("q", Linear(dim, dim, rng))
        self.k = self.add_child("k", Linear(dim, dim, rng))
        self.v = self.add_child("v", Linear(dim, dim, rng))
        self.out = self.add_child("out", Linear(dim, dim, rng))
        self.last_attn: np.ndarray | None = None

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor,
                 mult_mask: Tensor | None = None, causal: bool = False) -> Tensor:
        if q_in.shape[1] != self.dim or k_in.shape[1] != self.dim:
            raise ad.ShapeError(
                f"attention dim mismatch: {q_in.shape} / {k_in.shape} vs {self.dim}")
        n_q, n_k = q_in.shape[0], k_in.shape[0]
        q = self.q(q_in)
        k = self.k(k_in)
        v = self.v(v_in)
        scale = 1.0 / math.sqrt(self.head_dim)
        causal_mask = None
        if causal:
            causal_mask = np.triu(np.ones((n_q, n_k), dtype=bool), k=1)
        outs = []
        attns = []
        for h in range(self.heads):
            lo = h * self.head_dim
            qh = ad.slice_axis(q, 1, lo, self.head_dim)
            kh = ad.slice_axis(k, 1, lo, self.head_dim)
            vh = ad.slice_axis(v, 1, lo, self.head_dim)
            scores = ad.scalar_mul(ad.matmul(qh, ad.transpose(kh)), scale)
            if mult_mask is not None:
                scores = ad.mul(scores, mult_mask)
            if causal_mask is not None:
                scores = ad.masked_fill(scores, causal_mask, ad.LOG_ZERO)
            attn = ad.softmax(scores, axis=1)
            attns.append(attn.data)
            outs.append(ad.matmul(attn, vh))
        self.last_attn = np.stack(attns)
        return self.out(ad.concat(outs, axis=1))
