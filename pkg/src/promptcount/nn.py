"""Layers shared by the encoders, fusion stack, and decoder.

Everything operates on single (tokens x width) matrices; batching is
done by calling the pure forward functions once per input.  Each layer
exposes ``params(prefix)`` returning a flat name -> Tensor dict so the
optimizer and checkpoint code see one namespace.
"""

from __future__ import annotations

import math

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

ATTN_NEG_INF = -np.inf


def xavier(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    scale = math.sqrt(2.0 / (n_in + n_out))
    return rng.normal(0.0, scale, size=(n_in, n_out))


class Linear:
    def __init__(self, rng, n_in: int, n_out: int):
        self.w = Tensor(xavier(rng, n_in, n_out), requires_grad=True)
        self.b = Tensor(np.zeros(n_out), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.w) + self.b

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.w": self.w, f"{prefix}.b": self.b}


class LayerNorm:
    def __init__(self, width: int):
        self.gain = Tensor(np.ones(width), requires_grad=True)
        self.bias = Tensor(np.zeros(width), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.layer_norm(x, self.gain, self.bias)

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class MultiHeadAttention:
    """Scaled dot-product attention with per-head projections.

    ``mask`` is an additive (n_query x n_key) array; use -inf to forbid a
    pair.  Heads are stored as separate small projections so no reshape
    machinery is needed in the tensor core.
    """

    def __init__(self, rng, width: int, n_heads: int):
        if width % n_heads:
            raise ShapeError(f"width {width} not divisible by {n_heads} heads")
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.scale = 1.0 / math.sqrt(self.head_dim)
        self.wq = [Linear(rng, width, self.head_dim) for _ in range(n_heads)]
        self.wk = [Linear(rng, width, self.head_dim) for _ in range(n_heads)]
        self.wv = [Linear(rng, width, self.head_dim) for _ in range(n_heads)]
        self.wo = Linear(rng, width, width)

    def __call__(self, query: Tensor, keyvalue: Tensor,
                 mask: np.ndarray | None = None) -> Tensor:
        heads = []
        for h in range(self.n_heads):
            q = self.wq[h](query) * self.scale
            k = self.wk[h](keyvalue)
            v = self.wv[h](keyvalue)
            scores = T.matmul(q, T.transpose(k))
            weights = T.softmax(scores, axis=-1, mask=mask)
            heads.append(T.matmul(weights, v))
        return self.wo(T.concat_cols(heads))

    def attention_weights(self, query: Tensor, keyvalue: Tensor,
                          mask: np.ndarray | None = None) -> list[np.ndarray]:
        """Per-head attention matrices, for probing; runs without taping."""
        out = []
        with T.no_grad():
            for h in range(self.n_heads):
                q = self.wq[h](query) * self.scale
                k = self.wk[h](keyvalue)
                scores = T.matmul(q, T.transpose(k))
                out.append(T.softmax(scores, axis=-1, mask=mask).data)
        return out

    def params(self, prefix: str) -> dict:
        out = self.wo.params(f"{prefix}.wo")
        for h in range(self.n_heads):
            out.update(self.wq[h].params(f"{prefix}.h{h}.wq"))
            out.update(self.wk[h].params(f"{prefix}.h{h}.wk"))
            out.update(self.wv[h].params(f"{prefix}.h{h}.wv"))
        return out


class FeedForward:
    def __init__(self, rng, width: int, hidden: int):
        self.lin1 = Linear(rng, width, hidden)
        self.lin2 = Linear(rng, hidden, width)

    def __call__(self, x: Tensor) -> Tensor:
        return self.lin2(T.relu(self.lin1(x)))

    def params(self, prefix: str) -> dict:
        return {**self.lin1.params(f"{prefix}.lin1"),
                **self.lin2.params(f"{prefix}.lin2")}


class Embedding:
    def __init__(self, rng, n_rows: int, width: int):
        self.table = Tensor(rng.normal(0.0, 0.02, size=(n_rows, width)),
                            requires_grad=True)

    def __call__(self, ids) -> Tensor:
        return T.gather_rows(self.table, np.asarray(ids, dtype=np.int64))

    def params(self, prefix: str) -> dict:
        return {f"{prefix}.table": self.table}


def sine_positions(xy: np.ndarray, width: int, temperature: float = 10000.0) -> np.ndarray:
    """Fixed sinusoidal embeddings for normalized (x, y) locations.

    Half the channels encode x, half y, alternating sin/cos over a
    geometric frequency ladder.
    """
    if width % 4:
        raise ShapeError(f"sine position width must be divisible by 4, got {width}")
    quarter = width // 4
    freqs = temperature ** (-np.arange(quarter) / quarter)
    out = np.empty((xy.shape[0], width))
    for i, col in enumerate((0, 1)):
        angles = 2.0 * math.pi * xy[:, col:col + 1] * freqs
        out[:, 2 * i * quarter:(2 * i + 1) * quarter] = np.sin(angles)
        out[:, (2 * i + 1) * quarter:(2 * i + 2) * quarter] = np.cos(angles)
    return out


def merge_params(*dicts) -> dict:
    out: dict = {}
    for d in dicts:
        for k, v in d.items():
            if k in out:
                raise ShapeError(f"duplicate parameter name {k}")
            out[k] = v
    return out
