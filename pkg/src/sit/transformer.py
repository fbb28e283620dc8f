"""Projection, pre-norm encoder blocks, sequence pooling and the regression head."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeMismatch
from .nn import Dropout, LayerNorm, Linear, Module, ReLU
from .rng import StreamFactory


def project_sequence(s: np.ndarray, w_proj: np.ndarray, b_proj: np.ndarray) -> np.ndarray:
    return ops.matmul(s, w_proj) + b_proj


def sequence_pool(s_trans: np.ndarray) -> np.ndarray:
    """Mean over the token axis; bitwise invariant to the token order."""
    s_trans = np.asarray(s_trans, dtype=np.float64)
    return ops.order_free_sum(s_trans, axis=-2) / s_trans.shape[-2]


class MultiHeadAttention(Module):
    """Self-attention with ``heads`` heads of width ``d_model // heads``.

    The query/key/value projections are stored as single ``d_model x d_model``
    matrices; head ``h`` owns columns ``h*d_k:(h+1)*d_k``.
    """

    def __init__(self, d_model: int, heads: int, streams: StreamFactory):
        super().__init__()
        if d_model % heads:
            raise ShapeMismatch(f"{heads} heads do not divide width {d_model}")
        self.heads = heads
        self.d_k = d_model // heads
        self.q = self.add("q", Linear(d_model, d_model, streams()))
        self.k = self.add("k", Linear(d_model, d_model, streams()))
        self.v = self.add("v", Linear(d_model, d_model, streams()))
        self.o = self.add("o", Linear(d_model, d_model, streams()))
        self.last_weights = None

    def _split(self, x):
        # (..., n, D) -> (..., H, n, d_k)
        return np.swapaxes(x.reshape(*x.shape[:-1], self.heads, self.d_k), -2, -3)

    def _merge(self, x):
        x = np.swapaxes(x, -2, -3)
        return x.reshape(*x.shape[:-2], self.heads * self.d_k)

    def forward(self, x, train=False):
        q = self._split(self.q(x))
        k = self._split(self.k(x))
        v = self._split(self.v(x))
        out, weights = ops.scaled_dot_product_attention(q, k, v, return_weights=True)
        self.last_weights = weights
        self._store(q, k, v, weights)
        return self.o(self._merge(out))

    def backward(self, dy):
        q, k, v, weights = self._take()
        dout = self._split(self.o.backward(dy))
        dq, dk, dv = ops.attention_backward(dout, q, k, v, weights)
        return (self.q.backward(self._merge(dq))
                + self.k.backward(self._merge(dk))
                + self.v.backward(self._merge(dv)))


class FeedForward(Module):
    def __init__(self, d_model: int, hidden: int, streams: StreamFactory):
        super().__init__()
        self.fc1 = self.add("fc1", Linear(d_model, hidden, streams()))
        self.act = self.add("act", ReLU())
        self.fc2 = self.add("fc2", Linear(hidden, d_model, streams()))

    def forward(self, x, train=False):
        return self.fc2(self.act(self.fc1(x)))

    def backward(self, dy):
        return self.fc1.backward(self.act.backward(self.fc2.backward(dy)))


class TransformerBlock(Module):
    """Pre-norm block: ``x + drop(attn(ln1(x)))`` then ``x + drop(ffn(ln2(x)))``."""

    def __init__(self, d_model: int, heads: int, ffn_dim: int, dropout: float, streams: StreamFactory):
        super().__init__()
        self.ln1 = self.add("ln1", LayerNorm(d_model))
        self.attn = self.add("attn", MultiHeadAttention(d_model, heads, streams))
        self.drop1 = self.add("drop1", Dropout(dropout, streams()))
        self.ln2 = self.add("ln2", LayerNorm(d_model))
        self.ffn = self.add("ffn", FeedForward(d_model, ffn_dim, streams))
        self.drop2 = self.add("drop2", Dropout(dropout, streams()))

    def forward(self, x, train=False):
        x = x + self.drop1(self.attn(self.ln1(x), train), train)
        return x + self.drop2(self.ffn(self.ln2(x), train), train)

    def backward(self, dy):
        dx = dy + self.ln2.backward(self.ffn.backward(self.drop2.backward(dy)))
        return dx + self.ln1.backward(self.attn.backward(self.drop1.backward(dx)))


class Encoder(Module):
    """``L`` blocks applied in sequence; no final normalization."""

    def __init__(self, n_blocks: int, d_model: int, heads: int, ffn_dim: int, dropout: float,
                 streams: StreamFactory):
        super().__init__()
        self.blocks = [self.add(str(i), TransformerBlock(d_model, heads, ffn_dim, dropout, streams))
                       for i in range(n_blocks)]

    def forward(self, x, train=False):
        for block in self.blocks:
            x = block(x, train)
        return x

    def backward(self, dy):
        for block in reversed(self.blocks):
            dy = block.backward(dy)
        return dy


class SequencePool(Module):
    def forward(self, x, train=False):
        self._store(x.shape)
        return sequence_pool(x)

    def backward(self, dy):
        (shape,) = self._take()
        return np.broadcast_to(dy[..., None, :] / shape[-2], shape).copy()


class RegressionHead(Module):
    """Dropout followed by a dense map to one score per sample."""

    def __init__(self, d_in: int, streams: StreamFactory, dropout: float = 0.1):
        super().__init__()
        self.drop = self.add("drop", Dropout(dropout, streams()))
        self.fc = self.add("fc", Linear(d_in, 1, streams()))

    def forward(self, x, train=False):
        return self.fc(self.drop(x, train))[..., 0]

    def backward(self, dy):
        return self.drop.backward(self.fc.backward(np.asarray(dy, dtype=np.float64)[..., None]))
