"""Multi-scale branches over the base feature map and their pooled token sequence."""

from __future__ import annotations

import numpy as np

from . import ops
from .errors import ShapeMismatch
from .nn import Conv2d, GlobalAvgPool, GlobalMaxPool, Module, ReLU
from .rng import StreamFactory

BRANCH_KERNELS = (1, 3, 5)
BRANCH_CHANNELS = 64


def branch_forward(f_base: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """``relu(conv_same(f_base))`` for one branch."""
    return ops.relu(ops.conv2d_same(f_base, kernel, bias))


def pool_and_concat(f_i: np.ndarray) -> np.ndarray:
    """GAP entries followed by GMP entries."""
    return np.concatenate([ops.global_avg_pool_hw(f_i), ops.global_max_pool_hw(f_i)], axis=-1)


def build_scale_sequence(f_base: np.ndarray, branches) -> np.ndarray:
    """Stack the pooled rows of the k=1, k=3, k=5 branches into a ``3 x 128`` sequence.

    ``branches`` is a sequence of three ``(kernel, bias)`` pairs ordered by kernel size.
    """
    if len(branches) != len(BRANCH_KERNELS):
        raise ShapeMismatch(f"expected {len(BRANCH_KERNELS)} branches, got {len(branches)}")
    rows = []
    for (kernel, bias), k in zip(branches, BRANCH_KERNELS):
        if kernel.shape[0] != k:
            raise ShapeMismatch(f"branch kernels must be ordered {BRANCH_KERNELS}")
        rows.append(pool_and_concat(branch_forward(f_base, kernel, bias)))
    return np.stack(rows, axis=-2)


class ScaleBranch(Module):
    def __init__(self, ksize: int, c_in: int, rng, c_out: int = BRANCH_CHANNELS):
        super().__init__()
        self.ksize = ksize
        self.conv = self.add("conv", Conv2d(ksize, c_in, c_out, rng))
        self.act = self.add("act", ReLU())

    def forward(self, x, train=False):
        return self.act(self.conv(x, train), train)

    def backward(self, dy):
        return self.conv.backward(self.act.backward(dy))


class ScalePyramid(Module):
    """Three parallel branches pooled to tokens; output ``(..., 3, 128)``.

    With ``use_gmp=False`` only the average-pooled half is kept, giving width 64.
    """

    def __init__(self, c_in: int, streams: StreamFactory, use_gmp: bool = True):
        super().__init__()
        self.c_in = c_in
        self.use_gmp = use_gmp
        self.branches = [self.add(f"branch{k}", ScaleBranch(k, c_in, streams())) for k in BRANCH_KERNELS]
        self.gap = [GlobalAvgPool() for _ in BRANCH_KERNELS]
        self.gmp = [GlobalMaxPool() for _ in BRANCH_KERNELS]
        self.last_maps = None

    @property
    def width(self) -> int:
        return 2 * BRANCH_CHANNELS if self.use_gmp else BRANCH_CHANNELS

    def forward(self, x, train=False):
        if x.shape[-1] != self.c_in:
            raise ShapeMismatch(f"feature map has {x.shape[-1]} channels, pyramid expects {self.c_in}")
        maps = [b(x, train) for b in self.branches]
        self.last_maps = maps
        rows = []
        for f, gap, gmp in zip(maps, self.gap, self.gmp):
            parts = [gap(f)]
            if self.use_gmp:
                parts.append(gmp(f))
            rows.append(np.concatenate(parts, axis=-1))
        return np.stack(rows, axis=-2)

    def backward(self, dy):
        dx = None
        c = BRANCH_CHANNELS
        for i, (branch, gap, gmp) in enumerate(zip(self.branches, self.gap, self.gmp)):
            drow = dy[..., i, :]
            df = gap.backward(drow[..., :c])
            if self.use_gmp:
                df = df + gmp.backward(drow[..., c:])
            d = branch.backward(df)
            dx = d if dx is None else dx + d
        return dx
