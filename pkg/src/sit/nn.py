"""Layer objects with explicit forward/backward and accumulated parameter gradients."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import ops
from .errors import InvalidKernel
from .rng import RngStream


def glorot_uniform(shape, fan_in: int, fan_out: int, rng: RngStream) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(shape, -limit, limit)


class Module:
    """Base layer: owns parameters, gradient buffers, child layers and a forward cache.

    ``backward`` consumes the cache written by the most recent ``forward``; calling
    it without one raises ``RuntimeError``.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.children: dict[str, Module] = {}
        self.trainable = True
        self._cache = None

    def add_param(self, name: str, value: np.ndarray) -> np.ndarray:
        value = np.ascontiguousarray(value, dtype=np.float64)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def add(self, name: str, child: Module) -> Module:
        self.children[name] = child
        return child

    def named_modules(self, prefix: str = "") -> Iterator[tuple[str, Module]]:
        yield prefix, self
        for name, child in self.children.items():
            yield from child.named_modules(f"{prefix}{name}.")

    def parameters(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view (arrays are live, not copies)."""
        out = {}
        self._collect(out, "", "params", trainable_only)
        return out

    def gradients(self, trainable_only: bool = False) -> dict[str, np.ndarray]:
        out = {}
        self._collect(out, "", "grads", trainable_only)
        return out

    def _collect(self, out, prefix, attr, trainable_only):
        if trainable_only and not self.trainable:
            return
        for name, value in getattr(self, attr).items():
            out[prefix + name] = value
        for name, child in self.children.items():
            child._collect(out, f"{prefix}{name}.", attr, trainable_only)

    def set_trainable(self, flag: bool) -> None:
        for _, m in self.named_modules():
            m.trainable = flag

    def zero_grad(self) -> None:
        for _, m in self.named_modules():
            for g in m.grads.values():
                g.fill(0.0)

    def streams(self) -> list[RngStream]:
        found = []
        for _, m in self.named_modules():
            rng = getattr(m, "rng", None)
            if isinstance(rng, RngStream):
                found.append(rng)
        return found

    def _store(self, *cache) -> None:
        self._cache = cache

    def _take(self):
        if self._cache is None:
            raise RuntimeError(f"{type(self).__name__}.backward called without a matching forward")
        cache, self._cache = self._cache, None
        return cache

    def _accumulate(self, name: str, grad: np.ndarray) -> None:
        if self.trainable:
            self.grads[name] += grad

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, dy):
        raise NotImplementedError

    def __call__(self, x, train: bool = False):
        return self.forward(x, train)


class Linear(Module):
    """Affine map ``x @ W + b`` on the last axis; ``W`` is ``in x out``."""

    def __init__(self, n_in: int, n_out: int, rng: RngStream):
        super().__init__()
        self.add_param("weight", glorot_uniform((n_in, n_out), n_in, n_out, rng))
        self.add_param("bias", np.zeros(n_out))

    def forward(self, x, train=False):
        self._store(x)
        return ops.matmul(x, self.params["weight"]) + self.params["bias"]

    def backward(self, dy):
        (x,) = self._take()
        dx, dw = ops.matmul_backward(dy, x, self.params["weight"])
        self._accumulate("weight", dw)
        self._accumulate("bias", dy.reshape(-1, dy.shape[-1]).sum(axis=0))
        return dx


class Conv2d(Module):
    """Zero-padded convolution with a ``k x k x Cin x Cout`` kernel."""

    def __init__(self, ksize: int, c_in: int, c_out: int, rng: RngStream, stride: int = 1):
        super().__init__()
        if ksize % 2 == 0:
            raise InvalidKernel(f"kernel size must be odd, got {ksize}")
        self.stride = stride
        shape = (ksize, ksize, c_in, c_out)
        self.add_param("kernel", glorot_uniform(shape, ksize * ksize * c_in, ksize * ksize * c_out, rng))
        self.add_param("bias", np.zeros(c_out))

    def forward(self, x, train=False):
        y, cols = ops.conv2d(x, self.params["kernel"], self.params["bias"], self.stride, return_cols=True)
        self._store(x, cols)
        return y

    def backward(self, dy):
        x, cols = self._take()
        dx, dk, db = ops.conv2d_backward(dy, x, self.params["kernel"], self.stride, cols)
        self._accumulate("kernel", dk)
        self._accumulate("bias", db)
        return dx


class ReLU(Module):
    def forward(self, x, train=False):
        self._store(x)
        return ops.relu(x)

    def backward(self, dy):
        (x,) = self._take()
        return ops.relu_backward(dy, x)


class Softmax(Module):
    def forward(self, x, train=False):
        y = ops.softmax_rows(x)
        self._store(y)
        return y

    def backward(self, dy):
        (y,) = self._take()
        return ops.softmax_backward(dy, y)


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = ops.LN_EPS):
        super().__init__()
        self.eps = eps
        self.add_param("gamma", np.ones(width))
        self.add_param("beta", np.zeros(width))

    def forward(self, x, train=False):
        self._store(x)
        return ops.layer_norm(x, self.params["gamma"], self.params["beta"], self.eps)

    def backward(self, dy):
        (x,) = self._take()
        dx, dg, db = ops.layer_norm_backward(dy, x, self.params["gamma"], self.eps)
        self._accumulate("gamma", dg)
        self._accumulate("beta", db)
        return dx


class GlobalAvgPool(Module):
    def forward(self, x, train=False):
        self._store(x.shape)
        return ops.global_avg_pool_hw(x)

    def backward(self, dy):
        (shape,) = self._take()
        return ops.global_avg_pool_backward(dy, shape)


class GlobalMaxPool(Module):
    def forward(self, x, train=False):
        self._store(x)
        return ops.global_max_pool_hw(x)

    def backward(self, dy):
        (x,) = self._take()
        return ops.global_max_pool_backward(dy, x)


class Dropout(Module):
    """Inverted dropout; the mask drawn in forward is reused by backward."""

    def __init__(self, rate: float, rng: RngStream):
        super().__init__()
        ops.check_rate(rate)
        self.rate = rate
        self.rng = rng

    def forward(self, x, train=False):
        if not train or self.rate == 0.0:
            self._store(None)
            return x
        mask = ops.dropout_mask(x.shape, self.rate, self.rng)
        self._store(mask)
        return x * mask

    def backward(self, dy):
        (mask,) = self._take()
        return dy if mask is None else dy * mask
