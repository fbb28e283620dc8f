"""Central finite-difference verification of layer backward passes."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import NonDeterministicLayer
from .nn import Module

FD_STEP = 1e-5
KINK_REFINE = 100.0  # step divisor when a probe straddles a non-smooth point
MIN_STEP = 1e-9


def relative_error(a, b) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


@dataclass
class GradCheckReport:
    tol: float
    errors: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    refined: dict[str, int] = field(default_factory=dict)

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tol


def _probe_indices(size: int, max_entries: int | None, rng: np.random.Generator) -> np.ndarray:
    if max_entries is None or size <= max_entries:
        return np.arange(size)
    return np.sort(rng.choice(size, max_entries, replace=False))


def grad_check(layer: Module, x: np.ndarray, tol: float = 1e-4, train: bool = False,
               max_entries: int | None = None, seed: int = 0, check_input: bool = True,
               step: float = FD_STEP) -> GradCheckReport:
    """Compare analytic gradients of ``sum(r * layer(x))`` with central differences.

    ``r`` is a fixed random cotangent.  In train mode every random stream inside
    the layer is rewound before each probe so dropout masks stay frozen.  Tensors
    with more than ``max_entries`` elements are checked on a random subset.

    Piecewise-linear layers (ReLU, max pooling) have kinks.  A probe whose
    interval straddles one is detected by comparing the two one-sided slopes
    against the unperturbed loss; such entries are re-probed with a step
    ``KINK_REFINE`` times smaller (down to ``MIN_STEP``).  Smooth entries keep
    ``step``, and every sampled entry is still compared.
    """
    x = np.array(x, dtype=np.float64)
    gen = np.random.default_rng(seed)
    streams = layer.streams()
    marks = [s.state() for s in streams]

    def run(inp):
        for s, m in zip(streams, marks):
            s.restore(m)
        return layer.forward(inp, train)

    y = run(x)
    if not np.array_equal(y, run(x), equal_nan=True):
        raise NonDeterministicLayer(f"{type(layer).__name__} gives different outputs under a frozen seed")
    r = gen.standard_normal(np.shape(y))

    def loss(inp):
        return float(np.sum(r * run(inp)))

    layer.zero_grad()
    run(x)
    dx = layer.backward(r)
    params = layer.parameters(trainable_only=True)
    grads = {k: g.copy() for k, g in layer.gradients(trainable_only=True).items()}

    base = loss(x)

    def central(flat, i):
        h = step
        orig = flat[i]
        while True:
            flat[i] = orig + h
            lp = loss(x)
            flat[i] = orig - h
            lm = loss(x)
            flat[i] = orig
            right, left = (lp - base) / h, (base - lm) / h
            smooth = relative_error(right, left) <= tol
            if smooth or h / KINK_REFINE < MIN_STEP:
                return (lp - lm) / (2.0 * h), h != step
            h /= KINK_REFINE

    report = GradCheckReport(tol)
    targets = [(name, params[name], grads[name]) for name in params]
    if check_input:
        targets.append(("input", x, np.asarray(dx)))
    for name, arr, analytic in targets:
        flat = arr.reshape(-1)
        idx = _probe_indices(flat.size, max_entries, gen)
        numeric = np.empty(idx.size)
        refined = 0
        for j, i in enumerate(idx):
            numeric[j], was_refined = central(flat, i)
            refined += was_refined
        err = relative_error(analytic.reshape(-1)[idx], numeric)
        report.errors[name] = float(err.max()) if err.size else 0.0
        report.checked[name] = int(idx.size)
        report.refined[name] = refined
    for s, m in zip(streams, marks):
        s.restore(m)
    return report
