"""Loss, optimizer, learning-rate plateau schedule, early stopping and the epoch loop."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigParseError, DivergenceDetected, EmptyBatch, EmptyDataset, LengthMismatch, ShapeMismatch
from .metrics import MetricsReport, compute_metrics_lenient
from .model import SITModel, Variant, build_variant
from .rng import SHUFFLE_STREAM, SPLIT_STREAM, RngStream

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    d_proj: int = 128
    blocks: int = 2
    heads: int = 4
    ffn_dim: int = 512
    dropout: float = 0.1
    optimizer: str = "adam"
    lr: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 300
    early_stop_patience: int = 10
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    seed: int = 0
    val_fraction: float = 0.2
    backbone_channels: int | None = None  # None: infer from the data (1280 otherwise)
    variant: str = "full"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.optimizer.lower() != "adam":
            raise ConfigParseError(f"unsupported optimizer {self.optimizer!r}")
        if not 0.0 < self.plateau_factor < 1.0:
            raise ConfigParseError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1 or self.early_stop_patience < 1:
            raise ConfigParseError("patiences must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigParseError("val_fraction must lie in (0, 1)")
        if self.lr <= 0 or self.batch_size < 1 or self.max_epochs < 0:
            raise ConfigParseError("lr, batch_size and max_epochs must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigParseError("dropout must lie in [0, 1)")
        try:
            Variant.parse(self.variant)
        except ValueError as exc:
            raise ConfigParseError(f"unknown variant {self.variant!r}") from exc

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        if not isinstance(data, dict):
            raise ConfigParseError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigParseError(f"unknown config keys: {', '.join(unknown)}")
        try:
            return cls(**data)
        except (TypeError, AttributeError) as exc:
            raise ConfigParseError(str(exc)) from exc

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# -- loss ---------------------------------------------------------------------

def mse_loss(y, yhat):
    """Returns ``(loss, d loss / d yhat)``."""
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    yhat = np.asarray(yhat, dtype=np.float64).reshape(-1)
    if y.shape != yhat.shape:
        raise LengthMismatch(f"{y.size} targets vs {yhat.size} predictions")
    if y.size == 0:
        raise EmptyBatch("empty batch")
    with np.errstate(over="ignore", invalid="ignore"):  # non-finite losses are caught by the caller
        diff = yhat - y
        return float(np.mean(diff ** 2)), 2.0 * diff / y.size


# -- Adam ---------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update applied to ``params`` in place."""
    for name, p in params.items():
        if grads[name].shape != p.shape:
            raise ShapeMismatch(f"gradient for {name} has shape {grads[name].shape}, parameter {p.shape}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# -- schedules ----------------------------------------------------------------

@dataclass
class SchedulerState:
    lr: float
    patience: int = 5
    factor: float = 0.5
    best: float = math.inf
    wait: int = 0


def scheduler_update(state: SchedulerState, val_loss: float) -> float:
    """Plateau schedule: scale the rate by ``factor`` after ``patience`` epochs without strict improvement."""
    if val_loss < state.best:
        state.best = val_loss
        state.wait = 0
    else:
        state.wait += 1
        if state.wait >= state.patience:
            state.lr *= state.factor
            state.wait = 0
    return state.lr


@dataclass
class EarlyStopState:
    patience: int = 10
    best: float = math.inf
    best_epoch: int | None = None
    snapshot: dict[str, np.ndarray] | None = None
    wait: int = 0
    stopped: bool = False
    epoch: int = 0


def early_stop_update(state: EarlyStopState, val_loss: float, params: dict[str, np.ndarray]) -> bool:
    """Track the best snapshot; returns True (stop) after ``patience`` epochs without improvement.

    On stop the best snapshot is copied back into ``params``.
    """
    state.epoch += 1
    if val_loss < state.best:
        state.best = val_loss
        state.best_epoch = state.epoch
        state.snapshot = {k: v.copy() for k, v in params.items()}
        state.wait = 0
        return False
    state.wait += 1
    if state.wait >= state.patience:
        state.stopped = True
        restore(params, state.snapshot)
        return True
    return False


def restore(params: dict[str, np.ndarray], snapshot: dict[str, np.ndarray] | None) -> None:
    if snapshot is None:
        return
    for k, v in snapshot.items():
        params[k][...] = v


# -- data ---------------------------------------------------------------------

def split_indices(n: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle-split; both parts keep at least one sample when ``n >= 2``."""
    if n < 2:
        raise EmptyDataset(f"need at least 2 samples to split, got {n}")
    perm = RngStream(seed, SPLIT_STREAM).permutation(n)
    n_val = min(n - 1, max(1, int(round(val_fraction * n))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float


@dataclass
class History:
    epochs: list[EpochRecord] = field(default_factory=list)
    stopped_epoch: int | None = None
    best_epoch: int | None = None

    def to_dict(self) -> dict:
        return {"epochs": [dataclasses.asdict(e) for e in self.epochs],
                "stopped_epoch": self.stopped_epoch, "best_epoch": self.best_epoch}


@dataclass
class TrainResult:
    model: SITModel
    history: History
    val_metrics: MetricsReport
    val_metrics_error: str | None
    train_indices: np.ndarray
    val_indices: np.ndarray


def evaluate_loss(model: SITModel, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    return mse_loss(y, model.predict(x, batch_size))[0]


def train(model: SITModel | None, dataset, cfg: TrainConfig, val_dataset=None) -> TrainResult:
    """Run the full training procedure.

    ``dataset`` is ``(features, scores)``.  Without ``val_dataset`` a seeded
    ``val_fraction`` split is held out for validation; with it, all of
    ``dataset`` trains and ``val_dataset`` validates.  The best-validation
    parameters are restored before returning.
    """
    x, y = dataset
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if len(x) == 0:
        raise EmptyDataset("training set is empty")
    if len(x) != len(y):
        raise LengthMismatch(f"{len(x)} inputs vs {len(y)} scores")
    if val_dataset is None:
        tr, va = split_indices(len(x), cfg.val_fraction, cfg.seed)
        x_tr, y_tr, x_va, y_va = x[tr], y[tr], x[va], y[va]
    else:
        tr, va = np.arange(len(x)), np.arange(0)
        x_tr, y_tr = x, y
        x_va = np.asarray(val_dataset[0], dtype=np.float64)
        y_va = np.asarray(val_dataset[1], dtype=np.float64).reshape(-1)
        if len(x_va) == 0:
            raise EmptyDataset("validation set is empty")

    if model is None:
        overrides = {} if cfg.backbone_channels else {"backbone_channels": x.shape[-1]}
        model = build_variant(cfg.variant, cfg, **overrides)

    params = model.parameters(trainable_only=True)
    grads = model.gradients(trainable_only=True)
    adam = AdamState()
    sched = SchedulerState(cfg.lr, cfg.plateau_patience, cfg.plateau_factor)
    stopper = EarlyStopState(cfg.early_stop_patience)
    shuffle = RngStream(cfg.seed, SHUFFLE_STREAM)
    history = History()
    n = len(x_tr)

    for epoch in range(1, cfg.max_epochs + 1):
        lr = sched.lr
        order = shuffle.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            model.zero_grad()
            pred = model(x_tr[idx], train=True)
            loss, dpred = mse_loss(y_tr[idx], pred)
            if not math.isfinite(loss):
                raise DivergenceDetected(f"non-finite training loss at epoch {epoch} (lr={lr:g})")
            model.backward(dpred)
            adam_step(params, grads, adam, lr)
            total += loss * len(idx)
        train_loss = total / n
        val_loss = evaluate_loss(model, x_va, y_va)
        if not math.isfinite(val_loss):
            raise DivergenceDetected(f"non-finite validation loss at epoch {epoch}")
        history.epochs.append(EpochRecord(epoch, train_loss, val_loss, lr))
        log.debug("epoch %d train %.6g val %.6g lr %.3g", epoch, train_loss, val_loss, lr)
        scheduler_update(sched, val_loss)
        if early_stop_update(stopper, val_loss, params):
            history.stopped_epoch = epoch
            break

    restore(params, stopper.snapshot)
    history.best_epoch = stopper.best_epoch
    metrics, err = compute_metrics_lenient(y_va, model.predict(x_va))
    return TrainResult(model, history, metrics, err, tr, va)
