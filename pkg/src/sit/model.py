"""The assembled scale-interaction model and its ablation variants."""

from __future__ import annotations

import enum

import numpy as np

from .backbone import DEFAULT_CHANNELS, FeatureMap, ImageTensor, SyntheticBackbone
from .errors import ShapeMismatch
from .nn import GlobalAvgPool, Linear, Module
from .pyramid import ScalePyramid
from .rng import StreamFactory
from .transformer import Encoder, RegressionHead, SequencePool


class Variant(str, enum.Enum):
    BASELINE = "baseline"
    NO_TRANSFORMER = "no-transformer"
    NO_GMP = "no-gmp"
    FULL = "full"

    @classmethod
    def parse(cls, value) -> "Variant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        aliases = {"notransformer": "no-transformer", "nogmp": "no-gmp"}
        return cls(aliases.get(key, key))


# ablation table order
VARIANT_ORDER = (Variant.BASELINE, Variant.NO_TRANSFORMER, Variant.NO_GMP, Variant.FULL)
VARIANT_CODES = {v: i for i, v in enumerate(VARIANT_ORDER)}


class SITModel(Module):
    """Maps base feature maps ``(..., H_b, W_b, C_b)`` to one score per sample.

    Graphs per variant:

    * ``full``: pyramid (GAP+GMP) -> projection -> encoder -> sequence mean -> head
    * ``no-gmp``: same with average-pooled tokens only (width 64)
    * ``no-transformer``: pyramid (GAP+GMP) -> flatten to 384 -> dense
    * ``baseline``: GAP over the base map -> dense

    An optional ``backbone`` lets the model consume normalized images directly.
    """

    def __init__(self, variant=Variant.FULL, backbone_channels: int = DEFAULT_CHANNELS, d_proj: int = 128,
                 blocks: int = 2, heads: int = 4, ffn_dim: int = 512, dropout: float = 0.1, seed: int = 0,
                 backbone: bool = False, backbone_trainable: bool = True):
        super().__init__()
        self.variant = Variant.parse(variant)
        self.backbone_channels = backbone_channels
        self.d_proj = d_proj
        self.n_blocks = blocks
        self.heads = heads
        self.ffn_dim = ffn_dim
        self.dropout = dropout
        self.seed = seed

        streams = StreamFactory(seed)
        self.backbone = None
        if backbone:
            self.backbone = self.add("backbone", SyntheticBackbone(backbone_channels, streams, backbone_trainable))

        v = self.variant
        if v is Variant.BASELINE:
            self.gap = self.add("gap", GlobalAvgPool())
            self.dense = self.add("dense", Linear(backbone_channels, 1, streams()))
        else:
            self.pyramid = self.add("pyramid", ScalePyramid(backbone_channels, streams, use_gmp=v is not Variant.NO_GMP))
            if v is Variant.NO_TRANSFORMER:
                self.dense = self.add("dense", Linear(3 * self.pyramid.width, 1, streams()))
            else:
                self.proj = self.add("proj", Linear(self.pyramid.width, d_proj, streams()))
                self.encoder = self.add("encoder", Encoder(blocks, d_proj, heads, ffn_dim, dropout, streams))
                self.pool = self.add("pool", SequencePool())
                self.head = self.add("head", RegressionHead(d_proj, streams, dropout))
        self._used_backbone = False

    @property
    def config(self) -> dict:
        return {"variant": self.variant.value, "backbone_channels": self.backbone_channels,
                "d_proj": self.d_proj, "blocks": self.n_blocks, "heads": self.heads,
                "ffn_dim": self.ffn_dim, "dropout": self.dropout}

    def scale_sequence(self, x, train=False):
        return self.pyramid(x, train)

    def forward_from_sequence(self, s, train=False):
        """Everything after the pyramid, for the transformer variants."""
        h = self.encoder(self.proj(s, train), train)
        return self.head(self.pool(h, train), train)

    def forward(self, x, train=False):
        """``x`` is a feature map batch, or an image batch when a backbone is attached."""
        if isinstance(x, FeatureMap):
            x = x.data
        elif isinstance(x, ImageTensor):
            x = x.data
        x = np.asarray(x, dtype=np.float64)
        self._used_backbone = False
        if self.backbone is not None and x.shape[-1] == 3 and self.backbone_channels != 3:
            x = self.backbone(x, train)
            self._used_backbone = True
        if x.shape[-1] != self.backbone_channels:
            raise ShapeMismatch(f"input has {x.shape[-1]} channels, model expects {self.backbone_channels}")

        v = self.variant
        if v is Variant.BASELINE:
            return self.dense(self.gap(x, train), train)[..., 0]
        s = self.pyramid(x, train)
        if v is Variant.NO_TRANSFORMER:
            flat = s.reshape(*s.shape[:-2], -1)
            return self.dense(flat, train)[..., 0]
        return self.forward_from_sequence(s, train)

    def backward(self, dy):
        dy = np.asarray(dy, dtype=np.float64)
        v = self.variant
        if v is Variant.BASELINE:
            dx = self.gap.backward(self.dense.backward(dy[..., None]))
        else:
            if v is Variant.NO_TRANSFORMER:
                dflat = self.dense.backward(dy[..., None])
                ds = dflat.reshape(*dflat.shape[:-1], 3, self.pyramid.width)
            else:
                ds = self.proj.backward(self.encoder.backward(self.pool.backward(self.head.backward(dy))))
            dx = self.pyramid.backward(ds)
        if self._used_backbone:
            dx = self.backbone.backward(dx)
        return dx

    def predict(self, x, batch_size: int = 256) -> np.ndarray:
        """Eval-mode scores for a batch of inputs."""
        x = np.asarray(x.data if isinstance(x, (FeatureMap, ImageTensor)) else x, dtype=np.float64)
        if x.ndim == 3:
            return np.asarray(self.forward(x))
        out = [self.forward(x[i:i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros(0)


def build_variant(variant, cfg=None, **overrides) -> SITModel:
    """Construct a model for ``variant`` from a ``TrainConfig`` (or keyword overrides)."""
    kwargs = {}
    if cfg is not None:
        kwargs = dict(backbone_channels=cfg.backbone_channels or DEFAULT_CHANNELS, d_proj=cfg.d_proj,
                      blocks=cfg.blocks, heads=cfg.heads, ffn_dim=cfg.ffn_dim, dropout=cfg.dropout,
                      seed=cfg.seed)
    kwargs.update(overrides)
    return SITModel(variant, **kwargs)


def sit_forward(x, model: SITModel, train: bool = False):
    """Score a single input (image or feature map); returns a Python float."""
    return float(model(x, train))
