"""Base feature maps: image normalization, a seeded stand-in backbone and SITF files.

SITF layout (little-endian)::

    b"SITF" | u8 version=1 | u8 ndim=3 | u32 H | u32 W | u32 C | f32 payload[H*W*C]

The payload is row-major over ``(h, w, c)`` and widened to float64 on load.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BadDimensions, BadMagic, IoFailure, ShapeMismatch, TruncatedPayload, UnsupportedVersion
from .nn import Conv2d, Module, ReLU
from .rng import StreamFactory

IMAGE_SIZE = 224
BACKBONE_STAGES = 5
DEFAULT_CHANNELS = 1280

SITF_MAGIC = b"SITF"
SITF_VERSION = 1
_SITF_HEADER = struct.Struct("<4sBB3I")


@dataclass
class ImageTensor:
    data: np.ndarray  # 224 x 224 x 3, values in [0, 1]


@dataclass
class FeatureMap:
    data: np.ndarray  # H_b x W_b x C_b
    provenance: str = "synthetic"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __eq__(self, other):
        if not isinstance(other, FeatureMap):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)


def normalize_image(raw) -> ImageTensor:
    """Scale a ``224 x 224 x 3`` byte image to ``[0, 1]``."""
    raw = np.asarray(raw)
    if raw.shape != (IMAGE_SIZE, IMAGE_SIZE, 3):
        raise BadDimensions(f"expected {IMAGE_SIZE}x{IMAGE_SIZE}x3 image, got {raw.shape}")
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise BadDimensions("byte image values must lie in 0..255")
    return ImageTensor(raw.astype(np.float64) / 255.0)


class SyntheticBackbone(Module):
    """Five stride-2 ``3x3`` conv+ReLU stages: ``224x224x3 -> 7x7xC_b``.

    Stands in for a pretrained feature extractor.  When ``trainable`` is off the
    stack still back-propagates to its input but never accumulates into its own
    gradient buffers and is excluded from ``parameters(trainable_only=True)``.
    """

    def __init__(self, out_channels: int, streams: StreamFactory, trainable: bool = True,
                 widths=(16, 32, 64, 128)):
        super().__init__()
        self.out_channels = out_channels
        chans = (3, *widths, out_channels)
        self.stages = []
        for i in range(BACKBONE_STAGES):
            conv = self.add(f"conv{i}", Conv2d(3, chans[i], chans[i + 1], streams(), stride=2))
            act = self.add(f"act{i}", ReLU())
            self.stages.append((conv, act))
        self.set_trainable(trainable)

    def output_shape(self, h: int = IMAGE_SIZE, w: int = IMAGE_SIZE) -> tuple[int, int, int]:
        for _ in range(BACKBONE_STAGES):
            h, w = (h + 1) // 2, (w + 1) // 2
        return h, w, self.out_channels

    def forward(self, x, train=False):
        if x.shape[-1] != 3:
            raise ShapeMismatch(f"backbone expects 3 input channels, got {x.shape[-1]}")
        for conv, act in self.stages:
            x = act(conv(x, train), train)
        return x

    def backward(self, dy):
        for conv, act in reversed(self.stages):
            dy = conv.backward(act.backward(dy))
        return dy


def synthetic_backbone_forward(img: ImageTensor, backbone: SyntheticBackbone, train: bool = False) -> FeatureMap:
    return FeatureMap(backbone(img.data, train), provenance="synthetic")


def save_feature_map(fm: FeatureMap | np.ndarray, path) -> None:
    data = fm.data if isinstance(fm, FeatureMap) else np.asarray(fm)
    if data.ndim != 3:
        raise ShapeMismatch(f"feature map must be 3-D, got shape {data.shape}")
    header = _SITF_HEADER.pack(SITF_MAGIC, SITF_VERSION, 3, *data.shape)
    payload = np.ascontiguousarray(data, dtype="<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def load_feature_map(path, expected_shape=None) -> FeatureMap:
    """Read an SITF file; ``expected_shape`` guards against a mismatched configuration."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    if len(blob) < 4 or blob[:4] != SITF_MAGIC:
        raise BadMagic(f"{path}: not an SITF file (magic {blob[:4]!r})")
    if len(blob) < _SITF_HEADER.size:
        raise TruncatedPayload(f"{path}: header truncated")
    _, version, ndim, h, w, c = _SITF_HEADER.unpack_from(blob)
    if version != SITF_VERSION:
        raise UnsupportedVersion(f"{path}: SITF version {version} not supported")
    if ndim != 3:
        raise UnsupportedVersion(f"{path}: SITF ndim {ndim} not supported")
    shape = (h, w, c)
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise ShapeMismatch(f"{path}: file holds {shape}, configuration expects {tuple(expected_shape)}")
    n = h * w * c
    payload = blob[_SITF_HEADER.size:]
    if len(payload) != 4 * n:
        raise TruncatedPayload(f"{path}: expected {4 * n} payload bytes, found {len(payload)}")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    return FeatureMap(data, provenance="precomputed")


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.")
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
