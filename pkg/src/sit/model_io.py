"""SITM model files: a named-tensor container.

Layout (little-endian)::

    b"SITM" | u8 version=1 | u8 variant code | u32 tensor count
    per tensor: u32 name length | name (utf-8) | u8 ndim | u32 extents[ndim] | f64 payload

Architecture settings that shapes cannot reveal (head count, dropout rate) ride
along as tensors under the ``meta.`` prefix.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .backbone import atomic_write_bytes
from .errors import BadMagic, IoFailure, MissingTensor, ShapeMismatch, TruncatedPayload, UnknownTensorName, UnsupportedVersion
from .model import VARIANT_CODES, VARIANT_ORDER, SITModel

SITM_MAGIC = b"SITM"
SITM_VERSION = 1
_HEADER = struct.Struct("<4sBBI")


def _meta(model: SITModel) -> dict[str, np.ndarray]:
    return {"meta.heads": np.array([float(model.heads)]),
            "meta.dropout": np.array([float(model.dropout)]),
            "meta.backbone_trainable": np.array([float(model.backbone.trainable if model.backbone else 0.0)])}


def encode_tensors(variant_code: int, tensors: dict[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(SITM_MAGIC, SITM_VERSION, variant_code, len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype=np.float64)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_tensors(blob: bytes) -> tuple[int, dict[str, np.ndarray]]:
    if blob[:4] != SITM_MAGIC:
        raise BadMagic(f"not an SITM file (magic {blob[:4]!r})")
    if len(blob) < _HEADER.size:
        raise TruncatedPayload("SITM header truncated")
    _, version, code, count = _HEADER.unpack_from(blob)
    if version != SITM_VERSION:
        raise UnsupportedVersion(f"SITM version {version} not supported")
    pos = _HEADER.size
    tensors = {}

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedPayload("SITM payload truncated")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(take(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
    if pos != len(blob):
        raise TruncatedPayload(f"{len(blob) - pos} trailing bytes after {count} tensors")
    return code, tensors


def save_model(model: SITModel, path) -> None:
    tensors = dict(model.parameters())
    tensors.update(_meta(model))
    atomic_write_bytes(path, encode_tensors(VARIANT_CODES[model.variant], tensors))


def load_state(model: SITModel, tensors: dict[str, np.ndarray]) -> None:
    """Copy ``tensors`` into ``model``; names must match exactly."""
    params = model.parameters()
    for name, arr in tensors.items():
        if name.startswith("meta."):
            continue
        if name not in params:
            raise UnknownTensorName(f"tensor {name!r} has no slot in a {model.variant.value} model")
        if params[name].shape != arr.shape:
            raise ShapeMismatch(f"{name}: file holds {arr.shape}, model expects {params[name].shape}")
    missing = sorted(set(params) - set(tensors))
    if missing:
        raise MissingTensor(f"file lacks {len(missing)} tensors, e.g. {missing[0]!r}")
    for name, arr in tensors.items():
        if not name.startswith("meta."):
            params[name][...] = arr


def _infer_architecture(variant, tensors: dict[str, np.ndarray]) -> dict:
    meta = {k: v for k, v in tensors.items() if k.startswith("meta.")}
    kw = {"heads": int(meta["meta.heads"][0]) if "meta.heads" in meta else 4,
          "dropout": float(meta["meta.dropout"][0]) if "meta.dropout" in meta else 0.1}
    if "pyramid.branch1.conv.kernel" in tensors:
        kw["backbone_channels"] = tensors["pyramid.branch1.conv.kernel"].shape[2]
    elif "dense.weight" in tensors:
        kw["backbone_channels"] = tensors["dense.weight"].shape[0]
    if "proj.weight" in tensors:
        kw["d_proj"] = tensors["proj.weight"].shape[1]
        kw["blocks"] = len({k.split(".")[1] for k in tensors if k.startswith("encoder.")})
        fc1 = tensors.get("encoder.0.ffn.fc1.weight")
        if fc1 is not None:
            kw["ffn_dim"] = fc1.shape[1]
    if any(k.startswith("backbone.") for k in tensors):
        kw["backbone"] = True
        kw["backbone_trainable"] = bool(meta.get("meta.backbone_trainable", np.ones(1))[0])
        last = max(k for k in tensors if k.startswith("backbone.") and k.endswith(".kernel"))
        kw["backbone_channels"] = tensors[last].shape[3]
    return kw


def load_model(path, into: SITModel | None = None) -> SITModel:
    """Read an SITM file into a fresh model, or into ``into`` (which must match it)."""
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    code, tensors = decode_tensors(blob)
    if code >= len(VARIANT_ORDER):
        raise UnsupportedVersion(f"unknown variant code {code}")
    variant = VARIANT_ORDER[code]
    model = into if into is not None else SITModel(variant, **_infer_architecture(variant, tensors))
    load_state(model, tensors)
    return model
