"""SITM model files."""

import struct

import numpy as np
import pytest

from sit.errors import BadMagic, MissingTensor, ShapeMismatch, TruncatedPayload, UnknownTensorName, UnsupportedVersion
from sit.model import VARIANT_ORDER, SITModel
from sit.model_io import decode_tensors, encode_tensors, load_model, save_model


def perturbed(variant, c=8, seed=0, **kw):
    """A model whose parameters are all nonzero (fresh biases are zero)."""
    m = SITModel(variant, backbone_channels=c, seed=seed, **kw)
    g = np.random.default_rng(seed)
    for p in m.parameters().values():
        p += g.standard_normal(p.shape) * 0.01
    return m


@pytest.mark.parametrize("variant", VARIANT_ORDER, ids=lambda v: v.value)
def test_roundtrip_bitwise_all_variants(tmp_path, variant):
    m = perturbed(variant)
    save_model(m, tmp_path / "m.sitm")
    back = load_model(tmp_path / "m.sitm")
    assert back.variant is variant
    a, b = m.parameters(), back.parameters()
    assert list(a) == list(b)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    x = np.random.default_rng(1).random((4, 7, 7, 8))
    assert np.array_equal(m.predict(x), back.predict(x))


def test_roundtrip_preserves_architecture(tmp_path):
    m = perturbed("full", c=6, d_proj=16, blocks=3, heads=2, ffn_dim=24, dropout=0.25)
    save_model(m, tmp_path / "m.sitm")
    assert load_model(tmp_path / "m.sitm").config == m.config


def test_roundtrip_with_backbone(tmp_path):
    m = perturbed("baseline", c=4, backbone=True, backbone_trainable=False)
    save_model(m, tmp_path / "m.sitm")
    back = load_model(tmp_path / "m.sitm")
    assert back.backbone is not None and not back.backbone.trainable
    x = np.random.default_rng(2).random((2, 32, 32, 3))
    assert np.array_equal(m.predict(x), back.predict(x))


def test_save_is_byte_stable(tmp_path):
    m = perturbed("no-gmp")
    save_model(m, tmp_path / "a.sitm")
    save_model(m, tmp_path / "b.sitm")
    assert (tmp_path / "a.sitm").read_bytes() == (tmp_path / "b.sitm").read_bytes()


def test_file_layout(tmp_path):
    save_model(perturbed("baseline"), tmp_path / "m.sitm")
    blob = (tmp_path / "m.sitm").read_bytes()
    magic, version, code, count = struct.unpack_from("<4sBBI", blob)
    assert (magic, version, code) == (b"SITM", 1, 0)
    (nlen,) = struct.unpack_from("<I", blob, 10)
    name = blob[14:14 + nlen].decode()
    assert name == "dense.weight"
    assert blob[14 + nlen] == 2
    assert struct.unpack_from("<2I", blob, 15 + nlen) == (8, 1)
    assert count == 2 + 3  # two parameters plus three meta tensors


def test_baseline_file_into_full_model(tmp_path):
    save_model(perturbed("baseline"), tmp_path / "m.sitm")
    with pytest.raises((UnknownTensorName, MissingTensor)):
        load_model(tmp_path / "m.sitm", into=SITModel("full", backbone_channels=8))


def test_shape_mismatch_on_load(tmp_path):
    save_model(perturbed("full", c=8), tmp_path / "m.sitm")
    with pytest.raises(ShapeMismatch):
        load_model(tmp_path / "m.sitm", into=SITModel("full", backbone_channels=16))


def test_missing_tensor(tmp_path):
    m = perturbed("baseline")
    tensors = dict(m.parameters())
    del tensors["dense.bias"]
    (tmp_path / "m.sitm").write_bytes(encode_tensors(0, tensors))
    with pytest.raises(MissingTensor):
        load_model(tmp_path / "m.sitm", into=SITModel("baseline", backbone_channels=8))


def test_bad_magic(tmp_path):
    save_model(perturbed("baseline"), tmp_path / "m.sitm")
    blob = bytearray((tmp_path / "m.sitm").read_bytes())
    blob[:4] = b"SITF"
    (tmp_path / "m.sitm").write_bytes(bytes(blob))
    with pytest.raises(BadMagic):
        load_model(tmp_path / "m.sitm")


def test_bad_version_and_variant_code():
    blob = bytearray(encode_tensors(0, {}))
    blob[4] = 9
    with pytest.raises(UnsupportedVersion):
        decode_tensors(bytes(blob))


def test_truncated_and_trailing_bytes():
    blob = encode_tensors(1, {"a": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(TruncatedPayload):
        decode_tensors(blob[:-3])
    with pytest.raises(TruncatedPayload):
        decode_tensors(blob + b"\x00")


def test_tensor_codec_roundtrip():
    tensors = {"x": np.array([1.5, -np.pi]), "y.z": np.arange(24.0).reshape(2, 3, 4), "s": np.array(7.0)}
    code, back = decode_tensors(encode_tensors(3, tensors))
    assert code == 3
    assert all(np.array_equal(tensors[k], back[k]) and tensors[k].shape == back[k].shape for k in tensors)
