import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from vaediff_docre.checkpoint import (
    Checkpoint,
    checkpoint_from_bytes,
    checkpoint_to_bytes,
    load_checkpoint,
    prefixed,
    save_checkpoint,
    unprefixed,
)
from vaediff_docre.errors import ChecksumError, FormatError, VersionError


def sample_tensors():
    rng = np.random.default_rng(7)
    return {
        "enc.w": rng.normal(size=(3, 4)),
        "enc.b": rng.normal(size=4),
        "scalar": np.array(2.5),
        "empty": np.zeros((0, 3)),
        "edge": np.array([np.finfo(float).tiny, -0.0, 1e308, -1e-308]),
    }


def test_round_trip_bitwise(tmp_path):
    tensors = sample_tensors()
    meta = {"stage": "stage1", "seed": 3, "config_hash": "abc", "step": 10}
    path = tmp_path / "sub" / "a.ckpt"
    save_checkpoint(tensors, meta, path)
    ck = load_checkpoint(path)
    assert isinstance(ck, Checkpoint)
    assert ck.metadata == meta
    assert set(ck.tensors) == set(tensors)
    for k, v in tensors.items():
        assert ck.tensors[k].shape == v.shape
        assert ck.tensors[k].tobytes() == np.asarray(v, dtype=np.float64).tobytes()


def test_encoding_is_deterministic():
    a = checkpoint_to_bytes(sample_tensors(), {"b": 1, "a": 2})
    b = checkpoint_to_bytes(dict(reversed(list(sample_tensors().items()))), {"a": 2, "b": 1})
    assert a == b


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=False)))
def test_round_trip_property(arr):
    back = checkpoint_from_bytes(checkpoint_to_bytes({"x": arr})).tensors["x"]
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_every_single_byte_flip_detected():
    blob = checkpoint_to_bytes({"w": np.arange(6.0).reshape(2, 3)}, {"seed": 1})
    rng = np.random.default_rng(0)
    for pos in rng.choice(len(blob), size=100, replace=True):
        bad = bytearray(blob)
        bad[pos] ^= int(rng.integers(1, 256))
        with pytest.raises(FormatError):
            checkpoint_from_bytes(bytes(bad))
        if pos >= 6:  # past the magic, the CRC is what catches it
            with pytest.raises(ChecksumError):
                checkpoint_from_bytes(bytes(bad))


def test_truncation_detected():
    blob = checkpoint_to_bytes(sample_tensors())
    for cut in (0, 5, 10, len(blob) // 2, len(blob) - 1):
        with pytest.raises(FormatError):
            checkpoint_from_bytes(blob[:cut])


def test_newer_version_rejected():
    blob = checkpoint_to_bytes(sample_tensors())
    body = bytearray(blob[:-4])
    struct.pack_into("<H", body, 6, 2)
    bumped = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
    with pytest.raises(VersionError, match="version 2"):
        checkpoint_from_bytes(bumped)


def test_wrong_magic():
    with pytest.raises(FormatError, match="VDCKPT"):
        checkpoint_from_bytes(b"NOTCKP" + bytes(20))


def test_prefix_helpers():
    t = {"a": np.zeros(1), "b.c": np.ones(2)}
    p = prefixed("vae", t)
    assert set(p) == {"vae.a", "vae.b.c"}
    assert set(unprefixed("vae", {**p, "denoiser.x": np.zeros(1)})) == {"a", "b.c"}
