import struct

import numpy as np
import pytest

from latent_sdf.serialization import (FormatError, load_latents, load_tensors, save_latents,
                                      save_tensors)


def test_latent_layout_by_hand(tmp_path):
    z = np.array([[1.0, -2.0], [0.5, 3.25], [0.0, -0.0]])
    save_latents(tmp_path / "z.dsdf", z)
    raw = (tmp_path / "z.dsdf").read_bytes()
    assert raw[:4] == b"DSDF"
    version, kind, count, dim = struct.unpack("<IIQQ", raw[4:28])
    assert (version, count, dim) == (1, 3, 2)
    assert struct.unpack("<6d", raw[28:]) == tuple(z.ravel())
    back = load_latents(tmp_path / "z.dsdf")
    np.testing.assert_array_equal(back, z)
    assert np.signbit(back[2, 1])


def test_latents_bit_exact_round_trip(tmp_path):
    z = np.random.default_rng(0).normal(size=(7, 64))
    z[0, 0] = np.finfo(np.float64).tiny / 4  # subnormal
    save_latents(tmp_path / "a", z)
    save_latents(tmp_path / "b", load_latents(tmp_path / "a"))
    assert (tmp_path / "a").read_bytes() == (tmp_path / "b").read_bytes()


def test_latent_errors(tmp_path):
    with pytest.raises(ValueError):
        save_latents(tmp_path / "x", np.zeros(3))
    (tmp_path / "bad").write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(FormatError):
        load_latents(tmp_path / "bad")
    save_latents(tmp_path / "t", np.ones((2, 2)))
    (tmp_path / "t").write_bytes((tmp_path / "t").read_bytes()[:-8])
    with pytest.raises(FormatError):
        load_latents(tmp_path / "t")
    save_tensors(tmp_path / "w", {"a": np.ones(2)})
    with pytest.raises(FormatError):
        load_latents(tmp_path / "w")
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "t")


def test_tensor_container_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    tensors = {"b/weight": rng.normal(size=(3, 4)), "a": np.array(2.5), "c": rng.normal(size=(2, 1, 5))}
    meta = {"step": 12, "nested": {"x": [1, 2]}, "big": 2**100}
    save_tensors(tmp_path / "t", tensors, meta)
    got, got_meta = load_tensors(tmp_path / "t")
    assert got_meta == meta
    assert list(got) == sorted(tensors)
    for k, v in tensors.items():
        assert got[k].shape == v.shape
        np.testing.assert_array_equal(got[k], v)
    save_tensors(tmp_path / "u", got, got_meta)
    assert (tmp_path / "t").read_bytes() == (tmp_path / "u").read_bytes()


def test_tensor_version_check(tmp_path):
    save_tensors(tmp_path / "t", {"a": np.ones(1)})
    raw = bytearray((tmp_path / "t").read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    (tmp_path / "t").write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "t")
