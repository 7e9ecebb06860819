from __future__ import annotations

import numpy as np
import pytest

from emomoe.core.checkpoint import load_tensors, save_tensors


def test_round_trip_values_and_names(tmp_path, rng):
    tensors = {
        "block.weight": rng.normal((4, 7)),
        "block.bias": rng.normal((7,)),
        "scalarish": np.array(3.5),
    }
    path = tmp_path / "ckpt.ntc"
    save_tensors(path, tensors)
    loaded = load_tensors(path)
    assert set(loaded) == set(tensors)
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        np.testing.assert_array_equal(
            loaded[name], value.astype("<f4").astype(np.float64)
        )


def test_resave_is_byte_identical(tmp_path, rng):
    tensors = {"a": rng.normal((8, 3)), "b": rng.normal((2,))}
    first = tmp_path / "one.ntc"
    second = tmp_path / "two.ntc"
    save_tensors(first, tensors)
    save_tensors(second, load_tensors(first))
    assert first.read_bytes() == second.read_bytes()


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "junk.ntc"
    path.write_bytes(b"nope" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_tensors(path)
