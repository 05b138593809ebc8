import struct

import numpy as np
import pytest

from icstn.checkpoint import MAGIC, dumps, load_tensors, loads, save_tensors
from icstn.exceptions import DataFormatError


def test_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(0)
    tensors = {
        "w": rng.normal(size=(3, 2, 5, 5)),
        "b": rng.normal(size=3),
        "scalar": np.array(np.pi),
        "empty": np.zeros((0, 4)),
        "extremes": np.array([np.finfo(float).tiny, -0.0, 1e308, 5e-324]),
    }
    save_tensors(tmp_path / "t.bin", tensors)
    back = load_tensors(tmp_path / "t.bin")
    assert list(back) == list(tensors)
    for name, arr in tensors.items():
        assert back[name].shape == arr.shape
        assert back[name].tobytes() == arr.tobytes()


def test_layout_by_hand():
    data = dumps({"ab": np.array([[1.0, 2.0]])})
    expected = MAGIC + struct.pack("<QQ", 1, 1) + struct.pack("<Q", 2) + b"ab"
    expected += struct.pack("<QQQ", 2, 1, 2) + struct.pack("<dd", 1.0, 2.0)
    assert data == expected


def test_unicode_names():
    back = loads(dumps({"prédicteur.0": np.ones(2)}))
    assert "prédicteur.0" in back


def test_float32_is_widened():
    back = loads(dumps({"x": np.array([0.1], dtype=np.float32)}))
    assert back["x"].dtype == np.float64
    assert back["x"][0] == np.float64(np.float32(0.1))


@pytest.mark.parametrize("cut", [4, 12, 30, 50])
def test_truncation_detected(cut):
    data = dumps({"name": np.arange(4.0)})
    with pytest.raises(DataFormatError):
        loads(data[:cut])


def test_bad_magic_and_version():
    data = dumps({"x": np.ones(1)})
    with pytest.raises(DataFormatError, match="magic"):
        loads(b"NOTMAGIC" + data[8:])
    with pytest.raises(DataFormatError, match="version"):
        loads(MAGIC + struct.pack("<Q", 99) + data[16:])
