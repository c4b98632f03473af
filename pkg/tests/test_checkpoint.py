import json
import struct

import numpy as np
import pytest

from moelora import checkpoint
from moelora.checkpoint import CheckpointError


def sample():
    rng = np.random.default_rng(0)
    return {"b.w": rng.normal(size=(3, 2)), "a.bias": rng.normal(size=4), "scalar": np.array(2.5)}


def test_round_trip(tmp_path):
    t = sample()
    path = checkpoint.save(tmp_path / "x" / "m.ntc", t, {"format": "test", "n": 3})
    back, meta = checkpoint.load(path)
    assert meta == {"format": "test", "n": 3}
    assert set(back) == set(t)
    assert all(np.array_equal(back[k], t[k]) and back[k].shape == t[k].shape for k in t)
    assert not list(path.parent.glob("*.tmp"))


def test_layout():
    data = checkpoint.dumps({"w": np.array([1.0, -2.0])}, {"k": 1})
    assert data.startswith(b"NTC1\n")
    (hlen,) = struct.unpack_from("<Q", data, 5)
    header = json.loads(data[13:13 + hlen])
    assert header == {"meta": {"k": 1}, "tensors": [["w", [2]]]}
    assert np.frombuffer(data[13 + hlen:], "<f8").tolist() == [1.0, -2.0]


def test_byte_stable_under_insertion_order():
    t = sample()
    assert checkpoint.dumps(t) == checkpoint.dumps(dict(reversed(list(t.items()))))


@pytest.mark.parametrize("mutate", [
    lambda d: b"XXXX" + d[4:],
    lambda d: d[:10],
    lambda d: d[:-8],
    lambda d: d + b"\0",
    lambda d: d[:13] + b"!" + d[14:],
])
def test_corrupt(mutate):
    with pytest.raises(CheckpointError):
        checkpoint.loads(mutate(checkpoint.dumps(sample())))
