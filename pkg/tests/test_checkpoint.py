import struct

import numpy as np
import pytest

from iamlab.checkpoint import (MAGIC, decode_checkpoint, encode_checkpoint, load_checkpoint,
                               save_checkpoint)
from iamlab.envs.warehouse import WarehouseEnv
from iamlab.errors import CheckpointError
from iamlab.policies import build_policy


def arrays(rng):
    return {"W": rng.normal(size=(3, 4)), "b": rng.normal(size=4), "s": np.array(2.5),
            "empty": np.zeros((0, 3)), "cube": rng.normal(size=(2, 2, 2))}


def test_round_trip_bitwise(rng, tmp_path):
    src = arrays(rng)
    back = load_checkpoint(save_checkpoint(src, tmp_path / "c.bin"))
    assert list(back) == list(src)
    for k in src:
        assert back[k].shape == src[k].shape
        assert back[k].tobytes() == np.ascontiguousarray(src[k]).tobytes()


def test_special_values_survive(tmp_path):
    src = {"x": np.array([np.inf, -0.0, 5e-324, np.nan])}
    back = load_checkpoint(save_checkpoint(src, tmp_path / "c.bin"))
    assert back["x"].tobytes() == src["x"].tobytes()


def test_policy_round_trip(tmp_path):
    env = WarehouseEnv(seed=0)
    a = build_policy({"variant": "iam", "selector": "static"}, env, np.random.default_rng(1))
    b = build_policy({"variant": "iam", "selector": "static"}, env, np.random.default_rng(2))
    b.load_state_dict(load_checkpoint(save_checkpoint(a.state_dict(), tmp_path / "p.bin")))
    for k, v in a.state_dict().items():
        assert b.state_dict()[k].tobytes() == v.tobytes()


def test_load_rejects_wrong_model(tmp_path):
    env = WarehouseEnv(seed=0)
    iam = build_policy({"variant": "iam"}, env, np.random.default_rng(1))
    fnn = build_policy({"variant": "fnn"}, env, np.random.default_rng(1))
    with pytest.raises(CheckpointError):
        fnn.load_state_dict(iam.state_dict())
    bad = iam.state_dict()
    bad["v_head.b"] = np.zeros(2)
    with pytest.raises(CheckpointError, match="v_head.b"):
        iam.load_state_dict(bad)


def test_layout(rng):
    buf = encode_checkpoint({"ab": np.array([[1.0, 2.0]])})
    assert buf[:8] == MAGIC
    assert struct.unpack("<II", buf[8:16]) == (1, 1)
    assert struct.unpack("<I", buf[16:20]) == (2,) and buf[20:22] == b"ab"
    assert struct.unpack("<I2Q", buf[22:42]) == (2, 1, 2)
    assert np.frombuffer(buf[42:], "<f8").tolist() == [1.0, 2.0]


@pytest.mark.parametrize("cut", [5, 12, 18, 30, 60])
def test_truncation_names_array(rng, cut):
    buf = encode_checkpoint({"weights": rng.normal(size=(3, 3))})
    with pytest.raises(CheckpointError) as err:
        decode_checkpoint(buf[:cut])
    if cut > 20:
        assert "weights" in str(err.value)


def test_version_mismatch():
    buf = encode_checkpoint({"x": np.ones(2)}, version=7)
    with pytest.raises(CheckpointError, match="version"):
        decode_checkpoint(buf)


def test_bad_magic_and_trailing():
    good = encode_checkpoint({"x": np.ones(2)})
    with pytest.raises(CheckpointError):
        decode_checkpoint(b"NOTACKPT" + good[8:])
    with pytest.raises(CheckpointError, match="trailing"):
        decode_checkpoint(good + b"\0")


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nope.bin")
