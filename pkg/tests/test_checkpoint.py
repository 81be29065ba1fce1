import json
import struct

import numpy as np
import pytest

from bridgecond import checkpoint as ckpt_io
from bridgecond.checkpoint import MAGIC, Checkpoint, CheckpointError


def _ckpt():
    rng = np.random.default_rng(0)
    return Checkpoint({"stage": 2, "step": 7, "model": {"d": 3}},
                      {"b.w": rng.standard_normal((2, 3)), "a": np.array(1.5)}, 7,
                      {"b.w": (rng.standard_normal((2, 3)), rng.random((2, 3)))},
                      np.random.default_rng(5).bit_generator.state)


def test_round_trip_is_exact(tmp_path):
    ck = _ckpt()
    ckpt_io.save(tmp_path / "x.ckpt", ck)
    back = ckpt_io.load(tmp_path / "x.ckpt")
    assert back.header == ck.header and back.stage == 2 and back.opt_step == 7
    assert back.params.keys() == ck.params.keys()
    assert all(np.array_equal(back.params[k], ck.params[k]) for k in ck.params)
    assert all(np.array_equal(a, b) for a, b in zip(back.opt_moments["b.w"], ck.opt_moments["b.w"]))
    assert back.rng_state == ck.rng_state
    assert ckpt_io.dumps(back) == ckpt_io.dumps(ck)


def test_byte_layout_starts_with_magic_and_header():
    raw = ckpt_io.dumps(_ckpt())
    assert raw.startswith(MAGIC)
    pos = len(MAGIC)
    (n,) = struct.unpack("<I", raw[pos:pos + 4])
    header = json.loads(raw[pos + 4:pos + 4 + n])
    assert header["stage"] == 2
    pos += 4 + n
    assert struct.unpack("<I", raw[pos:pos + 4])[0] == 2  # parameter count
    # parameters are stored in sorted name order: "a" (rank 0) comes first
    assert struct.unpack("<I", raw[pos + 4:pos + 8])[0] == 1 and raw[pos + 8:pos + 9] == b"a"
    assert struct.unpack("<I", raw[pos + 9:pos + 13])[0] == 0
    assert struct.unpack("<d", raw[pos + 13:pos + 21])[0] == 1.5


def test_corrupt_inputs_raise(tmp_path):
    raw = ckpt_io.dumps(_ckpt())
    with pytest.raises(CheckpointError, match="magic"):
        ckpt_io.loads(b"NOTACKPT" + raw)
    with pytest.raises(CheckpointError, match="truncated"):
        ckpt_io.loads(raw[:-10])
    with pytest.raises(CheckpointError, match="trailing"):
        ckpt_io.loads(raw + b"\0")
    with pytest.raises(CheckpointError):
        ckpt_io.load(tmp_path / "missing.ckpt")
