import struct

import numpy as np
import pytest

from disa import checkpoint as ckpt
from disa.losses import compute_prototypes


def test_round_trip_bit_exact(tmp_path, rng):
    blocks = {"backbone/w": rng.normal(size=(3, 4)), "backbone/b": rng.normal(size=4),
              "prompts/visual.0": rng.normal(size=(2, 4)), "scalar": np.array(1.5)}
    path = tmp_path / "x.ckpt"
    ckpt.write_checkpoint(path, blocks)
    back = ckpt.read_checkpoint(path)
    assert set(back) == set(blocks)
    for k in blocks:
        assert back[k].tobytes() == np.asarray(blocks[k], dtype=np.float64).tobytes()
    assert set(ckpt.group(back, "backbone")) == {"w", "b"}


def test_layout_is_little_endian_with_header(tmp_path):
    path = tmp_path / "h.ckpt"
    ckpt.write_checkpoint(path, {"a": np.array([1.0, 2.0])})
    raw = path.read_bytes()
    assert raw[:4] == b"DISA" and struct.unpack("<I", raw[4:8]) == (1,)
    assert struct.unpack("<I", raw[8:12]) == (1,) and raw[12:13] == b"a"
    assert struct.unpack("<II", raw[13:21]) == (1, 2)
    assert struct.unpack("<2d", raw[21:37]) == (1.0, 2.0)


def test_never_overwrites(tmp_path):
    path = tmp_path / "once.ckpt"
    ckpt.write_checkpoint(path, {"a": np.zeros(1)})
    before = path.read_bytes()
    with pytest.raises(FileExistsError):
        ckpt.write_checkpoint(path, {"a": np.ones(1)})
    assert path.read_bytes() == before


def test_corrupt_files(tmp_path):
    bad = tmp_path / "bad.ckpt"
    bad.write_bytes(b"NOPE")
    with pytest.raises(ValueError):
        ckpt.read_checkpoint(bad)
    good = tmp_path / "good.ckpt"
    ckpt.write_checkpoint(good, {"a": np.zeros(8)})
    cut = tmp_path / "cut.ckpt"
    cut.write_bytes(good.read_bytes()[:-9])
    with pytest.raises(ValueError):
        ckpt.read_checkpoint(cut)


def test_prototype_blocks(tmp_path, rng):
    table = compute_prototypes(rng.normal(size=(6, 3)), [4, 4, 9, 9, 9, 2])
    path = tmp_path / "p.ckpt"
    ckpt.write_checkpoint(path, ckpt.prototype_blocks(table))
    back = ckpt.load_prototypes(ckpt.read_checkpoint(path))
    assert back.class_ids == [2, 4, 9] and back.counts == [1, 2, 3]
    assert back.means.tobytes() == table.means.tobytes()
    assert ckpt.load_prototypes({}) is None
