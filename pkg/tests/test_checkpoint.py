import struct

import numpy as np
import pytest

from relrank.checkpoint import (
    MAGIC,
    IntegrityError,
    TrainState,
    VersionError,
    checkpoint_bytes,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
    write_manifest,
)
from relrank.nn import FeatureExtractorSpec, RankModel, default_spec
from relrank.optim import OptimState


def _model_and_state(seed=3):
    model = RankModel.initialize(default_spec(), seed)
    rng = np.random.default_rng(seed)
    state = TrainState(OptimState([rng.random(p.shape) for p in model.parameters()], 17), epoch=4)
    return model, state


def test_round_trip_is_byte_identical(tmp_path):
    model, state = _model_and_state()
    save_checkpoint(model, state, tmp_path / "a.ckpt")
    m2, s2 = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(m2, s2, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert s2.epoch == 4 and s2.optim.step == 17
    for (n1, p1), (n2, p2) in zip(model.named_parameters(), m2.named_parameters()):
        assert n1 == n2 and p1.data.tobytes() == p2.data.tobytes()
    assert m2.spec == model.spec


def test_model_only_round_trip(tmp_path):
    spec = FeatureExtractorSpec.parse((3, 8, 8), "dense6")
    model = RankModel.initialize(spec, 0)
    save_checkpoint(model, None, tmp_path / "m.ckpt")
    m2, state = load_checkpoint(tmp_path / "m.ckpt")
    assert state is None
    assert checkpoint_bytes(m2) == checkpoint_bytes(model)


def test_layout_header():
    model, _ = _model_and_state()
    buf = checkpoint_bytes(model)
    assert buf[:8] == MAGIC
    version, spec_len = struct.unpack("<II", buf[8:16])
    assert version == 1
    (n,) = struct.unpack("<Q", buf[16 + spec_len:24 + spec_len])
    assert n == 66913
    first = np.frombuffer(buf[24 + spec_len:32 + spec_len], "<f8")[0]
    assert first == model.parameters()[0].data.ravel()[0]


def test_corrupted_magic(tmp_path):
    model, state = _model_and_state()
    buf = bytearray(checkpoint_bytes(model, state))
    buf[0] ^= 0xFF
    (tmp_path / "x").write_bytes(bytes(buf))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "x")


def test_future_version(tmp_path):
    model, _ = _model_and_state()
    buf = bytearray(checkpoint_bytes(model))
    buf[8:12] = struct.pack("<I", 2)
    (tmp_path / "x").write_bytes(bytes(buf))
    with pytest.raises(VersionError):
        load_checkpoint(tmp_path / "x")


@pytest.mark.parametrize("cut", [1, 9, 100, 5000])
def test_truncated(tmp_path, cut):
    model, state = _model_and_state()
    buf = checkpoint_bytes(model, state)
    (tmp_path / "x").write_bytes(buf[:-cut])
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "x")


def test_flipped_payload_bit(tmp_path):
    model, state = _model_and_state()
    buf = bytearray(checkpoint_bytes(model, state))
    buf[len(buf) // 2] ^= 0x01
    (tmp_path / "x").write_bytes(bytes(buf))
    with pytest.raises(IntegrityError):
        load_checkpoint(tmp_path / "x")


def test_manifest_round_trip(tmp_path):
    write_manifest(tmp_path / "m", {"seed": 1, "epoch": 3, "losses": "0.5,0.25"})
    assert read_manifest(tmp_path / "m") == {"seed": "1", "epoch": "3", "losses": "0.5,0.25"}
