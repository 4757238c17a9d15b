"""
Tests for the checkpoint format: round trip, byte stability and corruption
detection.
"""

import struct

import pytest
import torch

from conftest import tiny_model_config
from rdrec.exceptions import CheckpointError
from rdrec.services.checkpoint import load_checkpoint, model_meta, restore_model, save_checkpoint
from rdrec.services.model import build_model


@pytest.fixture
def saved(tmp_path):
    model = build_model(tiny_model_config(12), seed=3)
    path = save_checkpoint(model, model_meta(model, step=42, val_loss=1.25, epoch=3, trial=1), tmp_path / "m.ckpt")
    return model, path


def test_restore_reproduces_parameters_and_meta(saved):
    model, path = saved
    restored, meta = restore_model(path, tiny_model_config(12))
    original = model.state_dict()
    for name, tensor in restored.state_dict().items():
        assert torch.equal(tensor, original[name])
    assert (meta.step, meta.val_loss, meta.epoch, meta.extra) == (42, 1.25, 3, {"trial": 1})
    assert not restored.training


def test_restore_without_expected_config_uses_stored_one(saved):
    _, path = saved
    restored, _ = restore_model(path)
    assert restored.cfg == tiny_model_config(12)


def test_same_model_same_bytes(saved, tmp_path):
    model, path = saved
    again = save_checkpoint(model, model_meta(model, step=42, val_loss=1.25, epoch=3, trial=1), tmp_path / "n.ckpt")
    assert again.read_bytes() == path.read_bytes()


def test_flipped_byte_fails_the_checksum(saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    blob[len(blob) // 2] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path)
    assert e.value.code == "CHECKSUM"


def test_truncated_file_fails(saved):
    _, path = saved
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path)
    assert e.value.code == "CHECKSUM"

    path.write_bytes(b"RDRC")
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path)
    assert e.value.code == "CHECKSUM"


def test_bad_magic(saved):
    _, path = saved
    path.write_bytes(b"PK\x03\x04" + path.read_bytes()[4:])
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path)
    assert e.value.code == "BAD_MAGIC"


def test_version_mismatch(saved):
    _, path = saved
    blob = bytearray(path.read_bytes())
    struct.pack_into("<H", blob, 4, 99)
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(path)
    assert e.value.code == "VERSION_MISMATCH"


def test_config_mismatch(saved):
    _, path = saved
    with pytest.raises(CheckpointError) as e:
        restore_model(path, tiny_model_config(12, d_model=32))
    assert e.value.code == "CONFIG_MISMATCH"


def test_missing_checkpoint(tmp_path):
    with pytest.raises(CheckpointError) as e:
        load_checkpoint(tmp_path / "absent.ckpt")
    assert e.value.code == "MISSING_FILE"
