import numpy as np
import pytest

from conftest import random_masks, tiny_model
from xpruner.checkpoint import MAGIC, Checkpoint, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from xpruner.errors import CheckpointError, ChecksumError, VersionMismatchError
from xpruner.prune import init_prune_state
from xpruner.vit import Keep, apply_structural_prune, prunable_units


def full_checkpoint():
    model = tiny_model(seed=2)
    masks = random_masks(model, seed=3)
    state = init_prune_state(masks, prunable_units(model), 0.4)
    state.step = 7
    return Checkpoint(model, masks, state, {"phase": "search", "history": [{"epoch": 1, "loss": 0.5}]},
                      {"prune.t": np.array([3.0]), "other.velocity.x": np.arange(4.0)})


def test_round_trip_is_bitwise(tmp_path):
    ckpt = full_checkpoint()
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, ckpt)
    back = load_checkpoint(path)
    for k, t in ckpt.model.params.items():
        assert back.model.params[k].data.tobytes() == t.data.tobytes()
    for (k, t), (k2, t2) in zip(ckpt.masks.named(), back.masks.named()):
        assert k == k2 and t.data.tobytes() == t2.data.tobytes()
    assert back.prune_state.theta.data.tobytes() == ckpt.prune_state.theta.data.tobytes()
    assert back.prune_state.step == 7 and back.prune_state.groups == ckpt.prune_state.groups
    assert back.metadata == ckpt.metadata
    np.testing.assert_array_equal(back.optimizer["other.velocity.x"], np.arange(4.0))
    assert to_bytes(back) == path.read_bytes()


def test_pruned_architecture_round_trips(tmp_path):
    model = apply_structural_prune(tiny_model(), {0: Keep([1], [3, 4])})
    save_checkpoint(tmp_path / "p.ckpt", Checkpoint(model))
    back = load_checkpoint(tmp_path / "p.ckpt")
    assert back.model.heads == [1, 2] and back.model.hidden == [2, 32]
    assert back.model.unit_ids["0.neuron"] == [3, 4]
    assert back.masks is None and back.prune_state is None


def test_serialization_is_deterministic():
    assert to_bytes(full_checkpoint()) == to_bytes(full_checkpoint())


def test_version_mismatch_rejected():
    raw = bytearray(to_bytes(full_checkpoint()))
    raw[len(MAGIC)] = 99
    with pytest.raises(VersionMismatchError):
        from_bytes(bytes(raw))


def test_corruption_detected():
    raw = bytearray(to_bytes(full_checkpoint()))
    raw[-3] ^= 0xFF
    with pytest.raises(ChecksumError):
        from_bytes(bytes(raw))


def test_not_a_checkpoint(tmp_path):
    with pytest.raises(CheckpointError):
        from_bytes(b"hello")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "missing.ckpt")


def test_save_leaves_no_temp_file(tmp_path):
    save_checkpoint(tmp_path / "x.ckpt", Checkpoint(tiny_model()))
    assert [p.name for p in tmp_path.iterdir()] == ["x.ckpt"]
