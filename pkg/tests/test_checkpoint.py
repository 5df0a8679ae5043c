"""Checkpoint directory format: bitwise tensors, config-hash gating, rng strings."""
import json

import pytest
import torch

from unireid.checkpoint import (
    FORMAT_VERSION,
    load_checkpoint,
    save_checkpoint,
    torch_rng_from_str,
)
from unireid.errors import ConfigError


def write_one(path, *, config_hash="abc", stage=1, tensors=None):
    tensors = tensors if tensors is not None else {
        "model.weight": torch.randn(3, 4),
        "model.step_count": torch.tensor([7, 9], dtype=torch.long),
    }
    return save_checkpoint(
        path, config={"seed": 1}, config_hash=config_hash, stage=stage, epoch=2,
        global_step=11, tensors=tensors, optimizer={"groups": []},
        sampler_rng_state={"state": {"state": 5}}, vocab={"red": 3},
        id_map={"labels": [], "num_train_identities": 0}, metric_history=[{"loss": 1.0}],
    )


def test_round_trip_is_bitwise(tmp_path):
    torch.manual_seed(0)
    tensors = {
        "model.weight": torch.randn(5, 7),
        "model.bias": torch.randn(7),
        "model.counts": torch.tensor([[1, 2], [3, 4]], dtype=torch.long),
    }
    write_one(tmp_path / "ck", tensors=tensors)
    loaded = load_checkpoint(tmp_path / "ck")
    assert set(loaded.tensors) == set(tensors)
    for name, t in tensors.items():
        assert loaded.tensors[name].dtype == t.dtype
        assert torch.equal(loaded.tensors[name], t)
    assert loaded.stage == 1 and loaded.epoch == 2 and loaded.global_step == 11
    assert loaded.vocab == {"red": 3}
    assert loaded.metric_history == [{"loss": 1.0}]
    assert loaded.rng["sampler"] == {"state": {"state": 5}}


def test_saved_files_are_exactly_two(tmp_path):
    path = write_one(tmp_path / "ck")
    assert sorted(p.name for p in path.iterdir()) == ["blobs.bin", "meta.json"]


def test_config_hash_gate(tmp_path):
    write_one(tmp_path / "ck", config_hash="old-hash")
    load_checkpoint(tmp_path / "ck")  # no expectation, no complaint
    load_checkpoint(tmp_path / "ck", expect_config_hash="old-hash")
    with pytest.raises(ConfigError, match="old-hash"):
        load_checkpoint(tmp_path / "ck", expect_config_hash="new-hash")
    loaded = load_checkpoint(tmp_path / "ck", expect_config_hash="new-hash",
                             allow_mismatch=True)
    assert loaded.config_hash == "old-hash"


def test_missing_checkpoint_is_an_error(tmp_path):
    with pytest.raises(ConfigError, match="no checkpoint"):
        load_checkpoint(tmp_path / "nowhere")


def test_format_version_is_enforced(tmp_path):
    path = write_one(tmp_path / "ck")
    meta = json.loads((path / "meta.json").read_text())
    meta["format_version"] = FORMAT_VERSION + 1
    (path / "meta.json").write_text(json.dumps(meta))
    with pytest.raises(ConfigError, match="format_version"):
        load_checkpoint(path)


def test_unsupported_dtype_is_rejected(tmp_path):
    with pytest.raises(ConfigError, match="dtype"):
        write_one(tmp_path / "ck", tensors={"model.w": torch.randn(2, dtype=torch.float64)})


def test_torch_rng_string_round_trip():
    torch.manual_seed(123)
    torch.randn(10)
    state = torch.get_rng_state()
    import base64

    blob = base64.b64encode(state.numpy().tobytes()).decode("ascii")
    assert torch.equal(torch_rng_from_str(blob), state)
    torch.set_rng_state(torch_rng_from_str(blob))
    a = torch.randn(4)
    torch.set_rng_state(state)
    assert torch.equal(torch.randn(4), a)
