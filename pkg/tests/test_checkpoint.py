import numpy as np
import pytest

from dcardnet.checkpoint import (
    CheckpointError,
    config_from_arrays,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from dcardnet.model import ModelConfig, build_model
from dcardnet.tensor import make_rng

CFG = ModelConfig(C=2, f=4, M=1, input_channels=3, input_size=16, num_classes=3)


@pytest.fixture
def trained(tmp_path):
    rng = make_rng(0)
    model = build_model(CFG, rng)
    model.recalibrate_batch_norm(rng.random((4, 3, 16, 16)))
    path = tmp_path / "m.dcrd"
    save_checkpoint(path, model, {"s1": 0.05, "s2": 0.0125})
    return model, path


def test_round_trip_reproduces_predictions(trained):
    model, path = trained
    loaded, smoothing = load_checkpoint(path, input_size=16)
    assert loaded.cfg == CFG
    assert smoothing == {"s1": 0.05, "s2": 0.0125}
    x = make_rng(1).random((3, 3, 16, 16))
    np.testing.assert_array_equal(loaded.predict_proba(x), model.predict_proba(x))


def test_saving_twice_is_byte_identical(trained, tmp_path):
    model, path = trained
    save_checkpoint(tmp_path / "b.dcrd", model, {"s2": 0.0125, "s1": 0.05})
    assert path.read_bytes() == (tmp_path / "b.dcrd").read_bytes()
    assert not list(tmp_path.glob("*.tmp"))


def test_corruption_is_detected(trained):
    _, path = trained
    raw = path.read_bytes()
    for bad in (b"NOPE" + raw[4:], raw[:-3], raw + b"\0"):
        path.write_bytes(bad)
        with pytest.raises(CheckpointError):
            read_checkpoint(path)


def test_mismatched_model_is_rejected(trained):
    _, path = trained
    with pytest.raises(CheckpointError):
        load_checkpoint(path, 16, cfg=ModelConfig(C=2, f=8, M=1, input_channels=3, input_size=16, num_classes=3))


def test_config_inference_needs_core_arrays():
    with pytest.raises(CheckpointError):
        config_from_arrays({}, 16)
