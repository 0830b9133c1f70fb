import os

import pytest

import tensor_core as tc
from volumes import PhantomConfig, synth_generate, write_dataset

TINY_SHAPE = (16, 16, 16)


@pytest.fixture(autouse=True)
def float64_precision():
    tc.set_precision("float64")
    yield
    tc.set_precision("float64")


@pytest.fixture
def registry(tmp_path, monkeypatch):
    """Point the run registry at a temporary file."""
    import config
    path = str(tmp_path / "runs.sqlite")
    monkeypatch.setattr(config, "REGISTRY_FILE", path)
    return path


@pytest.fixture
def tiny_dataset(tmp_path):
    """Five 16^3 phantoms written with a manifest."""
    data_dir = str(tmp_path / "phantoms")
    samples = synth_generate(3, 5, TINY_SHAPE, PhantomConfig(noise_sigma=0.05))
    write_dataset(samples, data_dir, extra={"seed": 3})
    assert os.path.exists(os.path.join(data_dir, "manifest.json"))
    return data_dir


@pytest.fixture
def tiny_train_config(tiny_dataset, tmp_path):
    return {
        "data_dir": tiny_dataset,
        "out": str(tmp_path / "model.dpbn"),
        "iterations": 2,
        "crop_shape": [8, 8, 8],
        "channels": [2, 4, 4],
        "sram_kernel": 3,
        "dfb_k": 3,
        "lr": 1e-2,
        "checkpoint_every": 0,
        "log_every": 1,
    }
