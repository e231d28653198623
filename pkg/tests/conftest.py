import json
import pathlib

import pytest
import torch

from aikd.data import SyntheticSpec, generate_synthetic
from aikd.models import ClassifierSpec
from aikd.training import TrainConfig, pretrain

torch.set_num_threads(4)

# Pinned smoke setup: tiny_cnn on the default synthetic dataset, 5 epochs,
# decaying at epochs 3 and 4. Calibrated once; reaches 100% val accuracy.
SMOKE_SPEC = ClassifierSpec("tiny_cnn", 10, 32)
SMOKE_EPOCHS = 5
SMOKE_MILESTONES = (3, 4)


def smoke_train_config(phase: str, seed: int = 0, **overrides) -> TrainConfig:
    base = dict(
        phase=phase,
        epochs=SMOKE_EPOCHS,
        batch_size=128,
        lr_milestones=SMOKE_MILESTONES,
        seed=seed,
    )
    base.update(overrides)
    return TrainConfig(**base)


@pytest.fixture(scope="session")
def synthetic_splits():
    """(train, val, manifest) for the pinned default synthetic dataset."""
    return generate_synthetic(SyntheticSpec())


@pytest.fixture(scope="session")
def pretrained_run(tmp_path_factory, synthetic_splits):
    """One shared phase-1 run: (checkpoint path, run dir)."""
    train, val, _ = synthetic_splits
    out = tmp_path_factory.mktemp("phase1")
    ckpt = pretrain(smoke_train_config("pretrain"), SMOKE_SPEC, train, val, out)
    return ckpt, out


def read_log(path: pathlib.Path):
    return [json.loads(line) for line in path.read_text().splitlines()]
