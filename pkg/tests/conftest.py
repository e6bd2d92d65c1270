import os

import numpy as np
import pytest
import torch

os.environ.setdefault("SATDINO_THREADS", "1")
torch.set_num_threads(int(os.environ["SATDINO_THREADS"]))

from satdino.config import RunConfig  # noqa: E402
from satdino.data import SynthSpec, generate_synthetic, split_dataset  # noqa: E402

ACCEPTANCE_LINES = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


TINY = {
    "model.embed_dim": 16,
    "model.depth": 1,
    "model.heads": 2,
    "views.global_out": 32,
    "views.local_out": 16,
    "views.n_local": 2,
    "head.prototypes": 16,
    "head.hidden_dim": 16,
    "head.bottleneck_dim": 8,
    "optim.batch_size": 6,
    "optim.epochs": 2,
    "optim.warmup_epochs": 1,
}


@pytest.fixture
def tiny_config():
    return RunConfig().update(TINY).validate()


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """3 classes x 8 images of 32 px, split 18/6."""
    root = tmp_path_factory.mktemp("tiny_data")
    manifest = generate_synthetic(SynthSpec(n_classes=3, image_size=32, samples_per_class=8, seed=1), root)
    return split_dataset(manifest, (0.75, 0.25), seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
