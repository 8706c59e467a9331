import numpy as np
import pytest
import torch

from otfm.config import OTFMConfig, TrainConfig, desk_config
from otfm.imagery import synth_dataset, synth_scene
from otfm.networks import MappingNetConfig, PotentialNetConfig

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def scene():
    return synth_scene(0, bands=4, hr_size=32, ratio=4)


@pytest.fixture(scope="session")
def small_set():
    return synth_dataset(5, 6, 4, 32, 4)


def tiny_config(**train) -> OTFMConfig:
    """Smallest architecture that still exercises every block type."""
    defaults = dict(max_steps=4, batch_size=2, log_every=1, checkpoint_every=0, seed=0)
    defaults.update(train)
    cfg = OTFMConfig(
        model=MappingNetConfig(bands=4, base_channels=8, levels=2, attention_window=3, heads=2),
        potential=PotentialNetConfig(bands=4, channels=8, time_embed_dim=16),
        train=TrainConfig(**defaults),
    )
    return cfg.sync()


@pytest.fixture
def tiny_cfg():
    return tiny_config()


# One line per acceptance criterion, printed at the end of the session.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
