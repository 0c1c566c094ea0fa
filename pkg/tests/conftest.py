import numpy as np
import pytest
import torch

from mvinr.config import ModelConfig
from mvinr.model import MultiViewINR
from mvinr.synthetic import smooth_rgbd


def toy_config(**overrides) -> ModelConfig:
    """Small two-view geometry with a 2x2 patch grid; under 5k parameters."""
    kw = dict(view_count=2, frame_count=3, height=32, width=32, patch_size=16,
              stem_resolution=2, upsample_factors=(2, 2, 2), channels=(8, 8, 6, 4),
              base_grid_frames=(3, 2), base_grid_channels=(4, 4), hier_grid_frames=3,
              hier_grid_channels=2, overlap=2)
    kw.update(overrides)
    return ModelConfig(**kw)


@pytest.fixture
def config():
    return toy_config()


@pytest.fixture
def model(config):
    m = MultiViewINR(config, seed=3)
    # grids at their init scale barely move the output; widen them so perturbation tests bite
    with torch.no_grad():
        for name, p in m.named_parameters():
            if name.startswith("views."):
                p.uniform_(-1.0, 1.0, generator=torch.Generator().manual_seed(len(name)))
    return m.eval()


@pytest.fixture
def toy_video():
    return smooth_rgbd(view_count=2, frame_count=3, height=32, width=32, seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: (int(s.split()[1].rstrip(":")), s)):
            terminalreporter.write_line(line)
