"""
Shared fixtures: tiny configurations, schedules and config-file writers.
"""

import textwrap
from pathlib import Path

import pytest
import torch

from stoic_diffusion.arch import StoicConfig, StoicNet
from stoic_diffusion.diffusion import make_schedule
from stoic_diffusion.params import ParamStore

TINY_CONFIG_TEXT = """
[model]
stride_variant = S2
image_dims = 1,8,8
embed_dim = 16
num_blocks = 2

[diffusion]
num_steps = 20
beta_start = 1e-3
beta_end = 0.2

[train]
batch_size = 8
steps = 4
seed = 3
log_every = 2

[data]
source = two_blobs
n = 32
seed = 1
"""


@pytest.fixture(autouse=True)
def deterministic_torch():
    torch.use_deterministic_algorithms(True)
    yield


@pytest.fixture
def tiny_config() -> StoicConfig:
    return StoicConfig(image_dims=(1, 8, 8), embed_dim=16, num_blocks=2)


@pytest.fixture
def tiny_net(tiny_config) -> StoicNet:
    return StoicNet.create(tiny_config, seed=0)


@pytest.fixture
def schedule():
    return make_schedule()


@pytest.fixture
def short_schedule():
    return make_schedule(20, 1e-3, 0.2)


@pytest.fixture
def perturb():
    """Copy params with Gaussian noise added, so the zero-initialized decoder stops masking the network"""

    def _perturb(params: ParamStore, scale: float = 0.1, seed: int = 0) -> ParamStore:
        generator = torch.Generator().manual_seed(seed)
        out = params.clone()
        for path in out:
            noise = torch.randn(out[path].shape, generator=generator, dtype=out[path].dtype)
            out.replace(path, out[path] + scale * noise)
        return out

    return _perturb


@pytest.fixture
def tiny_config_text() -> str:
    return textwrap.dedent(TINY_CONFIG_TEXT)


@pytest.fixture
def write_config(tmp_path):
    """Write a RunConfig file and return its path"""

    def _write(text: str = TINY_CONFIG_TEXT, name: str = "run.cfg") -> Path:
        path = tmp_path / name
        path.write_text(textwrap.dedent(text), encoding="utf-8")
        return path

    return _write
