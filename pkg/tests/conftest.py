import numpy as np
import pytest
import torch

from jointdiff.adapters import attach, make_adapter_set
from jointdiff.model import BaseDenoiser, DenoiserConfig, JointDenoiser
from jointdiff.schedule import make_schedule

TINY = dict(channels_in=1, base_width=8, levels=2, attn_heads=2, head_dim=4, time_embed_dim=16)


def tiny_config(**overrides) -> DenoiserConfig:
    kw = dict(TINY)
    kw.update(overrides)
    return DenoiserConfig(**kw)


def build_joint(cfg=None, t_max=100, rank=4, y_lora=True, seed=0, attach_set=True) -> JointDenoiser:
    torch.manual_seed(seed)
    base = BaseDenoiser(cfg or tiny_config(), t_max=t_max)
    model = JointDenoiser(base)
    if attach_set:
        attach(model, make_adapter_set(model, rank=rank, y_lora=y_lora, seed=seed))
    return model


def randomize_adapters(model: JointDenoiser, scale=0.05, seed=0) -> None:
    """Give the attached set nonzero values so the joint path actually acts."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.adapter_set.parameters():
            p.add_(scale * torch.randn(p.shape, generator=gen))


@pytest.fixture
def schedule100():
    return make_schedule(100)


@pytest.fixture
def tiny_joint():
    return build_joint()


@pytest.fixture
def rng():
    return np.random.default_rng(0)
