"""Shared test fixtures and patch generators."""

import pytest

from spinkit.descriptor import DescriptorConfig, init_descriptor_params
from spinkit.synthetic import random_surface_patch


def smooth_patch(rng, n=400, radius=0.3):
    """Random smooth quadratic surface patch inside a ball around the origin."""
    return random_surface_patch(rng, n=n, radius=radius)


@pytest.fixture(scope="session")
def desk_cfg():
    return DescriptorConfig.desk_scale(support_radius=0.3)


@pytest.fixture(scope="session")
def desk_params(desk_cfg):
    return init_descriptor_params(desk_cfg, seed=1)
