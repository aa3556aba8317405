import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from evroute.backbone import BackboneConfig

settings.register_profile("repo", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


def tiny_config(**overrides) -> BackboneConfig:
    """Two stages, D=8, 16x16 input -> 4x4 then 2x2 grid."""
    cfg = BackboneConfig(
        in_channels=1,
        num_classes=3,
        stem_channels=4,
        dims=[8, 8],
        depths=[1, 1],
        heads=[2, 2],
        downsample=[False, True],
        beta_schedule=[0.0, 0.8],
        dropout=0.0,
        prototypes_per_class=2,
        head="prototype",
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    cfg.validate()
    return cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
