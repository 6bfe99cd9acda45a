import dataclasses

import pytest

from sphereplate.rig import DriftModel, NoiseModel, RigConfig, execute_campaign

QUIET_NOISE = NoiseModel(s2w_rel=0.0, vdc_jitter=0.0)
NO_DRIFT = DriftModel(d0_rate=0.0, kappa_rate=0.0, vdc_step_bound=0.0)


def quiet_config(**overrides) -> RigConfig:
    """Default rig with noise and drift switched off."""
    return dataclasses.replace(RigConfig(noise=QUIET_NOISE, drift=NO_DRIFT), **overrides)


@pytest.fixture(scope="session")
def default_campaign_20():
    return execute_campaign(RigConfig(), 20)
