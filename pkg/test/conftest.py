import numpy as np
import pytest

from app.core.harmonics import HarmonicIndexSet
from app.services.scenarios import load_scenario


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def idx1():
    return HarmonicIndexSet(h_max=1, f1=50.0)


@pytest.fixture
def forming_config():
    return load_scenario("forming_classify_h1")


@pytest.fixture
def forming_spec(forming_config):
    return forming_config.cider("forming")


@pytest.fixture
def following_ac_config():
    return load_scenario("flw_ac_sensitivity_K70")


@pytest.fixture
def following_ac_spec(following_ac_config):
    return following_ac_config.cider("following_ac")


@pytest.fixture
def following_dc_config():
    return load_scenario("flw_dc_truncation")


@pytest.fixture
def following_dc_spec(following_dc_config):
    return following_dc_config.cider("following_dc")


@pytest.fixture
def system_config():
    return load_scenario("cigre5_hpf")
