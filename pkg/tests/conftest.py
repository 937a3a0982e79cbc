import json

import numpy as np
import pytest

from decompopf import builtin_case, parse_case
from decompopf.datagen import LoadSamplerConfig, generate_dataset
from decompopf.partition import RegionAssignment, induce_partition

THREE_BUS = {
    "name": "three_bus",
    "base_mva": 100.0,
    "buses": [
        {"id": 1, "v_min": 0.95, "v_max": 1.05, "is_ref": True},
        {"id": 2, "v_min": 0.95, "v_max": 1.05},
        {"id": 3, "v_min": 0.95, "v_max": 1.05, "g_sh": 0.01, "b_sh": 0.02},
    ],
    "branches": [
        {"from_bus": 1, "to_bus": 2, "g": 1.0, "b": -10.0, "s_max": 0.6},
        {"from_bus": 2, "to_bus": 3, "g": 0.5, "b": -5.0, "s_max": 0.4, "b_ch": 0.02},
        {"from_bus": 1, "to_bus": 3, "g": 0.8, "b": -4.0, "s_max": 0.5, "tap": 1.02},
    ],
    "generators": [
        {"bus": 1, "p_min": 0.0, "p_max": 1.5, "q_min": -1.0, "q_max": 1.0, "cost": {"c2": 2.0, "c1": 10.0}},
        {"bus": 2, "p_min": 0.1, "p_max": 0.6, "q_min": -0.5, "q_max": 0.5, "cost": {"c2": 1.0, "c1": 20.0}},
    ],
    "loads": [
        {"bus": 2, "p_nom": 0.4, "q_nom": 0.1},
        {"bus": 3, "p_nom": 0.6, "q_nom": 0.2},
    ],
}


@pytest.fixture(scope="session")
def three_bus():
    return parse_case(json.dumps(THREE_BUS))


@pytest.fixture(scope="session")
def case2():
    return builtin_case("case2")


@pytest.fixture(scope="session")
def toy6():
    return builtin_case("toy6")


@pytest.fixture(scope="session")
def case30():
    return builtin_case("case30")


@pytest.fixture(scope="session")
def case118():
    return builtin_case("case118")


@pytest.fixture(scope="session")
def toy6_assignment(toy6):
    return RegionAssignment.from_hints(toy6)


@pytest.fixture(scope="session")
def toy6_partition(toy6, toy6_assignment):
    return induce_partition(toy6, toy6_assignment)


@pytest.fixture(scope="session")
def toy6_dataset(toy6, toy6_assignment):
    return generate_dataset(toy6, toy6_assignment, 40, LoadSamplerConfig(seed=3))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
