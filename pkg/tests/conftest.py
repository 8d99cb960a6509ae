import copy
import dataclasses

import numpy as np
import pytest
from hypothesis import settings

from pathxva.config import default_config_dict, parse_config
from pathxva.market import TimeGrid, build_portfolio, build_scenarios

settings.register_profile("pathxva", deadline=None, max_examples=60)
settings.load_profile("pathxva")


def small_model_dict(n_econ=1, n_clients=1, horizon=2.0, sim_exponent=5, schedule_exponent=3,
                     rate=None, client=None, bank=None, n_swaps=4, **top):
    """Hand-sized model in the config-file layout."""
    rate = rate or {"a": 0.2, "b": 0.02, "sigma": 0.01, "r0": 0.015}
    client = client or {"kappa": 0.5, "theta": 0.05, "xi": 0.1, "lambda0": 0.04}
    bank = bank or {"kappa": 0.5, "theta": 0.02, "xi": 0.05, "lambda0": 0.015}
    d = {
        "horizon": horizon, "sim_exponent": sim_exponent, "schedule_exponent": schedule_exponent,
        "rates": [dict(rate) for _ in range(n_econ)],
        "fx": [{"sigma": 0.1, "x0": 1.0} for _ in range(n_econ - 1)],
        "clients": [dict(client) for _ in range(n_clients)],
        "bank": dict(bank),
        "correlation": {},
        "portfolio": {"n_swaps": n_swaps, "seed": 3, "notional_min": 100.0, "notional_max": 200.0,
                      "payment_intervals": [horizon / 2 ** schedule_exponent],
                      "min_maturity": horizon / 2 ** schedule_exponent},
    }
    d.update(top)
    return d


def small_cube(model_dict, theta=3, n_outer=256, n_inner=4, seed=11):
    mc = parse_config(model_dict)
    grid = TimeGrid.for_model(mc.model, theta)
    ps = mc.portfolio
    port = build_portfolio(ps.seed, ps.n_swaps, mc.model, grid, ps)
    return build_scenarios(mc.model, grid, port, n_outer, n_inner, seed)


def with_arrays(cube, **arrays):
    """Copy of a cube with some arrays replaced (e.g. synthetic MtM)."""
    return dataclasses.replace(cube, **{k: np.array(v, dtype=float if k != "default_index" else np.int32)
                                        for k, v in arrays.items()})


@pytest.fixture(scope="session")
def default_dict():
    return copy.deepcopy(default_config_dict())


@pytest.fixture(scope="session")
def default_cfg(default_dict):
    return parse_config(copy.deepcopy(default_dict))


@pytest.fixture(scope="session")
def tiny_default_cube(default_cfg):
    """Shipped model on a coarse grid with few paths: for fast engine tests."""
    grid = TimeGrid.for_model(default_cfg.model, 3)
    ps = default_cfg.portfolio
    port = build_portfolio(ps.seed, ps.n_swaps, default_cfg.model, grid, ps)
    return build_scenarios(default_cfg.model, grid, port, 256, 4, 5)
