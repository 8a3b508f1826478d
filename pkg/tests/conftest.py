import numpy as np
import pytest

from sdgpi.model import GameSpec, SafeSet
from sdgpi.scenarios import ScenarioConfig, build_pe_spec, build_unicycle_spec


def always_inside(x):
    x = np.asarray(x)
    return True if x.ndim == 1 else np.ones(x.shape[0], dtype=bool)


def box_inside(half):
    def contains(x):
        x = np.asarray(x)
        ok = np.all(np.abs(np.atleast_2d(x)) < half, axis=1)
        return bool(ok[0]) if x.ndim == 1 else ok
    return contains


def const(mat):
    mat = np.asarray(mat, dtype=float)
    return lambda x, t: mat


def make_spec(
    n=1,
    m=1,
    l=1,
    k=1,
    drift=None,
    gain_u=None,
    gain_v=None,
    diffusion=None,
    partition=None,
    state_cost=None,
    terminal_cost=None,
    eta=1.0,
    r_u=None,
    r_v=None,
    contains=None,
    x0=None,
    t0=0.0,
    horizon=1.0,
    lambda_hint=None,
):
    """Small custom game for unit tests; defaults give a 1-D driftless system."""
    return GameSpec(
        state_dim=n,
        agent_dim=m,
        adversary_dim=l,
        noise_dim=k,
        drift=drift,
        gain_u=gain_u or const(np.eye(n, m)),
        gain_v=gain_v or const(np.eye(n, l)),
        diffusion=diffusion or const(np.zeros((n, k))),
        partition_rows=tuple(range(n)) if partition is None else partition,
        state_cost=state_cost,
        terminal_cost=terminal_cost or (lambda x: 0.0 if np.asarray(x).ndim == 1
                                        else np.zeros(np.asarray(x).shape[0])),
        failure_weight=eta,
        control_weight_u=r_u or const(np.eye(m)),
        control_weight_v=r_v or const(np.eye(l)),
        safe_set=SafeSet(contains=contains or always_inside, description="test set"),
        x0=np.zeros(n) if x0 is None else np.asarray(x0, dtype=float),
        t0=t0,
        horizon=horizon,
        lambda_hint=lambda_hint,
    )


@pytest.fixture(scope="session")
def pe_cfg():
    return ScenarioConfig(scenario="pursuit_evasion", experiment="single").resolved()


@pytest.fixture(scope="session")
def pe_spec(pe_cfg):
    return build_pe_spec(pe_cfg)


@pytest.fixture(scope="session")
def unicycle_cfg():
    return ScenarioConfig(scenario="unicycle_da", experiment="single").resolved()


@pytest.fixture(scope="session")
def unicycle_spec(unicycle_cfg):
    return build_unicycle_spec(unicycle_cfg)
