import numpy as np
import pytest

from sdgpi.engine import ExitKind, rollout_uncontrolled, simulate_batch
from sdgpi.pathint import (
    batch_from_simulation,
    estimate_saddle_controls,
    estimate_xi,
    generate_batch,
    saddle_from_batch,
    trajectory_cost,
    value_from_xi,
    xi_from_batch,
)
from sdgpi.streams import RngStreamKey

from conftest import const, make_spec


def test_trajectory_cost_zero_for_costless_survivor(pe_spec):
    traj = rollout_uncontrolled(pe_spec, np.array([0.9, 0.9]), 0.0, 0.1,
                                RngStreamKey(17))
    if traj.exit_kind is ExitKind.HORIZON_END:
        assert trajectory_cost(pe_spec, traj) == 0.0


def test_trajectory_cost_is_failure_weight_on_exit(pe_spec):
    for seed in range(200):
        traj = rollout_uncontrolled(pe_spec, np.array([0.12, 0.0]), 0.0, 0.01,
                                    RngStreamKey(seed))
        if traj.exit_kind is ExitKind.BOUNDARY_EXIT:
            assert trajectory_cost(pe_spec, traj) == pytest.approx(0.2)
            break
    else:
        pytest.fail("no boundary exit found in 200 rollouts")


def test_trajectory_cost_integrates_constant_state_cost():
    spec = make_spec(n=1, horizon=2.0,
                     state_cost=lambda x, t: 1.0 if np.asarray(x).ndim == 1
                     else np.ones(np.asarray(x).shape[0]))
    traj = rollout_uncontrolled(spec, np.zeros(1), 0.0, 0.01, RngStreamKey(4))
    assert trajectory_cost(spec, traj) == pytest.approx(2.0, abs=1e-12)


def test_batch_costs_match_single_trajectory_costs(pe_spec):
    # the batched accumulation and the per-trajectory sum implement the same
    # formula; with one rollout per batch the stream layouts coincide
    for seed in (0, 1, 2, 3):
        key = RngStreamKey(88, 0, 1, seed)
        sim, _ = simulate_batch(pe_spec, pe_spec.x0, 0.0, 0.01, 1, key)
        batch = batch_from_simulation(pe_spec, sim)
        traj = rollout_uncontrolled(pe_spec, pe_spec.x0, 0.0, 0.01, key)
        assert batch.costs[0] == pytest.approx(trajectory_cost(pe_spec, traj), abs=1e-12)


def test_xi_is_one_when_all_costs_vanish():
    spec = make_spec(n=1, diffusion=const([[0.5]]), horizon=0.5)
    for n in (2, 7, 100):
        est = estimate_xi(spec, np.zeros(1), 0.0, 1.3, n, 0.05, RngStreamKey(5))
        assert est.value == 1.0
        assert est.std_error == 0.0


def test_two_point_weight_identity_every_batch(pe_spec):
    lam = pe_spec.lambda_hint
    for seed in range(5):
        batch = generate_batch(pe_spec, pe_spec.x0, 0.0, 0.02, 4000,
                               RngStreamKey(seed, decision_index=1))
        est = xi_from_batch(batch, lam)
        p_exit = batch.boundary_exit.mean()
        identity = 1.0 - (1.0 - np.exp(-pe_spec.failure_weight / lam)) * p_exit
        assert est.value == pytest.approx(identity, rel=1e-13)


def test_xi_bounds_with_bounded_costs(pe_spec):
    lam = pe_spec.lambda_hint
    t_onward = 2.0 - 0.5
    lower = np.exp(-pe_spec.failure_weight / lam)
    for seed in range(5):
        est = estimate_xi(pe_spec, np.array([0.2, 0.1]), t_onward, lam, 2000,
                          0.01, RngStreamKey(seed, decision_index=2))
        assert lower <= est.value <= 1.0


def test_value_from_xi_trivials():
    one = estimate_xi(make_spec(n=1, diffusion=const([[0.3]]), horizon=0.2),
                      np.zeros(1), 0.0, 2.0, 10, 0.05, RngStreamKey(1))
    assert value_from_xi(one, 2.0) == 0.0

    # certain failure: start cornered so every rollout exits immediately
    spec = make_spec(n=1, diffusion=const([[1e-6]]),
                     drift=lambda x, t: np.full(np.shape(x), 50.0),
                     contains=lambda x: (np.asarray(x)[..., 0] < 0.5)
                     if np.asarray(x).ndim == 1
                     else np.asarray(x)[:, 0] < 0.5,
                     eta=0.7, horizon=0.3, x0=[0.45])
    est = estimate_xi(spec, spec.x0, 0.0, 2.0, 50, 0.05, RngStreamKey(2))
    assert est.value == pytest.approx(np.exp(-0.7 / 2.0))
    assert value_from_xi(est, 2.0) == pytest.approx(0.7)


def test_single_rollout_controls_cancel_weights(pe_spec):
    lam = pe_spec.lambda_hint
    key = RngStreamKey(7, 0, 3, 0)
    batch = generate_batch(pe_spec, pe_spec.x0, 0.0, 0.01, 1, key)
    sc = saddle_from_batch(pe_spec, batch, lam)
    from sdgpi.model import gain_matrices

    gu, gv = gain_matrices(pe_spec, pe_spec.x0, 0.0, lam)
    assert np.allclose(sc.u_star, gu @ batch.first_noise[0] / 0.01)
    assert np.allclose(sc.v_star, gv @ batch.first_noise[0] / 0.01)


def test_pe_control_ratio_identity_every_batch(pe_spec):
    lam = pe_spec.lambda_hint
    rv_sq = 2.0
    for seed in range(5):
        sc = estimate_saddle_controls(pe_spec, np.array([0.25, -0.1]), 0.0, lam,
                                      3000, 0.01, RngStreamKey(seed, decision_index=4))
        assert np.array_equal(sc.v_star, sc.u_star / rv_sq)


def test_low_ess_flag_on_peaked_weights():
    # continuous cost spread plus a razor-thin temperature starves the ESS
    spec = make_spec(n=1, diffusion=const([[1.0]]),
                     state_cost=lambda x, t: np.asarray(x)[..., 0] ** 2
                     if np.asarray(x).ndim > 1 else float(np.asarray(x)[0] ** 2))
    batch = generate_batch(spec, np.zeros(1), 0.0, 0.01, 5000,
                           RngStreamKey(10, decision_index=1))
    est = xi_from_batch(batch, lam=1e-3)
    assert est.low_ess
    sane = xi_from_batch(batch, lam=2.0)
    assert not sane.low_ess


def test_std_error_scales_with_sample_count(pe_spec):
    lam = pe_spec.lambda_hint
    ratios = []
    for rep in range(20):
        small = estimate_xi(pe_spec, pe_spec.x0, 0.0, lam, 2000, 0.02,
                            RngStreamKey(rep, decision_index=5))
        large = estimate_xi(pe_spec, pe_spec.x0, 0.0, lam, 4000, 0.02,
                            RngStreamKey(rep, decision_index=6))
        ratios.append(small.std_error / large.std_error)
    mean_ratio = np.mean(ratios)
    assert np.sqrt(2.0) / 1.5 <= mean_ratio <= np.sqrt(2.0) * 1.5


def test_estimates_are_reproducible(pe_spec):
    lam = pe_spec.lambda_hint
    key = RngStreamKey(123, 4, 5, 0)
    a = estimate_saddle_controls(pe_spec, pe_spec.x0, 0.0, lam, 5000, 0.01, key)
    b = estimate_saddle_controls(pe_spec, pe_spec.x0, 0.0, lam, 5000, 0.01, key)
    assert np.array_equal(a.u_star, b.u_star)
    assert a.xi.value == b.xi.value
