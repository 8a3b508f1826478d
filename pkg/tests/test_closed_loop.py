import numpy as np
import pytest

from sdgpi.closed_loop import (
    PolicyHandle,
    empirical_game_value,
    estimate_failure_probability,
    outcome_from_results,
    run_trial,
    run_trials,
    saddle_pair,
    theorem3_check,
    wilson_interval,
    zero_policy,
)
from sdgpi.engine import ExitKind, simulate_batch
from sdgpi.errors import EnergyBoundViolated, PolicyFailure
from sdgpi.streams import RngStreamKey

from conftest import const, make_spec


def test_wilson_interval_basic_properties():
    lo, hi = wilson_interval(50, 100)
    assert lo < 0.5 < hi
    lo0, hi0 = wilson_interval(0, 100)
    assert lo0 == 0.0 and hi0 > 0.0
    lo1, hi1 = wilson_interval(100, 100)
    assert hi1 == 1.0 and lo1 < 1.0


def test_one_step_horizon_trial(pe_spec):
    from dataclasses import replace

    short = replace(pe_spec, horizon=pe_spec.t0 + 0.01)
    res = run_trial(short, zero_policy(), zero_policy(), 0.01, 0.01, 3, 0)
    assert res.trajectory.times.shape[0] == 2
    assert res.ledger.terminal in (0.0, short.failure_weight)
    assert res.ledger.total == pytest.approx(res.ledger.terminal)


def test_zero_policies_match_uncontrolled_statistics(pe_spec):
    trials = 400
    results = run_trials(pe_spec, zero_policy(), zero_policy(), trials, 0.01,
                         0.05, 99, workers=2)
    p_closed = np.mean([r.ledger.exit_kind is ExitKind.BOUNDARY_EXIT for r in results])
    batch, _ = simulate_batch(pe_spec, pe_spec.x0, 0.0, 0.01, 40_000,
                              RngStreamKey(1234, decision_index=1))
    p_open = batch.boundary_exit.mean()
    lo, hi = wilson_interval(int(p_closed * trials), trials)
    assert lo - 0.02 <= p_open <= hi + 0.02


def test_ledger_identity_and_conservation(pe_spec):
    agent, adversary = saddle_pair(300)
    results = run_trials(pe_spec, agent, adversary, 20, 0.01, 0.1, 5)
    out = outcome_from_results(results)
    assert out.failures + sum(
        1 for l in out.ledgers if l.exit_kind is ExitKind.HORIZON_END) == out.trials
    for ledger in out.ledgers:
        recomposed = (ledger.terminal + ledger.state_integral
                      + ledger.control_energy_u - ledger.control_energy_v)
        assert ledger.total == pytest.approx(recomposed, abs=1e-12)


def test_policy_failure_surfaces(pe_spec):
    bad = PolicyHandle(kind="fixed", fixed_fn=lambda x, t: np.array([np.nan, 0.0]))
    with pytest.raises(PolicyFailure):
        run_trial(pe_spec, bad, zero_policy(), 0.01, 0.05, 1, 0)


def test_trials_are_reproducible_and_independent_of_workers(pe_spec):
    agent, adversary = saddle_pair(200)
    seq = run_trials(pe_spec, agent, adversary, 8, 0.01, 0.1, 17, workers=1)
    par = run_trials(pe_spec, agent, adversary, 8, 0.01, 0.1, 17, workers=2)
    for a, b in zip(seq, par):
        assert a.ledger.total == b.ledger.total
        assert np.array_equal(a.trajectory.states, b.trajectory.states)


def test_adversary_presence_increases_failures(pe_spec):
    # paired directional comparison: (u*, 0) vs (u*, v*) over matched seeds
    trials = 400
    agent, adversary = saddle_pair(300)
    with_v = run_trials(pe_spec, agent, adversary, trials, 0.01, 0.1, 21,
                        workers=2)
    without_v = run_trials(pe_spec, agent, zero_policy(), trials, 0.01, 0.1, 21,
                           workers=2)
    p_with = np.mean([r.ledger.exit_kind is ExitKind.BOUNDARY_EXIT for r in with_v])
    p_without = np.mean([r.ledger.exit_kind is ExitKind.BOUNDARY_EXIT for r in without_v])
    assert p_without < p_with


def test_empirical_value_tracks_transformed_xi(pe_spec):
    # Theorem 1(i) at desk scale: closed-loop cost under near-saddle play
    # approaches -lam log xi(x0, 0); policy estimation noise inflates the
    # control energies, so allow that bias plus 3 combined standard errors
    from sdgpi.pathint import estimate_xi, value_from_xi

    lam = pe_spec.lambda_hint
    n_dec = 20_000
    agent, adversary = saddle_pair(n_dec)
    value, se = empirical_game_value(pe_spec, pe_spec.x0, 0.0, agent, adversary,
                                     trials=200, h=0.01, decision_interval=0.05,
                                     master_seed=31, workers=2)
    xi = estimate_xi(pe_spec, pe_spec.x0, 0.0, lam, 200_000, 0.01,
                     RngStreamKey(32, decision_index=1))
    j_ref = value_from_xi(xi, lam)
    # energy bias of held noisy controls: E[u'R u]/2 per unit time times the
    # net weight (R_u - R_v/r_v^4 halves it), integrated over the horizon
    sigma_c2 = (2.0 * 0.447) ** 2 / (0.01 * n_dec)
    bias = 0.5 * 5.0 * sigma_c2 * 2 * 2.0 * 0.5
    assert abs(value - j_ref) <= bias + 3 * (se + xi.std_error * lam / xi.value) + 0.02


def test_theorem3_rows_and_energy_guard(unicycle_cfg):
    from sdgpi.scenarios import build_unicycle_spec

    spec = build_unicycle_spec(unicycle_cfg, gamma_sq=3.0)
    _, saddle_adv = saddle_pair(400)
    from dataclasses import replace as dc_replace

    weak = dc_replace(saddle_adv, scale=0.5)
    report = theorem3_check(
        spec, 3.0, [("saddle", saddle_adv, None), ("half", weak, None)],
        trials=12, h=0.02, decision_interval=0.1, master_seed=9,
        n_rollouts=400, workers=2)
    assert report.rows[0].margin == 0.0 and report.rows[0].se_combined == 0.0
    assert report.rows[1].delta_weighted < report.delta_gamma_weighted
    with pytest.raises(EnergyBoundViolated):
        theorem3_check(spec, 3.0, [("bad", weak, 1e-9)], trials=4, h=0.02,
                       decision_interval=0.1, master_seed=9, n_rollouts=400)


def test_theorem3_requires_matched_gains(pe_spec):
    with pytest.raises(ValueError, match="matched gain"):
        theorem3_check(pe_spec, 2.0, [], trials=1, h=0.01,
                       decision_interval=0.05, master_seed=1, n_rollouts=100)


def test_single_agent_policy_runs(unicycle_cfg):
    from sdgpi.scenarios import build_unicycle_spec

    spec = build_unicycle_spec(unicycle_cfg, gamma_sq=3.0, eta=1.0)
    single = PolicyHandle(kind="single_agent", n_rollouts=300)
    _, adversary = saddle_pair(300)
    res = run_trial(spec, single, adversary, 0.02, 0.1, 13, 0)
    assert res.ledger.exit_kind in (ExitKind.BOUNDARY_EXIT, ExitKind.HORIZON_END)
    assert np.isfinite(res.ledger.total)
