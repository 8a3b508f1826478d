import numpy as np
import pytest

from sdgpi.errors import StencilOutOfDomain, UnstableSolve
from sdgpi.oracle import (
    Grid2D,
    controls_from_solution,
    exit_probability_reference,
    hji_residual,
    solve_dirichlet,
    value_at,
    xi_at,
)
from sdgpi.pathint import estimate_xi
from sdgpi.streams import RngStreamKey

from conftest import const, make_spec


def small_grid(nodes=81, steps=400, store=8):
    return Grid2D((-1.0, -1.0), (1.0, 1.0), (nodes, nodes),
                  n_time_steps=steps, store_every=store)


def planar_spec(**kw):
    defaults = dict(n=2, m=2, l=2, k=2, horizon=2.0, x0=[0.3, 0.3])
    defaults.update(kw)
    return make_spec(**defaults)


def disk_contains(rho):
    def contains(x):
        x = np.asarray(x)
        r2 = np.sum(np.atleast_2d(x) ** 2, axis=1)
        out = r2 > rho**2
        return bool(out[0]) if x.ndim == 1 else out
    return contains


def test_constant_boundary_data_gives_constant_field():
    # psi == eta == c makes exp(-phi/lam) constant on the whole boundary,
    # and constants solve the cost-free equation exactly
    c = 0.3
    spec = planar_spec(
        diffusion=const(np.sqrt(0.2) * np.eye(2)),
        contains=disk_contains(0.1),
        terminal_cost=lambda x: np.full(np.atleast_2d(x).shape[0], c)[0]
        if np.asarray(x).ndim == 1 else np.full(np.asarray(x).shape[0], c),
        eta=c,
    )
    sol = solve_dirichlet(spec, small_grid(), lam=2.0)
    expected = np.exp(-c / 2.0)
    assert np.max(np.abs(sol.xi - expected)) <= 1e-6


def test_maximum_principle_and_positivity(pe_spec):
    sol = solve_dirichlet(pe_spec, small_grid(), lam=pe_spec.lambda_hint)
    assert sol.xi.min() > 0.0
    assert sol.xi.max() <= 1.0 + 1e-12


def test_enlarging_failure_weight_decreases_xi(pe_spec):
    from dataclasses import replace

    lam = pe_spec.lambda_hint
    base = solve_dirichlet(pe_spec, small_grid(), lam)
    harsher = solve_dirichlet(replace(pe_spec, failure_weight=0.4), small_grid(), lam)
    x0 = pe_spec.x0
    assert xi_at(harsher, x0, 0.0) < xi_at(base, x0, 0.0)
    interior = ~base.dirichlet_mask
    assert np.all(harsher.xi[-1][interior] <= base.xi[-1][interior] + 1e-12)


def test_grid_self_convergence_within_one_percent(pe_spec):
    lam = pe_spec.lambda_hint
    coarse = solve_dirichlet(pe_spec, small_grid(nodes=81), lam)
    fine = solve_dirichlet(pe_spec, small_grid(nodes=161), lam)
    a = xi_at(coarse, pe_spec.x0, 0.0)
    b = xi_at(fine, pe_spec.x0, 0.0)
    assert abs(a - b) / b <= 0.01


def test_xi_matches_direct_monte_carlo(pe_spec):
    lam = pe_spec.lambda_hint
    sol = solve_dirichlet(pe_spec, small_grid(nodes=161, steps=1000, store=20), lam)
    ref = xi_at(sol, pe_spec.x0, 0.0)
    est = estimate_xi(pe_spec, pe_spec.x0, 0.0, lam, 1_000_000, 0.004,
                      RngStreamKey(99, decision_index=1))
    assert abs(est.value - ref) / ref <= 0.02


def test_controls_point_away_from_the_pursuer(pe_spec):
    lam = pe_spec.lambda_hint
    sol = solve_dirichlet(pe_spec, small_grid(nodes=161), lam)
    for ang in (0.0, 0.7, 2.1, 3.9, 5.5):
        x = 0.2 * np.array([np.cos(ang), np.sin(ang)])
        u, v = controls_from_solution(sol, pe_spec, x, 0.0)
        radial = x / np.linalg.norm(x)
        assert u @ radial > 0.0              # evader flees outward
        assert np.allclose(v, u / 2.0)       # pursuer weight r_v^2 = 2


def test_gradient_stencil_guard(pe_spec):
    lam = pe_spec.lambda_hint
    sol = solve_dirichlet(pe_spec, small_grid(), lam)
    with pytest.raises(StencilOutOfDomain):
        controls_from_solution(sol, pe_spec, np.array([0.999, 0.0]), 0.0)
    with pytest.raises(StencilOutOfDomain):
        controls_from_solution(sol, pe_spec, np.array([0.1, 0.0]), 0.0)


def test_exit_probability_reference_limits(pe_spec):
    lam = pe_spec.lambda_hint
    grid = small_grid(nodes=161)
    sol = solve_dirichlet(pe_spec, grid, lam)
    far = exit_probability_reference(pe_spec, grid, np.array([0.85, 0.0]), 1.9,
                                     solution=sol, lam=lam)
    assert far <= 1e-3
    ray = [exit_probability_reference(pe_spec, grid, np.array([r, 0.0]), 0.0,
                                      solution=sol, lam=lam)
           for r in (0.105, 0.13, 0.15, 0.2, 0.3, 0.5, 0.8)]
    assert all(a > b for a, b in zip(ray, ray[1:]))
    assert ray[0] > 0.9


def test_exit_probability_reference_matches_direct_monte_carlo(pe_spec):
    # exit detection needs a fine step here: the discrete-exit deficit decays
    # roughly linearly in h for this geometry and is ~0.002 at h = 0.001
    from sdgpi.engine import simulate_batch

    lam = pe_spec.lambda_hint
    grid = small_grid(nodes=201, steps=1000, store=20)
    sol = solve_dirichlet(pe_spec, grid, lam)
    ref = exit_probability_reference(pe_spec, grid, pe_spec.x0, 0.0,
                                     solution=sol, lam=lam)
    batch, _ = simulate_batch(pe_spec, pe_spec.x0, 0.0, 0.001, 1_000_000,
                              RngStreamKey(7, decision_index=3))
    assert abs(batch.boundary_exit.mean() - ref) <= 0.01


def test_hji_residual_shrinks_under_refinement(pe_spec):
    lam = pe_spec.lambda_hint
    probes = np.array([[0.3, 0.3], [0.25, 0.0], [0.0, -0.3], [-0.35, 0.2],
                       [0.45, -0.2], [-0.2, -0.2]])
    res = []
    for nodes, steps in ((81, 500), (161, 1000)):
        sol = solve_dirichlet(pe_spec, small_grid(nodes=nodes, steps=steps, store=10),
                              lam)
        res.append(hji_residual(sol, pe_spec, probes))
    assert res[1] <= 0.6 * res[0]


def test_unstable_solve_detected():
    # negative failure weight would force xi above 1 but stays positive;
    # instead drive instability with an absurd state cost sign
    spec = planar_spec(
        diffusion=const(np.sqrt(0.2) * np.eye(2)),
        contains=disk_contains(0.1),
        state_cost=lambda x, t: np.full(np.atleast_2d(np.asarray(x)).shape[0], -500.0)
        if np.asarray(x).ndim > 1 else -500.0,
        eta=0.2,
    )
    with pytest.raises(UnstableSolve):
        solve_dirichlet(spec, small_grid(nodes=41, steps=40), lam=0.05)


def test_value_transform_round_trip(pe_spec):
    lam = pe_spec.lambda_hint
    sol = solve_dirichlet(pe_spec, small_grid(), lam)
    x = np.array([0.25, -0.2])
    assert value_at(sol, x, 0.5) == pytest.approx(-lam * np.log(xi_at(sol, x, 0.5)))
