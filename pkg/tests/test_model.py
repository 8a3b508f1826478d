import numpy as np
import pytest

from sdgpi.errors import NoValidLambda, SingularGain
from sdgpi.model import (
    gain_matrices,
    phi_terminal,
    probe_points,
    resolve_lambda,
    running_cost,
)
from sdgpi.scenarios import attenuation_lambda

from conftest import const, make_spec


def test_phi_terminal_pursuit_evasion(pe_spec):
    assert phi_terminal(pe_spec, np.array([0.3, 0.3])) == 0.0
    assert phi_terminal(pe_spec, np.array([0.05, 0.05])) == pytest.approx(0.2)
    batch = np.array([[0.3, 0.3], [0.0, 0.09], [0.5, 0.0]])
    assert phi_terminal(pe_spec, batch) == pytest.approx([0.0, 0.2, 0.0])


def test_phi_terminal_unicycle_interior_value(unicycle_spec):
    x = np.array([-0.4, -0.4, 0.0, 0.0])
    assert phi_terminal(unicycle_spec, x) == pytest.approx(0.32)


def test_phi_terminal_mollified_blends_continuously(pe_spec):
    from dataclasses import replace

    smooth = replace(pe_spec, mollifier_width=0.05)
    rs = np.linspace(0.085, 0.25, 60)
    vals = np.array([phi_terminal(smooth, np.array([r, 0.0])) for r in rs])
    assert vals[0] == pytest.approx(0.2)     # outside keeps the failure weight
    assert vals[-1] == pytest.approx(0.0)    # deep inside matches psi
    assert np.all(np.diff(vals) <= 1e-12)    # monotone ramp, no jumps
    assert np.max(np.abs(np.diff(vals))) < 0.05


def test_running_cost_reduces_to_state_cost(unicycle_spec):
    x = np.array([-0.4, -0.4, 0.0, 0.0])
    val = running_cost(unicycle_spec, x, np.zeros(2), np.zeros(2), 0.0)
    assert val == pytest.approx(0.32)


def test_running_cost_quadratic_example():
    # unit agent weight, doubled adversary weight, no state cost
    spec = make_spec(n=2, m=2, l=2, k=2, r_v=const(2 * np.eye(2)))
    val = running_cost(spec, np.zeros(2), np.array([1.0, 0.0]), np.array([1.0, 0.0]), 0.0)
    assert val == pytest.approx(-0.5)


def test_attenuation_lambda_closed_forms():
    assert attenuation_lambda(2.0) == pytest.approx(2.0, abs=1e-12)
    assert attenuation_lambda(3.0) == pytest.approx(1.5, abs=1e-12)
    assert attenuation_lambda(7.0) == pytest.approx(7.0 / 6.0, abs=1e-12)
    with pytest.raises(NoValidLambda):
        attenuation_lambda(0.5)


def test_resolve_lambda_verifies_scenario_specs(pe_spec, unicycle_spec):
    cert = resolve_lambda(pe_spec, probe_points(pe_spec, 100, seed=3))
    assert cert.lam == pytest.approx(2.0, abs=1e-12)
    assert cert.residual <= 1e-10
    cert_u = resolve_lambda(unicycle_spec, probe_points(unicycle_spec, 100, seed=3))
    assert cert_u.lam == pytest.approx(2.0, abs=1e-12)
    assert cert_u.residual <= 1e-10


def test_resolve_lambda_fits_without_hint():
    # diffusion chosen so Sigma Sigma' = 3 (G_u R_u^-1 G_u' - G_v R_v^-1 G_v')
    spec = make_spec(
        n=2, m=2, l=2, k=2,
        diffusion=const(np.sqrt(1.5) * np.eye(2)),
        r_v=const(2 * np.eye(2)),
    )
    cert = resolve_lambda(spec, [(np.zeros(2), 0.0), (np.ones(2), 0.5)])
    assert cert.lam == pytest.approx(3.0, rel=1e-12)


def test_resolve_lambda_rejects_inconsistent_spec():
    spec = make_spec(
        n=2, m=2, l=2, k=2,
        diffusion=lambda x, t: np.diag([1.0, 2.0]),  # not a multiple of the gain term
        r_v=const(2 * np.eye(2)),
    )
    with pytest.raises(NoValidLambda):
        resolve_lambda(spec, [(np.zeros(2), 0.0)])


def test_gain_matrices_pe_structure():
    spec = make_spec(n=2, m=2, l=2, k=2, gain_v=const(-np.eye(2)),
                     r_v=const(2 * np.eye(2)))
    gu, gv = gain_matrices(spec, np.zeros(2), 0.0, lam=2.0)
    assert np.allclose(gu, 2 * np.eye(2))
    assert np.allclose(gv, np.eye(2))


def test_gain_matrices_match_scenario_values(pe_spec):
    # the gains are invariant to the common control-weight rescaling
    gu, gv = gain_matrices(pe_spec, pe_spec.x0, 0.0, lam=2.0)
    assert np.allclose(gu, 2 * np.eye(2), atol=1e-12)
    assert np.allclose(gv, np.eye(2), atol=1e-12)


def test_gain_matrices_disturbance_attenuation_form():
    g = np.array([[1.0, 0.0], [0.5, 1.0]])
    spec = make_spec(n=2, m=2, l=2, k=2, gain_u=const(g), gain_v=const(g),
                     r_v=const(2 * np.eye(2)))
    gu, gv = gain_matrices(spec, np.zeros(2), 0.0, lam=2.0)
    ggti = np.linalg.inv(g @ g.T)
    assert np.allclose(gu, 2 * g.T @ ggti)
    assert np.allclose(gv, -g.T @ ggti)


def test_gain_matrices_singular_when_terms_cancel():
    spec = make_spec(n=2, m=2, l=2, k=2)  # G_u = G_v, R_u = R_v -> M = 0
    with pytest.raises(SingularGain):
        gain_matrices(spec, np.zeros(2), 0.0, lam=1.0)


def test_gain_identity_under_consistency(pe_spec, unicycle_spec):
    # G_u equals lam R_u^-1 G_u2' (Sigma2 Sigma2')^-1 whenever the
    # consistency condition holds
    for spec in (pe_spec, unicycle_spec):
        lam = spec.lambda_hint
        rows = list(spec.partition_rows)
        for x, t in probe_points(spec, 20, seed=9):
            gu, _ = gain_matrices(spec, x, t, lam)
            sigma2 = np.asarray(spec.diffusion(x, t))[rows, :]
            gu2 = np.asarray(spec.gain_u(x, t))[rows, :]
            ru = np.asarray(spec.control_weight_u(x, t))
            expected = lam * np.linalg.solve(ru, gu2.T) @ np.linalg.inv(sigma2 @ sigma2.T)
            assert np.allclose(gu, expected, rtol=1e-8)


def test_partition_rows_are_the_only_driven_rows(pe_spec, unicycle_spec):
    for spec in (pe_spec, unicycle_spec):
        others = [i for i in range(spec.state_dim) if i not in spec.partition_rows]
        for x, t in probe_points(spec, 100, seed=5):
            for mat_fn in (spec.gain_u, spec.gain_v, spec.diffusion):
                mat = np.asarray(mat_fn(x, t))
                if others:
                    assert np.all(mat[others, :] == 0.0)


def test_eq18_identity_at_probes(pe_spec, unicycle_spec):
    for spec in (pe_spec, unicycle_spec):
        lam = spec.lambda_hint
        for x, t in probe_points(spec, 100, seed=6):
            sigma = np.asarray(spec.diffusion(x, t))
            gu = np.asarray(spec.gain_u(x, t))
            gv = np.asarray(spec.gain_v(x, t))
            ru = np.asarray(spec.control_weight_u(x, t))
            rv = np.asarray(spec.control_weight_v(x, t))
            lhs = sigma @ sigma.T
            rhs = gu @ np.linalg.solve(ru, gu.T) - gv @ np.linalg.solve(rv, gv.T)
            assert np.linalg.norm(lhs - lam * rhs) <= 1e-10
