"""Declarative description of one risk-minimizing zero-sum game.

A :class:`GameSpec` bundles the controlled dynamics (drift, control gains,
diffusion, and the index set of the noise-driven state block), the cost
structure (state cost, terminal cost, failure weight, quadratic control
weights), the safe set, and the horizon.  All callbacks must be pure; state
callbacks (``drift``, ``state_cost``, ``SafeSet.contains``) accept either a
single state ``(n,)`` or a batch ``(N, n)`` and vectorize over the leading
axis.  Matrix callbacks (gains, diffusion, control weights) are evaluated at
a single ``(x, t)``; ``diffusion`` may additionally return a ``(N, n, k)``
stack for batched states.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NoValidLambda, SingularGain

Array = np.ndarray

# Above this condition number the gain normal matrix is treated as singular.
GAIN_COND_LIMIT = 1e12


@dataclass(frozen=True)
class SafeSet:
    """Membership test for the open safe region.

    ``contains`` maps ``(..., n)`` states to booleans (True = interior).
    ``boundary_distance`` (optional) is a signed distance to the failure
    boundary, positive inside; it is only needed when terminal-cost
    mollification is switched on.  ``outer_radius`` marks the monitored
    truncation radius of formally unbounded safe sets: reaching it does not
    end a rollout but is counted as a diagnostic.
    """

    contains: Callable[[Array], Array]
    description: str
    boundary_distance: Optional[Callable[[Array], Array]] = None
    outer_radius: Optional[float] = None


@dataclass(frozen=True)
class GameSpec:
    """Full description of one game; immutable and shareable across workers."""

    state_dim: int
    agent_dim: int
    adversary_dim: int
    noise_dim: int
    drift: Optional[Callable[[Array, float], Array]]  # None means f == 0
    gain_u: Callable[[Array, float], Array]      # (n, m)
    gain_v: Callable[[Array, float], Array]      # (n, l)
    diffusion: Callable[[Array, float], Array]   # (n, k)
    partition_rows: tuple[int, ...]              # rows of the noise-driven block
    state_cost: Optional[Callable[[Array, float], Array]]  # None means V == 0
    terminal_cost: Callable[[Array], Array]
    failure_weight: float
    control_weight_u: Callable[[Array, float], Array]  # (m, m) SPD
    control_weight_v: Callable[[Array, float], Array]  # (l, l) SPD
    safe_set: SafeSet
    x0: Array
    t0: float
    horizon: float
    lambda_hint: Optional[float] = None   # closed-form consistency constant
    mollifier_width: float = 0.0          # 0 disables terminal-cost smoothing

    def __post_init__(self):
        object.__setattr__(self, "x0", np.asarray(self.x0, dtype=float))
        if self.t0 >= self.horizon:
            raise ValueError("horizon must satisfy t0 < T")
        if self.failure_weight <= 0:
            raise ValueError("failure_weight must be positive")

    @property
    def noise_block_dim(self) -> int:
        return len(self.partition_rows)


def _bump(s: Array) -> Array:
    """C-infinity ramp: 0 for s <= 0, 1 for s >= 1."""
    s = np.clip(s, 0.0, 1.0)
    with np.errstate(divide="ignore", over="ignore", under="ignore"):
        g = np.where(s > 0.0, np.exp(-1.0 / np.maximum(s, 1e-300)), 0.0)
        gm = np.where(s < 1.0, np.exp(-1.0 / np.maximum(1.0 - s, 1e-300)), 0.0)
    return g / (g + gm)


def phi_terminal(spec: GameSpec, x: Array):
    """Terminal cost merging the exit penalty and the safe terminal cost.

    Returns ``psi(x)`` for interior states and the failure weight ``eta`` for
    states outside the safe set (a discretized exit state stands in for the
    boundary evaluation).  With ``mollifier_width > 0`` and a signed distance
    available, the two branches are blended smoothly across a band of that
    width inside the boundary.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    inside = spec.safe_set.contains(x)
    psi = np.asarray(spec.terminal_cost(x), dtype=float)
    if spec.mollifier_width > 0.0 and spec.safe_set.boundary_distance is not None:
        b = _bump(np.asarray(spec.safe_set.boundary_distance(x)) / spec.mollifier_width)
        out = psi * b + spec.failure_weight * (1.0 - b)
    else:
        out = np.where(inside, psi, spec.failure_weight)
    return float(out) if single else out


def running_cost(spec: GameSpec, x: Array, u: Array, v: Array, t: float) -> float:
    """Instantaneous cost V + u'R_u u / 2 - v'R_v v / 2."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    state = 0.0 if spec.state_cost is None else float(spec.state_cost(x, t))
    ru = spec.control_weight_u(x, t)
    rv = spec.control_weight_v(x, t)
    return state + 0.5 * float(u @ ru @ u) - 0.5 * float(v @ rv @ v)


@dataclass(frozen=True)
class LambdaCertificate:
    """Verified noise/cost consistency constant."""

    lam: float
    residual: float       # max Frobenius mismatch over the probe set
    probe_count: int


def _consistency_parts(spec: GameSpec, x: Array, t: float, ignore_adversary: bool):
    sigma = np.asarray(spec.diffusion(x, t), dtype=float)
    gu = np.asarray(spec.gain_u(x, t), dtype=float)
    ru = np.asarray(spec.control_weight_u(x, t), dtype=float)
    lhs = sigma @ sigma.T
    rhs = gu @ np.linalg.solve(ru, gu.T)
    if not ignore_adversary:
        gv = np.asarray(spec.gain_v(x, t), dtype=float)
        rv = np.asarray(spec.control_weight_v(x, t), dtype=float)
        rhs = rhs - gv @ np.linalg.solve(rv, gv.T)
    return lhs, rhs


def resolve_lambda(
    spec: GameSpec,
    probes: Sequence[tuple[Array, float]],
    tolerance: float = 1e-8,
    ignore_adversary: bool = False,
) -> LambdaCertificate:
    """Resolve and verify the constant relating the diffusion to the control weights.

    Scenario specs carry a closed-form constant (``lambda_hint``) which is
    verified at every probe.  Without a hint the constant is fitted by least
    squares over the probes; the fit is a diagnostic, not a guarantee.  With
    ``ignore_adversary`` the adversary term is dropped, which resolves the
    single-agent variant of the condition.

    Raises :class:`NoValidLambda` when the constant is nonpositive or the
    residual exceeds ``tolerance``.
    """
    if not probes:
        raise ValueError("probe set must be nonempty")
    pairs = [_consistency_parts(spec, np.asarray(x, dtype=float), t, ignore_adversary)
             for x, t in probes]
    if spec.lambda_hint is not None and not ignore_adversary:
        lam = float(spec.lambda_hint)
    else:
        num = sum(float(np.sum(lhs * rhs)) for lhs, rhs in pairs)
        den = sum(float(np.sum(rhs * rhs)) for lhs, rhs in pairs)
        if den == 0.0:
            raise NoValidLambda("consistency condition is degenerate (zero gain term)")
        lam = num / den
    if lam <= 0.0:
        raise NoValidLambda(f"fitted constant is nonpositive: {lam:.6g}")
    residual = max(float(np.linalg.norm(lhs - lam * rhs)) for lhs, rhs in pairs)
    if residual > tolerance:
        raise NoValidLambda(
            f"consistency residual {residual:.3e} exceeds tolerance {tolerance:.1e}"
        )
    return LambdaCertificate(lam=lam, residual=residual, probe_count=len(pairs))


def noise_temperature(spec: GameSpec, probes: Sequence[tuple[Array, float]]) -> float:
    """Classical single-agent path-integral temperature.

    Fits Sigma Sigma' = lam G_u G_u' over the probes, the consistency
    condition of the single-agent problem with unit control weight.  This is
    the temperature an agent solving the plain (adversary-free) problem with
    running cost u'u/2 would use; for channel-aligned noise it equals the
    channel noise variance.
    """
    if not probes:
        raise ValueError("probe set must be nonempty")
    num = den = 0.0
    for x, t in probes:
        sigma = np.asarray(spec.diffusion(x, t), dtype=float)
        gu = np.asarray(spec.gain_u(x, t), dtype=float)
        lhs = sigma @ sigma.T
        rhs = gu @ gu.T
        num += float(np.sum(lhs * rhs))
        den += float(np.sum(rhs * rhs))
    if den == 0.0 or num <= 0.0:
        raise NoValidLambda("single-agent temperature is degenerate")
    lam = num / den
    residual = max(
        float(np.linalg.norm(
            np.asarray(spec.diffusion(x, t)) @ np.asarray(spec.diffusion(x, t)).T
            - lam * np.asarray(spec.gain_u(x, t)) @ np.asarray(spec.gain_u(x, t)).T))
        for x, t in probes)
    if residual > 1e-8 * max(1.0, lam):
        raise NoValidLambda(
            f"single-agent temperature residual {residual:.3e} too large")
    return lam


def gain_matrices(
    spec: GameSpec, x: Array, t: float, lam: float, ignore_adversary: bool = False
) -> tuple[Array, Array]:
    """Gain matrices mapping the weighted noise average to the saddle controls.

    Returns ``(G_u, G_v)`` with shapes ``(m, n2)`` and ``(l, n2)`` where
    ``n2`` is the size of the noise-driven block.  ``lam`` is accepted for
    interface symmetry with the estimators; the gains themselves do not
    depend on it.  With ``ignore_adversary`` the adversary term is dropped
    from the normal matrix and the second gain is zero (single-agent policy).

    Raises :class:`SingularGain` when the normal matrix is ill conditioned,
    which under the consistency condition signals a degenerate diffusion.
    """
    del lam
    x = np.asarray(x, dtype=float)
    rows = list(spec.partition_rows)
    gu2 = np.asarray(spec.gain_u(x, t), dtype=float)[rows, :]
    ru = np.asarray(spec.control_weight_u(x, t), dtype=float)
    ru_gu = np.linalg.solve(ru, gu2.T)          # R_u^-1 G_u2'
    m = gu2 @ ru_gu
    if not ignore_adversary:
        gv2 = np.asarray(spec.gain_v(x, t), dtype=float)[rows, :]
        rv = np.asarray(spec.control_weight_v(x, t), dtype=float)
        rv_gv = np.linalg.solve(rv, gv2.T)
        m = m - gv2 @ rv_gv
    cond = np.linalg.cond(m)
    if not np.isfinite(cond) or cond > GAIN_COND_LIMIT:
        raise SingularGain(f"gain normal matrix condition number {cond:.3e}")
    gain_u = np.linalg.solve(m.T, ru_gu.T).T    # R_u^-1 G_u2' M^-1
    if ignore_adversary:
        gain_v = np.zeros((spec.adversary_dim, len(rows)))
    else:
        gain_v = -np.linalg.solve(m.T, rv_gv.T).T
    return gain_u, gain_v


def probe_points(
    spec: GameSpec, count: int, seed: int = 0, box_half_width: float = 1.0
) -> list[tuple[Array, float]]:
    """Random (state, time) probes around the start state for identity checks."""
    gen = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    xs = spec.x0 + box_half_width * gen.uniform(-1.0, 1.0, size=(count, spec.state_dim))
    ts = gen.uniform(spec.t0, spec.horizon, size=count)
    return [(xs[i], float(ts[i])) for i in range(count)]
