"""Monte Carlo estimation of the exponentiated value and the saddle controls.

The value transform is J = -lam * log(xi) with xi(x, t) the expectation of
exp(-S/lam) over uncontrolled rollouts from (x, t), where S is the rollout
cost (terminal cost at the exit state plus the running state-cost integral).
The saddle-point controls are importance-weighted averages of the first-step
noise push through the noise-driven block, mapped through the gain matrices
and divided by the step length.

All weights are computed after subtracting the minimum rollout cost, so the
estimators stay finite even when the running cost accumulates over long
horizons; the shift is added back in log space.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import SimulatedBatch, Trajectory, simulate_batch
from .errors import DegenerateBatch
from .model import GameSpec, gain_matrices, phi_terminal
from .streams import RngStreamKey

Array = np.ndarray

# Below ess/count = ESS_FLOOR the estimate is flagged as degenerate-ish.
ESS_FLOOR = 0.01


@dataclass(frozen=True)
class RolloutBatch:
    """Per-rollout costs and first-step noise pushes from one origin."""

    costs: Array          # (N,) S values, finite
    first_noise: Array    # (N, n2), same increments that generated the rollouts
    step: float
    origin_state: Array
    origin_time: float
    boundary_exit: Array  # (N,) bool exit kinds

    @property
    def count(self) -> int:
        return self.costs.shape[0]


@dataclass(frozen=True)
class XiEstimate:
    """Monte Carlo estimate of the exponentiated value at one (x, t)."""

    value: float
    log_value: float
    std_error: float
    ess: float
    count: int

    @property
    def low_ess(self) -> bool:
        return self.ess < ESS_FLOOR * self.count


@dataclass(frozen=True)
class SaddleControls:
    """Saddle-point control pair at one (x, t) with sampling diagnostics."""

    u_star: Array
    v_star: Array
    xi: XiEstimate
    ess: float


def trajectory_cost(spec: GameSpec, traj: Trajectory) -> float:
    """Rollout cost: terminal cost at the exit state plus the V integral.

    The running cost is a left Riemann sum over the executed steps; the final
    step contributes its (possibly truncated) actual length.
    """
    total = phi_terminal(spec, traj.states[traj.exit_index])
    if spec.state_cost is not None:
        end = traj.exit_index
        hs = np.diff(traj.times[: end + 1])
        for idx in range(end):
            total += float(spec.state_cost(traj.states[idx], float(traj.times[idx]))) * hs[idx]
    return float(total)


def batch_from_simulation(spec: GameSpec, sim: SimulatedBatch) -> RolloutBatch:
    """Attach rollout costs to a raw simulated batch."""
    phi = np.asarray(phi_terminal(spec, sim.exit_states), dtype=float)
    costs = sim.running_cost_integral + phi
    if not np.all(np.isfinite(costs)):
        raise DegenerateBatch("non-finite rollout costs")
    return RolloutBatch(
        costs=costs,
        first_noise=sim.first_noise_push,
        step=sim.step,
        origin_state=sim.origin_state,
        origin_time=sim.origin_time,
        boundary_exit=sim.boundary_exit,
    )


def generate_batch(
    spec: GameSpec, x: Array, t: float, h: float, n_rollouts: int, key: RngStreamKey
) -> RolloutBatch:
    """Simulate ``n_rollouts`` uncontrolled rollouts and score them."""
    sim, _ = simulate_batch(spec, x, t, h, n_rollouts, key)
    return batch_from_simulation(spec, sim)


def _shard_task(args) -> RolloutBatch:
    spec, x, t, h, count, key = args
    return generate_batch(spec, x, t, h, count, key)


def generate_batch_sharded(
    spec: GameSpec,
    x: Array,
    t: float,
    h: float,
    n_rollouts: int,
    key: RngStreamKey,
    shards: int = 4,
    workers: int = 1,
) -> RolloutBatch:
    """One large batch assembled from fixed lanes, optionally in parallel.

    Shard ``i`` draws from the lane ``key.replace(rollout_index=i)``, and the
    shards are concatenated in lane order, so the assembled batch is
    bit-identical for any worker count (the shard count is part of the
    sampling layout, the worker count is not).
    """
    counts = [n_rollouts // shards] * shards
    counts[-1] += n_rollouts - sum(counts)
    tasks = [(spec, np.asarray(x, dtype=float), t, h, counts[i],
              key.replace(rollout_index=i)) for i in range(shards)]
    if workers <= 1 or shards == 1:
        parts = [_shard_task(task) for task in tasks]
    else:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=min(workers, shards)) as pool:
            parts = list(pool.map(_shard_task, tasks))
    return RolloutBatch(
        costs=np.concatenate([p.costs for p in parts]),
        first_noise=np.concatenate([p.first_noise for p in parts]),
        step=h,
        origin_state=parts[0].origin_state,
        origin_time=t,
        boundary_exit=np.concatenate([p.boundary_exit for p in parts]),
    )


def _shifted_weights(costs: Array, lam: float) -> tuple[Array, float]:
    shift = float(costs.min())
    weights = np.exp(-(costs - shift) / lam)
    if not np.all(np.isfinite(weights)) or float(weights.sum()) <= 0.0:
        raise DegenerateBatch("rollout weights underflowed despite max-shift")
    return weights, shift


def xi_from_batch(batch: RolloutBatch, lam: float) -> XiEstimate:
    """Sample mean of exp(-S/lam), computed in shifted log space."""
    weights, shift = _shifted_weights(batch.costs, lam)
    n = batch.count
    mean_w = float(weights.mean())
    log_value = -shift / lam + math.log(mean_w)
    scale = math.exp(-shift / lam)
    std_error = scale * float(weights.std(ddof=1)) / math.sqrt(n) if n > 1 else 0.0
    ess = float(weights.sum()) ** 2 / float((weights * weights).sum())
    return XiEstimate(
        value=math.exp(log_value),
        log_value=log_value,
        std_error=std_error,
        ess=ess,
        count=n,
    )


def saddle_from_batch(
    spec: GameSpec,
    batch: RolloutBatch,
    lam: float,
    ignore_adversary: bool = False,
) -> SaddleControls:
    """Weighted-noise control estimate from an existing batch.

    u* = G_u . (sum_i w_i push_i) / (h sum_i w_i), and v* likewise with G_v;
    both sides consume the identical weighted average, so sharing one batch
    between the two players is exact.
    """
    weights, _ = _shifted_weights(batch.costs, lam)
    gain_u, gain_v = gain_matrices(
        spec, batch.origin_state, batch.origin_time, lam, ignore_adversary=ignore_adversary
    )
    avg_push = (weights[:, None] * batch.first_noise).sum(axis=0) / float(weights.sum())
    u_star = gain_u @ avg_push / batch.step
    v_star = gain_v @ avg_push / batch.step
    return SaddleControls(
        u_star=u_star,
        v_star=v_star,
        xi=xi_from_batch(batch, lam),
        ess=float(weights.sum()) ** 2 / float((weights * weights).sum()),
    )


def estimate_xi(
    spec: GameSpec,
    x: Array,
    t: float,
    lam: float,
    n_rollouts: int,
    h: float,
    key: RngStreamKey,
) -> XiEstimate:
    """Fresh-batch estimate of xi(x, t)."""
    if n_rollouts < 2:
        raise ValueError("xi estimation needs at least 2 rollouts")
    return xi_from_batch(generate_batch(spec, x, t, h, n_rollouts, key), lam)


def estimate_saddle_controls(
    spec: GameSpec,
    x: Array,
    t: float,
    lam: float,
    n_rollouts: int,
    h: float,
    key: RngStreamKey,
    ignore_adversary: bool = False,
) -> SaddleControls:
    """Fresh-batch estimate of the saddle control pair at (x, t)."""
    batch = generate_batch(spec, x, t, h, n_rollouts, key)
    return saddle_from_batch(spec, batch, lam, ignore_adversary=ignore_adversary)


def value_from_xi(xi: XiEstimate, lam: float) -> float:
    """Value transform J = -lam log xi."""
    if xi.value <= 0.0:
        raise ValueError("xi must be positive")
    return -lam * xi.log_value
