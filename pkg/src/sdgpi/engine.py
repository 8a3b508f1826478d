"""Euler-Maruyama simulation of the game dynamics and its uncontrolled companion.

The workhorse is :func:`simulate_batch`, which advances many rollouts of the
uncontrolled process in lockstep (one vectorized step per time index) while
accumulating exactly the quantities the path-integral estimators need: the
running-cost integral, the exit record, and the noise push of the first step
through the noise-driven block.  Single-rollout entry points reuse the same
stepping so a batch of size one reproduces them bit for bit.

Exit handling follows the discrete convention: a rollout leaves the game at
the first step whose new state falls outside the safe set; no sub-step
interpolation of the crossing time is attempted.  When the remaining horizon
is not a multiple of the step, the final step uses the remainder with noise
variance scaled accordingly.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

import numpy as np

from .errors import NonFiniteState, PolicyFailure
from .model import GameSpec
from .streams import RngStreamKey

Array = np.ndarray


class ExitKind(Enum):
    BOUNDARY_EXIT = "boundary_exit"
    HORIZON_END = "horizon_end"


@dataclass(frozen=True)
class NoiseIncrement:
    """One Wiener increment over a step of length ``step``."""

    dw: Array
    step: float


@dataclass(frozen=True)
class Trajectory:
    """One discretized sample path, truncated at its exit step."""

    times: Array                      # (K+1,) increasing, times[0] = start
    states: Array                     # (K+1, n)
    exit_kind: ExitKind
    exit_time: float
    exit_index: int
    controls_u: Optional[Array] = None  # (K, m) when produced under policies
    controls_v: Optional[Array] = None  # (K, l)


@dataclass(frozen=True)
class SimulatedBatch:
    """Raw outcome of a batch of uncontrolled rollouts from one origin."""

    origin_state: Array
    origin_time: float
    step: float
    boundary_exit: Array          # (N,) bool
    exit_times: Array             # (N,)
    exit_states: Array            # (N, n)
    running_cost_integral: Array  # (N,) left Riemann sum of V
    first_noise_push: Array       # (N, n2) Sigma_2 dw over the first step
    outer_hits: int               # truncation-radius diagnostic count

    @property
    def count(self) -> int:
        return self.boundary_exit.shape[0]


def step_durations(t: float, horizon: float, h: float) -> Array:
    """Step lengths covering (t, horizon]; all h except a final remainder."""
    if h <= 0.0:
        raise ValueError("step must be positive")
    total = horizon - t
    if total <= 0.0:
        raise ValueError("start time must precede the horizon")
    n_steps = max(1, math.ceil(total / h - 1e-9))
    durs = np.full(n_steps, h, dtype=float)
    durs[-1] = total - (n_steps - 1) * h
    return durs


def wiener_increments(key: RngStreamKey, k: int, h: float, count: int) -> Array:
    """``count`` independent Wiener increments, component variance ``h`` each.

    Deterministic given the key: the same key always reproduces the identical
    ``(count, k)`` array.
    """
    if h <= 0.0 or count < 1:
        raise ValueError("require h > 0 and count >= 1")
    gen = key.generator()
    return gen.standard_normal((count, k)) * math.sqrt(h)


def em_step(
    spec: GameSpec, x: Array, t: float, u: Array, v: Array, inc: NoiseIncrement
) -> Array:
    """One explicit Euler-Maruyama step of the controlled dynamics."""
    x = np.asarray(x, dtype=float)
    h = inc.step
    drift = np.zeros_like(x) if spec.drift is None else np.asarray(spec.drift(x, t), dtype=float)
    out = x + drift * h
    out = out + (spec.gain_u(x, t) @ np.asarray(u, dtype=float)) * h
    out = out + (spec.gain_v(x, t) @ np.asarray(v, dtype=float)) * h
    out = out + spec.diffusion(x, t) @ np.asarray(inc.dw, dtype=float)
    if not np.all(np.isfinite(out)):
        raise NonFiniteState(f"state became non-finite at t={t:.6g}")
    return out


def _noise_push(sigma: Array, dw: Array) -> Array:
    """Sigma @ dw for shared (n, k) or batched (N, n, k) diffusion."""
    sigma = np.asarray(sigma, dtype=float)
    if sigma.ndim == 2:
        return dw @ sigma.T
    return np.einsum("nij,nj->ni", sigma, dw)


def simulate_batch(
    spec: GameSpec,
    x: Array,
    t: float,
    h: float,
    n_rollouts: int,
    key: RngStreamKey,
    record_paths: bool = False,
) -> tuple[SimulatedBatch, Optional[Array]]:
    """Advance ``n_rollouts`` uncontrolled rollouts from ``(x, t)`` to exit.

    All rollouts share one keyed stream; increments are drawn step-major,
    ``(n_rollouts, k)`` per step, so the sampled paths depend only on the key
    and the call arguments, never on scheduling.  Exited rollouts are frozen
    but the stream layout is unchanged, keeping every rollout's increments
    independent of the others' exit pattern.

    Returns the batch record and, when ``record_paths`` is set, the dense
    state history ``(n_rollouts, K+1, n)`` (frozen rows repeat their exit
    state).
    """
    x = np.asarray(x, dtype=float)
    if not bool(np.all(spec.safe_set.contains(x))):
        raise ValueError("batch origin must lie inside the safe set")
    durs = step_durations(t, spec.horizon, h)
    n, k = spec.state_dim, spec.noise_dim
    rows = list(spec.partition_rows)
    gen = key.generator()

    states = np.broadcast_to(x, (n_rollouts, n)).copy()
    alive = np.ones(n_rollouts, dtype=bool)
    boundary_exit = np.zeros(n_rollouts, dtype=bool)
    exit_times = np.full(n_rollouts, spec.horizon, dtype=float)
    exit_states = np.broadcast_to(x, (n_rollouts, n)).copy()
    v_integral = np.zeros(n_rollouts, dtype=float)
    first_push = np.zeros((n_rollouts, len(rows)), dtype=float)
    outer_hits = 0
    paths = None
    if record_paths:
        paths = np.empty((n_rollouts, durs.shape[0] + 1, n), dtype=float)
        paths[:, 0, :] = states

    # exited rows keep evolving (their exit state is already banked, and the
    # extra arithmetic is cheaper than masking every array operation)
    t_now = t
    for step_idx, h_k in enumerate(durs):
        dw = gen.standard_normal((n_rollouts, k)) * math.sqrt(h_k)
        if spec.state_cost is not None:
            v_vals = np.asarray(spec.state_cost(states, t_now), dtype=float)
            v_integral[alive] += v_vals[alive] * h_k
        sigma = spec.diffusion(states, t_now)
        new_states = states + _noise_push(sigma, dw)
        if spec.drift is not None:
            new_states += np.asarray(spec.drift(states, t_now), dtype=float) * h_k
        if not np.all(np.isfinite(new_states)):
            if not np.all(np.isfinite(new_states[alive])):
                raise NonFiniteState(f"rollout state became non-finite at t={t_now:.6g}")
            new_states[~alive] = 0.0  # park runaway exited rows
        if step_idx == 0:
            sigma2 = sigma[rows, :] if np.ndim(sigma) == 2 else np.asarray(sigma)[:, rows, :]
            first_push[:] = _noise_push(sigma2, dw)
        states = new_states
        t_now = t + (step_idx + 1) * h if step_idx + 1 < durs.shape[0] else spec.horizon
        inside = spec.safe_set.contains(states)
        newly = alive & ~inside
        if newly.any():
            boundary_exit[newly] = True
            exit_times[newly] = t_now
            exit_states[newly] = states[newly]
            alive &= inside
        if (spec.safe_set.outer_radius is not None
                and (step_idx % 16 == 0 or step_idx + 1 == durs.shape[0])
                and alive.any()):
            r2 = np.einsum("ij,ij->i", states, states)
            outer_hits += int(np.count_nonzero(alive & (r2 > spec.safe_set.outer_radius**2)))
        if record_paths:
            paths[:, step_idx + 1, :] = states
        if not alive.any():
            if record_paths and step_idx + 2 <= durs.shape[0]:
                paths[:, step_idx + 2:, :] = states[:, None, :]
            break
    exit_states[alive] = states[alive]

    if outer_hits:
        warnings.warn(
            f"{outer_hits} rollout-steps crossed the safe-set truncation radius; "
            "widen outer_radius if this recurs",
            RuntimeWarning,
            stacklevel=2,
        )
    batch = SimulatedBatch(
        origin_state=x,
        origin_time=t,
        step=h,
        boundary_exit=boundary_exit,
        exit_times=exit_times,
        exit_states=exit_states,
        running_cost_integral=v_integral,
        first_noise_push=first_push,
        outer_hits=outer_hits,
    )
    return batch, paths


def _trajectory_from_path(
    spec: GameSpec, t: float, h: float, path: Array, exited: bool, exit_time: float
) -> Trajectory:
    durs = step_durations(t, spec.horizon, h)
    times = np.concatenate(([t], t + np.cumsum(durs)))
    times[-1] = spec.horizon
    if exited:
        exit_index = int(np.argmin(np.abs(times - exit_time)))
        return Trajectory(
            times=times[: exit_index + 1],
            states=path[: exit_index + 1],
            exit_kind=ExitKind.BOUNDARY_EXIT,
            exit_time=float(exit_time),
            exit_index=exit_index,
        )
    return Trajectory(
        times=times,
        states=path,
        exit_kind=ExitKind.HORIZON_END,
        exit_time=float(spec.horizon),
        exit_index=times.shape[0] - 1,
    )


def rollout_uncontrolled(
    spec: GameSpec, x: Array, t: float, h: float, key: RngStreamKey
) -> Trajectory:
    """One uncontrolled rollout (drift + diffusion only), run to its exit."""
    batch, paths = simulate_batch(spec, x, t, h, 1, key, record_paths=True)
    return _trajectory_from_path(
        spec, t, h, paths[0], bool(batch.boundary_exit[0]), float(batch.exit_times[0])
    )


def rollout_controlled(
    spec: GameSpec,
    x: Array,
    t: float,
    h: float,
    policy_u: Callable[[Array, float], Array],
    policy_v: Callable[[Array, float], Array],
    key: RngStreamKey,
) -> Trajectory:
    """One closed-loop rollout under the given policies, run to its exit.

    Increments are consumed exactly as in :func:`rollout_uncontrolled`, so
    with zero policies the two produce identical paths under the same key.
    """
    x = np.asarray(x, dtype=float)
    if not bool(np.all(spec.safe_set.contains(x))):
        raise ValueError("rollout origin must lie inside the safe set")
    durs = step_durations(t, spec.horizon, h)
    gen = key.generator()
    states = [x.copy()]
    times = [t]
    us, vs = [], []
    t_now = t
    for step_idx, h_k in enumerate(durs):
        dw = gen.standard_normal((1, spec.noise_dim))[0] * math.sqrt(h_k)
        try:
            u = np.asarray(policy_u(states[-1], t_now), dtype=float)
            v = np.asarray(policy_v(states[-1], t_now), dtype=float)
        except Exception as exc:  # noqa: BLE001 - policy errors become PolicyFailure
            raise PolicyFailure(f"policy raised at t={t_now:.6g}: {exc}") from exc
        if not (np.all(np.isfinite(u)) and np.all(np.isfinite(v))):
            raise PolicyFailure(f"policy returned non-finite control at t={t_now:.6g}")
        new_state = em_step(spec, states[-1], t_now, u, v, NoiseIncrement(dw, float(h_k)))
        t_now = t + (step_idx + 1) * h if step_idx + 1 < durs.shape[0] else spec.horizon
        states.append(new_state)
        times.append(t_now)
        us.append(u)
        vs.append(v)
        if not bool(np.all(spec.safe_set.contains(new_state))):
            return Trajectory(
                times=np.asarray(times),
                states=np.asarray(states),
                exit_kind=ExitKind.BOUNDARY_EXIT,
                exit_time=t_now,
                exit_index=len(times) - 1,
                controls_u=np.asarray(us),
                controls_v=np.asarray(vs),
            )
    return Trajectory(
        times=np.asarray(times),
        states=np.asarray(states),
        exit_kind=ExitKind.HORIZON_END,
        exit_time=float(spec.horizon),
        exit_index=len(times) - 1,
        controls_u=np.asarray(us),
        controls_v=np.asarray(vs),
    )
