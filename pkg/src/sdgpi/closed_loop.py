"""Receding-horizon execution of the game and outcome statistics.

Each trial alternates between re-estimating controls from fresh Monte Carlo
batches at the current state and stepping the true controlled dynamics with
the estimated pair held constant over the decision interval (zero-order
hold).  When both players run the path-integral saddle policy with matching
sampling parameters, one rollout batch per decision serves both sides: the
two control formulas consume the identical weighted noise average.

Trials are independent across ``trial_index`` keys, so results do not depend
on the worker count; aggregation is performed in trial order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import ExitKind, NoiseIncrement, Trajectory, em_step, step_durations
from .errors import EnergyBoundViolated, PolicyFailure
from .model import GameSpec, noise_temperature, phi_terminal, probe_points, resolve_lambda
from .pathint import RolloutBatch, generate_batch, saddle_from_batch
from .streams import PLANT_DECISION, RngStreamKey

Array = np.ndarray

PI_KINDS = ("saddle_agent", "saddle_adversary", "single_agent")
POLICY_KINDS = PI_KINDS + ("zero", "fixed")


@dataclass(frozen=True)
class PolicyHandle:
    """One player's policy: path-integral, zero, or a fixed function.

    ``scale`` and ``offset`` perturb the produced control (control * scale +
    offset); they exist for saddle-point property checks and for weakened
    adversaries.  PI kinds need ``n_rollouts``; ``step`` falls back to the
    plant step when zero.
    """

    kind: str
    n_rollouts: int = 0
    step: float = 0.0
    fixed_fn: Optional[Callable[[Array, float], Array]] = None
    scale: float = 1.0
    offset: Optional[tuple] = None

    def __post_init__(self):
        if self.kind not in POLICY_KINDS:
            raise ValueError(f"unknown policy kind {self.kind!r}")
        if self.kind in PI_KINDS and self.n_rollouts < 2:
            raise ValueError(f"{self.kind} policies need n_rollouts >= 2")
        if self.kind == "fixed" and self.fixed_fn is None:
            raise ValueError("fixed policies need fixed_fn")

    def batch_params(self, plant_h: float) -> tuple[int, float]:
        return self.n_rollouts, (self.step if self.step > 0.0 else plant_h)


def zero_policy() -> PolicyHandle:
    return PolicyHandle(kind="zero")


def saddle_pair(n_rollouts: int, step: float = 0.0) -> tuple[PolicyHandle, PolicyHandle]:
    agent = PolicyHandle(kind="saddle_agent", n_rollouts=n_rollouts, step=step)
    adversary = PolicyHandle(kind="saddle_adversary", n_rollouts=n_rollouts, step=step)
    return agent, adversary


@dataclass(frozen=True)
class CostLedger:
    """Cost decomposition of one trial (terminal + running integrals)."""

    terminal: float
    state_integral: float
    control_energy_u: float     # integral of u'R_u u / 2
    control_energy_v: float     # integral of v'R_v v / 2
    adversary_energy_raw: float  # integral of v'v
    exit_kind: ExitKind
    exit_time: float

    @property
    def total(self) -> float:
        return self.terminal + self.state_integral + self.control_energy_u \
            - self.control_energy_v

    @property
    def performance(self) -> float:
        """Agent-side performance: terminal + state + agent control energy."""
        return self.terminal + self.state_integral + self.control_energy_u


@dataclass(frozen=True)
class TrialResult:
    ledger: CostLedger
    trajectory: Optional[Trajectory]
    low_ess_decisions: int


@dataclass(frozen=True)
class GameOutcome:
    """Closed-loop statistics over one trial set."""

    trials: int
    failures: int
    p_fail: float
    ci_low: float
    ci_high: float
    cost_mean: float
    cost_std: float
    control_energy_u: float
    control_energy_v: float
    adversary_energy_raw: float
    low_ess_decisions: int
    ledgers: tuple[CostLedger, ...] = field(repr=False, default=())
    trajectories: tuple = field(repr=False, default=())


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    """95% Wilson score interval; well behaved near 0 and 1."""
    if n < 1:
        raise ValueError("need at least one trial")
    p = successes / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = (z / denom) * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return max(0.0, center - half), min(1.0, center + half)


class _DecisionEngine:
    """Computes both players' controls at each decision, sharing batches."""

    def __init__(self, spec: GameSpec, policy_u: PolicyHandle, policy_v: PolicyHandle,
                 plant_h: float, lam: Optional[float], lam_single: Optional[float],
                 master_seed: int, trial_index: int):
        self.spec = spec
        self.policy_u = policy_u
        self.policy_v = policy_v
        self.plant_h = plant_h
        self.master_seed = master_seed
        self.trial_index = trial_index
        self.low_ess = 0
        needs_game_lam = any(p.kind in ("saddle_agent", "saddle_adversary")
                             for p in (policy_u, policy_v))
        needs_single_lam = any(p.kind == "single_agent" for p in (policy_u, policy_v))
        probes = probe_points(spec, 32, seed=master_seed) if (needs_game_lam or needs_single_lam) else []
        self.lam = lam if lam is not None else (
            resolve_lambda(spec, probes).lam if needs_game_lam else None)
        self.lam_single = lam_single if lam_single is not None else (
            noise_temperature(spec, probes) if needs_single_lam else None)

    def controls(self, x: Array, t: float, decision_ordinal: int) -> tuple[Array, Array]:
        batches: dict[tuple[int, float], RolloutBatch] = {}
        saddles: dict[tuple[int, float, bool], object] = {}

        def batch_for(handle: PolicyHandle) -> RolloutBatch:
            params = handle.batch_params(self.plant_h)
            if params not in batches:
                lane = len(batches)
                key = RngStreamKey(self.master_seed, self.trial_index,
                                   1 + decision_ordinal, lane)
                batches[params] = generate_batch(self.spec, x, t, params[1], params[0], key)
            return batches[params]

        def saddle_for(handle: PolicyHandle, single: bool):
            params = handle.batch_params(self.plant_h)
            cache_key = (params[0], params[1], single)
            if cache_key not in saddles:
                lam = self.lam_single if single else self.lam
                sc = saddle_from_batch(self.spec, batch_for(handle), lam,
                                       ignore_adversary=single)
                if sc.xi.low_ess:
                    self.low_ess += 1
                saddles[cache_key] = sc
            return saddles[cache_key]

        def control_of(handle: PolicyHandle, side: str) -> Array:
            if handle.kind == "zero":
                dim = self.spec.agent_dim if side == "u" else self.spec.adversary_dim
                base = np.zeros(dim)
            elif handle.kind == "fixed":
                try:
                    base = np.asarray(handle.fixed_fn(x, t), dtype=float)
                except Exception as exc:  # noqa: BLE001
                    raise PolicyFailure(f"fixed policy raised at t={t:.6g}: {exc}") from exc
            elif handle.kind == "single_agent":
                base = saddle_for(handle, single=True).u_star
            elif handle.kind == "saddle_agent":
                base = saddle_for(handle, single=False).u_star
            else:
                base = saddle_for(handle, single=False).v_star
            out = base * handle.scale
            if handle.offset is not None:
                out = out + np.asarray(handle.offset, dtype=float)
            if not np.all(np.isfinite(out)):
                raise PolicyFailure(f"policy {handle.kind!r} produced non-finite control")
            return out

        return control_of(self.policy_u, "u"), control_of(self.policy_v, "v")


def run_trial(
    spec: GameSpec,
    policy_u: PolicyHandle,
    policy_v: PolicyHandle,
    h: float,
    decision_interval: float,
    master_seed: int,
    trial_index: int = 0,
    x_start: Optional[Array] = None,
    t_start: Optional[float] = None,
    lam: Optional[float] = None,
    lam_single: Optional[float] = None,
    record_trajectory: bool = True,
) -> TrialResult:
    """One closed-loop trial from the start state to its exit."""
    steps_per_decision = round(decision_interval / h)
    if steps_per_decision < 1 or abs(decision_interval - steps_per_decision * h) > 1e-9:
        raise ValueError("decision_interval must be a positive multiple of h")
    x = np.asarray(spec.x0 if x_start is None else x_start, dtype=float).copy()
    t = spec.t0 if t_start is None else float(t_start)
    durs = step_durations(t, spec.horizon, h)
    engine = _DecisionEngine(spec, policy_u, policy_v, h, lam, lam_single,
                             master_seed, trial_index)
    plant_gen = RngStreamKey(master_seed, trial_index, PLANT_DECISION, 0).generator()

    times = [t]
    states = [x.copy()]
    us, vs = [], []
    state_integral = 0.0
    energy_u = 0.0
    energy_v = 0.0
    energy_raw = 0.0
    exit_kind = ExitKind.HORIZON_END
    exit_time = spec.horizon
    u = v = None
    decision_ordinal = 0
    t_now = t
    for step_idx, h_k in enumerate(durs):
        if step_idx % steps_per_decision == 0:
            u, v = engine.controls(x, t_now, decision_ordinal)
            decision_ordinal += 1
        if spec.state_cost is not None:
            state_integral += float(spec.state_cost(x, t_now)) * h_k
        ru = spec.control_weight_u(x, t_now)
        rv = spec.control_weight_v(x, t_now)
        energy_u += 0.5 * float(u @ ru @ u) * h_k
        energy_v += 0.5 * float(v @ rv @ v) * h_k
        energy_raw += float(v @ v) * h_k
        dw = plant_gen.standard_normal(spec.noise_dim) * math.sqrt(h_k)
        x = em_step(spec, x, t_now, u, v, NoiseIncrement(dw, float(h_k)))
        t_now = t + (step_idx + 1) * h if step_idx + 1 < durs.shape[0] else spec.horizon
        times.append(t_now)
        states.append(x.copy())
        us.append(u)
        vs.append(v)
        if not bool(np.all(spec.safe_set.contains(x))):
            exit_kind = ExitKind.BOUNDARY_EXIT
            exit_time = t_now
            break

    ledger = CostLedger(
        terminal=float(phi_terminal(spec, x)),
        state_integral=state_integral,
        control_energy_u=energy_u,
        control_energy_v=energy_v,
        adversary_energy_raw=energy_raw,
        exit_kind=exit_kind,
        exit_time=float(exit_time),
    )
    trajectory = None
    if record_trajectory:
        trajectory = Trajectory(
            times=np.asarray(times),
            states=np.asarray(states),
            exit_kind=exit_kind,
            exit_time=float(exit_time),
            exit_index=len(times) - 1,
            controls_u=np.asarray(us),
            controls_v=np.asarray(vs),
        )
    return TrialResult(ledger=ledger, trajectory=trajectory,
                       low_ess_decisions=engine.low_ess)


def _trial_task(args) -> TrialResult:
    (spec, policy_u, policy_v, h, decision_interval, master_seed, trial_index,
     x_start, t_start, lam, lam_single, record) = args
    return run_trial(spec, policy_u, policy_v, h, decision_interval, master_seed,
                     trial_index, x_start, t_start, lam, lam_single, record)


def run_trials(
    spec: GameSpec,
    policy_u: PolicyHandle,
    policy_v: PolicyHandle,
    trials: int,
    h: float,
    decision_interval: float,
    master_seed: int,
    workers: int = 1,
    x_start: Optional[Array] = None,
    t_start: Optional[float] = None,
    record_trajectories: bool = False,
) -> list[TrialResult]:
    """Independent trials with distinct trial keys, collected in trial order."""
    needs_lam = any(p.kind in ("saddle_agent", "saddle_adversary")
                    for p in (policy_u, policy_v))
    needs_single = any(p.kind == "single_agent" for p in (policy_u, policy_v))
    probes = probe_points(spec, 32, seed=master_seed) if (needs_lam or needs_single) else []
    lam = resolve_lambda(spec, probes).lam if needs_lam else None
    lam_single = noise_temperature(spec, probes) if needs_single else None
    args = [(spec, policy_u, policy_v, h, decision_interval, master_seed, i,
             x_start, t_start, lam, lam_single, record_trajectories)
            for i in range(trials)]
    if workers <= 1 or trials == 1:
        return [_trial_task(a) for a in args]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        chunk = max(1, trials // (4 * workers))
        return list(pool.map(_trial_task, args, chunksize=chunk))


def outcome_from_results(results: Sequence[TrialResult]) -> GameOutcome:
    n = len(results)
    if n < 1:
        raise ValueError("need at least one trial")
    ledgers = tuple(r.ledger for r in results)
    failures = sum(1 for l in ledgers if l.exit_kind is ExitKind.BOUNDARY_EXIT)
    totals = np.array([l.total for l in ledgers])
    lo, hi = wilson_interval(failures, n)
    return GameOutcome(
        trials=n,
        failures=failures,
        p_fail=failures / n,
        ci_low=lo,
        ci_high=hi,
        cost_mean=float(totals.mean()),
        cost_std=float(totals.std(ddof=1)) if n > 1 else 0.0,
        control_energy_u=float(np.mean([l.control_energy_u for l in ledgers])),
        control_energy_v=float(np.mean([l.control_energy_v for l in ledgers])),
        adversary_energy_raw=float(np.mean([l.adversary_energy_raw for l in ledgers])),
        low_ess_decisions=sum(r.low_ess_decisions for r in results),
        ledgers=ledgers,
        trajectories=tuple(r.trajectory for r in results if r.trajectory is not None),
    )


def estimate_failure_probability(
    spec: GameSpec,
    policy_u: PolicyHandle,
    policy_v: PolicyHandle,
    trials: int,
    h: float,
    decision_interval: float,
    master_seed: int,
    workers: int = 1,
    record_trajectories: bool = False,
    x_start: Optional[Array] = None,
    t_start: Optional[float] = None,
) -> GameOutcome:
    """Failure probability with Wilson CI plus the full cost ledger."""
    results = run_trials(spec, policy_u, policy_v, trials, h, decision_interval,
                         master_seed, workers, x_start, t_start, record_trajectories)
    return outcome_from_results(results)


def empirical_game_value(
    spec: GameSpec,
    x: Array,
    t: float,
    policy_u: PolicyHandle,
    policy_v: PolicyHandle,
    trials: int,
    h: float,
    decision_interval: float,
    master_seed: int,
    workers: int = 1,
) -> tuple[float, float]:
    """Mean cost-to-go from (x, t) under the given policies, with its SE."""
    results = run_trials(spec, policy_u, policy_v, trials, h, decision_interval,
                         master_seed, workers, x_start=x, t_start=t)
    totals = np.array([r.ledger.total for r in results])
    se = float(totals.std(ddof=1)) / math.sqrt(trials) if trials > 1 else 0.0
    return float(totals.mean()), se


@dataclass(frozen=True)
class Theorem3Row:
    label: str
    lhs: float
    rhs: float
    margin: float              # lhs - rhs; the bound demands this >= 0
    se_combined: float
    delta_weighted: float      # declared / measured weighted adversary energy
    delta_raw: float           # measured integral of v'v


@dataclass(frozen=True)
class Theorem3Report:
    gamma_sq: float
    baseline_performance: float
    baseline_se: float
    delta_gamma_weighted: float
    delta_gamma_raw: float
    rows: tuple[Theorem3Row, ...]


def _performance_stats(outcome: GameOutcome) -> tuple[float, float]:
    perfs = np.array([l.performance for l in outcome.ledgers])
    se = float(perfs.std(ddof=1)) / math.sqrt(len(perfs)) if len(perfs) > 1 else 0.0
    return float(perfs.mean()), se


def _weighted_energy_stats(outcome: GameOutcome, gamma_sq: float) -> tuple[float, float]:
    vals = np.array([2.0 * l.control_energy_v / gamma_sq for l in outcome.ledgers])
    se = float(vals.std(ddof=1)) / math.sqrt(len(vals)) if len(vals) > 1 else 0.0
    return float(vals.mean()), se


def theorem3_check(
    spec: GameSpec,
    gamma_sq: float,
    adversaries: Sequence[tuple[str, PolicyHandle, Optional[float]]],
    trials: int,
    h: float,
    decision_interval: float,
    master_seed: int,
    n_rollouts: int,
    workers: int = 1,
) -> Theorem3Report:
    """Empirical check of the disturbance-attenuation performance bound.

    For the saddle pair (u*, v*) with weighted adversary energy delta_gamma,
    and any adversary v whose weighted energy is at most delta, the agent's
    performance under (u*, v) is bounded by the saddle performance plus
    (gamma^2/2)(delta - delta_gamma).  Energies are weighted by the game's
    adversary cost matrix divided by gamma^2, which reduces to the raw
    integral of v'v when the noise channels have unit variance.

    Each ``adversaries`` entry is (label, handle, declared_delta); a None
    delta means "use the measured energy".  Raises
    :class:`EnergyBoundViolated` when a declared delta is exceeded.
    """
    gu = np.asarray(spec.gain_u(spec.x0, spec.t0), dtype=float)
    gv = np.asarray(spec.gain_v(spec.x0, spec.t0), dtype=float)
    if gu.shape != gv.shape or not np.allclose(gu, gv):
        raise ValueError("the performance bound needs matched gain channels (G_u == G_v)")

    agent, saddle_adv = saddle_pair(n_rollouts)
    baseline = estimate_failure_probability(
        spec, agent, saddle_adv, trials, h, decision_interval, master_seed, workers)
    perf_star, perf_star_se = _performance_stats(baseline)
    delta_gamma, delta_gamma_se = _weighted_energy_stats(baseline, gamma_sq)
    delta_gamma_raw = baseline.adversary_energy_raw

    rows = []
    for label, handle, declared in adversaries:
        if handle == saddle_adv:
            rows.append(Theorem3Row(
                label=label, lhs=perf_star, rhs=perf_star, margin=0.0,
                se_combined=0.0, delta_weighted=delta_gamma, delta_raw=delta_gamma_raw,
            ))
            continue
        run = estimate_failure_probability(
            spec, agent, handle, trials, h, decision_interval, master_seed, workers)
        perf_v, perf_v_se = _performance_stats(run)
        measured, measured_se = _weighted_energy_stats(run, gamma_sq)
        delta = measured if declared is None else float(declared)
        if measured > delta * (1.0 + 1e-9):
            raise EnergyBoundViolated(
                f"adversary {label!r}: measured weighted energy {measured:.6g} "
                f"exceeds declared {delta:.6g}"
            )
        lhs = perf_star + 0.5 * gamma_sq * (delta - delta_gamma)
        se = math.sqrt(
            perf_star_se**2 + perf_v_se**2
            + (0.5 * gamma_sq) ** 2 * (delta_gamma_se**2 + measured_se**2)
        )
        rows.append(Theorem3Row(
            label=label, lhs=lhs, rhs=perf_v, margin=lhs - perf_v,
            se_combined=se, delta_weighted=delta, delta_raw=run.adversary_energy_raw,
        ))
    return Theorem3Report(
        gamma_sq=gamma_sq,
        baseline_performance=perf_star,
        baseline_se=perf_star_se,
        delta_gamma_weighted=delta_gamma,
        delta_gamma_raw=delta_gamma_raw,
        rows=tuple(rows),
    )
