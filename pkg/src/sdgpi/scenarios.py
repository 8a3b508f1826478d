"""Scenario definitions and strict flat-key configuration handling.

Two games ship with the package:

* ``unicycle_da`` - a unicycle steering to the origin through obstacles while
  an adversary corrupts its actuation (disturbance attenuation).  The noise
  enters the speed and heading-rate channels alongside both players.
* ``pursuit_evasion`` - the relative-position game between an evader (agent)
  and a pursuer (adversary); failure is entering the capture disk.

Control-weight convention: the quadratic weights are expressed in units of
the channel noise variances (R_u = diag(1/sigma_i^2), R_v = gamma^2 R_u).
This is the unique normalization under which the noise/cost consistency
constant takes the closed forms lam = gamma^2/(gamma^2-1) and
lam = r_v^2/(r_v^2-1) for any channel noise level, and it leaves the control
gain matrices unchanged (they are invariant to a common rescaling of both
weights).

Configuration files are flat ``key = value`` text with dotted section names.
Unknown keys are errors: a misspelled physics parameter must never silently
fall back to a default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, NoValidLambda
from .model import GameSpec, SafeSet

Array = np.ndarray

SCENARIOS = ("unicycle_da", "pursuit_evasion")
EXPERIMENTS = ("fig1", "fig2", "fig3", "fig4", "theorem3", "oracle_xcheck", "single")
MODES = ("desk", "full")


# --------------------------------------------------------------------------
# picklable callback objects (worker processes rebuild specs from configs,
# but direct GameSpec values must survive pickling too)
# --------------------------------------------------------------------------

class ConstantMatrix:
    def __init__(self, value):
        self.value = np.asarray(value, dtype=float)

    def __call__(self, x, t):
        return self.value


class ZeroField:
    """Identically zero scalar field of batch-compatible shape."""

    def __call__(self, x, t=None):
        x = np.asarray(x)
        return 0.0 if x.ndim == 1 else np.zeros(x.shape[0])


class PositionSquare:
    """px^2 + py^2 on the first two state components."""

    def __call__(self, x, t=None):
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            return float(x[0] ** 2 + x[1] ** 2)
        return x[:, 0] ** 2 + x[:, 1] ** 2


class UnicycleDrift:
    """-k x plus the kinematic coupling (s cos th, s sin th, 0, 0)."""

    def __init__(self, k: float):
        self.k = k

    def __call__(self, x, t):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        big = np.atleast_2d(x)
        out = -self.k * big
        out[:, 0] += big[:, 2] * np.cos(big[:, 3])
        out[:, 1] += big[:, 2] * np.sin(big[:, 3])
        return out[0] if single else out


class DiskComplement:
    """Safe region outside the capture disk, with a monitored outer radius."""

    def __init__(self, rho: float, outer_radius: float):
        self.rho = rho
        self.outer_radius = outer_radius

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        r2 = np.sum(np.atleast_2d(x) ** 2, axis=1)
        inside = r2 > self.rho**2
        return bool(inside[0]) if x.ndim == 1 else inside

    def boundary_distance(self, x):
        x = np.asarray(x, dtype=float)
        d = np.sqrt(np.sum(np.atleast_2d(x) ** 2, axis=1)) - self.rho
        return float(d[0]) if x.ndim == 1 else d


class WorkspaceWithObstacles:
    """Open square workspace minus closed rectangular obstacles (position only)."""

    def __init__(self, half: float, obstacles: tuple[tuple[float, float, float, float], ...]):
        self.half = half
        self.obstacles = obstacles

    def contains(self, x):
        x = np.asarray(x, dtype=float)
        big = np.atleast_2d(x)
        px, py = big[:, 0], big[:, 1]
        ok = (np.abs(px) < self.half) & (np.abs(py) < self.half)
        for (x0, x1, y0, y1) in self.obstacles:
            ok &= ~((px >= x0) & (px <= x1) & (py >= y0) & (py <= y1))
        return bool(ok[0]) if x.ndim == 1 else ok

    def boundary_distance(self, x):
        x = np.asarray(x, dtype=float)
        big = np.atleast_2d(x)
        px, py = big[:, 0], big[:, 1]
        dist = self.half - np.maximum(np.abs(px), np.abs(py))
        for (x0, x1, y0, y1) in self.obstacles:
            ddx = np.maximum(np.maximum(x0 - px, px - x1), 0.0)
            ddy = np.maximum(np.maximum(y0 - py, py - y1), 0.0)
            outside = np.hypot(ddx, ddy)
            depth = np.minimum(
                np.minimum(px - x0, x1 - px), np.minimum(py - y0, y1 - py)
            )
            rect_d = np.where(outside > 0.0, outside, -depth)
            dist = np.minimum(dist, rect_d)
        return float(dist[0]) if x.ndim == 1 else dist


def attenuation_lambda(weight_sq: float) -> float:
    """Closed-form consistency constant: lam (1 - 1/w^2) = 1.

    Raises :class:`NoValidLambda` for w^2 <= 1, where the condition has no
    positive solution and the game admits no linearizing transform.
    """
    if weight_sq <= 1.0:
        raise NoValidLambda(
            f"adversary weight {weight_sq:.6g} <= 1: no positive consistency constant"
        )
    return weight_sq / (weight_sq - 1.0)


# --------------------------------------------------------------------------
# configuration schema
# --------------------------------------------------------------------------

# Approximation: the published figures show two obstacles but give no
# coordinates; these rectangles (xmin, xmax, ymin, ymax) flank the straight
# route from the start to the origin and are part of the default config.
DEFAULT_OBSTACLES = ((-0.3, -0.1, -0.32, -0.12), (-0.08, 0.12, -0.6, -0.3))


@dataclass(frozen=True)
class ScenarioConfig:
    scenario: str
    experiment: str
    mode: str = "desk"
    # numerics (0 / 0.0 mean "resolve from scenario and mode defaults")
    h: float = 0.0
    rollouts: int = 0
    decision_interval: float = 0.0
    trials: int = 100
    master_seed: int = 20260811
    workers: int = 0
    repro: bool = True
    # unicycle disturbance attenuation
    unicycle_sigma: float = 0.1
    unicycle_nu: float = 0.1
    unicycle_k: float = 0.2
    unicycle_gamma_sq: float = 2.0
    unicycle_eta: float = 0.67
    unicycle_t0: float = 0.0
    unicycle_horizon: float = 10.0
    unicycle_x0: tuple = (-0.4, -0.4, 0.0, 0.0)
    unicycle_workspace_half: float = 0.6
    unicycle_obstacles: tuple = DEFAULT_OBSTACLES
    # pursuit-evasion
    pe_sigma_ex: float = math.sqrt(0.1)
    pe_sigma_ey: float = math.sqrt(0.1)
    pe_sigma_px: float = math.sqrt(0.1)
    pe_sigma_py: float = math.sqrt(0.1)
    pe_rho: float = 0.1
    pe_rv_sq: float = 2.0
    pe_eta: float = 0.2
    pe_t0: float = 0.0
    pe_horizon: float = 2.0
    pe_x0: tuple = (0.3, 0.3)
    pe_outer_radius_factor: float = 50.0
    # experiment sweeps
    fig1_gamma_sq: tuple = (2.0, 7.0)
    fig2_gamma_sq: float = 3.0
    fig2_eta: float = 1.0
    fig4_rv_sq: tuple = (1.5, 2.0, 3.0, 5.0, 8.0)
    theorem3_gamma_sq: float = 3.0
    theorem3_adversary_scales: tuple = (1.0, 0.5)
    # oracle grid
    oracle_box_half: float = 1.0
    oracle_nodes: int = 201
    oracle_time_steps: int = 2000
    oracle_store_every: int = 10
    # oracle cross-check sampling (0 means derive from numerics.rollouts / h)
    xcheck_control_rollouts: int = 0
    xcheck_control_h: float = 0.0035

    def resolved(self) -> "ScenarioConfig":
        """Fill the mode/scenario-dependent numerics left at their sentinels."""
        h = self.h
        if h == 0.0:
            if self.mode == "desk":
                h = 0.02 if self.scenario == "unicycle_da" else 0.01
            else:
                h = 0.01
        rollouts = self.rollouts or (1000 if self.mode == "desk" else 10000)
        decision = self.decision_interval
        if decision == 0.0:
            decision = 5.0 * h if self.mode == "desk" else h
        return replace(self, h=h, rollouts=rollouts, decision_interval=decision)


_KEY_TO_FIELD = {
    "scenario": "scenario",
    "experiment": "experiment",
    "mode": "mode",
    "numerics.h": "h",
    "numerics.rollouts": "rollouts",
    "numerics.decision_interval": "decision_interval",
    "numerics.trials": "trials",
    "numerics.master_seed": "master_seed",
    "numerics.workers": "workers",
    "numerics.repro": "repro",
    "unicycle.sigma": "unicycle_sigma",
    "unicycle.nu": "unicycle_nu",
    "unicycle.k": "unicycle_k",
    "unicycle.gamma_sq": "unicycle_gamma_sq",
    "unicycle.eta": "unicycle_eta",
    "unicycle.t0": "unicycle_t0",
    "unicycle.horizon": "unicycle_horizon",
    "unicycle.x0": "unicycle_x0",
    "unicycle.workspace_half": "unicycle_workspace_half",
    "unicycle.obstacles": "unicycle_obstacles",
    "pe.sigma_ex": "pe_sigma_ex",
    "pe.sigma_ey": "pe_sigma_ey",
    "pe.sigma_px": "pe_sigma_px",
    "pe.sigma_py": "pe_sigma_py",
    "pe.rho": "pe_rho",
    "pe.rv_sq": "pe_rv_sq",
    "pe.eta": "pe_eta",
    "pe.t0": "pe_t0",
    "pe.horizon": "pe_horizon",
    "pe.x0": "pe_x0",
    "pe.outer_radius_factor": "pe_outer_radius_factor",
    "fig1.gamma_sq": "fig1_gamma_sq",
    "fig2.gamma_sq": "fig2_gamma_sq",
    "fig2.eta": "fig2_eta",
    "fig4.rv_sq_grid": "fig4_rv_sq",
    "theorem3.gamma_sq": "theorem3_gamma_sq",
    "theorem3.adversary_scales": "theorem3_adversary_scales",
    "oracle.box_half": "oracle_box_half",
    "oracle.nodes": "oracle_nodes",
    "oracle.time_steps": "oracle_time_steps",
    "oracle.store_every": "oracle_store_every",
    "xcheck.control_rollouts": "xcheck_control_rollouts",
    "xcheck.control_h": "xcheck_control_h",
}


def _parse_value(key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() in ("on", "true", "1", "yes"):
                return True
            if raw.lower() in ("off", "false", "0", "no"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == "floats":
            return tuple(float(p) for p in raw.split(",") if p.strip())
        if kind == "rects":
            rects = []
            for part in raw.split(";"):
                part = part.strip()
                if not part:
                    continue
                vals = tuple(float(p) for p in part.split(","))
                if len(vals) != 4:
                    raise ValueError("a rectangle needs 4 numbers")
                rects.append(vals)
            return tuple(rects)
    except ValueError as exc:
        raise ConfigError(f"bad value for {key!r}: {raw!r} ({exc})") from exc
    raise ConfigError(f"unhandled kind for {key!r}")


_FIELD_KINDS = {
    "scenario": str, "experiment": str, "mode": str,
    "h": float, "rollouts": int, "decision_interval": float, "trials": int,
    "master_seed": int, "workers": int, "repro": bool,
    "unicycle_sigma": float, "unicycle_nu": float, "unicycle_k": float,
    "unicycle_gamma_sq": float, "unicycle_eta": float, "unicycle_t0": float,
    "unicycle_horizon": float, "unicycle_x0": "floats",
    "unicycle_workspace_half": float, "unicycle_obstacles": "rects",
    "pe_sigma_ex": float, "pe_sigma_ey": float, "pe_sigma_px": float,
    "pe_sigma_py": float, "pe_rho": float, "pe_rv_sq": float, "pe_eta": float,
    "pe_t0": float, "pe_horizon": float, "pe_x0": "floats",
    "pe_outer_radius_factor": float,
    "fig1_gamma_sq": "floats", "fig2_gamma_sq": float, "fig2_eta": float,
    "fig4_rv_sq": "floats", "theorem3_gamma_sq": float,
    "theorem3_adversary_scales": "floats",
    "oracle_box_half": float, "oracle_nodes": int,
    "oracle_time_steps": int, "oracle_store_every": int,
    "xcheck_control_rollouts": int, "xcheck_control_h": float,
}


def _field_kind(name: str):
    return _FIELD_KINDS[name]


def _format_value(value, kind) -> str:
    if kind is bool:
        return "on" if value else "off"
    if kind in (int, str):
        return str(value)
    if kind is float:
        return repr(float(value))
    if kind == "floats":
        return ", ".join(repr(float(v)) for v in value)
    if kind == "rects":
        return "; ".join(", ".join(repr(float(c)) for c in rect) for rect in value)
    raise ConfigError(f"unhandled kind {kind!r}")


def parse_config(text: str) -> ScenarioConfig:
    """Parse flat key-value configuration text; unknown keys are errors."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _KEY_TO_FIELD:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        field_name = _KEY_TO_FIELD[key]
        values[field_name] = _parse_value(key, raw, _field_kind(field_name))
    for required in ("scenario", "experiment"):
        if required not in values:
            raise ConfigError(f"missing required key {required!r}")
    cfg = ScenarioConfig(**values)
    validate_config(cfg)
    return cfg


def emit_config(cfg: ScenarioConfig) -> str:
    """Serialize a config so that parse(emit(cfg)) == cfg."""
    lines = []
    for key, field_name in _KEY_TO_FIELD.items():
        value = getattr(cfg, field_name)
        lines.append(f"{key} = {_format_value(value, _field_kind(field_name))}")
    return "\n".join(lines) + "\n"


def validate_config(cfg: ScenarioConfig) -> None:
    if cfg.scenario not in SCENARIOS:
        raise ConfigError(f"scenario must be one of {SCENARIOS}, got {cfg.scenario!r}")
    if cfg.experiment not in EXPERIMENTS:
        raise ConfigError(f"experiment must be one of {EXPERIMENTS}, got {cfg.experiment!r}")
    if cfg.mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {cfg.mode!r}")
    res = cfg.resolved()
    for name in ("h", "decision_interval", "unicycle_sigma", "unicycle_nu",
                 "pe_sigma_ex", "pe_sigma_ey", "pe_sigma_px", "pe_sigma_py",
                 "pe_rho", "pe_eta", "unicycle_eta"):
        if getattr(res, name) <= 0.0:
            raise ConfigError(f"{name} must be positive")
    if res.trials < 1 or res.rollouts < 2:
        raise ConfigError("need trials >= 1 and rollouts >= 2")
    ratio = res.decision_interval / res.h
    if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
        raise ConfigError("decision_interval must be a positive multiple of h")
    if len(res.unicycle_x0) != 4 or len(res.pe_x0) != 2:
        raise ConfigError("unicycle.x0 needs 4 components, pe.x0 needs 2")


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------

def build_pe_spec(cfg: ScenarioConfig, rv_sq: float | None = None) -> GameSpec:
    """Relative-position pursuit-evasion game from a config.

    ``rv_sq`` overrides the configured pursuer weight (used by the r_v sweep).
    """
    rv_sq = cfg.pe_rv_sq if rv_sq is None else float(rv_sq)
    lam = attenuation_lambda(rv_sq)
    sigma_x = math.hypot(cfg.pe_sigma_ex, cfg.pe_sigma_px)
    sigma_y = math.hypot(cfg.pe_sigma_ey, cfg.pe_sigma_py)
    r_u = np.diag([1.0 / sigma_x**2, 1.0 / sigma_y**2])
    disk = DiskComplement(cfg.pe_rho, cfg.pe_outer_radius_factor * cfg.pe_rho)
    x0 = np.asarray(cfg.pe_x0, dtype=float)
    if not disk.contains(x0):
        raise ConfigError("pe.x0 lies inside the capture disk")
    return GameSpec(
        state_dim=2,
        agent_dim=2,
        adversary_dim=2,
        noise_dim=2,
        drift=None,
        gain_u=ConstantMatrix(np.eye(2)),
        gain_v=ConstantMatrix(-np.eye(2)),
        diffusion=ConstantMatrix(np.diag([sigma_x, sigma_y])),
        partition_rows=(0, 1),
        state_cost=None,
        terminal_cost=ZeroField(),
        failure_weight=cfg.pe_eta,
        control_weight_u=ConstantMatrix(r_u),
        control_weight_v=ConstantMatrix(rv_sq * r_u),
        safe_set=SafeSet(
            contains=disk.contains,
            description=f"disk-complement rho={cfg.pe_rho}",
            boundary_distance=disk.boundary_distance,
            outer_radius=disk.outer_radius,
        ),
        x0=x0,
        t0=cfg.pe_t0,
        horizon=cfg.pe_horizon,
        lambda_hint=lam,
    )


def build_unicycle_spec(
    cfg: ScenarioConfig, gamma_sq: float | None = None, eta: float | None = None
) -> GameSpec:
    """Unicycle disturbance-attenuation game from a config."""
    gamma_sq = cfg.unicycle_gamma_sq if gamma_sq is None else float(gamma_sq)
    eta = cfg.unicycle_eta if eta is None else float(eta)
    lam = attenuation_lambda(gamma_sq)
    sigma, nu = cfg.unicycle_sigma, cfg.unicycle_nu
    gain = np.zeros((4, 2))
    gain[2, 0] = 1.0
    gain[3, 1] = 1.0
    diffusion = np.zeros((4, 2))
    diffusion[2, 0] = sigma
    diffusion[3, 1] = nu
    r_u = np.diag([1.0 / sigma**2, 1.0 / nu**2])
    workspace = WorkspaceWithObstacles(cfg.unicycle_workspace_half, cfg.unicycle_obstacles)
    x0 = np.asarray(cfg.unicycle_x0, dtype=float)
    if not workspace.contains(x0):
        raise ConfigError("unicycle.x0 lies outside the safe workspace")
    return GameSpec(
        state_dim=4,
        agent_dim=2,
        adversary_dim=2,
        noise_dim=2,
        drift=UnicycleDrift(cfg.unicycle_k),
        gain_u=ConstantMatrix(gain),
        gain_v=ConstantMatrix(gain),
        diffusion=ConstantMatrix(diffusion),
        partition_rows=(2, 3),
        state_cost=PositionSquare(),
        terminal_cost=PositionSquare(),
        failure_weight=eta,
        control_weight_u=ConstantMatrix(r_u),
        control_weight_v=ConstantMatrix(gamma_sq * r_u),
        safe_set=SafeSet(
            contains=workspace.contains,
            description=f"workspace half={cfg.unicycle_workspace_half}, "
                        f"{len(cfg.unicycle_obstacles)} obstacles",
            boundary_distance=workspace.boundary_distance,
        ),
        x0=x0,
        t0=cfg.unicycle_t0,
        horizon=cfg.unicycle_horizon,
        lambda_hint=lam,
    )


def build_spec(cfg: ScenarioConfig) -> GameSpec:
    cfg = cfg.resolved()
    if cfg.scenario == "pursuit_evasion":
        return build_pe_spec(cfg)
    return build_unicycle_spec(cfg)
