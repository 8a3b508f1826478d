"""Grid ground truth for low-dimensional games.

Solves the linear Dirichlet problem satisfied by the exponentiated value,

    d_t xi = V xi / lam - f' d_x xi - (1/2) Tr(Sigma Sigma' d2_x xi),

backward in time from the horizon slice, with xi pinned to exp(-phi/lam) on
failure nodes and on the truncation edge of the grid.  The scheme is implicit
Euler in time (unconditionally stable, positivity preserving), second-order
central differences for diffusion, and first-order upwind differences for
advection.  Restricted to at most two gridded state dimensions: the oracle
exists to cross-validate the Monte Carlo estimators on small games, not to
compete with them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import StencilOutOfDomain, UnstableSolve
from .model import GameSpec, phi_terminal

Array = np.ndarray


@dataclass(frozen=True)
class Grid2D:
    """Rectangular space-time grid for the backward solve."""

    mins: tuple[float, float]
    maxs: tuple[float, float]
    shape: tuple[int, int]
    n_time_steps: int = 2000
    store_every: int = 10

    def axes(self) -> tuple[Array, Array]:
        xs = np.linspace(self.mins[0], self.maxs[0], self.shape[0])
        ys = np.linspace(self.mins[1], self.maxs[1], self.shape[1])
        return xs, ys

    @property
    def spacing(self) -> tuple[float, float]:
        return (
            (self.maxs[0] - self.mins[0]) / (self.shape[0] - 1),
            (self.maxs[1] - self.mins[1]) / (self.shape[1] - 1),
        )

    def nodes(self) -> Array:
        xs, ys = self.axes()
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)


@dataclass(frozen=True)
class PdeSolution:
    """Stored xi slices (ascending in t, last slice is the solve start time)."""

    grid: Grid2D
    lam: float
    times: Array              # (S,) ascending, times[-1] == horizon
    xi: Array                 # (S, nx, ny), positive
    safe_mask: Array          # (nx, ny) True where the node is inside X_s
    dirichlet_mask: Array     # (nx, ny) True where xi is pinned
    meta: dict = field(default_factory=dict)


def _coefficients(spec: GameSpec, nodes: Array, t: float):
    n_nodes = nodes.shape[0]
    if spec.drift is None:
        f = np.zeros((n_nodes, 2))
    else:
        f = np.asarray(spec.drift(nodes, t), dtype=float)
    sigma = np.asarray(spec.diffusion(nodes, t), dtype=float)
    if sigma.ndim == 2:
        a = sigma @ sigma.T
        a = np.broadcast_to(a, (n_nodes, 2, 2))
    else:
        a = np.einsum("nij,nkj->nik", sigma, sigma)
    if spec.state_cost is None:
        v = np.zeros(n_nodes)
    else:
        v = np.asarray(spec.state_cost(nodes, t), dtype=float)
    return f, a, v


def _assemble(spec: GameSpec, grid: Grid2D, lam: float, t: float,
              dirichlet: Array) -> sp.csr_matrix:
    """Spatial operator L with identity rows at Dirichlet nodes (backward time)."""
    nx, ny = grid.shape
    dx, dy = grid.spacing
    nodes = grid.nodes()
    f, a, v = _coefficients(spec, nodes, t)

    idx = np.arange(nx * ny).reshape(nx, ny)
    interior = ~dirichlet
    ii, jj = np.nonzero(interior)
    rows_i = idx[ii, jj]

    axx = a[rows_i, 0, 0]
    ayy = a[rows_i, 1, 1]
    axy = a[rows_i, 0, 1]
    fx = f[rows_i, 0]
    fy = f[rows_i, 1]
    vv = v[rows_i]

    data, rows, cols = [], [], []

    def add(coeff, di, dj):
        rows.append(rows_i)
        cols.append(idx[ii + di, jj + dj])
        data.append(coeff)

    # diffusion, central second differences
    cxx = 0.5 * axx / dx**2
    cyy = 0.5 * ayy / dy**2
    add(cxx, 1, 0)
    add(cxx, -1, 0)
    add(cyy, 0, 1)
    add(cyy, 0, -1)
    diag = -2.0 * cxx - 2.0 * cyy - vv / lam
    # advection, upwind in the marching direction
    fxp = np.maximum(fx, 0.0) / dx
    fxm = np.maximum(-fx, 0.0) / dx
    fyp = np.maximum(fy, 0.0) / dy
    fym = np.maximum(-fy, 0.0) / dy
    add(fxp, 1, 0)
    add(fxm, -1, 0)
    add(fyp, 0, 1)
    add(fym, 0, -1)
    diag = diag - fxp - fxm - fyp - fym
    # mixed diffusion term (zero for diagonal noise)
    if np.any(np.abs(axy) > 0.0):
        cxy = axy / (4.0 * dx * dy)
        add(cxy, 1, 1)
        add(cxy, -1, -1)
        add(-cxy, 1, -1)
        add(-cxy, -1, 1)
    rows.append(rows_i)
    cols.append(rows_i)
    data.append(diag)

    mat = sp.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(nx * ny, nx * ny),
    ).tocsr()
    return mat


def solve_dirichlet(
    spec: GameSpec,
    grid: Grid2D,
    lam: float,
    t_start: Optional[float] = None,
    autonomous: bool = True,
) -> PdeSolution:
    """Backward-in-time solve of the linear problem from the horizon slice.

    ``t_start`` defaults to the spec's start time.  With ``autonomous`` the
    operator is assembled and factorized once; set it False for
    time-dependent coefficients (one assembly per step).

    Raises :class:`UnstableSolve` if any xi node becomes nonpositive or
    non-finite.
    """
    if spec.state_dim > 2:
        raise ValueError("the grid oracle supports at most 2 state dimensions")
    t_start = spec.t0 if t_start is None else float(t_start)
    nx, ny = grid.shape
    nodes = grid.nodes()
    safe = np.asarray(spec.safe_set.contains(nodes)).reshape(nx, ny)
    edge = np.zeros((nx, ny), dtype=bool)
    edge[0, :] = edge[-1, :] = True
    edge[:, 0] = edge[:, -1] = True
    dirichlet = (~safe) | edge

    phi = np.asarray(phi_terminal(spec, nodes), dtype=float).reshape(nx, ny)
    xi = np.exp(-phi / lam)  # horizon slice; Dirichlet rows keep these values

    ds = (spec.horizon - t_start) / grid.n_time_steps
    ident = sp.identity(nx * ny, format="csr")
    lhs = None
    solver = None
    if autonomous:
        lhs = ident - ds * _assemble(spec, grid, lam, spec.horizon, dirichlet)
        solver = spla.splu(lhs.tocsc())

    slices = [xi.copy()]
    slice_times = [spec.horizon]
    vec = xi.ravel().copy()
    for step in range(1, grid.n_time_steps + 1):
        t_new = spec.horizon - step * ds
        if not autonomous:
            lhs = ident - ds * _assemble(spec, grid, lam, t_new, dirichlet)
            solver = spla.splu(lhs.tocsc())
        vec = solver.solve(vec)
        lo = float(vec.min())
        if not np.isfinite(lo) or lo <= 0.0:
            raise UnstableSolve(f"xi reached {lo:.3e} at t={t_new:.6g}")
        if step % grid.store_every == 0 or step == grid.n_time_steps:
            slices.append(vec.reshape(nx, ny).copy())
            slice_times.append(t_new)

    order = np.argsort(slice_times)
    return PdeSolution(
        grid=grid,
        lam=lam,
        times=np.asarray(slice_times)[order],
        xi=np.asarray(slices)[order],
        safe_mask=safe,
        dirichlet_mask=dirichlet,
        meta={
            "dx": grid.spacing[0],
            "dy": grid.spacing[1],
            "dt": ds,
            "scheme": "implicit Euler, central diffusion, upwind advection",
        },
    )


def _time_bracket(sol: PdeSolution, t: float) -> tuple[int, int, float]:
    times = sol.times
    if t <= times[0]:
        return 0, 0, 0.0
    if t >= times[-1]:
        return len(times) - 1, len(times) - 1, 0.0
    hi = int(np.searchsorted(times, t))
    lo = hi - 1
    w = (t - times[lo]) / (times[hi] - times[lo])
    return lo, hi, float(w)


def _bilinear(field: Array, grid: Grid2D, x: Array) -> float:
    xs, ys = grid.axes()
    dx, dy = grid.spacing
    fx = (x[0] - xs[0]) / dx
    fy = (x[1] - ys[0]) / dy
    i = int(np.clip(np.floor(fx), 0, grid.shape[0] - 2))
    j = int(np.clip(np.floor(fy), 0, grid.shape[1] - 2))
    ax, ay = fx - i, fy - j
    return float(
        field[i, j] * (1 - ax) * (1 - ay)
        + field[i + 1, j] * ax * (1 - ay)
        + field[i, j + 1] * (1 - ax) * ay
        + field[i + 1, j + 1] * ax * ay
    )


def xi_at(sol: PdeSolution, x: Array, t: float) -> float:
    """xi interpolated at (x, t): bilinear in space, linear in time."""
    x = np.asarray(x, dtype=float)
    lo, hi, w = _time_bracket(sol, t)
    v_lo = _bilinear(sol.xi[lo], sol.grid, x)
    if hi == lo:
        return v_lo
    return (1 - w) * v_lo + w * _bilinear(sol.xi[hi], sol.grid, x)


def value_at(sol: PdeSolution, x: Array, t: float) -> float:
    """Game value J = -lam log xi at (x, t)."""
    return -sol.lam * float(np.log(xi_at(sol, x, t)))


def _grad_j_slice(sol: PdeSolution, slice_idx: int) -> tuple[Array, Array]:
    j_field = -sol.lam * np.log(sol.xi[slice_idx])
    dx, dy = sol.grid.spacing
    djdx = np.full_like(j_field, np.nan)
    djdy = np.full_like(j_field, np.nan)
    djdx[1:-1, :] = (j_field[2:, :] - j_field[:-2, :]) / (2 * dx)
    djdy[:, 1:-1] = (j_field[:, 2:] - j_field[:, :-2]) / (2 * dy)
    return djdx, djdy


def _check_stencil(sol: PdeSolution, x: Array) -> None:
    nx, ny = sol.grid.shape
    xs, ys = sol.grid.axes()
    dx, dy = sol.grid.spacing
    i = int(np.floor((x[0] - xs[0]) / dx))
    j = int(np.floor((x[1] - ys[0]) / dy))
    if i < 1 or j < 1 or i + 1 > nx - 2 or j + 1 > ny - 2:
        raise StencilOutOfDomain(f"point {x} too close to the grid edge")
    for ci in (i, i + 1):
        for cj in (j, j + 1):
            block = sol.dirichlet_mask[ci - 1: ci + 2, cj - 1: cj + 2]
            if block.any():
                raise StencilOutOfDomain(
                    f"gradient stencil at {x} touches pinned nodes"
                )


def grad_value_at(sol: PdeSolution, x: Array, t: float) -> Array:
    """Central-difference gradient of J, interpolated at (x, t)."""
    x = np.asarray(x, dtype=float)
    _check_stencil(sol, x)
    lo, hi, w = _time_bracket(sol, t)
    out = []
    for idx, weight in ((lo, 1 - w), (hi, w)) if hi != lo else ((lo, 1.0),):
        if weight == 0.0:
            continue
        djdx, djdy = _grad_j_slice(sol, idx)
        out.append(weight * np.array([
            _bilinear(djdx, sol.grid, x), _bilinear(djdy, sol.grid, x)
        ]))
    return np.sum(out, axis=0)


def controls_from_solution(
    sol: PdeSolution, spec: GameSpec, x: Array, t: float
) -> tuple[Array, Array]:
    """Optimal controls u* = -R_u^-1 G_u' dJ/dx and v* = R_v^-1 G_v' dJ/dx."""
    x = np.asarray(x, dtype=float)
    grad = grad_value_at(sol, x, t)
    gu = np.asarray(spec.gain_u(x, t), dtype=float)
    gv = np.asarray(spec.gain_v(x, t), dtype=float)
    ru = np.asarray(spec.control_weight_u(x, t), dtype=float)
    rv = np.asarray(spec.control_weight_v(x, t), dtype=float)
    u_star = -np.linalg.solve(ru, gu.T @ grad)
    v_star = np.linalg.solve(rv, gv.T @ grad)
    return u_star, v_star


def exit_probability_reference(
    spec: GameSpec,
    grid: Grid2D,
    x: Array,
    t: float,
    solution: Optional[PdeSolution] = None,
    lam: Optional[float] = None,
) -> float:
    """Exit probability from the xi field of a cost-free game.

    Requires V == 0 and psi == 0, in which case xi takes only the two
    boundary values and P_exit = (1 - xi) / (1 - exp(-eta/lam)).
    """
    x = np.asarray(x, dtype=float)
    if spec.state_cost is not None:
        raise ValueError("exit-probability reference requires V == 0")
    probe = np.asarray(spec.terminal_cost(np.stack([spec.x0, x])), dtype=float)
    if np.any(np.abs(probe) > 0.0):
        raise ValueError("exit-probability reference requires psi == 0")
    lam = (spec.lambda_hint or 1.0) if lam is None else lam
    if solution is None:
        solution = solve_dirichlet(spec, grid, lam)
    xi = xi_at(solution, x, t)
    return (1.0 - xi) / (1.0 - np.exp(-spec.failure_weight / lam))


def hji_residual(
    sol: PdeSolution,
    spec: GameSpec,
    probes: Array,
    slice_idx: Optional[int] = None,
) -> float:
    """Median residual of the nonlinear value PDE at interior probe nodes.

    Reconstructs J = -lam log xi on three consecutive stored slices and
    plugs finite differences into the Hamilton-Jacobi form; under the
    noise/cost consistency condition the residual must shrink with grid
    refinement.  Probes are snapped to their nearest grid node.
    """
    if slice_idx is None:
        slice_idx = len(sol.times) // 2
    if not 1 <= slice_idx <= len(sol.times) - 2:
        raise ValueError("need a slice with stored neighbours on both sides")
    lam = sol.lam
    grid = sol.grid
    xs, ys = grid.axes()
    dx, dy = grid.spacing
    t_mid = float(sol.times[slice_idx])
    j_prev = -lam * np.log(sol.xi[slice_idx - 1])
    j_mid = -lam * np.log(sol.xi[slice_idx])
    j_next = -lam * np.log(sol.xi[slice_idx + 1])
    dt2 = float(sol.times[slice_idx + 1] - sol.times[slice_idx - 1])

    res = []
    for p in np.atleast_2d(probes):
        i = int(round((p[0] - xs[0]) / dx))
        j = int(round((p[1] - ys[0]) / dy))
        if sol.dirichlet_mask[i - 1: i + 2, j - 1: j + 2].any():
            raise StencilOutOfDomain(f"probe {p} touches pinned nodes")
        node = np.array([xs[i], ys[j]])
        djdt = (j_next[i, j] - j_prev[i, j]) / dt2
        grad = np.array([
            (j_mid[i + 1, j] - j_mid[i - 1, j]) / (2 * dx),
            (j_mid[i, j + 1] - j_mid[i, j - 1]) / (2 * dy),
        ])
        hxx = (j_mid[i + 1, j] - 2 * j_mid[i, j] + j_mid[i - 1, j]) / dx**2
        hyy = (j_mid[i, j + 1] - 2 * j_mid[i, j] + j_mid[i, j - 1]) / dy**2
        hxy = (
            j_mid[i + 1, j + 1] - j_mid[i + 1, j - 1]
            - j_mid[i - 1, j + 1] + j_mid[i - 1, j - 1]
        ) / (4 * dx * dy)
        f, a, v = _coefficients(spec, node[None, :], t_mid)
        trace = a[0, 0, 0] * hxx + a[0, 1, 1] * hyy + 2 * a[0, 0, 1] * hxy
        gu = np.asarray(spec.gain_u(node, t_mid), dtype=float)
        gv = np.asarray(spec.gain_v(node, t_mid), dtype=float)
        ru = np.asarray(spec.control_weight_u(node, t_mid), dtype=float)
        rv = np.asarray(spec.control_weight_v(node, t_mid), dtype=float)
        quad_mat = gv @ np.linalg.solve(rv, gv.T) - gu @ np.linalg.solve(ru, gu.T)
        quad = 0.5 * float(grad @ quad_mat @ grad)
        res.append(djdt + float(v[0]) + float(f[0] @ grad) + 0.5 * trace + quad)
    return float(np.median(np.abs(res)))


def export_xi_csv(sol: PdeSolution, path: str) -> None:
    """Write stored xi slices as rows of (t, x, y, xi)."""
    xs, ys = sol.grid.axes()
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("t,x,y,xi\n")
        for s, t in enumerate(sol.times):
            for i, xv in enumerate(xs):
                for j, yv in enumerate(ys):
                    fh.write(f"{t:.17g},{xv:.17g},{yv:.17g},{sol.xi[s, i, j]:.17g}\n")
