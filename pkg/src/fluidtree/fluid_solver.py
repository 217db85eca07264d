"""Time-discretized solution of the fluid network control problem.

For an initial state ``x0`` we minimize the holding cost ``int_0^T c.x dt``
subject to ``dx/dt = A u + lambda``, ``D u <= e`` and ``u, x >= 0`` by
restricting ``u`` to be piecewise constant on a grid ``0 = t_0 < ... < t_N = T``.
With a piecewise-constant control the state is piecewise linear, so the
finite LP is an exact restriction of the continuous problem: the trapezoid
cost is the exact integral and non-negativity at the nodes implies it on
the whole interval.

The grid is power-graded, ``t_k = T (k/N)^p``, which makes the first
intervals short. The label we care about downstream is the control on the
first interval, and a short first interval keeps it equal to the
instantaneous optimal control at ``t = 0+`` instead of an average over a
switch.

The costate is read off the duals of the flow-balance rows. With rows
written as ``x_{k+1} - x_k - h_k A u_k = h_k lambda`` the duals equal
``dV/dx`` at the node the row feeds, so the costate decreases at rate ``c``
on stretches where the state is positive.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .exceptions import EmptyingFailed, LpFailure, UnstableNetwork, ValidationError
from .lp import LpProblem, solve_lp
from .network import NetworkSpec, workload


@dataclass(frozen=True)
class DiscretizationConfig:
    """Grid and tolerance settings for :func:`solve_fluid`.

    ``T`` is either a positive horizon or ``"auto"`` (see
    :func:`default_horizon`). ``grading`` is the exponent ``p`` of the
    power grid; ``1.0`` gives a uniform grid.
    """

    T: float | str = "auto"
    N_intervals: int = 400
    empty_tol: float = 1e-6
    refine: bool = False
    grading: float = 2.0
    lp_method: str = "highs"

    def __post_init__(self):
        if self.T != "auto" and not (isinstance(self.T, (int, float)) and self.T > 0):
            raise ValidationError(f"T must be positive or 'auto', got {self.T!r}")
        if self.N_intervals < 2:
            raise ValidationError("N_intervals must be at least 2")
        if self.grading < 1.0:
            raise ValidationError("grading must be >= 1")
        if self.empty_tol <= 0:
            raise ValidationError("empty_tol must be positive")


@dataclass(frozen=True)
class FluidSolution:
    grid: np.ndarray
    u_pieces: np.ndarray
    x_nodes: np.ndarray
    objective: float
    costate_nodes: np.ndarray
    depletion: tuple
    x0: np.ndarray
    solve_seconds: float = 0.0

    @property
    def T(self) -> float:
        return float(self.grid[-1])

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.grid)

    def interval_of(self, t: float) -> int:
        k = int(np.searchsorted(self.grid, t, side="right")) - 1
        return min(max(k, 0), len(self.grid) - 2)

    def state_at(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.grid, self.x_nodes[:, i])
                         for i in range(self.x_nodes.shape[1])])

    def control_at(self, t: float) -> np.ndarray:
        return self.u_pieces[self.interval_of(t)]

    def to_dict(self, report: "PontryaginReport | None" = None) -> dict:
        d = {
            "grid": self.grid.tolist(),
            "u_pieces": self.u_pieces.tolist(),
            "x_nodes": self.x_nodes.tolist(),
            "objective": self.objective,
            "costate_nodes": self.costate_nodes.tolist(),
            "depletion": [None if t is None else float(t) for t in self.depletion],
        }
        if report is not None:
            d["pontryagin"] = report.summary()
        return d

    def write_trajectory_csv(self, path) -> None:
        n = self.x_nodes.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(n)])
            for k, t in enumerate(self.grid):
                u = self.u_pieces[min(k, len(self.u_pieces) - 1)]
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.x_nodes[k]]
                           + [repr(float(v)) for v in u])


def _check_state(spec: NetworkSpec, x0) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float).ravel()
    if x0.size != spec.n:
        raise ValidationError(f"initial state has length {x0.size}, expected {spec.n}")
    if not np.all(np.isfinite(x0)) or np.any(x0 < 0):
        raise ValidationError("initial state must be finite and non-negative")
    return x0


def default_horizon(spec: NetworkSpec, x0) -> float:
    """Twice the largest per-server drain time bound, ``work_j / (1 - rho_j)``."""
    x0 = _check_state(spec, x0)
    rho = workload(spec, warn=False)
    if np.any(rho >= 1.0):
        raise UnstableNetwork(f"workload {rho} has a component >= 1")
    work = spec.D @ np.linalg.solve(-spec.A, x0)
    return float(2.0 * np.max(work / (1.0 - rho)))


def make_grid(T: float, N: int, grading: float = 2.0) -> np.ndarray:
    grid = T * (np.arange(N + 1) / N) ** grading
    grid[-1] = T
    return grid


def _resolve_horizon(spec, x0, config) -> float:
    T = default_horizon(spec, x0) if config.T == "auto" else float(config.T)
    if T <= 0:
        # empty start: keep a unit horizon so that arrivals can still be served
        T = 1.0
    return T


def discretize(spec: NetworkSpec, x0, config: DiscretizationConfig = DiscretizationConfig(),
               grid=None) -> LpProblem:
    """Build the LP for ``x0``.

    Variables are ordered ``[u_0..u_{N-1}, x_0..x_N, s_0..s_{N-1}]`` with
    ``s_k`` the server slacks. Rows are the initial condition, then the
    ``N`` flow-balance blocks, then the ``N`` server blocks
    ``D u_k + s_k = e``.
    """
    x0 = _check_state(spec, x0)
    if grid is None:
        grid = make_grid(_resolve_horizon(spec, x0, config), config.N_intervals, config.grading)
    grid = np.asarray(grid, dtype=float)
    h = np.diff(grid)
    N = h.size
    n, m = spec.n, spec.m
    A, D = spec.A, spec.D
    nu, nx = N * n, (N + 1) * n
    lay = _Layout(n, m, N)

    rows, cols, vals = [], [], []
    # x_0 = x0
    rows.append(np.arange(n))
    cols.append(lay.x(0) + np.arange(n))
    vals.append(np.ones(n))
    # x_{k+1} - x_k - h_k A u_k = h_k lam
    k = np.arange(N)
    base = n + k[:, None] * n + np.arange(n)[None, :]
    rows += [base.ravel(), base.ravel()]
    cols += [(nu + (k[:, None] + 1) * n + np.arange(n)).ravel(),
             (nu + k[:, None] * n + np.arange(n)).ravel()]
    vals += [np.ones(N * n), -np.ones(N * n)]
    ai, aj = np.nonzero(A)
    rows.append((n + k[:, None] * n + ai[None, :]).ravel())
    cols.append((k[:, None] * n + aj[None, :]).ravel())
    vals.append((-h[:, None] * A[ai, aj][None, :]).ravel())
    # D u_k + s_k = e
    r0 = n + N * n
    di, dj = np.nonzero(D)
    rows.append((r0 + k[:, None] * m + di[None, :]).ravel())
    cols.append((k[:, None] * n + dj[None, :]).ravel())
    vals.append(np.ones(N * di.size))
    rows.append((r0 + k[:, None] * m + np.arange(m)).ravel())
    cols.append((nu + nx + k[:, None] * m + np.arange(m)).ravel())
    vals.append(np.ones(N * m))

    n_rows = n + N * n + N * m
    M = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(n_rows, lay.n_vars))
    rhs = np.concatenate([x0, (h[:, None] * spec.lam_arr[None, :]).ravel(), np.ones(N * m)])

    weights = np.zeros(N + 1)
    weights[:-1] += h / 2
    weights[1:] += h / 2
    cost = np.zeros(lay.n_vars)
    cost[nu:nu + nx] = (weights[:, None] * spec.c_arr[None, :]).ravel()
    upper = np.full(lay.n_vars, np.inf)
    upper[:nu] = 1.0
    return LpProblem(cost, M, rhs, 0.0, upper)


@dataclass(frozen=True)
class _Layout:
    n: int
    m: int
    N: int

    @property
    def n_vars(self) -> int:
        return self.N * (2 * self.n + self.m) + self.n

    def x(self, k: int) -> int:
        return self.N * self.n + k * self.n


def _refined_grid(grid: np.ndarray, u: np.ndarray, factor: int = 4) -> np.ndarray:
    change = np.flatnonzero(np.abs(np.diff(u, axis=0)).max(axis=1) > 1e-6)
    marked = np.zeros(len(grid) - 1, dtype=bool)
    marked[change] = True
    marked[change + 1] = True
    pieces = [grid[:1]]
    for k in range(len(grid) - 1):
        if marked[k]:
            pieces.append(np.linspace(grid[k], grid[k + 1], factor + 1)[1:])
        else:
            pieces.append(grid[k + 1:k + 2])
    return np.concatenate(pieces)


def _solve_on_grid(spec, x0, grid, config) -> FluidSolution:
    problem = discretize(spec, x0, config, grid=grid)
    t0 = time.perf_counter()
    sol = solve_lp(problem, method=config.lp_method)
    elapsed = time.perf_counter() - t0
    if not sol.optimal:
        raise LpFailure(f"discretized LP is {sol.status.value}")
    n, m = spec.n, spec.m
    N = len(grid) - 1
    nu, nx = N * n, (N + 1) * n
    u = sol.primal[:nu].reshape(N, n)
    x = sol.primal[nu:nu + nx].reshape(N + 1, n)
    costate = sol.dual[: n + N * n].reshape(N + 1, n)
    return FluidSolution(
        grid=grid, u_pieces=u, x_nodes=x, objective=float(sol.objective),
        costate_nodes=costate, depletion=(), x0=x0, solve_seconds=elapsed,
    )


def solve_fluid(spec: NetworkSpec, x0, config: DiscretizationConfig = DiscretizationConfig()
                ) -> FluidSolution:
    """Solve the discretized control problem from ``x0``.

    Raises EmptyingFailed when the state at ``T`` is not within
    ``empty_tol * (1 + |x0|_inf)`` of zero, and LpFailure when the LP is not
    solved to optimality.
    """
    x0 = _check_state(spec, x0)
    T = _resolve_horizon(spec, x0, config)
    grid = make_grid(T, config.N_intervals, config.grading)
    t0 = time.perf_counter()
    sol = _solve_on_grid(spec, x0, grid, config)
    if config.refine:
        finer = _refined_grid(grid, sol.u_pieces)
        if len(finer) > len(grid):
            sol = _solve_on_grid(spec, x0, finer, config)
    elapsed = time.perf_counter() - t0

    thresh = config.empty_tol * (1.0 + np.abs(x0).max())
    terminal = np.abs(sol.x_nodes[-1]).max()
    if terminal > thresh:
        raise EmptyingFailed(
            f"state at T={T:.4g} has norm {terminal:.3g} > {thresh:.3g}; increase T")
    depletion = []
    for i in range(spec.n):
        hit = np.flatnonzero(sol.x_nodes[:, i] <= thresh)
        depletion.append(float(sol.grid[hit[0]]) if hit.size else None)
    return replace(sol, depletion=tuple(depletion), solve_seconds=elapsed)


def initial_control(sol: FluidSolution) -> np.ndarray:
    """Control on the first interval with solver noise removed."""
    u = np.clip(sol.u_pieces[0], 0.0, 1.0)
    u[u < 1e-9] = 0.0
    return u


def priority_indices(spec: NetworkSpec, costate) -> np.ndarray:
    """Priority index ``r = y^T A`` for a costate vector ``y``."""
    return np.asarray(costate, dtype=float) @ spec.A


@dataclass
class PontryaginReport:
    """Outcome of :func:`verify_pontryagin`.

    ``served`` holds, per interval and server, the class with the most
    effort (-1 when the server idles) and ``violation`` the amount by which
    a served class's index exceeds ``min(0, min index at that server)``.
    The pass fraction is computed over these (interval, server) pairs.

    Two further diagnostics are reported but do not enter the pass
    fraction. ``slope_fraction`` is the share of (node, class) pairs with
    positive state where the costate drops at rate ``c``.
    ``empty_costate_fraction`` is the share of (interval, class) pairs with
    the class empty throughout where the costate is ~0; LP duals are value
    gradients, which stay positive on arcs where a server splits effort to
    hold a class at zero, so this share is below one on such instances.
    """

    indices: np.ndarray
    served: np.ndarray
    violation: np.ndarray
    tol: float
    terminal_costate: float
    terminal_ok: bool
    slope_fraction: float
    empty_costate_fraction: float
    passed: np.ndarray = field(init=False)

    def __post_init__(self):
        self.passed = self.violation <= self.tol

    @property
    def pass_fraction(self) -> float:
        return float(self.passed.mean()) if self.passed.size else 1.0

    @property
    def ok(self) -> bool:
        return bool(self.passed.all() and self.terminal_ok)

    def summary(self) -> dict:
        return {
            "pass_fraction": self.pass_fraction,
            "pairs": int(self.passed.size),
            "max_violation": float(self.violation.max(initial=0.0)),
            "terminal_costate": self.terminal_costate,
            "terminal_ok": bool(self.terminal_ok),
            "slope_fraction": self.slope_fraction,
            "empty_costate_fraction": self.empty_costate_fraction,
            "tol": self.tol,
        }


def costate_scale(spec: NetworkSpec, sol: FluidSolution) -> float:
    """Natural magnitude of the costate, ``1 + max(c) T``."""
    return float(1.0 + np.abs(spec.c_arr).max() * sol.T)


def verify_pontryagin(spec: NetworkSpec, sol: FluidSolution, tol: float) -> PontryaginReport:
    """Check the discrete maximum-principle conditions on ``sol``.

    For the control on interval ``k`` we use the costate at ``t_{k+1}``,
    the multiplier of that interval's own flow-balance row; under this
    pairing the LP optimality conditions are the discrete analogue of the
    Hamiltonian minimization. ``tol`` is absolute, in priority-index units;
    the terminal costate is compared against ``tol * costate_scale``.
    """
    N = len(sol.u_pieces)
    y = sol.costate_nodes
    r = y[1:] @ spec.A
    served = np.full((N, spec.m), -1)
    violation = np.zeros((N, spec.m))
    for j in range(spec.m):
        cls = np.asarray(spec.constituents(j))
        rj = r[:, cls]
        floor = np.minimum(0.0, rj.min(axis=1))
        u = sol.u_pieces[:, cls]
        excess = np.where(u > tol, rj - floor[:, None], 0.0)
        violation[:, j] = np.maximum(excess.max(axis=1), 0.0)
        busy = u.max(axis=1) > tol
        served[busy, j] = cls[np.argmax(u[busy], axis=1)]

    scale = costate_scale(spec, sol)
    terminal = float(np.abs(y[-1]).max())

    thresh = 1e-6 * (1.0 + np.abs(sol.x0).max())
    h = sol.steps
    weights = (h[:-1] + h[1:]) / 2
    positive = sol.x_nodes[1:-1] > thresh
    drop = y[1:-1] - y[2:]
    slope_ok = np.abs(drop - weights[:, None] * spec.c_arr[None, :]) <= tol * weights[:, None] * scale
    slope_fraction = float(slope_ok[positive].mean()) if positive.any() else 1.0

    empty = (sol.x_nodes[:-1] <= thresh) & (sol.x_nodes[1:] <= thresh)
    near_zero = np.abs(y[1:]) <= tol * scale
    empty_fraction = float(near_zero[empty].mean()) if empty.any() else 1.0
    return PontryaginReport(
        indices=r, served=served, violation=violation, tol=tol,
        terminal_costate=terminal, terminal_ok=terminal <= tol * scale,
        slope_fraction=slope_fraction, empty_costate_fraction=empty_fraction,
    )
