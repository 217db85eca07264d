"""Linear programs in equality form with variable bounds.

    minimize    cost @ x
    subject to  eq_matrix @ x == eq_rhs
                lower <= x <= upper

Two backends share one contract. ``"simplex"`` is a dense bounded-variable
revised simplex written here (two phases, Dantzig pricing that falls back
to Bland's rule). ``"highs"`` hands the problem to HiGHS through scipy and
is what the fluid solver uses for its large discretized programs.

``LpSolution.dual`` holds one multiplier per equality row with the sign
convention ``dual = d(objective) / d(eq_rhs)``; ``reduced_costs`` are
``cost - eq_matrix.T @ dual``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.optimize import linprog

from .exceptions import IterationLimit, NumericalFailure, ValidationError

RESIDUAL_LIMIT = 1e-7


class LpStatus(str, enum.Enum):
    OPTIMAL = "Optimal"
    INFEASIBLE = "Infeasible"
    UNBOUNDED = "Unbounded"


@dataclass
class LpProblem:
    cost: np.ndarray
    eq_matrix: np.ndarray | sp.spmatrix
    eq_rhs: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=float)
        v = self.cost.size
        if sp.issparse(self.eq_matrix):
            self.eq_matrix = sp.csr_matrix(self.eq_matrix, dtype=float)
        else:
            M = np.asarray(self.eq_matrix, dtype=float)
            self.eq_matrix = M.reshape(0, v) if M.size == 0 else np.atleast_2d(M)
        self.eq_rhs = np.asarray(self.eq_rhs, dtype=float).ravel()
        self.lower = np.broadcast_to(np.asarray(self.lower, dtype=float), (v,)).copy()
        self.upper = np.broadcast_to(np.asarray(self.upper, dtype=float), (v,)).copy()
        if self.eq_matrix.shape != (self.eq_rhs.size, v):
            raise ValidationError(
                f"eq_matrix shape {self.eq_matrix.shape} inconsistent with "
                f"{self.eq_rhs.size} rows and {v} variables")
        if np.any(self.lower > self.upper):
            raise ValidationError("lower bound exceeds upper bound")
        if np.any(self.lower == np.inf) or np.any(self.upper == -np.inf):
            raise ValidationError("bounds must allow a finite value")

    @property
    def n_vars(self) -> int:
        return self.cost.size

    @property
    def n_rows(self) -> int:
        return self.eq_rhs.size


@dataclass
class LpSolution:
    status: LpStatus
    primal: np.ndarray
    dual: np.ndarray
    objective: float
    reduced_costs: np.ndarray | None = None
    iterations: int = 0

    @property
    def optimal(self) -> bool:
        return self.status is LpStatus.OPTIMAL


def solve_lp(problem: LpProblem, feas_tol: float = 1e-9, max_iters: int | None = None,
             method: str = "simplex") -> LpSolution:
    """Solve ``problem``; see the module docstring for conventions.

    Raises IterationLimit when the simplex exceeds ``max_iters`` and
    NumericalFailure when a basis refactorization leaves a residual above
    1e-7.
    """
    if method == "simplex":
        return _BoundedSimplex(problem, feas_tol, max_iters).run()
    if method == "highs":
        return _solve_highs(problem, max_iters)
    raise ValidationError(f"unknown LP method {method!r}")


class _BoundedSimplex:
    refactor_every = 50

    def __init__(self, problem: LpProblem, tol: float, max_iters: int | None):
        A = problem.eq_matrix
        self.A0 = A.toarray() if sp.issparse(A) else np.array(A)
        self.b = problem.eq_rhs
        self.c0 = problem.cost
        self.r, self.v = self.A0.shape
        self.tol = tol
        self.max_iters = max_iters if max_iters is not None else 50 * (self.r + self.v) + 1000
        self.bland_after = 3 * (self.r + self.v)
        self.iters = 0

        # Artificial columns (one per row) are appended after the structurals.
        self.lo = np.concatenate([problem.lower, np.zeros(self.r)])
        self.hi = np.concatenate([problem.upper, np.full(self.r, np.inf)])
        x = np.where(np.isfinite(self.lo), self.lo, np.where(np.isfinite(self.hi), self.hi, 0.0))
        resid = self.b - self.A0 @ x[: self.v]
        sign = np.where(resid >= 0, 1.0, -1.0)
        self.A = np.hstack([self.A0, np.diag(sign)])
        x[self.v:] = np.abs(resid)
        self.x = x
        self.basis = np.arange(self.v, self.v + self.r)
        self.is_basic = np.zeros(self.v + self.r, dtype=bool)
        self.is_basic[self.basis] = True
        self.Binv = np.diag(sign)  # inverse of diag(sign) is itself

    # -- linear algebra -------------------------------------------------
    def _refactor(self):
        B = self.A[:, self.basis]
        try:
            self.Binv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            raise NumericalFailure("basis matrix became singular") from None
        self._recompute_basics()
        scale = 1.0 + np.abs(self.b).max(initial=0.0) + np.abs(self.x).max(initial=0.0)
        res = np.abs(self.A @ self.x - self.b).max(initial=0.0)
        if res > RESIDUAL_LIMIT * scale:
            raise NumericalFailure(f"basis residual {res:.3g} exceeds tolerance")

    def _recompute_basics(self):
        nb = ~self.is_basic
        rhs = self.b - self.A[:, nb] @ self.x[nb]
        self.x[self.basis] = self.Binv @ rhs

    # -- one phase ------------------------------------------------------
    def _phase(self, cost: np.ndarray) -> str:
        tol = self.tol
        since_refactor = 0
        while True:
            if self.iters >= self.max_iters:
                raise IterationLimit(f"simplex exceeded {self.max_iters} iterations")
            y = cost[self.basis] @ self.Binv
            d = cost - y @ self.A
            d[self.is_basic] = 0.0
            at_lo = np.isfinite(self.lo) & (self.x <= self.lo + tol)
            at_hi = np.isfinite(self.hi) & (self.x >= self.hi - tol)
            movable = ~self.is_basic & (self.hi > self.lo)
            # nonbasic variables sit at a bound; free ones sit at 0
            can_up = movable & (d < -tol) & ~at_hi
            can_down = movable & (d > tol) & ~at_lo
            eligible = np.flatnonzero(can_up | can_down)
            if eligible.size == 0:
                return "optimal"
            if self.iters < self.bland_after:
                j = eligible[np.argmax(np.abs(d[eligible]))]
            else:
                j = eligible[0]
            sigma = 1.0 if can_up[j] else -1.0

            alpha = self.Binv @ self.A[:, j]
            step = sigma * alpha  # x_B changes by -theta * step
            xb = self.x[self.basis]
            lob, hib = self.lo[self.basis], self.hi[self.basis]
            theta_rows = np.full(self.r, np.inf)
            to_upper = np.zeros(self.r, dtype=bool)
            dec = step > tol
            inc = step < -tol
            with np.errstate(divide="ignore", invalid="ignore"):
                theta_rows[dec] = (xb[dec] - lob[dec]) / step[dec]
                theta_rows[inc] = (hib[inc] - xb[inc]) / (-step[inc])
            to_upper[inc] = True
            theta_rows = np.maximum(theta_rows, 0.0)
            theta_flip = self.hi[j] - self.lo[j]
            theta_pivot = theta_rows.min(initial=np.inf)
            if not np.isfinite(theta_pivot) and not np.isfinite(theta_flip):
                return "unbounded"

            self.iters += 1
            if theta_flip <= theta_pivot:
                self.x[j] += sigma * theta_flip
                self.x[self.basis] -= theta_flip * step
                continue
            ties = np.flatnonzero(theta_rows <= theta_pivot + 1e-12)
            if self.iters >= self.bland_after:
                p = ties[np.argmin(self.basis[ties])]
            else:
                p = ties[np.argmax(np.abs(alpha[ties]))]
            theta = theta_rows[p]
            leaving = self.basis[p]
            self.x[j] += sigma * theta
            self.x[self.basis] -= theta * step
            self.x[leaving] = self.hi[leaving] if to_upper[p] else self.lo[leaving]

            piv = alpha[p]
            row = self.Binv[p] / piv
            self.Binv -= np.outer(alpha, row)
            self.Binv[p] = row
            self.basis[p] = j
            self.is_basic[leaving] = False
            self.is_basic[j] = True
            since_refactor += 1
            if since_refactor >= self.refactor_every:
                self._refactor()
                since_refactor = 0

    def _drive_out_artificials(self):
        for p in range(self.r):
            k = self.basis[p]
            if k < self.v:
                continue
            row = self.Binv[p] @ self.A[:, : self.v]
            row[self.is_basic[: self.v]] = 0.0
            cand = np.flatnonzero(np.abs(row) > 1e-9)
            if cand.size == 0:
                continue  # redundant row: artificial stays basic at zero
            j = cand[np.argmax(np.abs(row[cand]))]
            alpha = self.Binv @ self.A[:, j]
            piv = alpha[p]
            r_ = self.Binv[p] / piv
            self.Binv -= np.outer(alpha, r_)
            self.Binv[p] = r_
            self.basis[p] = j
            self.is_basic[k] = False
            self.is_basic[j] = True
            self.x[k] = 0.0
        self._recompute_basics()

    def run(self) -> LpSolution:
        v, r = self.v, self.r
        phase1 = np.concatenate([np.zeros(v), np.ones(r)])
        self._phase(phase1)
        self._refactor()
        infeas = self.x[v:].sum()
        scale = 1.0 + np.abs(self.b).max(initial=0.0)
        if infeas > max(self.tol, 1e-9) * scale * 10:
            return LpSolution(LpStatus.INFEASIBLE, self.x[:v].copy(), np.zeros(r), np.nan,
                              iterations=self.iters)
        self.hi[v:] = 0.0
        self.x[v:] = 0.0
        self._drive_out_artificials()
        cost = np.concatenate([self.c0, np.zeros(r)])
        status = self._phase(cost)
        if status == "unbounded":
            return LpSolution(LpStatus.UNBOUNDED, self.x[:v].copy(), np.zeros(r), -np.inf,
                              iterations=self.iters)
        self._refactor()
        y = cost[self.basis] @ self.Binv
        x = self.x[:v].copy()
        # snap values within tolerance of a bound
        lo, hi = self.lo[:v], self.hi[:v]
        x = np.where(np.abs(x - lo) <= self.tol, lo, x)
        x = np.where(np.abs(x - hi) <= self.tol, hi, x)
        return LpSolution(
            LpStatus.OPTIMAL, x, y, float(self.c0 @ x),
            reduced_costs=self.c0 - y @ self.A0, iterations=self.iters,
        )


def _solve_highs(problem: LpProblem, max_iters: int | None) -> LpSolution:
    options = {"presolve": True}
    if max_iters is not None:
        options["maxiter"] = int(max_iters)
    bounds = np.column_stack([
        np.where(np.isfinite(problem.lower), problem.lower, -np.inf),
        np.where(np.isfinite(problem.upper), problem.upper, np.inf),
    ])
    kwargs = {}
    if problem.n_rows:
        kwargs = {"A_eq": problem.eq_matrix, "b_eq": problem.eq_rhs}
    res = linprog(problem.cost, bounds=bounds, method="highs", options=options, **kwargs)
    v, r = problem.n_vars, problem.n_rows
    if res.status == 0:
        y = np.asarray(res.eqlin.marginals) if r else np.zeros(0)
        red = np.asarray(res.lower.marginals) + np.asarray(res.upper.marginals)
        return LpSolution(LpStatus.OPTIMAL, np.asarray(res.x), y, float(res.fun),
                          reduced_costs=red, iterations=int(res.nit))
    if res.status == 2:
        return LpSolution(LpStatus.INFEASIBLE, np.full(v, np.nan), np.zeros(r), np.nan)
    if res.status == 3:
        return LpSolution(LpStatus.UNBOUNDED, np.full(v, np.nan), np.zeros(r), -np.inf)
    if res.status == 1:
        raise IterationLimit(res.message)
    raise NumericalFailure(res.message)
