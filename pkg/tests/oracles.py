"""Independent reference computations used only by the tests."""
from __future__ import annotations

import itertools

import numpy as np


def enumerate_bfs(cost, A, b, lower, upper, box):
    """Minimum of cost @ x over basic solutions of A x = b inside a box.

    Every variable is clipped to [-box, box] so that each nonbasic variable
    has two finite bounds to sit at. Returns (objective, x) or (inf, None)
    when no basic solution is feasible.
    """
    cost = np.asarray(cost, float)
    A = np.asarray(A, float).reshape(-1, cost.size)
    b = np.asarray(b, float)
    lo = np.maximum(np.asarray(lower, float), -box)
    hi = np.minimum(np.asarray(upper, float), box)
    r, v = A.shape
    best, best_x = np.inf, None
    for B in itertools.combinations(range(v), r):
        B = list(B)
        AB = A[:, B]
        if r and abs(np.linalg.det(AB)) < 1e-10:
            continue
        N = [j for j in range(v) if j not in B]
        for choice in itertools.product((0, 1), repeat=len(N)):
            x = np.zeros(v)
            for j, side in zip(N, choice):
                x[j] = hi[j] if side else lo[j]
            if r:
                x[B] = np.linalg.solve(AB, b - A[:, N] @ x[N])
            if np.all(x >= lo - 1e-9) and np.all(x <= hi + 1e-9):
                val = cost @ x
                if val < best:
                    best, best_x = val, x
    return best, best_x


def classify_lp(cost, A, b, lower, upper):
    """('Optimal', value) | ('Infeasible', None) | ('Unbounded', None)."""
    small, _ = enumerate_bfs(cost, A, b, lower, upper, 1e4)
    if not np.isfinite(small):
        return "Infeasible", None
    large, _ = enumerate_bfs(cost, A, b, lower, upper, 1e6)
    if large < small - 1e-6 * (1 + abs(small)):
        return "Unbounded", None
    return "Optimal", small


def random_lp(rng: np.random.Generator):
    """Small random LP with integer data; may be infeasible or unbounded."""
    while True:
        v = int(rng.integers(1, 9))
        r = int(rng.integers(0, min(4, v) + 1))
        A = rng.integers(-3, 4, size=(r, v)).astype(float)
        if r and np.linalg.matrix_rank(A) < r:
            continue
        lower = np.where(rng.random(v) < 0.8, 0.0, -2.0)
        upper = np.where(rng.random(v) < 0.5, np.inf, rng.integers(1, 6, size=v).astype(float))
        if rng.random() < 0.7:
            x = lower + rng.random(v) * np.where(np.isfinite(upper), upper - lower, 3.0)
            b = A @ x
        else:
            b = rng.integers(-6, 7, size=r).astype(float)
        cost = rng.integers(-5, 6, size=v).astype(float)
        return cost, A, b, lower, upper


def workload_by_hand(A, D, lam):
    """rho = D z with A z = -lam, solved by Gaussian elimination."""
    M = np.array(A, float)
    rhs = -np.array(lam, float)
    n = len(rhs)
    aug = np.hstack([M, rhs[:, None]])
    for col in range(n):
        piv = col + int(np.argmax(np.abs(aug[col:, col])))
        aug[[col, piv]] = aug[[piv, col]]
        aug[col] /= aug[col, col]
        for row in range(n):
            if row != col:
                aug[row] -= aug[row, col] * aug[col]
    return np.asarray(D, float) @ aug[:, -1]
