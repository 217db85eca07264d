"""State-feedback policies built from trained trees, and closed-loop evaluation."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import EPS_ZERO, Dataset, LabelBook, Pattern, support_pattern
from .exceptions import EmptyPattern, NoApplicableTree, OverlappingCells, ValidationError
from .fluid_solver import DiscretizationConfig, solve_fluid
from .network import NetworkSpec
from .octree import ObliqueTree

FALLBACK = "closest-superset"
SIM_STEPS = 2000


@dataclass
class PartitionedPolicy:
    """Trees routed by support pattern.

    ``cells[i]`` is a set of patterns served by ``trees[i]``, or ``None``
    for a cell that accepts every pattern. Patterns not found in any cell
    go to the cell holding the closest superset pattern (fewest extra
    classes, ties broken lexicographically); each such event is counted in
    ``fallback_events``.
    """

    cells: list
    trees: list
    book: LabelBook
    eps_zero: float = EPS_ZERO
    fallback: str = FALLBACK
    fallback_events: int = field(default=0, compare=False)

    def __post_init__(self):
        if len(self.cells) != len(self.trees) or not self.trees:
            raise ValidationError("need one tree per cell and at least one cell")
        self.cells = [None if c is None else frozenset(tuple(sorted(p)) for p in c)
                      for c in self.cells]
        seen: dict = {}
        for i, cell in enumerate(self.cells):
            for p in cell or ():
                if p in seen:
                    raise OverlappingCells(f"pattern {p} in cells {seen[p]} and {i}")
                seen[p] = i
        self._owner = seen
        self._catch_all = next((i for i, c in enumerate(self.cells) if c is None), None)
        for tree in self.trees:
            for nd in tree.nodes:
                if "leaf" in nd and not 0 <= nd["leaf"] < len(self.book):
                    raise ValidationError(f"tree label {nd['leaf']} missing from the label book")

    @classmethod
    def single(cls, tree: ObliqueTree, book: LabelBook, eps_zero: float = EPS_ZERO):
        return cls(cells=[None], trees=[tree], book=book, eps_zero=eps_zero)

    def route(self, pattern: Pattern) -> int:
        if pattern in self._owner:
            return self._owner[pattern]
        if self._catch_all is not None:
            return self._catch_all
        supersets = [p for p in self._owner if set(pattern) <= set(p)]
        if not supersets:
            raise NoApplicableTree(f"no cell covers pattern {pattern} or a superset of it")
        best = min(supersets, key=lambda p: (len(p) - len(pattern), p))
        self.fallback_events += 1
        return self._owner[best]

    def predict_label(self, x) -> int:
        x = np.asarray(x, dtype=float)
        return self.trees[self.route(support_pattern(x, self.eps_zero))].predict_one(x)

    def act(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        try:
            pattern = support_pattern(x, self.eps_zero)
        except EmptyPattern:
            return np.zeros_like(x)
        label = self.trees[self.route(pattern)].predict_one(x)
        return self.book.control(label)

    def save(self, directory) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        meta = {
            "cells": [None if c is None else sorted([i + 1 for i in p] for p in c)
                      for c in self.cells],
            "trees": [f"tree_{i}.json" for i in range(len(self.trees))],
            "eps_zero": self.eps_zero,
            "fallback": self.fallback,
        }
        for name, tree in zip(meta["trees"], self.trees):
            (d / name).write_text(tree.to_json() + "\n")
        self.book.save(d / "labels.json")
        (d / "policy.json").write_text(json.dumps(meta, indent=2) + "\n")

    @classmethod
    def load(cls, directory) -> "PartitionedPolicy":
        d = Path(directory)
        meta = json.loads((d / "policy.json").read_text())
        cells = [None if c is None else [tuple(i - 1 for i in p) for p in c] for c in meta["cells"]]
        trees = [ObliqueTree.from_json((d / name).read_text()) for name in meta["trees"]]
        return cls(cells=cells, trees=trees, book=LabelBook.load(d / "labels.json"),
                   eps_zero=meta["eps_zero"], fallback=meta.get("fallback", FALLBACK))


def feasible_projection(spec: NetworkSpec, x, u, h: float) -> np.ndarray:
    """Make ``u`` admissible for an Euler step of length ``h`` from ``x``.

    Clips to ``[0, 1]``, scales each overloaded server down to full effort,
    then lowers ``u_i`` for any class whose Euler step would go negative to
    exactly the rate that empties it. Lowering ``u_i`` cuts the inflow to
    its successor, so this is repeated until no class overshoots. Freed
    effort is not handed to other classes.
    """
    x = np.asarray(x, dtype=float)
    u = np.clip(np.asarray(u, dtype=float), 0.0, 1.0)
    load = spec.D @ u
    over = load > 1.0
    if over.any():
        u = u / np.maximum(spec.D.T @ np.where(over, load, 1.0), 1.0)
    mu = spec.mu_arr
    for _ in range(spec.n + 1):
        inflow = spec.lam_arr + (spec.A @ u + mu * u)  # arrivals from outside and upstream
        after = x + h * (inflow - mu * u)
        bad = (after < 0) & (u > 0)
        if not bad.any():
            break
        target = np.clip((x[bad] / h + inflow[bad]) / mu[bad], 0.0, None)
        u[bad] = np.minimum(u[bad], target)
    return u


@dataclass
class ClosedLoopResult:
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    cost: float
    violation: float
    terminal_norm: float
    fallback_events: int = 0

    def write_csv(self, path) -> None:
        n = self.states.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"x_{i + 1}" for i in range(n)] + [f"u_{i + 1}" for i in range(n)])
            for k, t in enumerate(self.times):
                u = self.controls[min(k, len(self.controls) - 1)]
                w.writerow([repr(float(t))] + [repr(float(v)) for v in self.states[k]]
                           + [repr(float(v)) for v in u])


def simulate(spec: NetworkSpec, policy: PartitionedPolicy, x0, horizon: float,
             h_sim: float | None = None) -> ClosedLoopResult:
    """Explicit Euler closed loop ``x <- max(0, x + h (A u + lambda))``."""
    x = np.asarray(x0, dtype=float).copy()
    if horizon < 0:
        raise ValidationError("horizon must be non-negative")
    h = horizon / SIM_STEPS if h_sim is None else float(h_sim)
    if h <= 0 and horizon > 0:
        raise ValidationError("h_sim must be positive")
    steps = int(np.ceil(horizon / h - 1e-9)) if horizon > 0 else 0
    start_events = policy.fallback_events
    states = np.empty((steps + 1, spec.n))
    controls = np.empty((steps, spec.n))
    states[0] = x
    violation = 0.0
    for k in range(steps):
        u = feasible_projection(spec, x, policy.act(x), h)
        nxt = x + h * (spec.A @ u + spec.lam_arr)
        violation = max(violation, float(np.max(-nxt, initial=0.0)))
        x = np.maximum(nxt, 0.0)
        controls[k] = u
        states[k + 1] = x
    times = np.arange(steps + 1) * h
    cx = states @ spec.c_arr
    cost = float(np.sum(h * (cx[:-1] + cx[1:]) / 2)) if steps else 0.0
    return ClosedLoopResult(times, states, controls, cost, violation,
                            float(np.abs(states[-1]).max(initial=0.0)),
                            policy.fallback_events - start_events)


def compare_cost(spec: NetworkSpec, policy: PartitionedPolicy, x0,
                 scfg: DiscretizationConfig = DiscretizationConfig(),
                 h_sim: float | None = None) -> float:
    """Closed-loop cost over the solver's horizon divided by the solver optimum."""
    sol = solve_fluid(spec, x0, scfg)
    sim = simulate(spec, policy, x0, sol.T, h_sim)
    if sol.objective <= 1e-12:
        return 1.0 if sim.cost <= 1e-12 else float("inf")
    return sim.cost / sol.objective


def inference_seconds(policy: PartitionedPolicy, X) -> np.ndarray:
    """Per-state wall time of :meth:`PartitionedPolicy.act`."""
    out = np.empty(len(X))
    for i, x in enumerate(np.asarray(X, dtype=float)):
        t0 = time.perf_counter()
        policy.act(x)
        out[i] = time.perf_counter() - t0
    return out


def evaluate(spec: NetworkSpec, policy: PartitionedPolicy, test: Dataset, test_book: LabelBook,
             scfg: DiscretizationConfig = DiscretizationConfig(), cost_states=None,
             solve_samples: int = 20) -> dict:
    """Accuracy, confusion counts, cost ratios and timing of ``policy`` on ``test``.

    Test labels are mapped through their control vectors, so the test set
    may use its own label book.
    """
    truth = np.array([policy.book.lookup(test_book.control(l)) for l in test.y], dtype=object)
    pred = np.array([policy.predict_label(x) for x in test.X])
    hit = np.array([t is not None and t == p for t, p in zip(truth, pred)])
    per_pattern: dict = {}
    for pat, ok in zip(test.patterns(policy.eps_zero), hit):
        key = ",".join(str(i + 1) for i in pat)
        acc = per_pattern.setdefault(key, [0, 0])
        acc[0] += int(ok)
        acc[1] += 1
    confusion: dict = {}
    for l, p in zip(test.y, pred):
        key = f"{int(l)}->{int(p)}"
        confusion[key] = confusion.get(key, 0) + 1

    solve_times, ratios = [], []
    rng = np.random.default_rng(0)
    pick = rng.choice(len(test), size=min(solve_samples, len(test)), replace=False) if len(test) else []
    for i in pick:
        t0 = time.perf_counter()
        solve_fluid(spec, test.X[i], scfg)
        solve_times.append(time.perf_counter() - t0)
    for x0 in ([] if cost_states is None else cost_states):
        ratios.append(compare_cost(spec, policy, x0, scfg))
    infer = inference_seconds(policy, test.X) if len(test) else np.array([])
    med_solve = float(np.median(solve_times)) if solve_times else None
    med_infer = float(np.median(infer)) if infer.size else None
    return {
        "accuracy": float(hit.mean()) if len(hit) else None,
        "samples": int(len(test)),
        "per_pattern_accuracy": {k: v[0] / v[1] for k, v in per_pattern.items()},
        "confusion": confusion,
        "cost_ratios": ratios,
        "median_solve_seconds": med_solve,
        "median_inference_seconds": med_infer,
        "speedup": (med_solve / med_infer) if med_solve and med_infer else None,
        "test_labels": test_book.to_dict()["labels"],
    }
