"""Labeled state -> optimal control datasets.

Initial states are drawn per support pattern on the non-negative part of
the unit sphere, solved with :func:`fluid_solver.solve_fluid`, and labeled
with the optimal control at the requested times. Because the optimal
control is invariant under scaling of the state, datasets can be enlarged
for free by scaling states (:func:`augment`).
"""
from __future__ import annotations

import csv
import json
import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path

import numpy as np

from .exceptions import EmptyPattern, GenerationFailed, OverlappingCells, ValidationError
from .fluid_solver import DiscretizationConfig, FluidSolution, solve_fluid
from .network import NetworkSpec

log = logging.getLogger(__name__)

Pattern = tuple[int, ...]

LABEL_DECIMALS = 6
LABEL_TOL = 1e-6
EPS_ZERO = 1e-7


def support_pattern(x, eps_zero: float = EPS_ZERO) -> Pattern:
    """Indices of the classes holding fluid, relative to ``|x|_inf``."""
    x = np.asarray(x, dtype=float)
    thresh = eps_zero * (1.0 + np.abs(x).max(initial=0.0))
    pattern = tuple(int(i) for i in np.flatnonzero(x > thresh))
    if not pattern:
        raise EmptyPattern("state has no class above the zero threshold")
    return pattern


def all_patterns(n: int) -> list[Pattern]:
    """All ``2^n - 1`` non-empty patterns, by size then lexicographically."""
    return [p for k in range(1, n + 1) for p in combinations(range(n), k)]


def sample_initial_state(pattern: Pattern, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform point on the positive part of the unit sphere over ``pattern``."""
    if not pattern:
        raise ValidationError("pattern must be non-empty")
    x = np.zeros(n)
    z = np.abs(rng.standard_normal(len(pattern)))
    while not np.any(z > 0):
        z = np.abs(rng.standard_normal(len(pattern)))
    x[list(pattern)] = z / np.linalg.norm(z)
    return x


class LabelBook:
    """Bijection between label ids and rounded control vectors."""

    def __init__(self, labels=None):
        self._labels: list[np.ndarray] = []
        for u in labels or []:
            self.canonical_label(u)

    def __len__(self) -> int:
        return len(self._labels)

    def __eq__(self, other) -> bool:
        return isinstance(other, LabelBook) and len(self) == len(other) and all(
            np.array_equal(a, b) for a, b in zip(self._labels, other._labels))

    def lookup(self, u) -> int | None:
        u = _round_control(u)
        for i, v in enumerate(self._labels):
            if v.size == u.size and np.abs(v - u).max() <= LABEL_TOL:
                return i
        return None

    def canonical_label(self, u) -> int:
        """Id of ``u``, minting a new one if no stored label is within 1e-6."""
        hit = self.lookup(u)
        if hit is not None:
            return hit
        self._labels.append(_round_control(u))
        return len(self._labels) - 1

    def control(self, label_id: int) -> np.ndarray:
        return self._labels[label_id].copy()

    def prioritized(self, label_id: int) -> list[int]:
        """1-based classes receiving effort, the way priority lists are printed."""
        return [int(i) + 1 for i in np.flatnonzero(self._labels[label_id] > 0)]

    def to_dict(self) -> dict:
        return {"labels": [v.tolist() for v in self._labels]}

    @classmethod
    def from_dict(cls, d: dict) -> "LabelBook":
        book = cls()
        book._labels = [np.asarray(v, dtype=float) for v in d["labels"]]
        return book

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "LabelBook":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _round_control(u) -> np.ndarray:
    u = np.round(np.clip(np.asarray(u, dtype=float), 0.0, 1.0), LABEL_DECIMALS)
    return u + 0.0  # drop negative zeros


def canonical_label(u, book: LabelBook) -> int:
    return book.canonical_label(u)


@dataclass
class Dataset:
    """States ``X`` (k x n) with integer label ids ``y``."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.y = np.asarray(self.y, dtype=int)
        if self.X.ndim != 2 or self.y.shape != (self.X.shape[0],):
            raise ValidationError(f"inconsistent dataset shapes {self.X.shape}, {self.y.shape}")

    @classmethod
    def empty(cls, n: int) -> "Dataset":
        return cls(np.zeros((0, n)), np.zeros(0, dtype=int))

    def __len__(self) -> int:
        return len(self.y)

    @property
    def n(self) -> int:
        return self.X.shape[1]

    def patterns(self, eps_zero: float = EPS_ZERO) -> list[Pattern]:
        return [support_pattern(x, eps_zero) for x in self.X]

    def subset(self, mask) -> "Dataset":
        return Dataset(self.X[mask], self.y[mask])

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.X, other.X]), np.concatenate([self.y, other.y]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{i + 1}" for i in range(self.n)] + ["label_id"])
            for x, label in zip(self.X, self.y):
                w.writerow([repr(float(v)) for v in x] + [int(label)])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        n = len(rows[0]) - 1
        if not rows[1:]:
            return cls.empty(n)
        body = np.array(rows[1:], dtype=object)
        return cls(body[:, :n].astype(float), body[:, n].astype(int))


@dataclass(frozen=True)
class GenerationConfig:
    """Inputs of dataset generation.

    ``patterns`` is ``"all"``, ``"interior"`` or an explicit list of 0-based
    index tuples. ``times`` are fractions of the horizon at which
    (state, control) pairs are recorded. ``ambiguity_margin`` is kept for
    configuration files but unused by the grid-doubling filter.
    """

    patterns: str | tuple = "interior"
    M: int = 1000
    times: tuple = (0.0,)
    alphas: tuple = ()
    ambiguity_margin: float = 0.0
    filter_ambiguous: bool = True
    seed: int = 0
    eps_zero: float = EPS_ZERO
    jobs: int = 1

    def __post_init__(self):
        if self.M < 1:
            raise ValidationError("M must be at least 1")
        if any(a <= 0 for a in self.alphas):
            raise ValidationError("alphas must be positive")
        if any(not 0.0 <= t < 1.0 for t in self.times):
            raise ValidationError("times are fractions of the horizon in [0, 1)")
        if self.jobs < 1:
            raise ValidationError("jobs must be positive")

    def resolve_patterns(self, n: int) -> list[Pattern]:
        if self.patterns == "all":
            return all_patterns(n)
        if self.patterns == "interior":
            return [tuple(range(n))]
        out = [tuple(sorted(int(i) for i in p)) for p in self.patterns]
        for p in out:
            if not p or p[0] < 0 or p[-1] >= n or len(set(p)) != len(p):
                raise ValidationError(f"invalid pattern {p} for n={n}")
        return out


@dataclass
class GenerationStats:
    instances: int = 0
    solved: int = 0
    failed: int = 0
    filtered: int = 0
    samples: int = 0
    per_pattern: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)
    solve_seconds: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["median_solve_seconds"] = float(np.median(self.solve_seconds)) if self.solve_seconds else None
        del d["solve_seconds"]
        return d


def _label_pairs(sol: FluidSolution, times) -> list[tuple[np.ndarray, np.ndarray]]:
    pairs = []
    for frac in times:
        if frac == 0.0:
            pairs.append((sol.x0.copy(), sol.u_pieces[0].copy()))
        else:
            t = frac * sol.T
            pairs.append((sol.state_at(t), sol.control_at(t).copy()))
    return pairs


def _same_label(u, v) -> bool:
    return bool(np.abs(_round_control(u) - _round_control(v)).max() <= LABEL_TOL)


def ambiguity_filter(spec: NetworkSpec, x0, scfg: DiscretizationConfig, margin: float = 0.0,
                     label=None) -> bool:
    """Keep (True) when the initial-control label at N matches the one at 2N.

    ``label`` may carry the control already computed at N. ``margin`` is
    accepted for interface stability and not used. Solver errors drop.
    """
    try:
        if label is None:
            label = solve_fluid(spec, x0, scfg).u_pieces[0]
        fine = solve_fluid(spec, x0, _doubled(scfg)).u_pieces[0]
    except Exception as exc:  # noqa: BLE001 - any solver failure means drop
        log.debug("ambiguity filter drop on solver error: %s", exc)
        return False
    return _same_label(label, fine)


def _doubled(scfg: DiscretizationConfig) -> DiscretizationConfig:
    return replace(scfg, N_intervals=2 * scfg.N_intervals)


def _solve_instance(args):
    spec, x0, scfg, times, do_filter = args
    t0 = time.perf_counter()
    try:
        sol = solve_fluid(spec, x0, scfg)
    except Exception as exc:  # noqa: BLE001 - counted, batch continues
        return "failed", f"{type(exc).__name__}: {exc}", None
    elapsed = time.perf_counter() - t0
    pairs = _label_pairs(sol, times)
    if do_filter:
        try:
            fine = solve_fluid(spec, x0, _doubled(scfg))
        except Exception as exc:  # noqa: BLE001
            return "filtered", f"{type(exc).__name__}: {exc}", elapsed
        for (_, u), (_, v) in zip(pairs, _label_pairs(fine, times)):
            if not _same_label(u, v):
                return "filtered", None, elapsed
    return "ok", pairs, elapsed


def generate(spec: NetworkSpec, gcfg: GenerationConfig,
             scfg: DiscretizationConfig = DiscretizationConfig(),
             book: LabelBook | None = None) -> tuple[Dataset, LabelBook, GenerationStats]:
    """Sample, solve and label ``M`` initial states per pattern.

    All initial states are drawn up front from one generator seeded with
    ``gcfg.seed`` and results are assembled in instance order, so output is
    independent of ``jobs``. Pass an existing ``book`` to share label ids
    between, e.g., training and test sets. Augmentation with
    ``gcfg.alphas`` is applied at the end.
    """
    book = LabelBook() if book is None else book
    rng = np.random.default_rng(gcfg.seed)
    patterns = gcfg.resolve_patterns(spec.n)
    tasks, owners = [], []
    for p in patterns:
        for _ in range(gcfg.M):
            tasks.append((spec, sample_initial_state(p, spec.n, rng), scfg,
                          tuple(gcfg.times), gcfg.filter_ambiguous))
            owners.append(p)

    if gcfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=gcfg.jobs) as pool:
            results = list(pool.map(_solve_instance, tasks, chunksize=8))
    else:
        results = [_solve_instance(t) for t in tasks]

    stats = GenerationStats(instances=len(tasks))
    X, y = [], []
    for p, (status, payload, elapsed) in zip(owners, results):
        key = ",".join(str(i + 1) for i in p)
        counts = stats.per_pattern.setdefault(key, {"solved": 0, "filtered": 0, "failed": 0})
        if elapsed is not None:
            stats.solve_seconds.append(elapsed)
        if status == "failed":
            stats.failed += 1
            counts["failed"] += 1
            if len(stats.errors) < 20:
                stats.errors.append(payload)
            continue
        stats.solved += 1
        counts["solved"] += 1
        if status == "filtered":
            stats.filtered += 1
            counts["filtered"] += 1
            continue
        for x, u in payload:
            try:
                support_pattern(x, gcfg.eps_zero)
            except EmptyPattern:
                continue
            X.append(x)
            y.append(book.canonical_label(u))

    if stats.failed > 0.2 * stats.instances:
        raise GenerationFailed(
            f"{stats.failed} of {stats.instances} instances failed; first error: {stats.errors[0]}")
    ds = Dataset(np.array(X).reshape(-1, spec.n), np.array(y, dtype=int))
    ds = augment(ds, gcfg.alphas)
    stats.samples = len(ds)
    return ds, book, stats


def augment(ds: Dataset, alphas) -> Dataset:
    """Append ``(alpha x, label)`` for every sample and every alpha."""
    alphas = [float(a) for a in alphas]
    if any(a <= 0 for a in alphas):
        raise ValidationError("alphas must be positive")
    out = ds
    for a in alphas:
        out = out.concat(Dataset(a * ds.X, ds.y))
    return out


def _check_cells(cells) -> list[set[Pattern]]:
    norm = [set(tuple(sorted(p)) for p in cell) for cell in cells]
    for i in range(len(norm)):
        for j in range(i + 1, len(norm)):
            common = norm[i] & norm[j]
            if common:
                raise OverlappingCells(f"cells {i} and {j} share patterns {sorted(common)}")
    return norm


def partition(ds: Dataset, cells, eps_zero: float = EPS_ZERO) -> tuple[list[Dataset], Dataset]:
    """Route samples to the cell containing their pattern.

    Returns one dataset per cell plus a leftover dataset with the samples
    whose pattern no cell contains (a warning is emitted when non-empty).
    """
    norm = _check_cells(cells)
    owner = {p: i for i, cell in enumerate(norm) for p in cell}
    idx = np.array([owner.get(p, -1) for p in ds.patterns(eps_zero)], dtype=int)
    parts = [ds.subset(idx == i) for i in range(len(norm))]
    leftover = ds.subset(idx == -1)
    if len(leftover):
        warnings.warn(f"{len(leftover)} samples fall in no partition cell", stacklevel=2)
    return parts, leftover


def default_jobs() -> int:
    return len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else (os.cpu_count() or 1)
