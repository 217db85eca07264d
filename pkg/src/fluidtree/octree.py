"""Oblique decision trees trained by greedy induction with local search.

Internal nodes test ``a.x <= b`` (ties go left). Splits are found by
coordinate descent on the hyperplane coefficients: for one coefficient at a
time every critical value (where some sample changes side) is scanned and
the best Gini impurity kept, then the offset is re-scanned. Restarts
cycle through three starting directions (best axis-aligned split,
difference of class centroids, class-balanced logistic fit), with Gaussian
perturbations once each has been used. An optional cap limits the number of nonzero coefficients.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import ConvergenceWarning
from sklearn.linear_model import LogisticRegression
from sklearn.utils.validation import check_is_fitted

from .exceptions import EmptyDataset, ValidationError

MIN_DECREASE = 1e-9
IMPROVE_TOL = 1e-12


@dataclass(frozen=True)
class Hyperplane:
    a: np.ndarray
    b: float

    def nonzeros(self) -> int:
        return int(np.count_nonzero(self.a))


@dataclass
class ObliqueTree:
    """Array-free tree: ``nodes[i]`` is ``{"a", "b", "left", "right"}`` or ``{"leaf"}``."""

    nodes: list
    n_features: int
    root: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def depth(self) -> int:
        def walk(i):
            node = self.nodes[i]
            if "leaf" in node:
                return 0
            return 1 + max(walk(node["left"]), walk(node["right"]))
        return walk(self.root)

    def splits(self) -> list[tuple[int, Hyperplane]]:
        return [(i, Hyperplane(np.asarray(nd["a"]), nd["b"]))
                for i, nd in enumerate(self.nodes) if "leaf" not in nd]

    def predict_one(self, x) -> int:
        node = self.nodes[self.root]
        while "leaf" not in node:
            go_left = float(np.dot(node["a"], x)) <= node["b"]
            node = self.nodes[node["left"] if go_left else node["right"]]
        return node["leaf"]

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != self.n_features:
            raise ValidationError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.empty(len(X), dtype=int)
        stack = [(self.root, np.arange(len(X)))]
        while stack:
            i, idx = stack.pop()
            node = self.nodes[i]
            if "leaf" in node:
                out[idx] = node["leaf"]
                continue
            left = X[idx] @ np.asarray(node["a"]) <= node["b"]
            stack.append((node["left"], idx[left]))
            stack.append((node["right"], idx[~left]))
        return out

    def to_dict(self) -> dict:
        nodes = []
        for nd in self.nodes:
            if "leaf" in nd:
                nodes.append({"leaf": int(nd["leaf"])})
            else:
                nodes.append({"a": [float(v) for v in nd["a"]], "b": float(nd["b"]),
                              "left": int(nd["left"]), "right": int(nd["right"])})
        return {"nodes": nodes, "root": self.root, "depth": self.depth,
                "n_features": self.n_features, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: dict) -> "ObliqueTree":
        nodes = []
        for nd in d["nodes"]:
            if "leaf" in nd:
                nodes.append({"leaf": int(nd["leaf"])})
            else:
                nodes.append({"a": np.asarray(nd["a"], dtype=float), "b": float(nd["b"]),
                              "left": int(nd["left"]), "right": int(nd["right"])})
        n = d.get("n_features")
        if n is None:
            n = next((len(nd["a"]) for nd in nodes if "a" in nd), 0)
        return cls(nodes=nodes, n_features=int(n), root=int(d.get("root", 0)),
                   meta=dict(d.get("meta", {})))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ObliqueTree":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class TrainConfig:
    """Tree training settings.

    ``max_depth`` may be ``"auto"`` to pick from ``depth_grid`` on a
    held-out fifth of the data. ``sparsity`` is the fraction of features a
    split may use; the cap is ``ceil(sparsity * n)``.
    """

    max_depth: int | str = 5
    min_leaf: int = 5
    restarts: int = 10
    sparsity: float | None = None
    coord_iters: int = 50
    seed: int = 0
    depth_grid: tuple = (3, 5, 10)

    def __post_init__(self):
        if self.max_depth != "auto" and (not isinstance(self.max_depth, int) or self.max_depth < 0):
            raise ValidationError("max_depth must be a non-negative int or 'auto'")
        if self.min_leaf < 1 or self.restarts < 1 or self.coord_iters < 1:
            raise ValidationError("min_leaf, restarts and coord_iters must be positive")
        if self.sparsity is not None and not 0 < self.sparsity <= 1:
            raise ValidationError("sparsity must lie in (0, 1]")
        if not self.depth_grid or any(d < 0 for d in self.depth_grid):
            raise ValidationError("depth_grid must be non-empty and non-negative")

    def sparsity_k(self, n: int) -> int:
        return n if self.sparsity is None else max(1, math.ceil(self.sparsity * n))


# ---------------------------------------------------------------- split search

def _weighted_gini(left: np.ndarray, total: np.ndarray) -> np.ndarray:
    """Sum of n * gini over both children, for rows of left class counts."""
    right = total - left
    nl = left.sum(axis=-1)
    nr = right.sum(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        gl = np.where(nl > 0, nl - (left ** 2).sum(axis=-1) / nl, 0.0)
        gr = np.where(nr > 0, nr - (right ** 2).sum(axis=-1) / nr, 0.0)
    return gl + gr


def _node_impurity(counts: np.ndarray) -> float:
    k = counts.sum()
    return float(k - (counts ** 2).sum() / k) if k else 0.0


def _scan_offset(z, Y, min_leaf):
    """Best threshold on projections ``z``; returns (impurity, b) or None."""
    k = len(z)
    order = np.argsort(z, kind="stable")
    zs = z[order]
    left = np.cumsum(Y[order], axis=0)[:-1]
    nl = np.arange(1, k)
    valid = (zs[:-1] < zs[1:]) & (nl >= min_leaf) & (k - nl >= min_leaf)
    if not valid.any():
        return None
    imp = np.where(valid, _weighted_gini(left, Y.sum(axis=0)), np.inf)
    i = int(np.argmin(imp))
    return float(imp[i]), float((zs[i] + zs[i + 1]) / 2)


def _scan_coefficient(X, Y, z, a, b, j, min_leaf):
    """Best value of ``a[j]`` with the others and ``b`` fixed.

    Sample i is left iff ``w_i + a_j x_ij <= b`` with ``w = z - a_j x_j``.
    For ``x_ij > 0`` this holds below ``c_i = (b - w_i) / x_ij``, for
    ``x_ij < 0`` above it. Sweeping ``a_j`` upward through the sorted
    ``c_i``, positive samples leave the left child and negative ones join.
    Returns (impurity, value) or None.
    """
    xj = X[:, j]
    w = z - a[j] * xj
    pos, neg = xj > 0, xj < 0
    nz = pos | neg
    if not nz.any():
        return None
    zero_left = ~nz & (w <= b)
    base = Y[pos].sum(axis=0) + Y[zero_left].sum(axis=0)
    c = (b - w[nz]) / xj[nz]
    sign = np.where(pos[nz], -1.0, 1.0)
    order = np.argsort(c, kind="stable")
    cs = c[order]
    steps = np.cumsum(sign[order, None] * Y[nz][order], axis=0)
    # gap g lies between cs[g-1] and cs[g]; gap 0 is below all, gap K above all
    last = np.r_[cs[:-1] < cs[1:], True]
    lefts = np.vstack([base[None, :], base[None, :] + steps[last]])
    cuts = cs[last]
    mids = np.r_[cuts[0] - (1.0 + abs(cuts[0])), (cuts[:-1] + cuts[1:]) / 2,
                 cuts[-1] + (1.0 + abs(cuts[-1]))]
    total = Y.sum(axis=0)
    nl = lefts.sum(axis=1)
    k = len(z)
    valid = (nl >= min_leaf) & (k - nl >= min_leaf)
    if not valid.any():
        return None
    imp = np.where(valid, _weighted_gini(lefts, total), np.inf)
    g = int(np.argmin(imp))
    return float(imp[g]), float(mids[g])


def _local_search(X, Y, a, active, cap, min_leaf, iters):
    """Coordinate descent from direction ``a``; returns (impurity, a, b)."""
    a = a.copy()
    z = X @ a
    found = _scan_offset(z, Y, min_leaf)
    if found is None:
        return np.inf, a, 0.0
    imp, b = found
    active = list(active)
    for _ in range(iters):
        improved = False
        for j in active:
            res = _scan_coefficient(X, Y, z, a, b, j, min_leaf)
            if res is not None and res[0] < imp - IMPROVE_TOL:
                z += (res[1] - a[j]) * X[:, j]
                a[j] = res[1]
                imp = res[0]
                improved = True
            res = _scan_offset(z, Y, min_leaf)
            if res is not None and res[0] < imp - IMPROVE_TOL:
                imp, b = res
                improved = True
        if len(active) < cap:
            # greedy forward selection of the coordinate that helps most
            best = None
            for j in range(X.shape[1]):
                if j in active:
                    continue
                res = _scan_coefficient(X, Y, z, a, b, j, min_leaf)
                if res is not None and res[0] < imp - IMPROVE_TOL and (best is None or res[0] < best[0]):
                    best = (res[0], j, res[1])
            if best is not None:
                imp, j, value = best
                z += value * X[:, j]
                a[j] = value
                active.append(j)
                improved = True
        if not improved:
            break
    return imp, a, b


def _simplify(X, Y, a, b, imp, min_leaf):
    """Zero coefficients whose removal does not raise the impurity.

    Tried in order of increasing contribution ``|a_j| * std(x_j)``.
    """
    a = a.copy()
    spread = X.std(axis=0)
    for j in np.argsort(np.abs(a) * spread, kind="stable"):
        if a[j] == 0 or np.count_nonzero(a) == 1:
            continue
        trial = a.copy()
        trial[j] = 0.0
        res = _scan_offset(X @ trial, Y, min_leaf)
        if res is not None and res[0] <= imp + IMPROVE_TOL:
            a, (imp, b) = trial, (min(imp, res[0]), res[1])
    return imp, a, b


def _axis_direction(X, Y, min_leaf):
    best = None
    for j in range(X.shape[1]):
        res = _scan_offset(X[:, j], Y, min_leaf)
        if res is not None and (best is None or res[0] < best[0]):
            best = (res[0], j)
    if best is None:
        return None
    a = np.zeros(X.shape[1])
    a[best[1]] = 1.0
    return a


def _centroid_direction(X, y):
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2:
        return None
    top = labels[np.lexsort((labels, -counts))[:2]]
    a = X[y == top[1]].mean(axis=0) - X[y == top[0]].mean(axis=0)
    return a if np.any(a != 0) else None


def _logistic_direction(X, y):
    """Direction of a class-balanced logistic fit between the two most frequent labels."""
    labels, counts = np.unique(y, return_counts=True)
    if len(labels) < 2:
        return None
    top = labels[np.lexsort((labels, -counts))[:2]]
    mask = np.isin(y, top)
    scale = np.abs(X[mask]).max()
    if scale == 0:
        return None
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        model = LogisticRegression(C=1e4, class_weight="balanced", max_iter=500)
        model.fit(X[mask] / scale, y[mask] == top[1])
    a = model.coef_.ravel()
    return a if np.any(a != 0) else None


def _truncate(a, cap):
    if np.count_nonzero(a) <= cap:
        return a
    keep = np.argsort(-np.abs(a), kind="stable")[:cap]
    out = np.zeros_like(a)
    out[keep] = a[keep]
    return out


def _normalize(a, b):
    scale = np.linalg.norm(a)
    a, b = a / scale, b / scale
    first = np.flatnonzero(a)[0]
    if a[first] < 0:
        a, b = -a, -b
    return a + 0.0, float(b)


def best_split(X, y, config: TrainConfig = TrainConfig(), rng=None):
    """Best hyperplane for ``(X, y)`` or None when no split qualifies.

    Returns ``(Hyperplane, impurity_decrease)`` where the decrease is the
    drop in Gini impurity per sample. The hyperplane is normalized to unit
    norm with the first nonzero coefficient positive.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y)
    rng = np.random.default_rng(config.seed) if rng is None else rng
    labels, yi = np.unique(y, return_inverse=True)
    if len(labels) < 2:
        return None
    Y = np.eye(len(labels))[yi]
    k, n = X.shape
    cap = config.sparsity_k(n)
    parent = _node_impurity(Y.sum(axis=0))
    axis = _axis_direction(X, Y, config.min_leaf)
    if axis is None:
        return None
    starts = [axis] + [d for d in (_centroid_direction(X, y), _logistic_direction(X, y))
                       if d is not None]
    best = None
    for r in range(config.restarts):
        a = _truncate(starts[r % len(starts)].copy(), cap)
        if r >= len(starts):
            support = np.flatnonzero(a) if cap < n else np.arange(n)
            a[support] += rng.normal(scale=0.5 * np.linalg.norm(a), size=support.size)
        active = np.flatnonzero(a) if cap < n else np.arange(n)
        if active.size == 0:
            continue
        imp, a_r, b_r = _local_search(X, Y, a, active, cap, config.min_leaf, config.coord_iters)
        if np.isfinite(imp) and np.any(a_r != 0) and (best is None or imp < best[0] - IMPROVE_TOL):
            best = (imp, a_r, b_r)
    if best is None:
        return None
    imp, a, b = _simplify(X, Y, *best[1:], best[0], config.min_leaf)
    decrease = (parent - imp) / k
    if decrease < MIN_DECREASE:
        return None
    a, b = _normalize(a, b)
    left = X @ a <= b
    if left.sum() < config.min_leaf or (~left).sum() < config.min_leaf:
        return None
    return Hyperplane(a, b), float(decrease)


# ---------------------------------------------------------------- training

def _majority(y) -> int:
    labels, counts = np.unique(y, return_counts=True)
    return int(labels[np.argmax(counts)])  # ties -> smallest label


def _grow(X, y, config: TrainConfig, max_depth: int, rng) -> ObliqueTree:
    nodes: list = []

    def build(idx, depth):
        me = len(nodes)
        nodes.append({"leaf": _majority(y[idx])})
        if depth >= max_depth or len(idx) < 2 * config.min_leaf or len(np.unique(y[idx])) < 2:
            return me
        found = best_split(X[idx], y[idx], config, rng)
        if found is None:
            return me
        plane, _ = found
        left = X[idx] @ plane.a <= plane.b
        li = build(idx[left], depth + 1)
        ri = build(idx[~left], depth + 1)
        if "leaf" in nodes[li] and "leaf" in nodes[ri] and nodes[li]["leaf"] == nodes[ri]["leaf"]:
            # the split does not change any prediction
            nodes[me] = {"leaf": nodes[li]["leaf"]}
        else:
            nodes[me] = {"a": plane.a, "b": plane.b, "left": li, "right": ri}
        return me

    build(np.arange(len(y)), 0)
    return _compact(ObliqueTree(nodes=nodes, n_features=X.shape[1]))


def _compact(tree: ObliqueTree) -> ObliqueTree:
    """Drop unreachable nodes and renumber in depth-first order."""
    nodes: list = []

    def copy(i):
        nd = tree.nodes[i]
        me = len(nodes)
        nodes.append(dict(nd))
        if "leaf" not in nd:
            nodes[me]["left"] = copy(nd["left"])
            nodes[me]["right"] = copy(nd["right"])
        return me

    copy(tree.root)
    return ObliqueTree(nodes=nodes, n_features=tree.n_features, meta=tree.meta)


class ObliqueTreeClassifier(ClassifierMixin, BaseEstimator):
    """scikit-learn estimator wrapping the oblique tree trainer.

    Parameters mirror :class:`TrainConfig`; ``max_depth="auto"`` tunes the
    depth on a held-out fifth of the training data and refits on all of it.
    """

    def __init__(self, max_depth=5, min_leaf=5, restarts=10, sparsity=None, coord_iters=50,
                 random_state=0, depth_grid=(3, 5, 10)):
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        self.restarts = restarts
        self.sparsity = sparsity
        self.coord_iters = coord_iters
        self.random_state = random_state
        self.depth_grid = depth_grid

    def _config(self) -> TrainConfig:
        return TrainConfig(max_depth=self.max_depth, min_leaf=self.min_leaf,
                           restarts=self.restarts, sparsity=self.sparsity,
                           coord_iters=self.coord_iters, seed=int(self.random_state or 0),
                           depth_grid=tuple(self.depth_grid))

    def fit(self, X, y):
        X = np.asarray(X, dtype=float)
        y = np.asarray(y).astype(int)
        if len(y) == 0:
            raise EmptyDataset("cannot train on an empty dataset")
        if X.ndim != 2 or len(X) != len(y):
            raise ValidationError(f"inconsistent shapes {X.shape} and {y.shape}")
        config = self._config()
        if config.max_depth == "auto":
            config = _tune_on_split(X, y, config)
        rng = np.random.default_rng(config.seed)
        self.tree_ = _grow(X, y, config, int(config.max_depth), rng)
        self.tree_.meta = {"config": _config_dict(config)}
        self.classes_ = np.unique(y)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "tree_")
        return self.tree_.predict(X)


def _config_dict(config: TrainConfig) -> dict:
    d = asdict(config)
    d["depth_grid"] = list(config.depth_grid)
    return d


def _tune_on_split(X, y, config: TrainConfig) -> TrainConfig:
    rng = np.random.default_rng(config.seed)
    perm = rng.permutation(len(y))
    cut = max(1, len(y) // 5)
    if len(y) < 2:
        return replace(config, max_depth=min(config.depth_grid))
    valid, train_idx = perm[:cut], perm[cut:]
    return tune_depth((X[train_idx], y[train_idx]), (X[valid], y[valid]), config)


def train(ds, book=None, config: TrainConfig = TrainConfig()) -> ObliqueTree:
    """Fit a tree on a :class:`dataset.Dataset`; deterministic given the seed."""
    est = ObliqueTreeClassifier(
        max_depth=config.max_depth, min_leaf=config.min_leaf, restarts=config.restarts,
        sparsity=config.sparsity, coord_iters=config.coord_iters, random_state=config.seed,
        depth_grid=config.depth_grid,
    ).fit(ds.X, ds.y)
    return est.tree_


def predict(tree: ObliqueTree, x) -> int:
    return tree.predict_one(np.asarray(x, dtype=float))


def _xy(ds):
    return (ds.X, ds.y) if hasattr(ds, "X") else ds


def accuracy(tree: ObliqueTree, ds) -> float:
    X, y = _xy(ds)
    if len(y) == 0:
        raise EmptyDataset("accuracy of an empty dataset is undefined")
    return float(np.mean(tree.predict(X) == np.asarray(y)))


def tune_depth(train_ds, valid_ds, config: TrainConfig) -> TrainConfig:
    """Depth from ``config.depth_grid`` with best validation accuracy; ties -> smallest."""
    Xt, yt = _xy(train_ds)
    Xv, yv = _xy(valid_ds)
    if len(yt) == 0 or len(yv) == 0:
        raise EmptyDataset("depth tuning needs non-empty training and validation data")
    best_depth, best_acc = None, -1.0
    for depth in sorted(set(config.depth_grid)):
        tree = _grow(np.asarray(Xt, float), np.asarray(yt, int), replace(config, max_depth=depth),
                     depth, np.random.default_rng(config.seed))
        acc = float(np.mean(tree.predict(Xv) == np.asarray(yv)))
        if acc > best_acc:
            best_depth, best_acc = depth, acc
    return replace(config, max_depth=best_depth)


# ---------------------------------------------------------------- export

def _leaf_text(label, book) -> str:
    if book is None:
        return f"label {label}"
    u = book.control(label)
    classes = book.prioritized(label)
    return f"label {label}: classes {classes} u={np.array2string(u, precision=6, separator=', ')}"


def _plane_text(a, b) -> str:
    terms = " ".join(f"{v:+.6g}*x{j + 1}" for j, v in enumerate(a) if v != 0)
    return f"{terms} <= {b:.6g}"


def export(tree: ObliqueTree, book=None, fmt: str = "text") -> str:
    """Render ``tree`` as ``text``, ``dot`` or ``json``."""
    if fmt == "json":
        return tree.to_json()
    if fmt == "text":
        lines = []
        split_no = {i: s + 1 for s, (i, _) in enumerate(tree.splits())}

        def walk(i, indent):
            nd = tree.nodes[i]
            pad = "  " * indent
            if "leaf" in nd:
                lines.append(f"{pad}leaf: {_leaf_text(nd['leaf'], book)}")
                return
            lines.append(f"{pad}split {split_no[i]}: {_plane_text(nd['a'], nd['b'])}")
            walk(nd["left"], indent + 1)
            walk(nd["right"], indent + 1)

        walk(tree.root, 0)
        return "\n".join(lines) + "\n"
    if fmt == "dot":
        lines = ["digraph tree {", "  node [shape=box];"]
        for i, nd in enumerate(tree.nodes):
            if "leaf" in nd:
                lines.append(f'  n{i} [label="{_leaf_text(nd["leaf"], book)}"];')
            else:
                lines.append(f'  n{i} [label="{_plane_text(nd["a"], nd["b"])}"];')
                lines.append(f'  n{i} -> n{nd["left"]} [label="yes"];')
                lines.append(f'  n{i} -> n{nd["right"]} [label="no"];')
        lines.append("}")
        return "\n".join(lines) + "\n"
    raise ValidationError(f"unknown export format {fmt!r}")


def load_tree(text: str) -> ObliqueTree:
    return ObliqueTree.from_json(text)
