"""Multiclass fluid queueing network instances.

A network is described by per-class service rates, external arrival rates,
holding costs, a deterministic successor for each class and the server
that processes it. From these we derive the flow matrix ``A`` (so that
``dx/dt = A u + lambda``) and the server constituency matrix ``D``.

Class and server indices are 0-based in Python and 1-based in the JSON
file format.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np

from .exceptions import SingularFlowMatrix, ValidationError

COND_LIMIT = 1e12

# Reentrant instance with m = 7 printed in the experiments section (rates
# and costs rounded to three decimals there; the arrival rate is not given).
REENTRANT_M7_MU = (
    0.143, 0.253, 0.002, 0.287, 0.169, 0.278, 0.22, 0.11, 0.207, 0.216, 0.299,
    0.004, 0.185, 0.205, 0.25, 0.268, 0.027, 0.028, 0.245, 0.168, 0.248,
)
REENTRANT_M7_C = (
    0.705, 0.235, 0.972, 0.968, 0.719, 0.107, 1.484, 1.395, 0.493, 0.746, 1.584,
    1.512, 0.07, 0.892, 1.255, 0.305, 1.941, 1.496, 0.643, 1.021, 1.975,
)


class StabilityWarning(UserWarning):
    """Some server has workload >= 1."""


@dataclass(frozen=True)
class NetworkSpec:
    """An MFQNET instance.

    Attributes:
        mu: service rate per class.
        lam: external arrival rate per class.
        c: holding cost per unit of fluid per unit time.
        successor: class that a job becomes after service, ``None`` to exit.
        server_of: server processing each class.
        m: number of servers.
    """

    mu: tuple[float, ...]
    lam: tuple[float, ...]
    c: tuple[float, ...]
    successor: tuple[int | None, ...]
    server_of: tuple[int, ...]
    m: int

    def __post_init__(self):
        for name in ("mu", "lam", "c", "successor", "server_of"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        object.__setattr__(self, "mu", tuple(float(v) for v in self.mu))
        object.__setattr__(self, "lam", tuple(float(v) for v in self.lam))
        object.__setattr__(self, "c", tuple(float(v) for v in self.c))
        object.__setattr__(
            self, "successor",
            tuple(None if s is None else int(s) for s in self.successor))
        object.__setattr__(self, "server_of", tuple(int(s) for s in self.server_of))
        object.__setattr__(self, "m", int(self.m))
        validate(self)

    @property
    def n(self) -> int:
        return len(self.mu)

    @cached_property
    def A(self) -> np.ndarray:
        return build_matrices(self)[0]

    @cached_property
    def D(self) -> np.ndarray:
        return build_matrices(self)[1]

    @property
    def mu_arr(self) -> np.ndarray:
        return np.asarray(self.mu)

    @property
    def lam_arr(self) -> np.ndarray:
        return np.asarray(self.lam)

    @property
    def c_arr(self) -> np.ndarray:
        return np.asarray(self.c)

    def constituents(self, server: int) -> list[int]:
        return [i for i, s in enumerate(self.server_of) if s == server]

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "m": self.m,
            "mu": list(self.mu),
            "lambda": list(self.lam),
            "c": list(self.c),
            "successor": ["exit" if s is None else s + 1 for s in self.successor],
            "server_of": [s + 1 for s in self.server_of],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            succ = [None if s == "exit" else int(s) - 1 for s in d["successor"]]
            spec = cls(
                mu=d["mu"], lam=d["lambda"], c=d["c"], successor=succ,
                server_of=[int(s) - 1 for s in d["server_of"]], m=d["m"],
            )
        except KeyError as exc:
            raise ValidationError(f"network spec is missing key {exc}") from None
        if "n" in d and int(d["n"]) != spec.n:
            raise ValidationError(f"n={d['n']} does not match {spec.n} rates")
        return spec


def validate(spec: NetworkSpec) -> None:
    """Check the structural invariants of ``spec``; raise ValidationError."""
    n = len(spec.mu)
    if n == 0:
        raise ValidationError("network needs at least one class")
    for name in ("lam", "c", "successor", "server_of"):
        if len(getattr(spec, name)) != n:
            raise ValidationError(f"{name} has length {len(getattr(spec, name))}, expected {n}")
    mu, lam, c = (np.asarray(v, dtype=float) for v in (spec.mu, spec.lam, spec.c))
    if not np.all(np.isfinite(mu)) or np.any(mu <= 0):
        raise ValidationError("service rates must be positive")
    if not np.all(np.isfinite(lam)) or np.any(lam < 0):
        raise ValidationError("arrival rates must be non-negative")
    if not np.all(np.isfinite(c)) or np.any(c <= 0):
        raise ValidationError("holding costs must be positive")
    if spec.m < 1:
        raise ValidationError("network needs at least one server")
    for i, s in enumerate(spec.successor):
        if s is not None and not (0 <= s < n and s != i):
            raise ValidationError(f"class {i + 1} has invalid successor {s + 1}")
    for i, s in enumerate(spec.server_of):
        if not 0 <= s < spec.m:
            raise ValidationError(f"class {i + 1} assigned to unknown server {s + 1}")
    empty = sorted(set(range(spec.m)) - set(spec.server_of))
    if empty:
        raise ValidationError(f"servers without classes: {[j + 1 for j in empty]}")


def build_matrices(spec: NetworkSpec) -> tuple[np.ndarray, np.ndarray]:
    """Return the flow matrix ``A`` (n x n) and constituency matrix ``D`` (m x n).

    Both arrays are read-only. Raises SingularFlowMatrix when the condition
    number of ``A`` exceeds 1e12 (e.g. routing cycles).
    """
    n = spec.n
    A = np.zeros((n, n))
    for j in range(n):
        A[j, j] = -spec.mu[j]
        if spec.successor[j] is not None:
            A[spec.successor[j], j] = spec.mu[j]
    D = np.zeros((spec.m, n))
    D[list(spec.server_of), np.arange(n)] = 1.0
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularFlowMatrix(f"flow matrix is numerically singular (cond={cond:.3g})")
    A.flags.writeable = False
    D.flags.writeable = False
    return A, D


def workload(spec: NetworkSpec, warn: bool = True) -> np.ndarray:
    """Workload per server, ``rho = -D A^{-1} lambda``.

    Emits StabilityWarning when any component is >= 1.
    """
    A, D = spec.A, spec.D
    rho = D @ np.linalg.solve(-A, spec.lam_arr)
    rho[np.abs(rho) < 1e-15] = 0.0
    if warn and np.any(rho >= 1.0):
        warnings.warn(f"unstable network: workload {rho}", StabilityWarning, stacklevel=2)
    return rho


def is_stable(spec: NetworkSpec) -> bool:
    return bool(np.all(workload(spec, warn=False) < 1.0))


def make_crisscross(mu=(1.5, 1.0, 2.0), lambda1=0.5, lambda2=0.5, c=(1.0, 1.0, 1.0)) -> NetworkSpec:
    """Criss-cross network: classes 1, 2 on server 1, class 3 on server 2.

    Class 1 turns into class 3 after service; classes 2 and 3 exit.

    The defaults reproduce the worked example whose switching curve is
    ``x1 = 6 x3``: class 2 (the exiting class at server 1) has rate 1 and
    class 3 (server 2) has rate 2. With these two rates swapped the
    threshold moves away from 6.
    """
    if len(mu) != 3 or len(c) != 3:
        raise ValidationError("criss-cross needs 3 rates and 3 costs")
    return NetworkSpec(
        mu=mu, lam=(lambda1, lambda2, 0.0), c=c,
        successor=(2, None, None), server_of=(0, 0, 1), m=2,
    )


def make_rybko_stolyar(mu=(6.0, 1.5, 6.0, 1.5), lambda1=1.0, lambda3=1.0,
                       c=(1.0, 1.0, 1.0, 1.0)) -> NetworkSpec:
    """Rybko-Stolyar network: 1 -> 2 and 3 -> 4; server 1 owns classes 1 and 4."""
    if len(mu) != 4 or len(c) != 4:
        raise ValidationError("Rybko-Stolyar needs 4 rates and 4 costs")
    return NetworkSpec(
        mu=mu, lam=(lambda1, 0.0, lambda3, 0.0), c=c,
        successor=(1, None, 3, None), server_of=(0, 1, 1, 0), m=2,
    )


def make_reentrant(m: int, mu, lambda1: float, c) -> NetworkSpec:
    """Reentrant line with ``m`` servers and ``3m`` classes.

    Server i owns classes 3i, 3i+1, 3i+2 (0-based). Each of the three
    streams moves one server down the line per service; the first stream
    re-enters server 0 as the second, the second as the third, and the
    third exits after the last server. Only class 0 has external arrivals.
    """
    if m < 1:
        raise ValidationError("reentrant network needs m >= 1")
    n = 3 * m
    if len(mu) != n or len(c) != n:
        raise ValidationError(f"reentrant network with m={m} needs {n} rates and costs")
    succ: list[int | None] = []
    for i in range(m):
        for r in range(3):
            if i < m - 1:
                succ.append(3 * (i + 1) + r)
            else:
                succ.append((1, 2, None)[r])
    lam = [0.0] * n
    lam[0] = lambda1
    return NetworkSpec(
        mu=mu, lam=lam, c=c, successor=succ,
        server_of=[i // 3 for i in range(n)], m=m,
    )


def random_reentrant(m: int, rng: np.random.Generator, load: float = 0.8,
                     mu_range=(0.5, 2.0), c_range=(0.1, 2.0)) -> NetworkSpec:
    """Reentrant line with uniform random rates and costs.

    The arrival rate is set so that the busiest server has workload ``load``.
    """
    if not 0 < load < 1:
        raise ValidationError("load must lie in (0, 1)")
    n = 3 * m
    mu = rng.uniform(*mu_range, size=n)
    c = rng.uniform(*c_range, size=n)
    probe = make_reentrant(m, mu, 1.0, c)
    lam1 = load / workload(probe, warn=False).max()
    return make_reentrant(m, mu, lam1, c)


def save_spec(spec: NetworkSpec, path) -> None:
    Path(path).write_text(json.dumps(spec.to_dict(), indent=2) + "\n")


def load_spec(path) -> NetworkSpec:
    return NetworkSpec.from_dict(json.loads(Path(path).read_text()))
