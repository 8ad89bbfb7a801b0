"""Server graphs and their combination matrices."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from . import rng as _rng

DENSE_EIG_MAX_P = 64
STOCHASTIC_TOL = 1e-12
POWER_TOL = 1e-10
POWER_MAX_ITER = 10_000


class GraphError(ValueError):
    """Raised when a topology cannot produce a valid combination matrix."""


@dataclass(frozen=True)
class Topology:
    """Undirected graph over ``P`` servers; self-loops are implicit."""

    P: int
    edges: frozenset[tuple[int, int]] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.P < 1:
            raise GraphError(f"P must be positive, got {self.P}")
        norm = set()
        for p, m in self.edges:
            p, m = int(p), int(m)
            if not (0 <= p < self.P and 0 <= m < self.P):
                raise GraphError(f"edge ({p}, {m}) has a node outside [0, {self.P})")
            if p == m:
                continue
            norm.add((min(p, m), max(p, m)))
        object.__setattr__(self, "edges", frozenset(norm))

    @classmethod
    def from_edges(cls, P: int, edges: Iterable[Iterable[int]]) -> "Topology":
        return cls(P, frozenset(tuple(e) for e in edges))

    @classmethod
    def complete(cls, P: int) -> "Topology":
        return cls(P, frozenset((p, m) for p in range(P) for m in range(p + 1, P)))

    @classmethod
    def ring(cls, P: int) -> "Topology":
        if P <= 2:
            return cls.complete(P)
        return cls(P, frozenset((p, (p + 1) % P) for p in range(P)))

    @classmethod
    def erdos_renyi(cls, P: int, prob: float, seed: int) -> "Topology":
        """G(P, prob) drawn from a seeded stream (may be disconnected)."""
        gen = _rng.stream(seed, _rng.DATA, 0xE5)
        upper = gen.random((P, P)) < prob
        return cls(P, frozenset((p, m) for p in range(P) for m in range(p + 1, P) if upper[p, m]))

    def neighbors(self) -> list[list[int]]:
        nbrs: list[list[int]] = [[] for _ in range(self.P)]
        for p, m in sorted(self.edges):
            nbrs[p].append(m)
            nbrs[m].append(p)
        return nbrs

    def degrees(self) -> np.ndarray:
        return np.array([len(n) for n in self.neighbors()], dtype=int)

    def unreachable_from_zero(self) -> list[int]:
        nbrs = self.neighbors()
        seen = {0}
        queue = deque([0])
        while queue:
            p = queue.popleft()
            for m in nbrs[p]:
                if m not in seen:
                    seen.add(m)
                    queue.append(m)
        return [p for p in range(self.P) if p not in seen]

    def is_connected(self) -> bool:
        return not self.unreachable_from_zero()


@dataclass(frozen=True, eq=False)
class CombinationMatrix:
    weights: np.ndarray
    iota2: float

    @property
    def P(self) -> int:
        return self.weights.shape[0]

    def __array__(self, dtype=None, copy=None):
        return self.weights if dtype is None else self.weights.astype(dtype)


def build_metropolis(topology: Topology) -> CombinationMatrix:
    """Metropolis-Hastings weights ``1 / (1 + max(deg_p, deg_m))`` on each edge."""
    missing = topology.unreachable_from_zero()
    if missing:
        raise GraphError(
            f"topology is disconnected: node {missing[0]} is unreachable from node 0"
        )
    P = topology.P
    deg = topology.degrees()
    A = np.zeros((P, P))
    for p, m in topology.edges:
        A[p, m] = A[m, p] = 1.0 / (1.0 + max(deg[p], deg[m]))
    for p in range(P):
        # sum the off-diagonal row in ascending index order; the column is the same set
        A[p, p] = 1.0 - sum(A[p, m] for m in range(P) if m != p)
    return CombinationMatrix(A, second_eigenvalue_modulus(A))


def from_weights(weights) -> CombinationMatrix:
    """Wrap an explicit matrix (no validation; see :func:`validate`)."""
    A = np.array(weights, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise GraphError(f"combination matrix must be square, got shape {A.shape}")
    return CombinationMatrix(A, second_eigenvalue_modulus(A))


def second_eigenvalue_modulus(A) -> float:
    """Spectral radius of ``A - (1/P) 11^T``.

    Dense symmetric eigensolver up to ``P = 64``, deflated power iteration
    beyond that.
    """
    A = np.asarray(A, dtype=float)
    P = A.shape[0]
    D = A - np.full((P, P), 1.0 / P)
    if P <= DENSE_EIG_MAX_P:
        if np.array_equal(D, D.T):
            return float(np.max(np.abs(np.linalg.eigvalsh(D))))
        return float(np.max(np.abs(np.linalg.eigvals(D))))
    return _deflated_power_iteration(D)


def _deflated_power_iteration(D: np.ndarray) -> float:
    P = D.shape[0]
    ones = np.ones(P) / np.sqrt(P)
    x = _rng.stream(0, 0xE16).standard_normal(P)
    x -= ones * (ones @ x)
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(POWER_MAX_ITER):
        # iterate on D^2 so that +/- eigenvalue pairs of equal modulus still converge
        y = D @ (D @ x)
        y -= ones * (ones @ y)
        nrm = np.linalg.norm(y)
        if nrm == 0.0:
            return 0.0
        new = np.sqrt(nrm)
        x = y / nrm
        if abs(new - lam) <= POWER_TOL * max(new, 1e-300):
            return float(new)
        lam = new
    return float(lam)


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    detail: str = ""


@dataclass
class ValidationReport:
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def failed(self) -> list[str]:
        return [c.name for c in self.checks if not c.passed]

    def format(self) -> str:
        lines = []
        for c in self.checks:
            status = "PASS" if c.passed else "FAIL"
            lines.append(f"{status}  {c.name:<20} {c.measured!r}  {c.detail}".rstrip())
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def validate(A, tol: float = STOCHASTIC_TOL) -> ValidationReport:
    """Check the combination-matrix assumptions, collecting residuals."""
    W = np.asarray(A, dtype=float)
    if W.ndim != 2 or W.shape[0] != W.shape[1]:
        return ValidationReport([Check("square", False, float("nan"), f"shape {W.shape}")])
    row_dev = float(np.max(np.abs(W.sum(axis=1) - 1.0)))
    col_dev = float(np.max(np.abs(W.sum(axis=0) - 1.0)))
    asym = float(np.max(np.abs(W - W.T)))
    lo, hi = float(W.min()), float(W.max())
    iota2 = second_eigenvalue_modulus(W)
    min_diag = float(np.min(np.diag(W)))
    return ValidationReport([
        Check("symmetric", asym <= tol, asym, "max |a_pm - a_mp|"),
        Check("row_stochastic", row_dev <= tol, row_dev, "max |row sum - 1|"),
        Check("column_stochastic", col_dev <= tol, col_dev, "max |column sum - 1|"),
        Check("entries_in_unit", lo >= 0.0 and hi <= 1.0, lo, f"min entry (max {hi!r})"),
        Check("iota2_below_one", iota2 < 1.0 - tol, iota2, "rho(A - 11^T/P)"),
        Check("positive_diagonal", min_diag > 0.0, min_diag, "min a_pp"),
    ])
