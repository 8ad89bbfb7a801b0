"""Federated datasets, per-sample losses and the optimum oracles."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
import numpy as np

from . import rng as _rng

REGRESSION = "regression"
CLASSIFICATION = "classification"

COV_EIG_RANGE = (0.5, 2.0)
NOISE_VAR_RANGE = (0.05, 0.5)


class DatasetError(ValueError):
    pass


class OptimumError(RuntimeError):
    pass


@dataclass
class AgentShard:
    features: np.ndarray  # (N, M)
    labels: np.ndarray  # (N,)

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=float))
        self.labels = np.asarray(self.labels, dtype=float).reshape(-1)
        if self.features.shape[0] < 1:
            raise DatasetError("a shard needs at least one sample")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels"
            )

    @property
    def N(self) -> int:
        return self.features.shape[0]

    @property
    def M(self) -> int:
        return self.features.shape[1]


@dataclass
class GroundTruth:
    w_star: np.ndarray
    covariances: np.ndarray | None = None  # (P, K, M, M)
    noise_var: np.ndarray | None = None  # (P, K)


@dataclass
class FederatedDataset:
    shards: list[list[AgentShard]]
    task_kind: str
    ground_truth: GroundTruth | None = None
    test_set: AgentShard | None = None

    def __post_init__(self):
        if not self.shards or not self.shards[0]:
            raise DatasetError("dataset grid is empty")
        K = len(self.shards[0])
        M = self.shards[0][0].M
        for p, row in enumerate(self.shards):
            if len(row) != K:
                raise DatasetError(f"unit {p} has {len(row)} agents, expected {K}")
            for k, s in enumerate(row):
                if s.M != M:
                    raise DatasetError(f"agent ({p}, {k}) has dimension {s.M}, expected {M}")

    @property
    def P(self) -> int:
        return len(self.shards)

    @property
    def K(self) -> int:
        return len(self.shards[0])

    @property
    def M(self) -> int:
        return self.shards[0][0].M

    def sizes(self) -> np.ndarray:
        return np.array([[s.N for s in row] for row in self.shards], dtype=int)

    def shard(self, p: int, k: int) -> AgentShard:
        return self.shards[p][k]

    def replace_shard(self, p: int, k: int, shard: AgentShard) -> "FederatedDataset":
        """Copy of this dataset with agent ``(p, k)``'s data swapped out."""
        grid = [list(row) for row in self.shards]
        grid[p][k] = shard
        return FederatedDataset(grid, self.task_kind, None, self.test_set)

    def stacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """All samples with weights ``1 / (P K N_pk)`` so the weighted sum is Eq.-(1) averaging."""
        U, d, wt = [], [], []
        scale = 1.0 / (self.P * self.K)
        for row in self.shards:
            for s in row:
                U.append(s.features)
                d.append(s.labels)
                wt.append(np.full(s.N, scale / s.N))
        return np.concatenate(U), np.concatenate(d), np.concatenate(wt)


def _as_grid(N, P: int, K: int) -> np.ndarray:
    counts = np.broadcast_to(np.asarray(N, dtype=int), (P, K)).copy()
    if np.any(counts < 1):
        raise DatasetError("every agent needs at least one sample")
    return counts


def _random_covariance(gen: np.random.Generator, M: int, eig_range) -> np.ndarray:
    Q, R = np.linalg.qr(gen.standard_normal((M, M)))
    Q = Q * np.sign(np.diag(R))
    lo, hi = np.log(eig_range[0]), np.log(eig_range[1])
    eig = np.exp(gen.uniform(lo, hi, M))
    return (Q * eig) @ Q.T


def generate_regression(
    P: int,
    K: int,
    N,
    M: int,
    seed: int,
    eig_range=COV_EIG_RANGE,
    noise_var_range=NOISE_VAR_RANGE,
) -> FederatedDataset:
    """Linear model ``d = u^T w* + v`` with per-agent covariance and noise level."""
    if min(P, K, M) < 1:
        raise DatasetError("P, K and M must be positive")
    counts = _as_grid(N, P, K)
    w_star = _rng.stream(seed, _rng.DATA, 0).standard_normal(M)
    covs = np.empty((P, K, M, M))
    noise_var = np.empty((P, K))
    shards = []
    for p in range(P):
        row = []
        for k in range(K):
            gen = _rng.stream(seed, _rng.DATA, 1, p, k)
            R = _random_covariance(gen, M, eig_range)
            lo, hi = noise_var_range
            if lo > 0:
                s2 = float(np.exp(gen.uniform(np.log(lo), np.log(hi))))
            else:
                s2 = float(gen.uniform(lo, hi))
            n = counts[p, k]
            U = gen.standard_normal((n, M)) @ np.linalg.cholesky(R).T
            v = np.sqrt(s2) * gen.standard_normal(n)
            covs[p, k] = R
            noise_var[p, k] = s2
            row.append(AgentShard(U, U @ w_star + v))
        shards.append(row)
    return FederatedDataset(shards, REGRESSION, GroundTruth(w_star, covs, noise_var))


def generate_classification(
    P: int,
    K: int,
    N,
    M: int,
    seed: int,
    test_size: int = 256,
    shift: float = 1.0,
    label_noise: float = 0.1,
) -> FederatedDataset:
    """Noisy linearly-separable binary data with a per-agent feature shift.

    Agent ``(p, k)`` draws ``u = z + s_pk`` with ``z ~ N(0, I)`` and a fixed
    offset ``s_pk ~ N(0, shift^2 I)``; labels are ``1[u^T w* + v > 0]``.
    The test set uses the same labelling rule without the offset.
    """
    if min(P, K, M) < 1:
        raise DatasetError("P, K and M must be positive")
    counts = _as_grid(N, P, K)
    w_star = _rng.stream(seed, _rng.DATA, 0).standard_normal(M)

    def draw(gen, n, offset):
        U = gen.standard_normal((n, M)) + offset
        v = label_noise * gen.standard_normal(n)
        return AgentShard(U, (U @ w_star + v > 0).astype(float))

    shards = []
    for p in range(P):
        row = []
        for k in range(K):
            gen = _rng.stream(seed, _rng.DATA, 1, p, k)
            offset = shift * gen.standard_normal(M)
            row.append(draw(gen, counts[p, k], offset))
        shards.append(row)
    test = draw(_rng.stream(seed, _rng.DATA, 2), test_size, 0.0) if test_size > 0 else None
    return FederatedDataset(shards, CLASSIFICATION, GroundTruth(w_star), test)


def neighbouring_shard(data: FederatedDataset, p: int, k: int, seed: int) -> AgentShard:
    """A fresh shard with the same size as agent ``(p, k)``'s, for sensitivity runs.

    Features are standard normal rescaled to the original feature spread.
    Labels follow the generating model when there is one; otherwise they are
    a random permutation of the original labels.
    """
    old = data.shard(p, k)
    gen = _rng.stream(seed, _rng.DATA, 3, p, k)
    scale = float(np.std(old.features)) or 1.0
    U = scale * gen.standard_normal(old.features.shape)
    gt = data.ground_truth
    if gt is None:
        d = gen.permutation(old.labels)
    elif data.task_kind == REGRESSION:
        d = U @ gt.w_star + 0.1 * gen.standard_normal(old.N)
    else:
        d = (U @ gt.w_star > 0).astype(float)
    return AgentShard(U, d)


# ---------------------------------------------------------------- CSV input

_DIRICHLET = re.compile(r"^\s*dirichlet\(\s*([^,]+)\s*,\s*([^)]+)\s*\)\s*$")


def partition_counts(total: int, P: int, K: int, partition) -> np.ndarray:
    """Per-agent row counts for ``"equal"``, ``"dirichlet(alpha, seed)"`` or explicit counts."""
    if isinstance(partition, str):
        m = _DIRICHLET.match(partition)
        if partition.strip() == "equal":
            base, extra = divmod(total, P * K)
            flat = np.full(P * K, base, dtype=int)
            flat[:extra] += 1
        elif m:
            alpha, seed = float(m.group(1)), int(m.group(2))
            if total < P * K:
                raise DatasetError(f"{total} rows cannot cover {P * K} agents")
            props = _rng.stream(seed, _rng.DATA, 3).dirichlet(np.full(P * K, alpha))
            # one row per agent first, remainder by largest-remainder rounding
            spare = total - P * K
            raw = props * spare
            flat = np.floor(raw).astype(int)
            left = spare - flat.sum()
            flat[np.argsort(-(raw - flat), kind="stable")[:left]] += 1
            flat += 1
        else:
            raise DatasetError(f"unknown partition spec {partition!r}")
    else:
        flat = np.asarray(partition, dtype=int).reshape(-1)
        if flat.size != P * K:
            raise DatasetError(f"partition lists {flat.size} counts, expected {P * K}")
        if flat.sum() > total:
            raise DatasetError(f"partition asks for {flat.sum()} rows, file has {total}")
    return flat.reshape(P, K)


def read_csv_rows(path) -> tuple[np.ndarray, np.ndarray]:
    labels, feats = [], []
    width = None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                vals = [float(c) for c in row]
            except ValueError:
                raise DatasetError(f"{path}: line {lineno}: non-numeric field") from None
            if len(vals) < 2:
                raise DatasetError(f"{path}: line {lineno}: need a label and at least one feature")
            if width is None:
                width = len(vals)
            elif len(vals) != width:
                raise DatasetError(
                    f"{path}: line {lineno}: {len(vals)} fields, expected {width}"
                )
            labels.append(vals[0])
            feats.append(vals[1:])
    if not labels:
        raise DatasetError(f"{path}: no data rows")
    return np.array(feats), np.array(labels)


def load_csv(path, P: int, K: int, partition="equal", task_kind: str = CLASSIFICATION,
             test_path=None) -> FederatedDataset:
    """Header-less ``label,f1,...,fM`` rows assigned to agents in file order."""
    if not Path(path).is_file():
        raise DatasetError(f"{path}: no such file")
    X, y = read_csv_rows(path)
    counts = partition_counts(len(y), P, K, partition)
    shards, start = [], 0
    for p in range(P):
        row = []
        for k in range(K):
            n = int(counts[p, k])
            if n < 1:
                raise DatasetError(f"partition assigns no rows to agent ({p}, {k})")
            row.append(AgentShard(X[start:start + n], y[start:start + n]))
            start += n
        shards.append(row)
    test = None
    if test_path is not None:
        tX, ty = read_csv_rows(test_path)
        test = AgentShard(tX, ty)
    return FederatedDataset(shards, task_kind, None, test)


# ------------------------------------------------------------------- losses

def sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


@dataclass(frozen=True)
class Loss:
    """Per-sample loss with an ``rho ||w||^2`` regularizer inside each sample."""

    kind: str
    rho: float = 0.0

    def __post_init__(self):
        if self.kind not in ("quadratic", "logistic"):
            raise ValueError(f"unknown loss kind {self.kind!r}")
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")

    @classmethod
    def for_task(cls, task_kind: str, rho: float) -> "Loss":
        return cls("quadratic" if task_kind == REGRESSION else "logistic", rho)

    def values(self, w, U, d) -> np.ndarray:
        z = U @ w
        if self.kind == "quadratic":
            base = (d - z) ** 2
        else:
            base = np.logaddexp(0.0, -(2.0 * d - 1.0) * z)
        return base + self.rho * float(w @ w)

    def residual_coef(self, z, d):
        """Scalar ``c`` such that the data part of the gradient is ``c * u``."""
        if self.kind == "quadratic":
            return 2.0 * (z - d)
        gamma = 2.0 * d - 1.0
        return -gamma * sigmoid(-gamma * z)

    def gradients(self, w, U, d) -> np.ndarray:
        """Per-sample gradients, shape ``(N, M)``."""
        c = self.residual_coef(U @ w, d)
        return c[:, None] * U + 2.0 * self.rho * w

    def risk(self, w, U, d, weights) -> float:
        return float(weights @ self.values(w, U, d))

    def risk_gradient(self, w, U, d, weights) -> np.ndarray:
        c = self.residual_coef(U @ w, d)
        return (weights * c) @ U + 2.0 * self.rho * float(weights.sum()) * w


def per_sample_gradient(loss: Loss, w, u, d) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    u = np.asarray(u, dtype=float)
    c = loss.residual_coef(float(u @ w), float(d))
    return c * u + 2.0 * loss.rho * w


# ----------------------------------------------------------------- optima

@dataclass
class OptimumBundle:
    w_o: np.ndarray
    R_u_hat: np.ndarray
    r_uv_hat: np.ndarray


def closed_form_optimum(data: FederatedDataset, rho: float) -> OptimumBundle:
    """``w^o = (R_u + rho I)^{-1} (R_u w* + r_uv)`` from the generating model."""
    if data.task_kind != REGRESSION or data.ground_truth is None:
        raise OptimumError("closed form needs a generated regression dataset")
    w_star = data.ground_truth.w_star
    M = data.M
    R = np.zeros((M, M))
    r = np.zeros(M)
    for row in data.shards:
        Rp = np.zeros((M, M))
        rp = np.zeros(M)
        for s in row:
            U = s.features
            v = s.labels - U @ w_star
            Rp += U.T @ U / s.N
            rp += U.T @ v / s.N
        R += Rp / data.K
        r += rp / data.K
    R /= data.P
    r /= data.P
    R = 0.5 * (R + R.T)
    lhs = R + rho * np.eye(M)
    rhs = R @ w_star + r
    if np.linalg.cond(lhs) > 1e12:
        raise OptimumError("R_u + rho I is singular; use rho > 0")
    w_o = np.linalg.solve(lhs, rhs)
    res = np.linalg.norm(lhs @ w_o - rhs) / max(np.linalg.norm(rhs), 1e-300)
    if res > 1e-10:
        raise OptimumError(f"linear solve residual {res:.3e} exceeds 1e-10")
    return OptimumBundle(w_o, R, r)


def curvature_bound(loss: Loss, U, weights) -> float:
    """Upper bound on the Hessian norm of the weighted risk."""
    S = U.T @ (weights[:, None] * U)
    top = float(np.linalg.eigvalsh(0.5 * (S + S.T))[-1])
    scale = 2.0 if loss.kind == "quadratic" else 0.25
    return scale * top + 2.0 * loss.rho * float(weights.sum())


def minimize_risk(loss: Loss, U, d, weights, tol: float = 1e-9, max_iter: int = 1_000_000,
                  w0=None) -> np.ndarray:
    """Full-batch gradient descent with step ``1 / L`` until ``||grad|| <= tol``."""
    w = np.zeros(U.shape[1]) if w0 is None else np.array(w0, dtype=float)
    step = 1.0 / curvature_bound(loss, U, weights)
    g = loss.risk_gradient(w, U, d, weights)
    for _ in range(max_iter):
        gn = float(np.linalg.norm(g))
        if not np.isfinite(gn):
            break
        if gn <= tol:
            return w
        w = w - step * g
        g = loss.risk_gradient(w, U, d, weights)
    raise OptimumError(
        f"gradient descent did not converge in {max_iter} iterations "
        f"(final gradient norm {np.linalg.norm(g):.3e})"
    )


def numeric_optimum(data: FederatedDataset, loss: Loss, tol: float = 1e-9,
                    max_iter: int = 1_000_000) -> np.ndarray:
    """Minimizer of the global average risk by deterministic gradient descent."""
    if loss.rho <= 0:
        raise OptimumError("numeric optimum needs rho > 0 for strong convexity")
    U, d, wt = data.stacked()
    return minimize_risk(loss, U, d, wt, tol, max_iter)


def shard_optimum(shard: AgentShard, loss: Loss, tol: float = 1e-9) -> np.ndarray:
    wt = np.full(shard.N, 1.0 / shard.N)
    return minimize_risk(loss, shard.features, shard.labels, wt, tol)


def agent_optima(data: FederatedDataset, loss: Loss, tol: float = 1e-9) -> np.ndarray:
    """Local minimizers ``w^o_{p,k}``, shape ``(P, K, M)``."""
    out = np.empty((data.P, data.K, data.M))
    for p, row in enumerate(data.shards):
        for k, s in enumerate(row):
            out[p, k] = shard_optimum(s, loss, tol)
    return out


def model_drift(w_o, optima) -> float:
    """``max_{p,k} ||w^o - w^o_{p,k}||``."""
    return float(np.max(np.linalg.norm(np.asarray(optima) - np.asarray(w_o), axis=-1)))
