"""Measured analysis constants and empirical checks on training runs."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import engine, privacy
from .tasks import FederatedDataset, Loss


class DiagnosticsError(ValueError):
    pass


@dataclass
class TheoryConstants:
    beta_s_p_sq: np.ndarray  # (P,)
    sigma_s_p_sq: np.ndarray  # (P,)
    beta_s_sq: float
    sigma_s_sq: float
    delta: float
    nu: float
    xi: float
    B: float | None = None

    def as_dict(self) -> dict[str, float]:
        out = {
            "beta_s_sq": self.beta_s_sq,
            "sigma_s_sq": self.sigma_s_sq,
            "delta": self.delta,
            "nu": self.nu,
            "xi": self.xi,
        }
        if self.B is not None:
            out["B"] = self.B
        for p, (b, s) in enumerate(zip(self.beta_s_p_sq, self.sigma_s_p_sq)):
            out[f"beta_s_p_sq.{p}"] = float(b)
            out[f"sigma_s_p_sq.{p}"] = float(s)
        return out

    def format(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.as_dict().items())


def lipschitz_constant(data: FederatedDataset, loss: Loss) -> float:
    """Largest per-sample gradient-Lipschitz constant over the data."""
    top = max(float(np.max(np.einsum("nm,nm->n", s.features, s.features)))
              for row in data.shards for s in row)
    if loss.kind == "quadratic":
        return 2.0 * (top + loss.rho)
    return top / 4.0 + 2.0 * loss.rho


def strong_convexity(data: FederatedDataset, loss: Loss) -> float:
    if loss.kind == "logistic":
        return 2.0 * loss.rho
    M = data.M
    R = np.zeros((M, M))
    for row in data.shards:
        for s in row:
            R += s.features.T @ s.features / s.N
    R /= data.P * data.K
    return float(np.linalg.eigvalsh(2.0 * (0.5 * (R + R.T) + loss.rho * np.eye(M)))[0])


def compute_constants(data: FederatedDataset, loss: Loss, w_o, per_agent_optima,
                      epochs, L: int, B: float | None = None) -> TheoryConstants:
    """Gradient-noise constants, Lipschitz/convexity estimates and model drift.

    ``epochs`` is the ``(P, K)`` array of local epoch counts.  ``B`` is passed
    through; see :func:`measure_gradient_bound` for a pilot-run estimate.
    """
    if w_o is None or per_agent_optima is None:
        raise DiagnosticsError("constants need the global optimum and the per-agent optima")
    w_o = np.asarray(w_o, dtype=float)
    E = np.asarray(epochs, dtype=float)
    P, K = data.P, data.K
    delta = lipschitz_constant(data, loss)
    beta_p = (6.0 * delta**2 / L) * (1.0 + np.mean(1.0 / E, axis=1))
    sigma_p = np.empty(P)
    for p, row in enumerate(data.shards):
        acc = 0.0
        for k, s in enumerate(row):
            g = loss.gradients(w_o, s.features, s.labels)
            acc += (12.0 / E[p, k] + 3.0) * float(np.mean(np.einsum("nm,nm->n", g, g)))
        sigma_p[p] = acc / (L * K)
    xi = float(np.max(np.linalg.norm(np.asarray(per_agent_optima) - w_o, axis=-1)))
    return TheoryConstants(
        beta_s_p_sq=beta_p,
        sigma_s_p_sq=sigma_p,
        beta_s_sq=float(2.0 / P * np.sum(beta_p)),
        sigma_s_sq=float(np.sum(sigma_p) / P),
        delta=delta,
        nu=strong_convexity(data, loss),
        xi=xi,
        B=B,
    )


def noise_free(config: engine.TrainConfig) -> engine.TrainConfig:
    return replace(config, scheme=privacy.PerturbationScheme(), client_masking=engine.MASKING_OFF,
                   track_gradients=True)


def measure_gradient_bound(config: engine.TrainConfig, A, data: FederatedDataset,
                           loss: Loss) -> float:
    """Largest per-sample gradient norm seen along a noise-free pilot run."""
    return engine.run(noise_free(config), A, data, loss).max_grad_norm


# --------------------------------------------------------- sensitivity

@dataclass
class SensitivityTrace:
    deltas: np.ndarray  # max_p ||w_p,i - w'_p,i||, i = 1..T
    bounds: np.ndarray  # 2 mu B i
    B: float
    changed_agent: tuple[int, int] | None
    decreases: list[int] = field(default_factory=list)  # iterations where the trace shrank

    @property
    def holds(self) -> bool:
        return bool(np.all(self.deltas <= self.bounds * (1 + 1e-12) + 1e-15))

    @property
    def violations(self) -> list[int]:
        bad = self.deltas > self.bounds * (1 + 1e-12) + 1e-15
        return [int(i) + 1 for i in np.flatnonzero(bad)]

    def rows(self):
        for i, (d, b) in enumerate(zip(self.deltas, self.bounds), start=1):
            yield i, float(d), float(b)


def changed_shards(data: FederatedDataset, data_prime: FederatedDataset) -> list[tuple[int, int]]:
    if (data.P, data.K, data.M) != (data_prime.P, data_prime.K, data_prime.M):
        raise DiagnosticsError("datasets have different shapes")
    out = []
    for p in range(data.P):
        for k in range(data.K):
            a, b = data.shards[p][k], data_prime.shards[p][k]
            if a.N != b.N or not (np.array_equal(a.features, b.features)
                                  and np.array_equal(a.labels, b.labels)):
                out.append((p, k))
    return out


def sensitivity_experiment(config: engine.TrainConfig, A, data: FederatedDataset,
                           data_prime: FederatedDataset, loss: Loss,
                           seed: int | None = None) -> SensitivityTrace:
    """Coupled noise-free runs on neighbouring datasets with identical randomness.

    ``B`` is the largest per-sample gradient norm seen in either run, so the
    ``2 mu B i`` curve is a valid bound for both trajectories.
    """
    diff = changed_shards(data, data_prime)
    if len(diff) > 1:
        raise DiagnosticsError(f"datasets differ in {len(diff)} shards; expected at most one")
    if any(a.N != b.N for a, b in ((data.shards[p][k], data_prime.shards[p][k]) for p, k in diff)):
        raise DiagnosticsError("the replacement shard must keep the sample count")
    cfg = noise_free(config)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    r1 = engine.run(cfg, A, data, loss, keep_history=True)
    r2 = engine.run(cfg, A, data_prime, loss, keep_history=True)
    h1 = np.stack(r1.history[1:]) if cfg.rounds else np.zeros((0, data.P, data.M))
    h2 = np.stack(r2.history[1:]) if cfg.rounds else np.zeros((0, data.P, data.M))
    deltas = np.max(np.linalg.norm(h1 - h2, axis=2), axis=1) if cfg.rounds else np.zeros(0)
    B = max(r1.max_grad_norm, r2.max_grad_norm)
    bounds = np.array([privacy.sensitivity_bound(cfg.mu, B, i) for i in range(1, cfg.rounds + 1)])
    decreases = [int(i) + 2 for i in np.flatnonzero(np.diff(deltas) < 0)]
    return SensitivityTrace(deltas, bounds, B, diff[0] if diff else None, decreases)


# ------------------------------------------------------------ boundedness

@dataclass
class BoundednessReport:
    max_error: float
    initial_error: float
    max_grad_norm: float
    diverged: bool
    settled: bool  # no window-averaged error above every earlier window after burn-in

    def format(self) -> str:
        return "".join(f"{k} = {v!r}\n" for k, v in self.__dict__.items())


def smoothed_nonincreasing(trace, window: int = 50, rtol: float = 0.1, burn_in: int = 0) -> bool:
    """The running maximum of ``window``-means never grows (up to ``rtol``).

    Once a noisy trace reaches its stationary floor the window means keep
    jittering; what must not happen is a new high above every earlier window.
    """
    x = np.asarray(trace, dtype=float)[burn_in:]
    n = len(x) // window
    if n < 2:
        return bool(np.all(np.isfinite(x)))
    means = x[: n * window].reshape(n, window).mean(axis=1)
    envelope = np.maximum.accumulate(means)
    return bool(np.all(means[1:] <= envelope[:-1] * (1 + rtol)))


def boundedness_check(result: engine.RunResult, burn_in: int = 0,
                      window: int = 50) -> BoundednessReport:
    if result.error_trace is None:
        raise DiagnosticsError("run was made without an oracle; no error trace")
    trace = np.asarray(result.error_trace, dtype=float)
    diverged = bool(not np.all(np.isfinite(trace))
                    or not np.all(np.isfinite(result.state.models)))
    max_err = float(np.max(trace)) if not diverged else math.inf
    settled = (not diverged) and smoothed_nonincreasing(trace, window, burn_in=burn_in)
    return BoundednessReport(max_err, float(trace[0]), float(result.max_grad_norm),
                             diverged, settled)
