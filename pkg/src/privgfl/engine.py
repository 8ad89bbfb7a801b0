"""Privatized graph federated training loop.

One iteration runs, for every unit ``p``:

1. sample ``L`` participating agents,
2. let each run ``E_pk`` local SGD epochs from the unit's current model,
3. average the (optionally masked) local models into ``psi_p``,

then every server combines its neighbours' perturbed aggregates with the
combination matrix.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import privacy
from . import rng as _rng
from .graph import CombinationMatrix
from .tasks import AgentShard, FederatedDataset, Loss

MASKING_OFF = "off"
MASKING_SECRET_SHARING = "secret_sharing"


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    mu: float = 0.7
    rounds: int = 300
    L: int = 11
    epochs: tuple[int, int] = (1, 10)
    batch: tuple[int, int] = (5, 10)
    scheme: privacy.PerturbationScheme = field(default_factory=privacy.PerturbationScheme)
    client_masking: str = MASKING_OFF
    seed: int = 0
    workers: int = 1
    mask_scale: float = 1.0
    dh: privacy.DHParams = field(default_factory=privacy.DHParams)
    account_B: float | None = None  # gradient bound fed to the accountant column
    clip_B: float | None = None  # off by default; clips per-sample gradients when set
    track_gradients: bool = False

    def check(self, data: FederatedDataset | None = None) -> None:
        if self.mu < 0:
            raise ConfigError("mu must be nonnegative")
        if self.rounds < 0:
            raise ConfigError("rounds must be nonnegative")
        if self.L < 1:
            raise ConfigError("L must be at least 1")
        for name, (lo, hi) in (("epochs", self.epochs), ("batch", self.batch)):
            if not 1 <= lo <= hi:
                raise ConfigError(f"{name} range must satisfy 1 <= lo <= hi, got {(lo, hi)}")
        if self.client_masking not in (MASKING_OFF, MASKING_SECRET_SHARING):
            raise ConfigError(f"unknown client masking {self.client_masking!r}")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if data is not None and self.L > data.K:
            raise ConfigError(f"L = {self.L} exceeds the {data.K} agents per unit")


@dataclass
class Schedule:
    """Per-agent epoch counts and batch sizes, fixed for the whole run."""

    epochs: np.ndarray  # (P, K)
    batch: np.ndarray  # (P, K)

    @classmethod
    def draw(cls, config: TrainConfig, data: FederatedDataset) -> "Schedule":
        gen = _rng.stream(config.seed, _rng.SCHEDULE)
        shape = (data.P, data.K)
        E = gen.integers(config.epochs[0], config.epochs[1] + 1, size=shape)
        B = gen.integers(config.batch[0], config.batch[1] + 1, size=shape)
        return cls(E, np.minimum(B, data.sizes()))


@dataclass
class RoundMetrics:
    i: int
    msd_centroid: float | None = None
    msd_avg: float | None = None
    disagreement: float | None = None
    test_error: float | None = None
    epsilon: float | None = None


@dataclass
class NetworkState:
    models: np.ndarray  # (P, M)
    i: int = 0

    @property
    def P(self) -> int:
        return self.models.shape[0]


@dataclass
class RunResult:
    metrics: list[RoundMetrics]
    state: NetworkState
    max_grad_norm: float = 0.0
    error_trace: list[float] | None = None  # max_p ||w_p,i - w^o||, i = 0..T
    history: list[np.ndarray] | None = None  # (P, M) models, i = 0..T

    def series(self, name: str) -> np.ndarray:
        return np.array([getattr(m, name) for m in self.metrics], dtype=float)


# ------------------------------------------------------------ client side

def draw_batches(gen: np.random.Generator, N: int, E: int, B: int) -> np.ndarray:
    """``(E, B)`` sample indices: without replacement inside an epoch, fresh each epoch."""
    keys = gen.random((E, N))
    if B == N:
        return np.argsort(keys, axis=1, kind="stable")
    return np.argpartition(keys, B - 1, axis=1)[:, :B]


def client_update(w_start, shard: AgentShard, loss: Loss, mu: float, E: int, B: int,
                  gen: np.random.Generator) -> np.ndarray:
    """``E`` mini-batch SGD epochs with step ``mu / E``."""
    if shard.N < 1:
        raise ValueError("empty shard")
    if E < 1 or not 1 <= B <= shard.N:
        raise ValueError(f"need E >= 1 and 1 <= B <= {shard.N}, got E={E}, B={B}")
    idx = draw_batches(gen, shard.N, E, B)
    w = np.array(w_start, dtype=float)
    for e in range(E):
        U = shard.features[idx[e]]
        d = shard.labels[idx[e]]
        w = w - (mu / E) * loss.gradients(w, U, d).mean(axis=0)
    return w


def _batched_client_updates(w_start, shards, loss: Loss, mu: float, E, B, gens,
                            clip_B=None, track=False):
    """All clients of one unit at once, padded to the largest ``E`` and ``B``.

    Returns the ``(C, M)`` final local models and the largest per-sample
    gradient norm seen (0 when not tracked).
    """
    C = len(shards)
    M = w_start.shape[0]
    Emax, Bmax = int(max(E)), int(max(B))
    U = np.zeros((C, Emax, Bmax, M))
    D = np.zeros((C, Emax, Bmax))
    wts = np.zeros((C, Emax, Bmax))
    for c, (s, e, b, gen) in enumerate(zip(shards, E, B, gens)):
        idx = draw_batches(gen, s.N, int(e), int(b))
        U[c, :e, :b] = s.features[idx]
        D[c, :e, :b] = s.labels[idx]
        wts[c, :e, :b] = 1.0 / b
    E = np.asarray(E)
    W = np.repeat(w_start[None, :], C, axis=0)
    gmax = 0.0
    for e in range(Emax):
        rate = np.where(e < E, mu / E, 0.0)
        Ue = U[:, e]
        z = np.einsum("cbm,cm->cb", Ue, W)
        coef = loss.residual_coef(z, D[:, e])
        G = coef[:, :, None] * Ue + (2.0 * loss.rho) * W[:, None, :]
        if clip_B is not None or track:
            norms = np.sqrt(np.einsum("cbm,cbm->cb", G, G))
            if clip_B is not None:
                G = G * np.minimum(1.0, clip_B / np.maximum(norms, 1e-300))[:, :, None]
                norms = np.minimum(norms, clip_B)
            live = wts[:, e] > 0
            if track and live.any():
                gmax = max(gmax, float(norms[live].max()))
        g = np.einsum("cb,cbm->cm", wts[:, e], G)
        W = W - rate[:, None] * g
    return W, gmax


def sample_participants(seed: int, p: int, i: int, K: int, L: int) -> np.ndarray:
    gen = _rng.stream(seed, _rng.PARTICIPANTS, p, i)
    return np.sort(gen.choice(K, size=L, replace=False))


def server_round(p: int, w_prev, data: FederatedDataset, loss: Loss, config: TrainConfig,
                 schedule: Schedule, i: int, keyring: privacy.KeyRing | None = None,
                 return_grad_norm: bool = False):
    """Aggregate ``psi_p`` for round ``i`` (1-based) of unit ``p``."""
    ks = sample_participants(config.seed, p, i, data.K, config.L)
    gens = [_rng.stream(config.seed, _rng.BATCHES, p, k, i) for k in ks]
    local, gmax = _batched_client_updates(
        np.asarray(w_prev, dtype=float),
        [data.shards[p][k] for k in ks],
        loss, config.mu,
        schedule.epochs[p, ks], schedule.batch[p, ks], gens,
        clip_B=config.clip_B, track=config.track_gradients,
    )
    if config.client_masking == MASKING_SECRET_SHARING and keyring is not None:
        masks = privacy.client_masks(ks.tolist(), data.M, i,
                                     keyring.pairwise_seeds(ks.tolist()), config.mask_scale)
        local = local + np.stack([masks[int(k)] for k in ks])
    psi = local.sum(axis=0) / config.L
    return (psi, gmax) if return_grad_norm else psi


def combine(A, psi, link_noise: privacy.LinkNoise | None = None, iteration: int = 0) -> NetworkState:
    """``w_p = sum_m a_pm (psi_m + g_pm)``."""
    W = np.asarray(A, dtype=float)
    out = W @ np.asarray(psi, dtype=float)
    if link_noise is not None:
        out = out + link_noise.combined(W)
    return NetworkState(out, iteration)


def centroid(state) -> np.ndarray:
    models = state.models if isinstance(state, NetworkState) else np.asarray(state)
    return models.mean(axis=0)


def test_error(w, test_set: AgentShard) -> float:
    """Misclassification rate of ``1[u^T w > 0]`` against 0/1 labels."""
    if test_set is None or test_set.N == 0:
        raise ValueError("empty test set")
    pred = (test_set.features @ np.asarray(w, dtype=float) > 0).astype(float)
    return float(np.mean(pred != test_set.labels))


test_error.__test__ = False  # not a pytest test when imported into test modules


def round_metrics(i: int, models: np.ndarray, w_o=None, test_set=None,
                  epsilon: float | None = None) -> RoundMetrics:
    row = RoundMetrics(i, epsilon=epsilon)
    wc = models.mean(axis=0)
    if w_o is not None:
        row.msd_centroid = float(np.sum((wc - w_o) ** 2))
        row.msd_avg = float(np.mean(np.sum((models - w_o) ** 2, axis=1)))
        row.disagreement = float(np.mean(np.sum((models - wc) ** 2, axis=1)))
    if test_set is not None:
        row.test_error = test_error(wc, test_set)
    return row


# -------------------------------------------------------------------- run

def run(config: TrainConfig, A: CombinationMatrix, data: FederatedDataset, loss: Loss,
        w_o=None, w_init=None, keep_history: bool = False) -> RunResult:
    """Train for ``config.rounds`` iterations and emit one metrics row per iteration."""
    config.check(data)
    Wmat = np.asarray(A, dtype=float)
    if Wmat.shape != (data.P, data.P):
        raise ConfigError(
            f"combination matrix is {Wmat.shape[0]}x{Wmat.shape[1]} but the dataset has P = {data.P}"
        )
    if config.scheme.kind == privacy.HOMOMORPHIC:
        # fail before iteration 0 rather than at the first noise draw
        privacy.ghp_expand(Wmat, np.zeros((data.P, 1)))
    if w_o is not None:
        w_o = np.asarray(w_o, dtype=float)
        if w_o.shape != (data.M,):
            raise ConfigError(f"oracle has shape {w_o.shape}, expected ({data.M},)")
    M = data.M
    schedule = Schedule.draw(config, data)
    keyrings = None
    if config.client_masking == MASKING_SECRET_SHARING:
        keyrings = [privacy.KeyRing(config.dh, config.seed, p) for p in range(data.P)]
    account = None
    if config.account_B is not None and config.scheme.kind != privacy.NONE:
        account = privacy.PrivacyAccount(config.mu, config.account_B, config.scheme.sigma_g)

    models = np.zeros((data.P, M)) if w_init is None else np.array(
        np.broadcast_to(w_init, (data.P, M)), dtype=float)
    metrics: list[RoundMetrics] = []
    error_trace = None
    if w_o is not None:
        error_trace = [float(np.max(np.linalg.norm(models - w_o, axis=1)))]
    history = [models.copy()] if keep_history else None
    gmax = 0.0

    pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for i in range(1, config.rounds + 1):
                def unit(p, prev=models, i=i):
                    kr = keyrings[p] if keyrings is not None else None
                    return server_round(p, prev[p], data, loss, config, schedule, i, kr,
                                        return_grad_norm=True)

                outs = list(pool.map(unit, range(data.P))) if pool else [unit(p) for p in range(data.P)]
                psi = np.stack([o[0] for o in outs])
                gmax = max([gmax] + [o[1] for o in outs])
                noise = None
                if config.scheme.kind != privacy.NONE:
                    noise = privacy.draw_link_noise(config.scheme, Wmat, M, i, config.seed)
                models = combine(Wmat, psi, noise, i).models
                eps = account.epsilon_at(i) if account is not None else None
                metrics.append(round_metrics(i, models, w_o, data.test_set, eps))
                if error_trace is not None:
                    error_trace.append(float(np.max(np.linalg.norm(models - w_o, axis=1))))
                if history is not None:
                    history.append(models.copy())
    finally:
        if pool is not None:
            pool.shutdown()
    return RunResult(metrics, NetworkState(models, config.rounds), gmax, error_trace, history)


def steady_state(result: RunResult, name: str = "msd_centroid", window: int = 100) -> float:
    """Mean of the last ``window`` values of a metric series."""
    s = result.series(name)
    return float(np.mean(s[-window:]))

