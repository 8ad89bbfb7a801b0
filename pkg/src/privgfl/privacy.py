"""Link perturbations, client secret-sharing masks and the privacy accountant."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import rng as _rng

NONE = "none"
INDEPENDENT = "independent_laplace"
HOMOMORPHIC = "graph_homomorphic"
SCHEMES = (NONE, INDEPENDENT, HOMOMORPHIC)

DH_MODULUS = 2**31 - 1
DH_GENERATOR = 7


class PrivacyConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PerturbationScheme:
    kind: str = NONE
    sigma_g: float = 0.0

    def __post_init__(self):
        if self.kind not in SCHEMES:
            raise PrivacyConfigError(f"unknown perturbation scheme {self.kind!r}")
        if not self.sigma_g >= 0:
            raise PrivacyConfigError(f"sigma_g must be nonnegative, got {self.sigma_g}")

    @classmethod
    def from_variance(cls, kind: str, sigma_g_sq: float) -> "PerturbationScheme":
        if sigma_g_sq < 0:
            raise PrivacyConfigError(f"sigma_g^2 must be nonnegative, got {sigma_g_sq}")
        return cls(kind, math.sqrt(sigma_g_sq))

    @property
    def active(self) -> bool:
        return self.kind != NONE and self.sigma_g > 0


# ------------------------------------------------------------------ Laplace

def laplace_from_uniform(q, scale_b):
    """Inverse CDF of ``Lap(0, b)`` at ``q - 1/2``, i.e. ``q`` in ``(-1/2, 1/2)``."""
    q = np.asarray(q, dtype=float)
    return -scale_b * np.sign(q) * np.log1p(-2.0 * np.abs(q))


def laplace(gen: np.random.Generator, scale_b: float, size=None):
    """Laplace samples with scale ``b`` (variance ``2 b^2``)."""
    if scale_b <= 0:
        raise ValueError("Laplace scale must be positive")
    q = gen.random(size) - 0.5
    # gen.random() lies in [0, 1); keep q strictly inside (-1/2, 1/2)
    q = np.maximum(q, np.nextafter(-0.5, 0.0))
    return laplace_from_uniform(q, scale_b)


def laplace_sample(gen: np.random.Generator, scale_b: float) -> float:
    return float(laplace(gen, scale_b))


# --------------------------------------------------------------- link noise

@dataclass
class LinkNoise:
    """``noise[p, m]`` is what server ``m`` adds to the message it sends to ``p``."""

    noise: np.ndarray  # (P, P, M)
    iteration: int

    def weighted_total(self, A) -> np.ndarray:
        """``sum_{p,m} a_pm g_pm`` per coordinate."""
        return np.einsum("pm,pmk->k", np.asarray(A), self.noise)

    def combined(self, A) -> np.ndarray:
        """Row ``p`` is ``sum_m a_pm g_pm``."""
        return np.einsum("pm,pmk->pk", np.asarray(A), self.noise)


def ghp_expand(A, base) -> np.ndarray:
    """Graph-homomorphic expansion of per-server base noise ``base[m]``.

    Server ``m`` sends ``base[m]`` to every neighbour and keeps
    ``-(1 - a_mm) / a_mm * base[m]`` on its self-loop.
    """
    W = np.asarray(A, dtype=float)
    base = np.asarray(base, dtype=float)
    diag = np.diag(W)
    if np.any(diag <= 0):
        bad = int(np.argmin(diag))
        raise PrivacyConfigError(
            f"graph-homomorphic noise needs a_pp > 0; server {bad} has a_pp = {diag[bad]}"
        )
    P = W.shape[0]
    G = np.where((W > 0)[:, :, None], base[None, :, :], 0.0)
    G[np.arange(P), np.arange(P)] = -((1.0 - diag) / diag)[:, None] * base
    return G


def draw_link_noise(scheme: PerturbationScheme, A, M: int, iteration: int,
                    seed: int) -> LinkNoise:
    """Per-link noise for one combination step.

    All servers' draws for iteration ``i`` come from one stream keyed by
    ``(seed, i)``; row ``m`` of the draw belongs to server ``m``.
    """
    W = np.asarray(A, dtype=float)
    P = W.shape[0]
    G = np.zeros((P, P, M))
    if not scheme.active:
        if scheme.kind == HOMOMORPHIC:
            ghp_expand(W, np.zeros((P, M)))  # same configuration check as the noisy path
        return LinkNoise(G, iteration)
    b = scheme.sigma_g / math.sqrt(2.0)
    gen = _rng.stream(seed, _rng.LINK_NOISE, iteration)
    if scheme.kind == HOMOMORPHIC:
        return LinkNoise(ghp_expand(W, laplace(gen, b, (P, M))), iteration)
    draws = laplace(gen, b, (P, P, M))  # draws[m, p] is what m sends to p
    G[:] = np.where((W > 0)[:, :, None], draws.transpose(1, 0, 2), 0.0)
    return LinkNoise(G, iteration)


# ------------------------------------------------------- Diffie-Hellman

def modpow(base: int, exponent: int, modulus: int) -> int:
    """Right-to-left square-and-multiply."""
    if modulus == 1:
        return 0
    result = 1
    base %= modulus
    while exponent > 0:
        if exponent & 1:
            result = (result * base) % modulus
        base = (base * base) % modulus
        exponent >>= 1
    return result


@dataclass(frozen=True)
class DHParams:
    t: int = DH_MODULUS
    v: int = DH_GENERATOR


def dh_keygen(params: DHParams, secret: int) -> int:
    if not 1 <= secret < params.t - 1:
        raise ValueError(f"secret key must lie in [1, {params.t - 2}], got {secret}")
    return modpow(params.v, secret, params.t)


def dh_shared_secret(params: DHParams, secret: int, their_public: int) -> int:
    if not 1 <= their_public < params.t:
        raise ValueError(f"public key must lie in [1, {params.t - 1}], got {their_public}")
    return modpow(their_public, secret, params.t)


@dataclass
class KeyRing:
    """Deterministic DH key material for the agents of one unit."""

    params: DHParams
    seed: int
    unit: int
    _secrets: dict = field(default_factory=dict, repr=False)
    _publics: dict = field(default_factory=dict, repr=False)

    def secret(self, k: int) -> int:
        if k not in self._secrets:
            gen = _rng.stream(self.seed, _rng.DH_SECRET, self.unit, k)
            self._secrets[k] = int(gen.integers(1, self.params.t - 1))
        return self._secrets[k]

    def public(self, k: int) -> int:
        if k not in self._publics:
            self._publics[k] = dh_keygen(self.params, self.secret(k))
        return self._publics[k]

    def pairwise_seeds(self, participants: Sequence[int]) -> dict[tuple[int, int], int]:
        """Shared secret for each pair ``j < k``, computed from ``j``'s side."""
        ids = sorted(participants)
        return {
            (j, k): dh_shared_secret(self.params, self.secret(j), self.public(k))
            for a, j in enumerate(ids) for k in ids[a + 1:]
        }


# ---------------------------------------------------------- client masks

def mask_prg(pair_seed: int, iteration: int, M: int, scale: float = 1.0) -> np.ndarray:
    return _rng.counter_stream(pair_seed, iteration).uniform(-scale, scale, M)


def client_masks(participants: Sequence[int], M: int, iteration: int,
                 pairwise_seeds: Mapping[tuple[int, int], int],
                 scale: float = 1.0) -> dict[int, np.ndarray]:
    """Antisymmetric pairwise masks: agent ``k`` adds ``PRG(k, j)`` for ``j > k``
    and subtracts ``PRG(j, k)`` for ``j < k``, so the masks sum to zero."""
    ids = sorted(participants)
    masks = {k: np.zeros(M) for k in ids}
    for a, j in enumerate(ids):
        for k in ids[a + 1:]:
            try:
                seed = pairwise_seeds[(j, k)]
            except KeyError:
                raise KeyError(f"no pairwise seed for agents ({j}, {k})") from None
            r = mask_prg(seed, iteration, M, scale)
            masks[j] += r
            masks[k] -= r
    return masks


# ------------------------------------------------------------ accountant

def epsilon_of_sigma(mu: float, B: float, sigma_g: float, i: int) -> float:
    if i < 1:
        raise ValueError("iteration must be >= 1")
    if sigma_g == 0:
        return math.inf
    return math.sqrt(2.0) * mu * B * (1 + i) * i / sigma_g


def sigma_for_epsilon(mu: float, B: float, i: int, epsilon_target: float) -> float:
    if not epsilon_target > 0:
        raise ValueError(f"epsilon must be positive, got {epsilon_target}")
    if i < 1:
        raise ValueError("iteration must be >= 1")
    return math.sqrt(2.0) * mu * B * (1 + i) * i / epsilon_target


def sensitivity_bound(mu: float, B: float, i: int) -> float:
    """Worst-case trajectory divergence ``2 mu B i`` after one agent's data is swapped."""
    if i < 0:
        raise ValueError("iteration must be >= 0")
    return 2.0 * mu * B * i


@dataclass(frozen=True)
class PrivacyAccount:
    mu: float
    B: float
    sigma_g: float

    def epsilon_at(self, i: int) -> float:
        return epsilon_of_sigma(self.mu, self.B, self.sigma_g, i)

    def schedule(self, rounds: int) -> list[float]:
        return [self.epsilon_at(j) for j in range(1, rounds + 1)]


def epsilon_of(account: PrivacyAccount, i: int) -> float:
    return account.epsilon_at(i)
