"""Measurement model y = A x + w with a matrix-free structured sensing operator.

A = Sigma V^T, where V^T is a row-permuted, 1/sqrt(N)-normalized Walsh-Hadamard
transform (optionally preceded by a random sign flip) and Sigma holds M
geometric singular values with condition number kappa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, is_power_of_two
from .prior import BgPrior

__all__ = [
    "SpectralProfile",
    "SensingOperator",
    "ProblemInstance",
    "synth_singular_values",
    "fwht",
    "apply_sensing",
    "adjoint_sensing",
    "make_operator",
    "sample_problem",
    "trial_streams",
]


def synth_singular_values(M: int, N: int, kappa: float) -> np.ndarray:
    """Descending geometric singular values with N^-1 sum sigma^2 = 1."""
    if M < 2:
        raise ValueError(f"need M >= 2, got {M}")
    if N < M:
        raise ValueError(f"need N >= M, got N={N}, M={M}")
    if kappa < 1.0:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if kappa == 1.0:
        return np.full(M, np.sqrt(N / M))
    log_k = np.log(kappa)
    # sigma_0^2 = N (1 - k^{-2/(M-1)}) / (1 - k^{-2M/(M-1)}), via expm1 for accuracy
    s0_sq = N * np.expm1(-2.0 * log_k / (M - 1)) / np.expm1(-2.0 * M * log_k / (M - 1))
    m = np.arange(M)
    return np.sqrt(s0_sq) * np.exp(-m * log_k / (M - 1))


def fwht(a: np.ndarray) -> np.ndarray:
    """Unnormalized Walsh-Hadamard transform (Sylvester order) along axis 0."""
    a = np.array(a, dtype=float, copy=True)
    n = a.shape[0]
    if not is_power_of_two(n):
        raise ValueError(f"length must be a power of two, got {n}")
    tail = a.shape[1:]
    h = 1
    while h < n:
        a = a.reshape((n // (2 * h), 2, h) + tail)
        x, y = a[:, 0], a[:, 1]
        a = np.stack((x + y, x - y), axis=1)
        h *= 2
    return a.reshape((n,) + tail)


@dataclass(frozen=True)
class SpectralProfile:
    singular_values: np.ndarray
    N: int
    kappa: float

    @property
    def M(self) -> int:
        return self.singular_values.size

    @property
    def delta(self) -> float:
        return self.M / self.N

    @classmethod
    def geometric(cls, M: int, N: int, kappa: float) -> "SpectralProfile":
        return cls(synth_singular_values(M, N, kappa), N, float(kappa))

    def eta(self, x):
        """Empirical eta-transform N^-1 Tr (I + x A^T A)^-1."""
        x = np.asarray(x, dtype=float)
        lam = self.singular_values ** 2
        tot = np.sum(1.0 / (1.0 + np.multiply.outer(x, lam)), axis=-1)
        return ((self.N - self.M) + tot) / self.N


@dataclass(frozen=True)
class SensingOperator:
    profile: SpectralProfile
    row_permutation: np.ndarray
    sign_diagonal: np.ndarray | None = None

    def __post_init__(self):
        N = self.profile.N
        if not is_power_of_two(N):
            raise ValueError(f"N must be a power of two, got {N}")
        if self.row_permutation.shape != (N,):
            raise ValueError("row_permutation must have length N")
        if self.sign_diagonal is not None and self.sign_diagonal.shape != (N,):
            raise ValueError("sign_diagonal must have length N")

    @property
    def N(self) -> int:
        return self.profile.N

    @property
    def M(self) -> int:
        return self.profile.M

    def vt(self, v: np.ndarray) -> np.ndarray:
        """V^T v (orthonormal, length N)."""
        if self.sign_diagonal is not None:
            v = (self.sign_diagonal * v.T).T
        return fwht(v)[self.row_permutation] / np.sqrt(self.N)

    def v(self, u: np.ndarray) -> np.ndarray:
        """V u, the transpose of ``vt``."""
        z = np.zeros_like(u, dtype=float)
        z[self.row_permutation] = u
        out = fwht(z) / np.sqrt(self.N)
        if self.sign_diagonal is not None:
            out = (self.sign_diagonal * out.T).T
        return out

    def apply(self, v: np.ndarray) -> np.ndarray:
        sigma = self.profile.singular_values
        return (sigma * self.vt(v)[: self.M].T).T

    def adjoint(self, u: np.ndarray) -> np.ndarray:
        sigma = self.profile.singular_values
        pad = np.zeros((self.N,) + u.shape[1:])
        pad[: self.M] = (sigma * np.asarray(u, dtype=float).T).T
        return self.v(pad)

    def dense(self) -> np.ndarray:
        """Materialize A as an M x N matrix (for small-N checks only)."""
        return self.apply(np.eye(self.N))


def apply_sensing(op: SensingOperator, v: np.ndarray) -> np.ndarray:
    return op.apply(np.asarray(v, dtype=float))


def adjoint_sensing(op: SensingOperator, u: np.ndarray) -> np.ndarray:
    return op.adjoint(np.asarray(u, dtype=float))


@dataclass(frozen=True)
class ProblemInstance:
    x: np.ndarray
    y: np.ndarray
    w: np.ndarray
    sigma2: float
    operator: SensingOperator
    rho: float

    @property
    def prior(self) -> BgPrior:
        return BgPrior(self.rho)

    @property
    def N(self) -> int:
        return self.operator.N

    @property
    def M(self) -> int:
        return self.operator.M


def trial_streams(seed):
    """Independent (signal, noise, permutation) generators for one trial.

    ``seed`` is an int or a sequence of ints, e.g. ``(root_seed, trial)``.
    """
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3)]


def make_operator(profile: SpectralProfile, rng: np.random.Generator,
                  sign_flip: bool = False) -> SensingOperator:
    perm = rng.permutation(profile.N)
    signs = rng.choice(np.array([-1.0, 1.0]), size=profile.N) if sign_flip else None
    return SensingOperator(profile, perm, signs)


def sample_problem(cfg: ExperimentConfig, seed,
                   profile: SpectralProfile | None = None) -> ProblemInstance:
    """Draw (x, A, w) for one trial; deterministic in (cfg, seed).

    ``profile`` may be passed to reuse precomputed singular values.
    """
    if not 0.0 < cfg.rho <= 1.0:
        raise ValueError(f"rho must lie in (0, 1], got {cfg.rho}")
    if profile is None:
        profile = SpectralProfile.geometric(cfg.M, cfg.N, cfg.kappa)
    signal_rng, noise_rng, perm_rng = trial_streams(seed)
    prior = BgPrior(cfg.rho)
    x = prior.sample(signal_rng, cfg.N)
    op = make_operator(profile, perm_rng, cfg.sign_flip)
    sigma2 = cfg.sigma2
    w = np.sqrt(sigma2) * noise_rng.standard_normal(cfg.M)
    y = op.apply(x) + w
    return ProblemInstance(x=x, y=y, w=w, sigma2=sigma2, operator=op, rho=cfg.rho)
