"""State evolution for LM-OAMP, damped OAMP and Bayes-optimal OAMP.

All recursions assume the LMMSE filter in module A and the Bayes-optimal
Bernoulli-Gaussian denoiser in module B. Module-A trace functionals come from a
spectrum model: the large-system geometric profile or the singular values of a
concrete operator.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .gaussian_stat import combine_weights, geometric_damping
from .prior import BgPrior, bg_error_covariance, bg_mmse

__all__ = [
    "SeError",
    "eta_geometric",
    "GeometricSpectrum",
    "EmpiricalSpectrum",
    "SeStep",
    "SeTrajectory",
    "se_bayes_step",
    "se_bayes",
    "se_general",
    "se_damped_oamp",
    "se_heuristic",
    "FixedPoint",
    "fixed_point",
]


class SeError(ArithmeticError):
    """A state-evolution stage produced a non-finite or invalid value."""


def _finite(value, stage: str, t: int | None = None):
    if not np.all(np.isfinite(value)):
        where = f" at iteration {t}" if t is not None else ""
        raise SeError(f"non-finite value in {stage}{where}")
    return value


def _log1p_ratio(u):
    """log1p(u) / u with the removable singularity at 0 filled in."""
    u = np.asarray(u, dtype=float)
    small = np.abs(u) < 1e-10
    safe = np.where(small, 1.0, u)
    return np.where(small, 1.0 - 0.5 * u, np.log1p(safe) / safe)


def eta_geometric(x, delta: float, kappa: float):
    """Large-system eta-transform of the geometric singular-value profile."""
    if kappa < 1.0:
        raise ValueError(f"kappa must be >= 1, got {kappa}")
    if not 0.0 < delta <= 1.0:
        raise ValueError(f"delta must lie in (0, 1], got {delta}")
    x = np.asarray(x, dtype=float)
    if np.any(x < 0):
        raise ValueError("eta is defined for x >= 0")
    if kappa == 1.0:
        return 1.0 - x / (1.0 + x / delta)
    k2 = kappa * kappa
    C = 2.0 * np.log(kappa) / delta
    # ln(P/Q) with P = k2-1+k2 C x, Q = k2-1+C x, written as a difference of log1p's
    return 1.0 - (np.log1p(k2 * C * x / (k2 - 1.0)) - np.log1p(C * x / (k2 - 1.0))) / C


@dataclass(frozen=True)
class GeometricSpectrum:
    """Closed-form spectrum of the geometric profile in the large-system limit."""

    delta: float
    kappa: float

    def eta(self, x):
        return eta_geometric(x, self.delta, self.kappa)

    def _eta_slope(self, xa, xb):
        """(eta(xa) - eta(xb)) / (xa - xb), stable as xa -> xb."""
        if self.kappa == 1.0:
            ra = 1.0 / (1.0 + xa / self.delta)
            rb = 1.0 / (1.0 + xb / self.delta)
            return -ra * rb
        k2 = self.kappa ** 2
        C = 2.0 * np.log(self.kappa) / self.delta
        Pb = k2 - 1.0 + k2 * C * xb
        Qb = k2 - 1.0 + C * xb
        d = xa - xb
        return -(k2 * C / Pb * _log1p_ratio(k2 * C * d / Pb)
                 - C / Qb * _log1p_ratio(C * d / Qb)) / C

    def lmmse_cross(self, a: float, b: float, sigma2: float):
        """(gamma, sigma^2 N^-1 Tr W_a W_b^T) for LMMSE filters at variances a, b."""
        dd = self._eta_slope(a / sigma2, b / sigma2) / sigma2
        gamma = self.eta(b / sigma2) + a * dd
        return float(gamma), float(-a * b * dd)


@dataclass(frozen=True)
class EmpiricalSpectrum:
    """Finite-N spectrum given by explicit singular values."""

    singular_values: np.ndarray
    N: int

    @classmethod
    def from_profile(cls, profile) -> "EmpiricalSpectrum":
        return cls(np.asarray(profile.singular_values), profile.N)

    @property
    def M(self) -> int:
        return self.singular_values.size

    def eta(self, x):
        x = np.asarray(x, dtype=float)
        lam = self.singular_values ** 2
        return ((self.N - self.M) + np.sum(1.0 / (1.0 + np.multiply.outer(x, lam)), axis=-1)) / self.N

    def lmmse_cross(self, a: float, b: float, sigma2: float):
        lam = self.singular_values ** 2 / sigma2
        ra = 1.0 / (1.0 + a * lam)
        rb = 1.0 / (1.0 + b * lam)
        gamma = ((self.N - self.M) + np.sum(ra * rb)) / self.N
        trace = a * b * np.sum(lam * ra * rb) / self.N
        return float(gamma), float(trace)


# ---------------------------------------------------------------------------
# Bayes-optimal one-dimensional recursion


@dataclass(frozen=True)
class SeStep:
    v_BA: float
    xi_A: float
    v_AB: float
    mmse: float
    xi_B: float
    v_BA_next: float


def se_bayes_step(v_BA: float, spectrum, sigma2: float, prior: BgPrior) -> SeStep:
    """One iteration of the Bayes-optimal recursion starting from v_{B->A,t,t}."""
    if not v_BA > 0:
        raise SeError(f"v_BA must be positive, got {v_BA}")
    xi_A = float(_finite(spectrum.eta(v_BA / sigma2), "eta"))
    if not 0.0 < xi_A < 1.0:
        raise SeError(f"xi_A = {xi_A} outside (0, 1)")
    v_AB = _finite(v_BA * xi_A / (1.0 - xi_A), "module A extrinsic variance")
    mmse = _finite(bg_mmse(v_AB, prior), "mmse")
    xi_B = mmse / v_AB
    if xi_B >= 1.0:
        raise SeError(f"xi_B = {xi_B} >= 1 (denoiser degenerate)")
    v_next = _finite(mmse / (1.0 - xi_B), "module B extrinsic variance")
    return SeStep(v_BA, xi_A, v_AB, mmse, xi_B, v_next)


@dataclass
class SeTrajectory:
    """Per-iteration SE scalars; index t refers to iteration t (module A then B).

    ``mse[t]`` is the predicted MSE of the module-B posterior mean after
    iteration t. The full matrices are filled only by the general recursions.
    """

    v_BA: list = field(default_factory=list)
    v_AB: list = field(default_factory=list)
    xi_A: list = field(default_factory=list)
    xi_B: list = field(default_factory=list)
    mse: list = field(default_factory=list)
    V_BA: np.ndarray | None = None
    V_AB: np.ndarray | None = None
    V_suf_A: np.ndarray | None = None
    V_suf_B: np.ndarray | None = None

    def __len__(self):
        return len(self.mse)

    def as_arrays(self):
        return {k: np.asarray(getattr(self, k)) for k in ("v_BA", "v_AB", "xi_A", "xi_B", "mse")}


def se_bayes(T: int, spectrum, sigma2: float, prior: BgPrior, v0: float = 1.0) -> SeTrajectory:
    traj = SeTrajectory()
    v = v0
    for _ in range(T):
        step = se_bayes_step(v, spectrum, sigma2, prior)
        traj.v_BA.append(step.v_BA)
        traj.v_AB.append(step.v_AB)
        traj.xi_A.append(step.xi_A)
        traj.xi_B.append(step.xi_B)
        traj.mse.append(step.mmse)
        v = step.v_BA_next
    return traj


# ---------------------------------------------------------------------------
# General recursions


def _memory(mode: str, t: int):
    if mode == "full":
        return np.arange(t + 1)
    if mode == "latest":
        return np.array([t])
    raise ValueError(f"unknown memory mode {mode!r}")


def _suf_column(V, weights, mode, t):
    """v^suf_{t',t} for t' = 0..t given per-iteration combination weights."""
    idx_t = _memory(mode, t)
    col = np.empty(t + 1)
    for tp in range(t + 1):
        idx_p = _memory(mode, tp)
        col[tp] = weights[tp] @ V[np.ix_(idx_p, idx_t)] @ weights[t]
    return col


def se_general(mode: str, T: int, spectrum, sigma2: float, prior: BgPrior,
               theta_A: float = 1.0, theta_B: float = 1.0) -> SeTrajectory:
    """General two-dimensional recursions over covariance matrices.

    ``mode`` selects the message subsets ("full": all preceding messages,
    "latest": the newest only). Geometric damping with ``theta_A``/``theta_B``
    applies to the extrinsic messages; with "full" memory it does not change
    the sufficient statistics.
    """
    ext_A = np.zeros((T, T))
    ext_B = np.zeros((T + 1, T + 1))  # index 0 is the initial message x_{B->A,0} = 0
    ext_B[0, 0] = 1.0
    V_BA = np.ones((1, 1))
    V_AB = np.zeros((0, 0))
    V_suf_A = np.zeros((T, T))
    V_suf_B = np.zeros((T, T))
    w_A, w_B = [], []
    xi_A = np.zeros(T)
    xi_B = np.zeros(T)
    traj = SeTrajectory()
    for t in range(T):
        # module A
        idx = _memory(mode, t)
        try:
            w, v_tt = combine_weights(V_BA[np.ix_(idx, idx)])
        except ValueError as exc:
            raise SeError(f"module A covariance inversion failed at iteration {t}: {exc}") from exc
        w_A.append(w)
        suf = _suf_column(V_BA, w_A, mode, t)
        suf[t] = v_tt
        V_suf_A[:t + 1, t] = V_suf_A[t, :t + 1] = suf
        xi_A[t] = float(spectrum.eta(v_tt / sigma2))
        if not 0.0 < xi_A[t] < 1.0:
            raise SeError(f"xi_A = {xi_A[t]} outside (0, 1) at iteration {t}")
        for tp in range(t + 1):
            if tp == t:
                post = xi_A[t] * v_tt
            else:
                gamma, trace = spectrum.lmmse_cross(V_suf_A[tp, tp], v_tt, sigma2)
                post = gamma * suf[tp] + trace
            ext_A[tp, t] = ext_A[t, tp] = (
                (post - xi_A[tp] * xi_A[t] * suf[tp]) / ((1.0 - xi_A[tp]) * (1.0 - xi_A[t])))
        Theta_A = geometric_damping(theta_A, t)
        V_AB = _finite(Theta_A.T @ ext_A[:t + 1, :t + 1] @ Theta_A, "module A damping", t)

        # module B
        try:
            w, b = combine_weights(V_AB[np.ix_(idx, idx)])
        except ValueError as exc:
            raise SeError(f"module B covariance inversion failed at iteration {t}: {exc}") from exc
        w_B.append(w)
        suf = _suf_column(V_AB, w_B, mode, t)
        suf[t] = b
        V_suf_B[:t + 1, t] = V_suf_B[t, :t + 1] = suf
        mmse = bg_mmse(b, prior)
        xi_B[t] = mmse / b
        if not xi_B[t] < 1.0:
            raise SeError(f"xi_B = {xi_B[t]} >= 1 at iteration {t}")
        ext_B[0, t + 1] = ext_B[t + 1, 0] = mmse / (1.0 - xi_B[t])
        for tp in range(t + 1):
            if tp == t:
                post = mmse
            else:
                post = bg_error_covariance(V_suf_B[tp, tp], b, suf[tp], prior)
            ext_B[tp + 1, t + 1] = ext_B[t + 1, tp + 1] = (
                (post - xi_B[tp] * xi_B[t] * suf[tp]) / ((1.0 - xi_B[tp]) * (1.0 - xi_B[t])))
        Theta_B = np.eye(t + 2)
        Theta_B[1:, 1:] = geometric_damping(theta_B, t)
        V_BA = _finite(Theta_B.T @ ext_B[:t + 2, :t + 2] @ Theta_B, "module B damping", t)

        traj.v_BA.append(V_suf_A[t, t])
        traj.v_AB.append(b)
        traj.xi_A.append(xi_A[t])
        traj.xi_B.append(xi_B[t])
        traj.mse.append(mmse)
    traj.V_AB = V_AB
    traj.V_BA = V_BA
    traj.V_suf_A = V_suf_A
    traj.V_suf_B = V_suf_B
    return traj


def se_damped_oamp(theta_A: float, theta_B: float, T: int, spectrum, sigma2: float,
                   prior: BgPrior) -> SeTrajectory:
    """Damped OAMP recursions written with the auxiliary cross-covariances.

    ``cA[t', t]`` is the covariance between the module-A extrinsic error at
    t' and the damped message error at t; ``cB`` is the module-B analogue with
    extrinsic indices shifted by one.
    """
    for theta in (theta_A, theta_B):
        if not 0.0 < theta <= 1.0:
            raise ValueError(f"damping factors must lie in (0, 1], got {theta}")
    tA, tB = theta_A, theta_B
    vAB = np.zeros((T, T))
    vBA = np.zeros((T + 1, T + 1))
    eA = np.zeros((T, T))
    eB = np.zeros((T + 1, T + 1))
    cA = np.zeros((T, T))
    cB = np.zeros((T + 1, T + 1))
    xiA = np.zeros(T)
    xiB = np.zeros(T)
    vBA[0, 0] = 1.0
    traj = SeTrajectory()
    for t in range(T):
        # module A: extrinsic covariances of iteration t with every t' <= t
        v = vBA[t, t]
        xiA[t] = float(spectrum.eta(v / sigma2))
        if not 0.0 < xiA[t] < 1.0:
            raise SeError(f"xi_A = {xiA[t]} outside (0, 1) at iteration {t}")
        for tp in range(t + 1):
            if tp == t:
                post = xiA[t] * v
            else:
                gamma, trace = spectrum.lmmse_cross(vBA[tp, tp], v, sigma2)
                post = gamma * vBA[tp, t] + trace
            eA[tp, t] = eA[t, tp] = (
                (post - xiA[tp] * xiA[t] * vBA[tp, t]) / ((1.0 - xiA[tp]) * (1.0 - xiA[t])))
        # cA row t (t' = t against earlier damped messages), then column t
        cA[t, 0] = eA[t, 0]
        for s in range(1, t + 1):
            cA[t, s] = tA * eA[t, s] + (1.0 - tA) * cA[t, s - 1]
        for tp in range(t):
            cA[tp, t] = tA * eA[tp, t] + (1.0 - tA) * cA[tp, t - 1]
        if t == 0:
            vAB[0, 0] = eA[0, 0]
        else:
            vAB[0, t] = tA * eA[0, t] + (1.0 - tA) * cA[0, t - 1]
            for tp in range(1, t + 1):
                vAB[tp, t] = tA * cA[tp, t] + (1.0 - tA) * vAB[tp - 1, t]
        vAB[t, :t] = vAB[:t, t]
        _finite(vAB[:t + 1, t], "module A damping", t)

        # module B
        b = vAB[t, t]
        mmse = bg_mmse(b, prior)
        xiB[t] = mmse / b
        if not xiB[t] < 1.0:
            raise SeError(f"xi_B = {xiB[t]} >= 1 at iteration {t}")
        eB[0, t + 1] = eB[t + 1, 0] = mmse / (1.0 - xiB[t])
        for tp in range(t + 1):
            post = mmse if tp == t else bg_error_covariance(vAB[tp, tp], b, vAB[tp, t], prior)
            eB[tp + 1, t + 1] = eB[t + 1, tp + 1] = (
                (post - xiB[tp] * xiB[t] * vAB[tp, t]) / ((1.0 - xiB[tp]) * (1.0 - xiB[t])))
        # cB[t', t+1] for extrinsic indices t' = 1..t+1
        cB[t + 1, 1] = eB[t + 1, 1]
        for s in range(1, t + 1):
            cB[t + 1, s + 1] = tB * eB[t + 1, s + 1] + (1.0 - tB) * cB[t + 1, s]
        for tp in range(1, t + 1):
            cB[tp, t + 1] = tB * eB[tp, t + 1] + (1.0 - tB) * cB[tp, t]
        if t == 0:
            vBA[0, 1] = eB[0, 1]
            vBA[1, 1] = eB[1, 1]
        else:
            vBA[0, t + 1] = tB * eB[0, t + 1] + (1.0 - tB) * vBA[0, t]
            vBA[1, t + 1] = tB * eB[1, t + 1] + (1.0 - tB) * cB[1, t]
            for tp in range(1, t + 1):
                vBA[tp + 1, t + 1] = tB * cB[tp + 1, t + 1] + (1.0 - tB) * vBA[tp, t + 1]
        vBA[t + 1, :t + 1] = vBA[:t + 1, t + 1]
        _finite(vBA[:t + 2, t + 1], "module B damping", t)

        traj.v_BA.append(v)
        traj.v_AB.append(b)
        traj.xi_A.append(xiA[t])
        traj.xi_B.append(xiB[t])
        traj.mse.append(mmse)
    traj.V_AB = vAB
    traj.V_BA = vBA[:T + 1, :T + 1]
    return traj


def se_heuristic(theta_A: float, theta_B: float, T: int, spectrum, sigma2: float,
                 prior: BgPrior, domain: str = "precision") -> SeTrajectory:
    """Variance-only damping, as tracked internally by heuristically damped OAMP.

    The result is the algorithm's own belief about its variances, not a
    prediction of its MSE.
    """
    if domain not in ("precision", "variance"):
        raise ValueError(f"domain must be 'precision' or 'variance', got {domain!r}")
    traj = SeTrajectory()
    v_BA = 1.0
    v_AB_prev = None
    for t in range(T):
        xi_A = float(spectrum.eta(v_BA / sigma2))
        ext_A = 1.0 / (1.0 / (xi_A * v_BA) - 1.0 / v_BA)
        v_AB = ext_A if t == 0 else heuristic_damp(ext_A, v_AB_prev, theta_A, domain)
        mmse = bg_mmse(v_AB, prior)
        ext_B = 1.0 / (1.0 / mmse - 1.0 / v_AB)
        v_next = ext_B if t == 0 else heuristic_damp(ext_B, v_BA, theta_B, domain)
        traj.v_BA.append(v_BA)
        traj.v_AB.append(v_AB)
        traj.xi_A.append(xi_A)
        traj.xi_B.append(mmse / v_AB)
        traj.mse.append(mmse)
        v_AB_prev, v_BA = v_AB, v_next
    return traj


def heuristic_damp(v_ext: float, v_prev: float, theta: float, domain: str) -> float:
    """Convex combination of the new extrinsic and previous message variance."""
    if domain == "precision":
        return 1.0 / (theta / v_ext + (1.0 - theta) / v_prev)
    return theta * v_ext + (1.0 - theta) * v_prev


# ---------------------------------------------------------------------------
# Fixed point


@dataclass(frozen=True)
class FixedPoint:
    v_AB: float
    v_BA: float
    mse: float
    iterations: int
    converged: bool


def fixed_point(stepper: Callable[[float], SeStep], tol: float = 1e-12,
                max_iter: int = 10_000, v0: float = 1.0,
                check_monotone: bool = True) -> FixedPoint:
    """Iterate ``stepper`` from v_{B->A,0,0} = v0 until |dv_{B->A}| < tol.

    The Bayes-optimal recursion is non-increasing; an increase beyond
    rounding slack raises ``SeError``.
    """
    if not tol > 0:
        raise ValueError("tol must be positive")
    v = v0
    step = None
    for it in range(1, max_iter + 1):
        step = stepper(v)
        v_next = step.v_BA_next
        if check_monotone and v_next > v * (1.0 + 1e-10) + 1e-300:
            raise SeError(f"v_BA increased at iteration {it}: {v} -> {v_next}")
        if abs(v_next - v) < tol:
            return FixedPoint(step.v_AB, v_next, step.mmse, it, True)
        v = v_next
    return FixedPoint(step.v_AB, v, step.mmse, max_iter, False)
