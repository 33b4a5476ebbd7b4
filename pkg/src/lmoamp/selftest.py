"""Fast property checks runnable from an installed package (``lmoamp selftest``)."""

from __future__ import annotations

import numpy as np

from .gaussian_stat import combine_weights, damping_covariance, psd_guard
from .prior import BgPrior, bg_mmse, bg_posterior_mean, bg_posterior_mean_derivative
from .problem import SensingOperator, SpectralProfile
from .state_evolution import (EmpiricalSpectrum, GeometricSpectrum, eta_geometric,
                              se_bayes, se_general)


def _damping_identity(rng) -> float:
    worst = 0.0
    for _ in range(50):
        k = int(rng.integers(2, 9))
        B = rng.standard_normal((k, k))
        C = B @ B.T + k * np.eye(k)
        Theta = np.triu(rng.uniform(0.1, 1.0, (k, k)))
        Theta /= Theta.sum(axis=0)
        V = damping_covariance(C, Theta)
        one = np.ones(k)
        pc = one @ np.linalg.solve(C, one)
        pv = one @ np.linalg.solve(V, one)
        worst = max(worst, abs(pv - pc) / pc)
    return worst


def _adjoint(rng) -> float:
    profile = SpectralProfile.geometric(32, 64, 10.0)
    op = SensingOperator(profile, rng.permutation(64))
    v, u = rng.standard_normal(64), rng.standard_normal(32)
    lhs, rhs = u @ op.apply(v), op.adjoint(u) @ v
    return abs(lhs - rhs) / abs(lhs)


def _denoiser_fd(rng) -> float:
    worst, h = 0.0, 1e-5
    for _ in range(20):
        prior = BgPrior(float(rng.uniform(0.05, 1.0)))
        v, s = float(rng.uniform(0.01, 2.0)), float(rng.uniform(-3, 3))
        fd = (bg_posterior_mean(s + h, v, prior) - bg_posterior_mean(s - h, v, prior)) / (2 * h)
        worst = max(worst, abs(bg_posterior_mean_derivative(s, v, prior) - fd))
    return worst


def _eta_gap() -> float:
    profile = SpectralProfile.geometric(2048, 4096, 1e3)
    emp = EmpiricalSpectrum.from_profile(profile)
    x = np.array([0.1, 1.0, 10.0])
    return float(np.max(np.abs(emp.eta(x) - eta_geometric(x, 0.5, 1e3))))


def _se_equivalence() -> float:
    spectrum, prior = GeometricSpectrum(0.5, 1e3), BgPrior(0.1)
    a = se_bayes(12, spectrum, 1e-4, prior).as_arrays()
    b = se_general("full", 12, spectrum, 1e-4, prior).as_arrays()
    return float(max(np.max(np.abs(a[k] - b[k]) / np.abs(a[k])) for k in ("v_BA", "v_AB", "mse")))


def _guard_idempotent(rng) -> float:
    A = rng.standard_normal((6, 6))
    V = 1e-3 * (A @ A.T)
    g = psd_guard(V)
    return float(np.max(np.abs(psd_guard(g) - g)))


def _combine_variance(rng) -> float:
    A = rng.standard_normal((4, 4))
    V = A @ A.T + np.eye(4)
    w, var = combine_weights(V)
    return float(max(abs(w.sum() - 1.0), max(0.0, var - np.min(np.diag(V)))))


def _mmse_limits() -> float:
    prior = BgPrior(1.0)
    return float(max(abs(bg_mmse(v, prior) - v / (1 + v)) for v in (0.01, 0.3, 5.0)))


CHECKS = (
    ("damping-identity", lambda rng: _damping_identity(rng), 1e-8),
    ("adjoint-consistency", lambda rng: _adjoint(rng), 1e-10),
    ("denoiser-derivative", lambda rng: _denoiser_fd(rng), 1e-6),
    ("eta-transform", lambda rng: _eta_gap(), 1e-3),
    ("se-equivalence", lambda rng: _se_equivalence(), 1e-8),
    ("guard-idempotent", lambda rng: _guard_idempotent(rng), 0.0),
    ("combine-weights", lambda rng: _combine_variance(rng), 1e-12),
    ("gaussian-mmse", lambda rng: _mmse_limits(), 1e-12),
)


def run_selftest(seed: int = 0, out=print) -> bool:
    """Run every check; print one line per check and return overall success."""
    rng = np.random.default_rng(seed)
    ok = True
    for name, check, tol in CHECKS:
        value = check(rng)
        passed = bool(value <= tol)
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'} {name}: {value:.3e} (tol {tol:g})")
    return ok
