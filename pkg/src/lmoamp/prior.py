"""Bernoulli-Gaussian prior: scalar MMSE denoiser, its calculus and expectations.

Signal model: ``x ~ N(0, 1/rho)`` with probability ``rho`` and ``x = 0``
otherwise, observed as ``s = x + z`` with ``z ~ N(0, v)``. The prior has
unit second moment for every ``rho``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Protocol

import numpy as np
from scipy.special import expit

__all__ = [
    "BgPrior",
    "DenoiserEval",
    "ScalarDenoiser",
    "BayesDenoiser",
    "LinearDenoiser",
    "bg_posterior_mean",
    "bg_posterior_mean_derivative",
    "bg_posterior_variance",
    "bg_posterior_second_moment",
    "bg_mmse",
    "bg_posterior_covariance",
    "bg_error_covariance",
    "evaluate_denoiser",
    "consistent_cov_terms",
    "consistent_cov_estimate",
    "NESTED_RTOL",
]

# Relative tolerance under which E[W_t' W_t] = E[W_t^2] is treated as nested.
NESTED_RTOL = 1e-10

# Standard-normal half-width of the composite quadrature rules.
_Z_MAX = 10.0
_GL_ORDER = 10
_GL_ORDER_2D = 6


@dataclass(frozen=True)
class BgPrior:
    rho: float

    def __post_init__(self):
        if not 0.0 < self.rho <= 1.0:
            raise ValueError(f"rho must lie in (0, 1], got {self.rho}")

    @property
    def component_variance(self) -> float:
        return 1.0 / self.rho

    @property
    def second_moment(self) -> float:
        return self.rho * self.component_variance

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        active = rng.random(n) < self.rho
        values = rng.standard_normal(n) * np.sqrt(self.component_variance)
        return np.where(active, values, 0.0)

    def components(self):
        """(weight, variance) pairs of the mixture."""
        if self.rho == 1.0:
            return ((1.0, self.component_variance),)
        return ((1.0 - self.rho, 0.0), (self.rho, self.component_variance))

    def transition_point(self, v: float) -> float:
        """|s| at which the posterior activity probability crosses 1/2."""
        if self.rho == 1.0:
            return 0.0
        g = _gain(v, self)
        q = 2.0 * np.log((1.0 - self.rho) / self.rho) + np.log1p(self.component_variance / v)
        return float(np.sqrt(max(q, 0.0) * v / g))


def _check_v(v):
    if not np.all(np.asarray(v) > 0):
        raise ValueError(f"noise variance must be positive, got {v}")


def _gain(v, prior: BgPrior):
    lam = prior.component_variance
    return lam / (lam + v)


def _activity(s, v, prior: BgPrior):
    """Posterior probability that x is drawn from the Gaussian component."""
    if prior.rho == 1.0:
        return np.ones_like(s, dtype=float)
    lam = prior.component_variance
    g = lam / (lam + v)
    logit = (np.log(prior.rho / (1.0 - prior.rho)) - 0.5 * np.log1p(lam / v)
             + 0.5 * s * s * g / v)
    return expit(logit)


def bg_posterior_mean(s, v, prior: BgPrior):
    """E[x | x + z = s] for z ~ N(0, v)."""
    _check_v(v)
    s = np.asarray(s, dtype=float)
    return _activity(s, v, prior) * _gain(v, prior) * s


def bg_posterior_mean_derivative(s, v, prior: BgPrior):
    _check_v(v)
    s = np.asarray(s, dtype=float)
    g = _gain(v, prior)
    pi = _activity(s, v, prior)
    return g * pi + (g * s) ** 2 * pi * (1.0 - pi) / v


def bg_posterior_second_moment(s, v, prior: BgPrior):
    """E[x^2 | s]."""
    _check_v(v)
    s = np.asarray(s, dtype=float)
    g = _gain(v, prior)
    return _activity(s, v, prior) * (g * g * s * s + g * v)


def bg_posterior_variance(s, v, prior: BgPrior):
    _check_v(v)
    s = np.asarray(s, dtype=float)
    g = _gain(v, prior)
    pi = _activity(s, v, prior)
    return pi * g * v + pi * (1.0 - pi) * (g * s) ** 2


# ---------------------------------------------------------------------------
# Quadrature
#
# The posterior activity switches from 0 to 1 over a band around
# ``transition_point(v)`` whose width shrinks with v. A global Gauss-Hermite
# rule cannot resolve that band for small v, so expectations use composite
# Gauss-Legendre panels in the standard-normal variable with extra breakpoints
# placed on the band.


@lru_cache(maxsize=None)
def _gl(n: int):
    return np.polynomial.legendre.leggauss(n)


_BASE_EDGES = np.arange(-_Z_MAX, _Z_MAX + 0.5, 1.0)
_BAND_OFFSETS = np.array([-40.0, -25.0, -16.0, -10.0, -6.0, -3.0, -1.5, -0.5, 0.0,
                          0.5, 1.5, 3.0, 6.0, 10.0, 16.0, 25.0, 40.0])


def _band_points(v: float, prior: BgPrior) -> np.ndarray:
    """Breakpoints (in s units, both signs) around the activity transition."""
    if prior.rho == 1.0:
        return np.empty(0)
    s_tr = prior.transition_point(v)
    width = v / (_gain(v, prior) * max(s_tr, np.sqrt(v)))
    pts = np.abs(s_tr + width * _BAND_OFFSETS)
    return np.concatenate((pts, -pts))


def _panel_rule(edges: np.ndarray, order: int = _GL_ORDER):
    """Nodes and weights of a composite Gauss-Legendre rule.

    ``edges`` has shape (..., P + 1) and is sorted along the last axis. The
    returned weights include the standard normal density, so ``sum(w * h(z))``
    approximates E[h(Z)] for Z ~ N(0, 1).
    """
    x, w = _gl(order)
    lo = edges[..., :-1, None]
    half = 0.5 * (edges[..., 1:, None] - lo)
    nodes = lo + half * (x + 1.0)
    weights = half * w
    shape = edges.shape[:-1] + (-1,)
    nodes = nodes.reshape(shape)
    weights = weights.reshape(shape) * np.exp(-0.5 * nodes * nodes) / np.sqrt(2.0 * np.pi)
    return nodes, weights


def _z_edges(extra_z: np.ndarray) -> np.ndarray:
    """Sorted panel edges along the last axis: base grid plus clipped extras."""
    extra_z = np.clip(extra_z, -_Z_MAX, _Z_MAX)
    base = np.broadcast_to(_BASE_EDGES, extra_z.shape[:-1] + _BASE_EDGES.shape)
    return np.sort(np.concatenate((base, extra_z), axis=-1), axis=-1)


def normal_rule(scale: float, s_breaks=(), order: int = _GL_ORDER):
    """Rule for E[h(S)], S ~ N(0, scale^2); returns (s_nodes, weights)."""
    z_extra = np.asarray(s_breaks, dtype=float) / scale if scale > 0 else np.empty(0)
    z, w = _panel_rule(_z_edges(z_extra), order)
    return scale * z, w


def bg_mmse(v: float, prior: BgPrior) -> float:
    """E[(x - f(x + z))^2] for z ~ N(0, v)."""
    _check_v(v)
    if prior.rho == 1.0:
        return v / (1.0 + v)
    total = 0.0
    breaks = _band_points(v, prior)
    for weight, var in prior.components():
        s, w = normal_rule(np.sqrt(var + v), breaks)
        total += weight * np.dot(w, bg_posterior_variance(s, v, prior))
    return float(total)


# ---------------------------------------------------------------------------
# Bivariate posterior covariance


def _nested_kind(a: float, b: float, c: float) -> str | None:
    if abs(c - b) <= NESTED_RTOL * max(abs(b), abs(c)):
        return "later"
    if abs(c - a) <= NESTED_RTOL * max(abs(a), abs(c)):
        return "earlier"
    return None


def _reduce_pair(v_matrix):
    """Weights and variance of the scalar sufficient statistic of a 2x2 model."""
    v_matrix = np.asarray(v_matrix, dtype=float)
    if v_matrix.shape != (2, 2):
        raise ValueError("v_matrix must be 2x2")
    a, c1, c2, b = v_matrix.ravel()
    if c1 != c2:
        raise ValueError("v_matrix must be symmetric")
    if a <= 0 or b <= 0:
        raise ValueError("v_matrix must have a positive diagonal")
    c = c1
    kind = _nested_kind(a, b, c)
    if kind == "later":
        return 0.0, 1.0, b, (a, b, c)
    if kind == "earlier":
        return 1.0, 0.0, a, (a, b, c)
    det = a * b - c * c
    if det <= 0:
        raise ValueError("singular noise covariance without nested structure")
    denom = a + b - 2.0 * c
    return (b - c) / denom, (a - c) / denom, det / denom, (a, b, c)


def bg_posterior_covariance(s_prime, s, v_matrix, prior: BgPrior):
    """C(s', s) = E[(x - f'(s'))(x - f(s)) | s', s].

    ``f'`` and ``f`` are the posterior means given ``s'`` alone (noise
    variance ``v_matrix[0, 0]``) and ``s`` alone (``v_matrix[1, 1]``).
    """
    alpha, beta, v_stat, (a, b, _) = _reduce_pair(v_matrix)
    s_prime = np.asarray(s_prime, dtype=float)
    s = np.asarray(s, dtype=float)
    stat = alpha * s_prime + beta * s
    m = bg_posterior_mean(stat, v_stat, prior)
    var = bg_posterior_variance(stat, v_stat, prior)
    if alpha == 0.0:
        # s is sufficient, so E[x | s', s] = f(s) and the cross term vanishes
        return var + np.zeros(np.broadcast(s_prime, s).shape)
    return var + (m - bg_posterior_mean(s_prime, a, prior)) * (m - bg_posterior_mean(s, b, prior))


def bg_error_covariance(a: float, b: float, c: float, prior: BgPrior) -> float:
    """E[(f'(s') - x)(f(s) - x)] with noise covariance [[a, c], [c, b]].

    The nested cases reduce exactly to ``bg_mmse``; otherwise a product
    composite rule integrates the posterior covariance over the joint law
    of (s', s).
    """
    kind = _nested_kind(a, b, c)
    if kind == "later":
        return bg_mmse(b, prior)
    if kind == "earlier":
        return bg_mmse(a, prior)
    v_matrix = np.array([[a, c], [c, b]])
    alpha, beta, v_stat, _ = _reduce_pair(v_matrix)
    total = 0.0
    outer_breaks = np.concatenate((_band_points(b, prior), _band_points(v_stat, prior)))
    for weight, var in prior.components():
        vb = b + var
        s, ws = normal_rule(np.sqrt(vb), outer_breaks, _GL_ORDER_2D)
        # s' | s ~ N(l21 * z, l22^2) with z = s / sqrt(vb)
        l21 = (c + var) / np.sqrt(vb)
        l22 = np.sqrt(max(a + var - l21 * l21, 0.0))
        mu = l21 * s / np.sqrt(vb)
        # inner breakpoints: transition bands of s' and of the pair statistic
        own = np.broadcast_to(_band_points(a, prior), (s.size, 2 * _BAND_OFFSETS.size))
        stat = (_band_points(v_stat, prior)[None, :] - beta * s[:, None]) / alpha
        breaks = np.concatenate((own, stat), axis=1)
        if l22 > 0:
            z_extra = (breaks - mu[:, None]) / l22
            zj, wj = _panel_rule(_z_edges(z_extra), _GL_ORDER_2D)
            sp = mu[:, None] + l22 * zj
        else:
            sp, wj = mu[:, None], np.ones((s.size, 1))
        cov = bg_posterior_covariance(sp, s[:, None], v_matrix, prior)
        total += weight * np.dot(ws, np.sum(wj * cov, axis=1))
    return float(total)


# ---------------------------------------------------------------------------
# Denoiser interface


class ScalarDenoiser(Protocol):
    def __call__(self, s: np.ndarray) -> np.ndarray: ...

    def derivative(self, s: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class BayesDenoiser:
    """Posterior-mean denoiser for a fixed noise variance."""

    prior: BgPrior
    v: float

    def __call__(self, s):
        return bg_posterior_mean(s, self.v, self.prior)

    def derivative(self, s):
        return bg_posterior_mean_derivative(s, self.v, self.prior)

    def variance(self, s):
        return bg_posterior_variance(s, self.v, self.prior)


@dataclass(frozen=True)
class LinearDenoiser:
    """f(s) = slope * s; slope 0 gives the zero denoiser."""

    slope: float = 1.0

    def __call__(self, s):
        return self.slope * np.asarray(s, dtype=float)

    def derivative(self, s):
        return np.full(np.shape(s), float(self.slope))


@dataclass(frozen=True)
class DenoiserEval:
    mean: np.ndarray
    derivative_avg: float
    posterior_var: float


def evaluate_denoiser(s, v, prior: BgPrior) -> DenoiserEval:
    s = np.asarray(s, dtype=float)
    return DenoiserEval(
        mean=bg_posterior_mean(s, v, prior),
        derivative_avg=float(np.mean(bg_posterior_mean_derivative(s, v, prior))),
        posterior_var=float(np.mean(bg_posterior_variance(s, v, prior))),
    )


def consistent_cov_terms(s_prime, s, w_cov, f_prime, f, second_moment=1.0):
    """Per-sample terms whose average estimates E[(x - f'(s'))(x - f(s))]."""
    s_prime = np.asarray(s_prime, dtype=float)
    s = np.asarray(s, dtype=float)
    if s.size == 0 or s_prime.shape != s.shape:
        raise ValueError("need a non-empty set of sample pairs")
    fp = f_prime(s_prime)
    ft = f(s)
    return (second_moment + fp * ft
            + w_cov * f.derivative(s) - s_prime * ft
            + w_cov * f_prime.derivative(s_prime) - s * fp)


def consistent_cov_estimate(s_prime, s, w_cov, f_prime, f, second_moment=1.0) -> float:
    return float(np.mean(consistent_cov_terms(s_prime, s, w_cov, f_prime, f, second_moment)))
