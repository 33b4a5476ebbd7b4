"""Covariance algebra for correlated Gaussian messages.

Messages ``Y_tau = X + W_tau`` with error covariance ``V`` are combined into the
scalar sufficient statistic ``Y V^-1 1 / (1^T V^-1 1)``. The helpers here solve
those systems, evaluate cross-covariances between statistics, guard ledgers
against loss of positive definiteness and apply long-memory damping.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

__all__ = [
    "CovarianceError",
    "SufficientStatistic",
    "CovarianceLedger",
    "combine_weights",
    "combine",
    "cross_covariance",
    "psd_guard",
    "damping_covariance",
    "geometric_damping",
    "validate_damping",
]

# Relative eigenvalue cutoff for difference directions that carry no information.
RANK_TOL = 1e-8


class CovarianceError(ValueError):
    """Covariance tracking produced an unusable matrix."""


def combine_weights(V: np.ndarray):
    """Weights V^-1 1 / (1^T V^-1 1) and the statistic's variance 1/(1^T V^-1 1).

    Solved as min_w w^T V w subject to sum(w) = 1, anchored at the newest
    message: with w_k = 1 - sum(u) the objective becomes
    v_k + 2 g^T u + u^T H u, where H is the covariance of the differences
    (message_i - message_k). Near-converged ledgers make V nearly rank one,
    but H stays well conditioned on its non-null space; directions with
    eigenvalue below ``RANK_TOL * max(diag V)`` are at the level of
    accumulated roundoff and are dropped (pseudo-inverse), which leaves the
    weight on the newest message. Negative directions, which a guarded ledger
    with a non-decreasing diagonal can produce, are dropped the same way: the
    quadratic form is minimized over the subspace where it is a variance.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    k = V.shape[0]
    if V.shape != (k, k) or k == 0:
        raise ValueError("V must be a non-empty square matrix")
    if not np.all(np.isfinite(V)):
        raise CovarianceError("covariance matrix has non-finite entries")
    v_last = float(V[-1, -1])
    if k == 1:
        if not v_last > 0:
            raise CovarianceError(f"non-positive variance {v_last}")
        return np.ones(1), v_last
    col = V[:-1, -1]
    H = V[:-1, :-1] - col[:, None] - col[None, :] + v_last
    H = 0.5 * (H + H.T)
    g = col - v_last
    lam, Q = linalg.eigh(H)
    keep = lam > RANK_TOL * float(np.max(np.abs(np.diag(V))))
    u = -Q[:, keep] @ ((Q[:, keep].T @ g) / lam[keep])
    variance = v_last + float(g @ u)
    if not variance > 0:
        raise CovarianceError(f"combined variance {variance} is not positive")
    return np.append(u, 1.0 - u.sum()), variance


@dataclass(frozen=True)
class SufficientStatistic:
    mean: np.ndarray
    variance: float
    weights: np.ndarray


def combine(messages: np.ndarray, V: np.ndarray) -> SufficientStatistic:
    """Combine the columns of an N x k message matrix."""
    messages = np.asarray(messages, dtype=float)
    if messages.ndim == 1:
        messages = messages[:, None]
    weights, variance = combine_weights(V)
    if messages.shape[1] != weights.size:
        raise ValueError("message count does not match covariance size")
    return SufficientStatistic(messages @ weights, variance, weights)


def cross_covariance(V_block, V_left, V_right, w_left=None, w_right=None) -> float:
    """Covariance between the statistics built from two message subsets.

    ``V_block`` is the k' x k block of message covariances between the subsets.
    Precomputed combination weights may be passed to skip the solves.
    """
    if w_left is None:
        w_left, _ = combine_weights(V_left)
    if w_right is None:
        w_right, _ = combine_weights(V_right)
    V_block = np.atleast_2d(np.asarray(V_block, dtype=float))
    return float(w_left @ V_block @ w_right)


@dataclass
class CovarianceLedger:
    """Growing symmetric matrix of message covariances v_{tau', tau}."""

    entries: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    labels: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    def append(self, column, label=None) -> None:
        """Add one iteration: covariances with all earlier entries, then its variance."""
        column = np.asarray(column, dtype=float)
        k = self.size
        if column.shape != (k + 1,):
            raise ValueError(f"expected {k + 1} entries, got {column.shape}")
        if not column[-1] > 0:
            raise CovarianceError(f"non-positive variance {column[-1]}")
        grown = np.zeros((k + 1, k + 1))
        grown[:k, :k] = self.entries
        grown[:, k] = column
        grown[k, :] = column
        self.entries = grown
        self.labels.append(k if label is None else label)

    def guarded(self, eps: float) -> "CovarianceLedger":
        return CovarianceLedger(psd_guard(self.entries, eps), list(self.labels))

    def copy(self) -> "CovarianceLedger":
        return CovarianceLedger(self.entries.copy(), list(self.labels))


def psd_guard(V, eps: float = 1e-6):
    """Replace v_{t',t} by v_{t,t} wherever the 2x2 minor falls below ``eps``.

    Pairs are scanned in increasing (t', t) order. Entries that are NaN
    (untracked covariances) are left alone. Accepts a matrix or a ledger.
    """
    if isinstance(V, CovarianceLedger):
        return V.guarded(eps)
    if eps <= 0:
        raise ValueError("eps must be positive")
    out = np.array(V, dtype=float, copy=True)
    k = out.shape[0]
    for t in range(1, k):
        for tp in range(t):
            c = out[tp, t]
            if np.isnan(c):
                continue
            if out[tp, tp] * out[t, t] - c * c < eps:
                out[tp, t] = out[t, tp] = out[t, t]
    return out


def validate_damping(Theta: np.ndarray, atol: float = 1e-12) -> np.ndarray:
    Theta = np.asarray(Theta, dtype=float)
    k = Theta.shape[0]
    if Theta.shape != (k, k):
        raise ValueError("Theta must be square")
    if np.any(np.tril(Theta, -1) != 0):
        raise ValueError("Theta must be upper triangular")
    if np.any(np.diag(Theta) == 0):
        raise ValueError("Theta must have a nonzero diagonal")
    if not np.allclose(Theta.sum(axis=0), 1.0, rtol=0, atol=atol):
        raise ValueError("every column of Theta must sum to 1")
    return Theta


def damping_covariance(C: np.ndarray, Theta: np.ndarray) -> np.ndarray:
    """V = Theta^T C Theta for column-normalized upper-triangular Theta."""
    Theta = validate_damping(Theta)
    C = np.asarray(C, dtype=float)
    V = Theta.T @ C @ Theta
    return 0.5 * (V + V.T)


def geometric_damping(theta: float, T: int) -> np.ndarray:
    """(T+1) x (T+1) matrix with theta_{0,t} = (1-theta)^t, theta_{tau,t} = theta (1-theta)^{t-tau}."""
    if not 0.0 < theta <= 1.0:
        raise ValueError(f"theta must lie in (0, 1], got {theta}")
    idx = np.arange(T + 1)
    lag = idx[None, :] - idx[:, None]
    Theta = np.where(lag >= 0, theta * (1.0 - theta) ** np.maximum(lag, 0), 0.0)
    Theta[0, :] = (1.0 - theta) ** idx
    return Theta
