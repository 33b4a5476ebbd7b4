"""Long-memory OAMP: module A (linear filter) and module B (BG denoiser).

Both modules follow the same pattern: combine the incoming messages into a
sufficient statistic, compute a posterior estimate and its covariances with
every earlier iteration, apply the Onsager (extrinsic) correction and damp
the result before passing it on. Covariance ledgers are kept as dense
symmetric numpy arrays indexed by iteration.

Index conventions: ``X_BA[tau]`` is x_{B->A,tau} with ``X_BA[0] = 0``;
``X_AB[tau]`` is x_{A->B,tau}. The module-B extrinsic ledger ``ext_B`` has a
leading row/column for the initial message, so ``ext_B[tau + 1]`` refers to
x^ext_{B,tau+1}.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian_stat import combine_weights, damping_covariance, geometric_damping, psd_guard
from .prior import BayesDenoiser, BgPrior, bg_posterior_covariance, consistent_cov_estimate
from .problem import ProblemInstance, SpectralProfile
from .state_evolution import heuristic_damp

__all__ = [
    "MemoryPolicy",
    "SolverOptions",
    "SolverState",
    "SolverError",
    "DegenerateError",
    "lmmse_filter_diag",
    "mf_filter_diag",
    "module_a_step",
    "module_b_step",
    "init_state",
    "run",
]

MODES = ("full", "latest")
DAMPING_STYLES = ("none", "correct", "heuristic-precision", "heuristic-variance")

# A 2x2 suf covariance whose determinant is below this fraction of a*b is
# treated as nested: the statistic whose variance the covariance matches
# more closely is taken as sufficient.
PAIR_DET_RTOL = 1e-12


class DegenerateError(ArithmeticError):
    """An Onsager denominator 1 - xi vanished."""


class SolverError(RuntimeError):
    """A module failed; ``iteration`` records where."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration


@dataclass(frozen=True)
class MemoryPolicy:
    """Which messages each module combines and how its outputs are damped.

    ``full`` uses every preceding message and no damping. ``latest`` uses the
    newest message only, with geometric damping theta (1 - theta)^(t - tau)
    tracked either exactly (``correct``) or by a variance-only heuristic.
    """

    mode: str = "full"
    theta_A: float = 1.0
    theta_B: float = 1.0
    damping_style: str = "none"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.damping_style not in DAMPING_STYLES:
            raise ValueError(f"damping_style must be one of {DAMPING_STYLES}")
        for theta in (self.theta_A, self.theta_B):
            if not 0.0 < theta <= 1.0:
                raise ValueError(f"damping factors must lie in (0, 1], got {theta}")
        if self.mode == "full" and self.damping_style != "none":
            raise ValueError("full memory is used without damping")
        if self.damping_style == "none" and (self.theta_A != 1.0 or self.theta_B != 1.0):
            raise ValueError("damping factors other than 1 need a damping style")

    @property
    def heuristic(self) -> bool:
        return self.damping_style.startswith("heuristic")

    @property
    def domain(self) -> str:
        return self.damping_style.partition("-")[2]

    @classmethod
    def full(cls) -> "MemoryPolicy":
        return cls("full")

    @classmethod
    def oamp(cls) -> "MemoryPolicy":
        return cls("latest")

    @classmethod
    def damped(cls, theta_A: float, theta_B: float, style: str = "correct") -> "MemoryPolicy":
        return cls("latest", theta_A, theta_B, style)


@dataclass(frozen=True)
class SolverOptions:
    filter: str = "lmmse"
    posterior_cov: str = "posterior"
    guard: str = "both"
    psd_eps: float = 1e-6

    def __post_init__(self):
        if self.filter not in ("lmmse", "mf"):
            raise ValueError(f"filter must be 'lmmse' or 'mf', got {self.filter!r}")
        if self.posterior_cov not in ("posterior", "estimator"):
            raise ValueError(f"posterior_cov must be 'posterior' or 'estimator', got {self.posterior_cov!r}")
        if self.guard not in ("both", "b", "none"):
            raise ValueError(f"guard must be 'both', 'b' or 'none', got {self.guard!r}")
        if not self.psd_eps > 0:
            raise ValueError("psd_eps must be positive")


def lmmse_filter_diag(v_suf: float, profile: SpectralProfile, sigma2: float) -> np.ndarray:
    """Diagonal of the LMMSE filter in the singular basis of A."""
    if not v_suf > 0:
        raise ValueError(f"v_suf must be positive, got {v_suf}")
    s = profile.singular_values
    return v_suf * s / (sigma2 + v_suf * s * s)


def mf_filter_diag(profile: SpectralProfile) -> np.ndarray:
    """W = A: the filter diagonal is the singular values themselves."""
    return np.array(profile.singular_values, dtype=float)


def _grow(V: np.ndarray, n: int) -> np.ndarray:
    out = np.full((n, n), np.nan)
    k = min(V.shape[0], n)
    out[:k, :k] = V[:k, :k]
    return out


@dataclass
class SolverState:
    """Message histories, covariance ledgers and per-iteration diagnostics."""

    X_BA: list
    V_BA: np.ndarray
    X_AB: list = field(default_factory=list)
    V_AB: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    ext_A_means: list = field(default_factory=list)
    ext_A: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    ext_B_means: list = field(default_factory=list)
    ext_B: np.ndarray = field(default_factory=lambda: np.ones((1, 1)))
    w_A: list = field(default_factory=list)
    w_B: list = field(default_factory=list)
    V_suf_A: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    V_suf_B: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    filters: list = field(default_factory=list)
    x_suf_B: list = field(default_factory=list)
    denoisers: list = field(default_factory=list)
    xi_A: list = field(default_factory=list)
    xi_B: list = field(default_factory=list)
    x_post_B: np.ndarray | None = None
    mse: list = field(default_factory=list)
    t: int = 0
    stopped_at: int | None = None
    failed_at: int | None = None

    @property
    def mse_trajectory(self) -> np.ndarray:
        return np.asarray(self.mse)

    @property
    def v_BA_diag(self) -> np.ndarray:
        return np.diag(self.V_BA).copy()

    @property
    def v_AB_diag(self) -> np.ndarray:
        return np.diag(self.V_AB).copy()


def init_state(problem: ProblemInstance, prior: BgPrior | None = None) -> SolverState:
    """x_{B->A,0} = 0 with variance E[x^2] = 1."""
    prior = prior or problem.prior
    return SolverState(X_BA=[np.zeros(problem.N)],
                       V_BA=np.full((1, 1), prior.second_moment))


def _memory(policy: MemoryPolicy, t: int) -> np.ndarray:
    return np.arange(t + 1) if policy.mode == "full" else np.array([t])


def _statistic(X: list, V: np.ndarray, weights_hist: list, V_suf: np.ndarray,
               policy: MemoryPolicy, t: int, track_cross: bool):
    """Sufficient statistic of iteration t and its covariances with earlier ones."""
    idx = _memory(policy, t)
    w, v_tt = combine_weights(V[np.ix_(idx, idx)])
    weights_hist.append(w)
    x_suf = np.column_stack([X[i] for i in idx]) @ w
    V_suf = _grow(V_suf, t + 1)
    V_suf[t, t] = v_tt
    if track_cross:
        for tp in range(t):
            idx_p = _memory(policy, tp)
            V_suf[tp, t] = V_suf[t, tp] = weights_hist[tp] @ V[np.ix_(idx_p, idx)] @ w
    return x_suf, V_suf


def module_a_step(state: SolverState, problem: ProblemInstance, policy: MemoryPolicy,
                  options: SolverOptions = SolverOptions()) -> SolverState:
    """Iteration t of module A: produces x_{A->B,t} and its covariances."""
    t = state.t
    op = problem.operator
    profile = op.profile
    N, M = op.N, op.M
    sigma = profile.singular_values
    exact = not policy.heuristic
    x_suf, state.V_suf_A = _statistic(state.X_BA, state.V_BA, state.w_A, state.V_suf_A,
                                      policy, t, exact)
    v_suf = state.V_suf_A[t, t]
    if options.filter == "lmmse":
        w = lmmse_filter_diag(v_suf, profile, problem.sigma2)
    else:
        w = mf_filter_diag(profile)
    state.filters.append(w)

    # x^post = x^suf + W^T (y - A x^suf), with W = diag(w) V^T[:M]
    resid = problem.y - op.apply(x_suf)
    pad = np.zeros(N)
    pad[:M] = w * resid
    x_post = x_suf + op.v(pad)

    one_minus = 1.0 - w * sigma
    xi = ((N - M) + one_minus.sum()) / N
    if not xi < 1.0:
        raise DegenerateError(f"degenerate filter: xi_A = {xi}")
    state.xi_A.append(xi)
    ext_mean = (x_post - xi * x_suf) / (1.0 - xi)
    state.ext_A_means.append(ext_mean)

    ext = _grow(state.ext_A, t + 1)
    if exact:
        for tp in range(t + 1):
            w_p = state.filters[tp]
            gamma = ((N - M) + np.dot(1.0 - w_p * sigma, one_minus)) / N
            trace = problem.sigma2 * np.dot(w_p, w) / N
            post = gamma * state.V_suf_A[tp, t] + trace
            xi_p = state.xi_A[tp]
            ext[tp, t] = ext[t, tp] = (
                (post - xi_p * xi * state.V_suf_A[tp, t]) / ((1.0 - xi_p) * (1.0 - xi)))
    else:
        gamma = ((N - M) + np.dot(one_minus, one_minus)) / N
        post = gamma * v_suf + problem.sigma2 * np.dot(w, w) / N
        ext[t, t] = 1.0 / (1.0 / post - 1.0 / v_suf)
    if exact and options.guard == "both":
        ext = psd_guard(ext, options.psd_eps)
    state.ext_A = ext

    theta = policy.theta_A
    if t == 0 or theta == 1.0:
        x_out = ext_mean
    else:
        x_out = theta * ext_mean + (1.0 - theta) * state.X_AB[t - 1]
    state.X_AB.append(x_out)
    if exact:
        if policy.damping_style == "correct":
            state.V_AB = damping_covariance(ext, geometric_damping(theta, t))
        else:
            state.V_AB = ext.copy()
    else:
        V_AB = _grow(state.V_AB, t + 1)
        v_ext = ext[t, t]
        V_AB[t, t] = v_ext if t == 0 else heuristic_damp(v_ext, V_AB[t - 1, t - 1],
                                                          theta, policy.domain)
        state.V_AB = V_AB
    return state


def _pair_posterior_cov(s_prime, s, a, b, c, prior):
    """<C(s', s)> with the suf covariance snapped to nested when (near) singular."""
    if a * b - c * c <= PAIR_DET_RTOL * a * b:
        c = b if abs(c - b) <= abs(c - a) else a
    v_matrix = np.array([[a, c], [c, b]])
    return float(np.mean(bg_posterior_covariance(s_prime, s, v_matrix, prior)))


def module_b_step(state: SolverState, problem: ProblemInstance, policy: MemoryPolicy,
                  prior: BgPrior | None = None,
                  options: SolverOptions = SolverOptions()) -> SolverState:
    """Iteration t of module B: produces x^post_{B,t+1} and x_{B->A,t+1}."""
    prior = prior or problem.prior
    t = state.t
    exact = not policy.heuristic
    x_suf, state.V_suf_B = _statistic(state.X_AB, state.V_AB, state.w_B, state.V_suf_B,
                                      policy, t, exact)
    V_suf = state.V_suf_B
    v_suf = V_suf[t, t]
    den = BayesDenoiser(prior, v_suf)
    x_post = den(x_suf)
    xi = float(np.mean(den.derivative(x_suf)))
    if not xi < 1.0:
        raise DegenerateError(f"denoiser degenerate: xi_B = {xi}")
    state.x_suf_B.append(x_suf)
    state.denoisers.append(den)
    state.xi_B.append(xi)
    state.x_post_B = x_post
    state.mse.append(float(np.mean((x_post - problem.x) ** 2)))

    ext_mean = (x_post - xi * x_suf) / (1.0 - xi)
    state.ext_B_means.append(ext_mean)
    use_estimator = options.posterior_cov == "estimator"

    def post_cov(tp):
        if use_estimator:
            return consistent_cov_estimate(state.x_suf_B[tp], x_suf, V_suf[tp, t],
                                           state.denoisers[tp], den, prior.second_moment)
        if tp == t:
            return float(np.mean(den.variance(x_suf)))
        return _pair_posterior_cov(state.x_suf_B[tp], x_suf, V_suf[tp, tp], v_suf,
                                   V_suf[tp, t], prior)

    ext = _grow(state.ext_B, t + 2)
    post_tt = post_cov(t)
    if exact:
        if use_estimator:
            post_0 = (prior.second_moment + v_suf * xi - np.dot(x_post, x_suf) / x_suf.size)
        else:
            post_0 = post_tt
        ext[0, t + 1] = ext[t + 1, 0] = post_0 / (1.0 - xi)
        for tp in range(t + 1):
            post = post_tt if tp == t else post_cov(tp)
            xi_p = state.xi_B[tp]
            ext[tp + 1, t + 1] = ext[t + 1, tp + 1] = (
                (post - xi_p * xi * V_suf[tp, t]) / ((1.0 - xi_p) * (1.0 - xi)))
    else:
        ext[t + 1, t + 1] = 1.0 / (1.0 / post_tt - 1.0 / v_suf)
    if exact and options.guard in ("both", "b"):
        ext = psd_guard(ext, options.psd_eps)
    state.ext_B = ext

    theta = policy.theta_B
    if t == 0 or theta == 1.0:
        x_out = ext_mean
    else:
        x_out = theta * ext_mean + (1.0 - theta) * state.X_BA[t]
    state.X_BA.append(x_out)
    if exact:
        if policy.damping_style == "correct":
            Theta = np.eye(t + 2)
            Theta[1:, 1:] = geometric_damping(theta, t)
            state.V_BA = damping_covariance(ext, Theta)
        else:
            state.V_BA = ext.copy()
    else:
        V_BA = _grow(state.V_BA, t + 2)
        v_ext = ext[t + 1, t + 1]
        V_BA[t + 1, t + 1] = v_ext if t == 0 else heuristic_damp(v_ext, V_BA[t, t],
                                                                  theta, policy.domain)
        state.V_BA = V_BA
    return state


def run(problem: ProblemInstance, policy: MemoryPolicy, prior: BgPrior | None = None,
        T_max: int = 21, stop_tol: float = 1e-12,
        options: SolverOptions = SolverOptions()) -> SolverState:
    """Alternate modules A and B for up to ``T_max`` iterations.

    ``state.mse[t]`` is N^-1 ||x^post_{B,t+1} - x||^2. Iteration stops early
    once |v_{B->A,t+1,t+1} - v_{B->A,t,t}| < ``stop_tol``. Module failures are
    re-raised as ``SolverError`` carrying the iteration index.
    """
    if T_max < 1:
        raise ValueError("T_max must be >= 1")
    prior = prior or problem.prior
    state = init_state(problem, prior)
    for t in range(T_max):
        state.t = t
        try:
            module_a_step(state, problem, policy, options)
            module_b_step(state, problem, policy, prior, options)
        except (ArithmeticError, ValueError) as exc:
            state.failed_at = t
            raise SolverError(str(exc), t) from exc
        if not np.all(np.isfinite(state.x_post_B)):
            state.failed_at = t
            raise SolverError("non-finite estimate", t)
        if abs(state.V_BA[t + 1, t + 1] - state.V_BA[t, t]) < stop_tol:
            state.stopped_at = t
            break
    return state
