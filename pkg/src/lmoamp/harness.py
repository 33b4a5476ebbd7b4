"""Monte Carlo experiments: seeded trials, SE predictions and CSV reports."""

from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, Variant
from .prior import BgPrior
from .problem import SpectralProfile, sample_problem
from .solver import MemoryPolicy, SolverError, SolverOptions, run
from .state_evolution import (EmpiricalSpectrum, GeometricSpectrum, SeError, se_bayes,
                              se_damped_oamp)

__all__ = [
    "CSV_COLUMNS",
    "WORKERS_ENV",
    "ReportRow",
    "ExperimentReport",
    "HarnessIOError",
    "variant_policy",
    "solver_options",
    "se_spectrum",
    "se_prediction",
    "trial_seed",
    "run_trial",
    "run_experiment",
    "worker_count",
]

CSV_COLUMNS = ("variant", "iteration", "mse_sim_db", "stderr_db", "mse_se_db", "gap_db")
WORKERS_ENV = "LMOAMP_WORKERS"


class HarnessIOError(OSError):
    """Writing the report failed."""


@dataclass(frozen=True)
class ReportRow:
    variant: str
    iteration: int
    mse_sim_db: float
    stderr_db: float
    mse_se_db: float
    gap_db: float


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    rows: list
    excluded: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def rows_for(self, label: str) -> list:
        return [r for r in self.rows if r.variant == label]

    def max_gap(self, label: str, up_to: int | None = None) -> float:
        gaps = [r.gap_db for r in self.rows_for(label)
                if up_to is None or r.iteration <= up_to]
        return float(max(gaps)) if gaps else float("nan")

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        for key, value in self.config.items():
            buf.write(f"# {key} = {value}\n")
        for label, count in self.excluded.items():
            buf.write(f"# excluded[{label}] = {count}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([r.variant, r.iteration, _fmt(r.mse_sim_db), _fmt(r.stderr_db),
                             _fmt(r.mse_se_db), _fmt(r.gap_db)])
        return buf.getvalue()

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        try:
            path.write_text(self.to_csv_text())
        except OSError as exc:
            raise HarnessIOError(f"cannot write report to {path}: {exc}") from exc
        return path


def _fmt(x: float) -> str:
    return "nan" if not np.isfinite(x) else f"{x:.6f}"


def variant_policy(variant: Variant, cfg: ExperimentConfig) -> MemoryPolicy:
    theta_A = cfg.theta_A if variant.theta_A is None else variant.theta_A
    theta_B = cfg.theta_B if variant.theta_B is None else variant.theta_B
    if variant.name == "lm-oamp":
        return MemoryPolicy.full()
    if variant.name == "oamp":
        return MemoryPolicy.oamp()
    style = {"damped-correct": "correct",
             "damped-precision": "heuristic-precision",
             "damped-variance": "heuristic-variance"}[variant.name]
    return MemoryPolicy.damped(theta_A, theta_B, style)


def solver_options(cfg: ExperimentConfig) -> SolverOptions:
    return SolverOptions(filter=cfg.filter, posterior_cov=cfg.posterior_cov,
                         guard=cfg.guard, psd_eps=cfg.psd_eps)


def se_spectrum(cfg: ExperimentConfig, profile: SpectralProfile | None = None):
    if cfg.se_spectrum == "empirical":
        profile = profile or SpectralProfile.geometric(cfg.M, cfg.N, cfg.kappa)
        return EmpiricalSpectrum.from_profile(profile)
    return GeometricSpectrum(cfg.M / cfg.N, cfg.kappa)


def se_prediction(policy: MemoryPolicy, cfg: ExperimentConfig, spectrum) -> np.ndarray:
    """Predicted MSE per iteration; NaN where no SE applies (MF filter).

    Heuristically damped variants are compared with the correct SE of the
    same damping factors, so the gap measures the heuristic's inconsistency.
    """
    T = cfg.T_max
    if cfg.filter != "lmmse":
        return np.full(T, np.nan)
    prior = BgPrior(cfg.rho)
    try:
        if policy.damping_style == "none":
            traj = se_bayes(T, spectrum, cfg.sigma2, prior)
        else:
            traj = se_damped_oamp(policy.theta_A, policy.theta_B, T, spectrum, cfg.sigma2, prior)
    except SeError:
        return np.full(T, np.nan)
    return np.asarray(traj.mse)


def trial_seed(cfg: ExperimentConfig, trial: int) -> tuple:
    return (cfg.seed, trial)


def run_trial(cfg: ExperimentConfig, trial: int, profile: SpectralProfile | None = None):
    """One problem instance shared by every variant.

    Returns ``{label: mse array of length T_max}``; a failed variant maps to
    its error message instead. Early-stopped runs hold their last MSE.
    """
    problem = sample_problem(cfg, trial_seed(cfg, trial), profile)
    options = solver_options(cfg)
    out = {}
    for variant in cfg.variants:
        policy = variant_policy(variant, cfg)
        try:
            state = run(problem, policy, problem.prior, cfg.T_max, cfg.stop_tol, options)
        except SolverError as exc:
            out[variant.label] = str(exc)
            continue
        mse = state.mse_trajectory
        out[variant.label] = np.pad(mse, (0, cfg.T_max - mse.size), mode="edge")
    return out


def worker_count() -> int:
    raw = os.environ.get(WORKERS_ENV)
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def _trial_job(args):
    cfg, trial = args
    return run_trial(cfg, trial)


def _to_db(x):
    with np.errstate(divide="ignore", invalid="ignore"):
        return 10.0 * np.log10(x)


def run_experiment(cfg: ExperimentConfig, output_path: str | Path | None = None,
                   workers: int | None = None) -> ExperimentReport:
    """Run all trials, aggregate per variant and write the CSV report.

    Linear MSEs are averaged over trials and then converted to dB; the
    standard error in dB is the delta-method image of the linear one.
    ``output_path=None`` uses ``cfg.output_path``; pass ``""`` to skip writing.
    """
    cfg.validate()
    workers = worker_count() if workers is None else max(1, workers)
    jobs = [(cfg, k) for k in range(cfg.trials)]
    if workers == 1 or cfg.trials == 1:
        profile = SpectralProfile.geometric(cfg.M, cfg.N, cfg.kappa)
        results = [run_trial(cfg, k, profile) for k in range(cfg.trials)]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.trials)) as pool:
            results = list(pool.map(_trial_job, jobs, chunksize=max(1, cfg.trials // (4 * workers))))

    spectrum = se_spectrum(cfg)
    se_cache = {}
    rows, excluded, errors = [], {}, {}
    for variant in cfg.variants:
        label = variant.label
        policy = variant_policy(variant, cfg)
        key = (policy.damping_style == "none", policy.theta_A, policy.theta_B)
        if key not in se_cache:
            se_cache[key] = se_prediction(policy, cfg, spectrum)
        se_db = _to_db(se_cache[key])
        good = [r[label] for r in results if not isinstance(r[label], str)]
        bad = [(k, r[label]) for k, r in enumerate(results) if isinstance(r[label], str)]
        excluded[label] = len(bad)
        if bad:
            errors[label] = bad
        if good:
            mse = np.vstack(good)
            mean = mse.mean(axis=0)
            n = mse.shape[0]
            if n > 1:
                stderr = mse.std(axis=0, ddof=1) / np.sqrt(n)
                stderr_db = 10.0 / np.log(10.0) * stderr / mean
            else:
                stderr_db = np.zeros(cfg.T_max)
            sim_db = _to_db(mean)
        else:
            sim_db = stderr_db = np.full(cfg.T_max, np.nan)
        for t in range(cfg.T_max):
            rows.append(ReportRow(label, t, float(sim_db[t]), float(stderr_db[t]),
                                  float(se_db[t]), float(abs(sim_db[t] - se_db[t]))))

    report = ExperimentReport(cfg, rows, excluded, errors)
    path = cfg.output_path if output_path is None else output_path
    if path:
        report.write_csv(path)
    return report
