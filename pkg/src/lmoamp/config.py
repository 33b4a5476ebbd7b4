"""Experiment configuration shared by the problem generator and the harness."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

VARIANT_NAMES = (
    "lm-oamp",
    "oamp",
    "damped-correct",
    "damped-precision",
    "damped-variance",
)


class ConfigError(ValueError):
    """Raised for malformed or inconsistent experiment configurations."""


def is_power_of_two(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class Variant:
    """One solver variant of an experiment.

    ``theta_B`` / ``theta_A`` override the experiment-wide damping factors
    when given (``damped-correct@0.4`` in a config file sets theta_B=0.4).
    """

    name: str
    theta_A: float | None = None
    theta_B: float | None = None

    @property
    def label(self) -> str:
        if self.theta_B is None:
            return self.name
        return f"{self.name}@{self.theta_B:g}"

    @classmethod
    def parse(cls, text: str) -> "Variant":
        text = text.strip()
        name, _, theta = text.partition("@")
        if name not in VARIANT_NAMES:
            raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANT_NAMES}")
        if theta:
            try:
                theta_B = float(theta)
            except ValueError as exc:
                raise ConfigError(f"bad damping factor in variant {text!r}") from exc
            return cls(name, theta_B=theta_B)
        return cls(name)


@dataclass(frozen=True)
class ExperimentConfig:
    N: int = 4096
    delta: float = 0.5
    rho: float = 0.1
    kappa: float = 1e3
    snr_db: float = 40.0
    variants: tuple[Variant, ...] = (Variant("lm-oamp"),)
    trials: int = 50
    T_max: int = 21
    seed: int = 0
    output_path: str = "report.csv"
    theta_A: float = 1.0
    theta_B: float = 0.7
    sign_flip: bool = False
    filter: str = "lmmse"
    posterior_cov: str = "posterior"
    guard: str = "both"
    psd_eps: float = 1e-6
    stop_tol: float = 1e-12
    se_spectrum: str = "geometric"
    M: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "M", int(round(self.delta * self.N)))
        self.validate()

    @property
    def sigma2(self) -> float:
        return 10.0 ** (-self.snr_db / 10.0)

    def validate(self) -> None:
        if not is_power_of_two(self.N):
            raise ConfigError(f"N must be a power of two, got {self.N}")
        if not 0.0 < self.delta <= 1.0:
            raise ConfigError(f"delta must lie in (0, 1], got {self.delta}")
        if self.M < 2:
            raise ConfigError(f"M = round(delta*N) must be at least 2, got {self.M}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must lie in (0, 1], got {self.rho}")
        if self.kappa < 1.0:
            raise ConfigError(f"kappa must be >= 1, got {self.kappa}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if not 1 <= self.T_max <= 64:
            raise ConfigError("T_max must lie in [1, 64]")
        for theta in (self.theta_A, self.theta_B):
            if not 0.0 < theta <= 1.0:
                raise ConfigError(f"damping factors must lie in (0, 1], got {theta}")
        if not self.variants:
            raise ConfigError("at least one variant is required")
        if self.filter not in ("lmmse", "mf"):
            raise ConfigError(f"filter must be 'lmmse' or 'mf', got {self.filter!r}")
        if self.posterior_cov not in ("posterior", "estimator"):
            raise ConfigError(f"posterior_cov must be 'posterior' or 'estimator', got {self.posterior_cov!r}")
        if self.guard not in ("both", "b", "none"):
            raise ConfigError(f"guard must be 'both', 'b' or 'none', got {self.guard!r}")
        if self.se_spectrum not in ("geometric", "empirical"):
            raise ConfigError(f"se_spectrum must be 'geometric' or 'empirical', got {self.se_spectrum!r}")

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs)

    def items(self):
        """(key, value-as-text) pairs in declaration order, for provenance."""
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "variants":
                value = ", ".join(v.label for v in value)
            yield f.name, str(value)


_BOOLS = {"true": True, "yes": True, "1": True, "on": True,
          "false": False, "no": False, "0": False, "off": False}


def _coerce(name: str, raw: str):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types or name == "M":
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if name == "variants":
            return tuple(Variant.parse(p) for p in raw.split(",") if p.strip())
        if kind == "int":
            return int(float(raw)) if "e" in raw.lower() else int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            return _BOOLS[raw.strip().lower()]
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad value for {name}: {raw!r}") from exc
    return raw.strip()


def load_config(path: str | Path) -> ExperimentConfig:
    """Read an INI-style file with a single ``[experiment]`` section."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if "experiment" not in parser:
        raise ConfigError(f"{path}: missing [experiment] section")
    kwargs = {key: _coerce(key, raw) for key, raw in parser["experiment"].items()}
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
