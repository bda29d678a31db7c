"""Experiment description and moments of the driving noise.

A :class:`SystemConfig` fully specifies one deficient-length LMS setup: the
adaptive length ``N``, the unmodeled tail length ``P``, the moving-average
input filter ``b`` of order ``M``, the plant, the step size and the noise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

DISTRIBUTIONS = ("gaussian-unit", "laplacian-unit", "custom")

# short names accepted on the command line and in config files
_TAG_ALIASES = {
    "gaussian": "gaussian-unit",
    "laplacian": "laplacian-unit",
    "laplace": "laplacian-unit",
}

PRESET_B = (1.0, -0.9)
PRESET_NOISE_VARIANCE = 0.01


class ConfigError(ValueError):
    """Invalid experiment description."""


class MomentOrderError(ConfigError):
    """A moment above the stored maximum order was requested."""


def normalize_tag(tag: str) -> str:
    tag = _TAG_ALIASES.get(tag, tag)
    if tag not in DISTRIBUTIONS:
        raise ConfigError(f"unknown distribution tag {tag!r}")
    return tag


@dataclass(frozen=True)
class MomentSpec:
    """Even moments ``gamma_n = E[u^n]`` of a symmetric, white driving noise."""

    even_moments: Mapping[int, float]
    distribution_tag: str = "custom"

    def __post_init__(self):
        moments = {int(n): float(v) for n, v in self.even_moments.items()}
        moments[0] = 1.0
        for n in moments:
            if n < 0 or n % 2:
                raise ConfigError(f"moment order {n} is not a non-negative even integer")
        top = max(moments)
        missing = [n for n in range(0, top + 1, 2) if n not in moments]
        if missing:
            raise ConfigError(f"missing even moments {missing}")
        object.__setattr__(self, "even_moments", dict(sorted(moments.items())))

    @property
    def max_order(self) -> int:
        return max(self.even_moments)

    def gamma(self, n: int) -> float:
        if n % 2:
            return 0.0
        if n > self.max_order:
            raise MomentOrderError(
                f"gamma_{n} requested but moments are stored up to order {self.max_order}"
            )
        return self.even_moments[n]

    def table(self) -> list[float]:
        """Dense list indexed by order; odd slots hold 0."""
        out = [0.0] * (self.max_order + 1)
        for n, v in self.even_moments.items():
            out[n] = v
        return out


def _gaussian_moment(n: int) -> float:
    # (n-1)!! for even n
    return float(math.prod(range(n - 1, 0, -2))) if n else 1.0


def _laplacian_moment(n: int) -> float:
    # Laplace(0, s) with s = 1/sqrt(2): E[u^n] = n! s^n = n! / 2^(n/2)
    return math.factorial(n) / 2.0 ** (n // 2)


def moments_for(
    distribution_tag: str, max_order: int, custom: Mapping[int, float] | None = None
) -> MomentSpec:
    """Build the moment table ``gamma_0..gamma_max_order`` for a distribution."""
    if max_order < 2 or max_order % 2:
        raise ConfigError(f"max_order must be an even integer >= 2, got {max_order}")
    tag = normalize_tag(distribution_tag)
    orders = range(0, max_order + 1, 2)
    if tag == "gaussian-unit":
        values = {n: _gaussian_moment(n) for n in orders}
    elif tag == "laplacian-unit":
        values = {n: _laplacian_moment(n) for n in orders}
    else:
        custom = dict(custom or {})
        custom.setdefault(0, 1.0)
        missing = [n for n in orders if n not in custom]
        if missing:
            raise ConfigError(f"custom moments missing orders {missing}")
        values = {n: float(custom[n]) for n in orders}
    return MomentSpec(values, tag)


def moment_order_bound(n_adaptive: int, ma_order: int, p_excess: int, order: int) -> int:
    """Highest moment order any closure of the given size can request.

    A sample ``u(t)`` stays inside the regressor window for ``L + 1`` steps,
    ``L = N + P + M - 2``, and every step multiplies in at most ``2 * order``
    more copies of it.
    """
    window = n_adaptive + p_excess + ma_order - 1
    return 2 * order * window + 2 * order


@dataclass(frozen=True)
class SystemConfig:
    """One deficient-length LMS experiment.

    ``w_star`` holds the full plant response; its first ``n_adaptive``
    entries are what the filter can represent, the last ``p_excess`` form
    the unmodeled tail.
    """

    n_adaptive: int
    p_excess: int
    ma_order: int
    b_coeffs: tuple[float, ...]
    w_star: tuple[float, ...]
    beta: float
    noise_variance: float
    moments: MomentSpec = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "b_coeffs", tuple(float(b) for b in self.b_coeffs))
        object.__setattr__(self, "w_star", tuple(float(w) for w in self.w_star))
        if self.n_adaptive < 1:
            raise ConfigError("n_adaptive must be >= 1")
        if self.p_excess < 0:
            raise ConfigError("p_excess must be >= 0")
        if self.ma_order < 1:
            raise ConfigError("ma_order must be >= 1")
        if len(self.b_coeffs) != self.ma_order:
            raise ConfigError(
                f"expected {self.ma_order} MA coefficients, got {len(self.b_coeffs)}"
            )
        if len(self.w_star) != self.n_adaptive + self.p_excess:
            raise ConfigError(
                f"w_star must have N+P={self.n_adaptive + self.p_excess} entries, "
                f"got {len(self.w_star)}"
            )
        if not self.beta > 0:
            raise ConfigError("beta must be positive")
        if not self.noise_variance >= 0:
            raise ConfigError("noise_variance must be non-negative")
        if self.moments.gamma(2) <= 0:
            raise ConfigError("driving noise must have positive variance")

    @property
    def w_head(self) -> tuple[float, ...]:
        return self.w_star[: self.n_adaptive]

    @property
    def w_tail(self) -> tuple[float, ...]:
        return self.w_star[self.n_adaptive :]

    @property
    def max_lag(self) -> int:
        """Oldest driving-noise lag reachable from the regressors, ``N+P+M-2``."""
        return self.n_adaptive + self.p_excess + self.ma_order - 2

    @property
    def distribution(self) -> str:
        return self.moments.distribution_tag

    def replace(self, **changes) -> "SystemConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "n": self.n_adaptive,
            "m": self.ma_order,
            "p": self.p_excess,
            "b": list(self.b_coeffs),
            "w_star": list(self.w_star),
            "beta": self.beta,
            "noise_variance": self.noise_variance,
            "distribution": self.distribution,
        }


def make_config(
    n: int,
    m: int,
    p: int,
    b: Sequence[float],
    w_star: Sequence[float],
    beta: float,
    noise_variance: float,
    distribution: str = "gaussian-unit",
    moment_order: int | None = None,
    custom_moments: Mapping[int, float] | None = None,
) -> SystemConfig:
    """Build a config whose moment table is deep enough for any closure on it."""
    if moment_order is None:
        if normalize_tag(distribution) == "custom":
            if not custom_moments:
                raise ConfigError("custom distribution needs explicit moments")
            moment_order = max(k for k in custom_moments if k % 2 == 0)
        else:
            moment_order = moment_order_bound(n, m, p, 2)
    moments = moments_for(distribution, moment_order, custom_moments)
    return SystemConfig(n, p, m, tuple(b), tuple(w_star), beta, noise_variance, moments)


def preset_scenario(
    name: str,
    n: int,
    m: int,
    p: int,
    beta: float = 0.01,
    distribution: str = "gaussian-unit",
) -> SystemConfig:
    """The two plant configurations used throughout the experiments.

    ``config1`` has every plant coefficient equal to one; ``config2`` keeps
    the first ``N`` at one and sets the tail to 0.01. With ``M = 2`` the
    input filter is ``1 - 0.9 z^-1``; for other orders it is ``1`` followed
    by ``M - 1`` taps of ``-0.9``.
    """
    if n < 1 or m < 1 or p < 0:
        raise ConfigError(f"invalid sizes N={n}, M={m}, P={p}")
    if name == "config1":
        w_star = [1.0] * (n + p)
    elif name == "config2":
        w_star = [1.0] * n + [0.01] * p
    else:
        raise ConfigError(f"unknown preset {name!r}")
    b = [PRESET_B[0]] + [PRESET_B[1]] * (m - 1)
    return make_config(n, m, p, b, w_star, beta, PRESET_NOISE_VARIANCE, distribution)


CONFIG_KEYS = {"n", "m", "p", "b", "w_star", "beta", "noise_variance", "distribution"}


def config_from_dict(data: Mapping) -> SystemConfig:
    unknown = set(data) - CONFIG_KEYS - {"moments"}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    missing = CONFIG_KEYS - set(data) - {"distribution"}
    if missing:
        raise ConfigError(f"missing config keys {sorted(missing)}")
    custom = data.get("moments")
    if custom is not None:
        custom = {int(k): float(v) for k, v in custom.items()}
    try:
        n, m, p = int(data["n"]), int(data["m"]), int(data["p"])
        return make_config(
            n,
            m,
            p,
            [float(x) for x in data["b"]],
            [float(x) for x in data["w_star"]],
            float(data["beta"]),
            float(data["noise_variance"]),
            data.get("distribution", "gaussian-unit"),
            custom_moments=custom,
        )
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path) -> SystemConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return config_from_dict(data)
