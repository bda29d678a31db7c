"""Ensemble simulation of the deficient-length LMS filter.

Trials run in fixed-size blocks, vectorized across the block. Block ``j``
draws all of its randomness from a Philox generator keyed by
``SeedSequence([seed, j])``, so a result depends only on the plan and
never on how many workers executed it. Per-block sums are combined with a
fixed pairwise tree.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .config import ConfigError, SystemConfig

BLOCK = 2048


@dataclass(frozen=True)
class TrialPlan:
    cfg: SystemConfig
    trials: int
    iterations: int
    seed: int = 0
    divergence_threshold: float = 10.0
    block_size: int = BLOCK

    def __post_init__(self):
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.divergence_threshold > 0:
            raise ConfigError("divergence_threshold must be positive")
        if self.block_size < 1:
            raise ConfigError("block_size must be >= 1")
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def blocks(self) -> int:
        return -(-self.trials // self.block_size)

    def block_trials(self, j: int) -> int:
        return min(self.block_size, self.trials - j * self.block_size)


@dataclass
class SimulationResult:
    """Ensemble averages over the trials that never diverged.

    Row ``k`` of every curve refers to iteration ``k = 0 .. iterations-1``;
    ``mse[k]`` is the mean of ``e(k)^2`` computed with the weights ``w(k)``
    before the ``k``-th update.
    """

    mean_weights: np.ndarray
    mse: np.ndarray
    diverged_trials: int
    trials_completed: int
    standard_error_mse: np.ndarray
    standard_error_weights: np.ndarray = field(default=None)

    @property
    def iterations(self) -> int:
        return len(self.mse)

    @property
    def divergence_fraction(self) -> float:
        total = self.diverged_trials + self.trials_completed
        return self.diverged_trials / total if total else 0.0


def sample(distribution_tag: str, rng: np.random.Generator, size) -> np.ndarray:
    """Unit-variance draws; the Laplacian uses the inverse CDF with scale ``1/sqrt(2)``."""
    if distribution_tag in ("gaussian-unit", "gaussian"):
        return rng.standard_normal(size)
    if distribution_tag in ("laplacian-unit", "laplacian", "laplace"):
        v = rng.random(size) - 0.5
        return -np.sign(v) * np.log1p(-2.0 * np.abs(v)) / math.sqrt(2.0)
    raise ConfigError(f"cannot sample distribution {distribution_tag!r}")


def block_rng(seed: int, block: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


@dataclass
class _BlockSums:
    n: int
    w: np.ndarray
    w2: np.ndarray
    e2: np.ndarray
    e4: np.ndarray
    diverged: int

    def __add__(self, other: "_BlockSums") -> "_BlockSums":
        return _BlockSums(
            self.n + other.n,
            self.w + other.w,
            self.w2 + other.w2,
            self.e2 + other.e2,
            self.e4 + other.e4,
            self.diverged + other.diverged,
        )


def _simulate_block(plan: TrialPlan, j: int, keep: np.ndarray | None):
    """One pass over block ``j``; returns (diverged mask, sums over ``keep`` trials)."""
    cfg = plan.cfg
    B = plan.block_trials(j)
    rng = block_rng(plan.seed, j)
    n, taps, m = cfg.n_adaptive, cfg.n_adaptive + cfg.p_excess, cfg.ma_order
    K = plan.iterations
    b = np.asarray(cfg.b_coeffs)
    w_star = np.asarray(cfg.w_star)
    sigma = math.sqrt(cfg.noise_variance)
    tag = cfg.distribution

    # stationary warm-up: u(0), u(-1), ..., u(-L) all drawn up front
    U = sample(tag, rng, (B, taps + m - 1))
    X = np.empty((B, taps))
    for i in range(taps):
        X[:, i] = U[:, i : i + m] @ b
    hist = U[:, :m].copy()

    w = np.zeros((B, n))
    diverged = np.zeros(B, dtype=bool)
    sums = None
    if keep is not None:
        sel = keep
        sums = _BlockSums(
            int(sel.sum()),
            np.zeros((K, n)), np.zeros((K, n)), np.zeros(K), np.zeros(K), 0,
        )
    beta = cfg.beta
    thr = plan.divergence_threshold
    for k in range(K):
        if k:
            u_new = sample(tag, rng, B)
            hist[:, 1:] = hist[:, :-1]
            hist[:, 0] = u_new
            X[:, 1:] = X[:, :-1]
            X[:, 0] = hist @ b
        nu = rng.standard_normal(B) * sigma
        e = X @ w_star + nu - np.einsum("ij,ij->i", X[:, :n], w)
        if sums is not None:
            wk = w[sel]
            ek = e[sel] ** 2
            sums.w[k] = wk.sum(axis=0)
            sums.w2[k] = (wk * wk).sum(axis=0)
            sums.e2[k] = ek.sum()
            sums.e4[k] = (ek * ek).sum()
        w += beta * X[:, :n] * e[:, None]
        blown = ~np.all(np.abs(w) <= thr, axis=1)
        if blown.any():
            diverged |= blown
            w[diverged] = 0.0
    if sums is not None:
        sums.diverged = int(diverged.sum())
    return diverged, sums


def _run_block(plan: TrialPlan, j: int, curves: bool) -> _BlockSums:
    if not curves:
        diverged, _ = _simulate_block(plan, j, None)
        K, n = plan.iterations, plan.cfg.n_adaptive
        z = np.zeros((K, n))
        return _BlockSums(int((~diverged).sum()), z, z, np.zeros(K), np.zeros(K), int(diverged.sum()))
    everyone = np.ones(plan.block_trials(j), dtype=bool)
    diverged, sums = _simulate_block(plan, j, everyone)
    if diverged.any():
        _, sums = _simulate_block(plan, j, ~diverged)
    return sums


def _tree_sum(parts: list[_BlockSums]) -> _BlockSums:
    while len(parts) > 1:
        nxt = [parts[i] + parts[i + 1] for i in range(0, len(parts) - 1, 2)]
        if len(parts) % 2:
            nxt.append(parts[-1])
        parts = nxt
    return parts[0]


def run(plan: TrialPlan, workers: int = 1, curves: bool = True) -> SimulationResult:
    """Simulate every trial of ``plan``.

    A block in which some trial diverged is replayed from the same stream
    with those trials masked out of the sums. ``workers`` only changes
    wall time.
    """
    if plan.cfg.distribution == "custom":
        raise ConfigError("Monte Carlo needs a gaussian-unit or laplacian-unit input")
    jobs = range(plan.blocks)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(lambda j: _run_block(plan, j, curves), jobs))
    else:
        parts = [_run_block(plan, j, curves) for j in jobs]
    tot = _tree_sum(parts)
    K, n = plan.iterations, plan.cfg.n_adaptive
    cnt = tot.n
    if cnt:
        mean_w = tot.w / cnt
        mse = tot.e2 / cnt
        denom = max(cnt - 1, 1)
        var_e2 = np.maximum(tot.e4 - cnt * mse * mse, 0.0) / denom
        var_w = np.maximum(tot.w2 - cnt * mean_w * mean_w, 0.0) / denom
        se_mse = np.sqrt(var_e2 / cnt)
        se_w = np.sqrt(var_w / cnt)
    else:
        mean_w = np.full((K, n), np.nan)
        mse = np.full(K, np.nan)
        se_mse = np.full(K, np.nan)
        se_w = np.full((K, n), np.nan)
    if not curves:
        mean_w = np.full((K, n), np.nan)
        mse = np.full(K, np.nan)
        se_mse = np.full(K, np.nan)
        se_w = np.full((K, n), np.nan)
    return SimulationResult(mean_w, mse, tot.diverged, cnt, se_mse, se_w)


def divergence_probability(
    cfg: SystemConfig,
    beta_grid: Sequence[float],
    trials: int,
    iterations: int = 1000,
    seed: int = 0,
    threshold: float = 10.0,
    workers: int = 1,
) -> list[tuple[float, float]]:
    """Fraction of diverged trials at each step size of ``beta_grid``."""
    out = []
    for beta in beta_grid:
        plan = TrialPlan(cfg.replace(beta=float(beta)), trials, iterations, seed, threshold)
        res = run(plan, workers=workers, curves=False)
        out.append((float(beta), res.divergence_fraction))
    return out
