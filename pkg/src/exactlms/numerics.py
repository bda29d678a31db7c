"""Iteration, steady states and spectral radii of ``y(k+1) = A(beta) y(k) + b(beta)``."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .model import StateSpaceModel, canonical_csr

log = logging.getLogger(__name__)

DENSE_LIMIT = 512
DIVERGENCE_NORM = 1e12
SMALL_DENSE = 64


class NumericsError(RuntimeError):
    pass


class DivergenceError(NumericsError):
    def __init__(self, iteration: int, message: str = ""):
        super().__init__(message or f"state diverged at iteration {iteration}")
        self.iteration = iteration


class UnstableError(NumericsError):
    """The model is not stable at the requested step size."""


class ConvergenceError(NumericsError):
    def __init__(self, message: str, bracket: tuple[float, float]):
        super().__init__(f"{message} (best bracket {bracket[0]:.12g}..{bracket[1]:.12g})")
        self.bracket = bracket


class NoCrossingError(NumericsError):
    def __init__(self, rho_lo: float, rho_hi: float, scan_range: tuple[float, float]):
        super().__init__(
            f"spectral radius does not cross 1 on [{scan_range[0]:g}, {scan_range[1]:g}]: "
            f"rho={rho_lo:.9g} at the low end, {rho_hi:.9g} at the high end"
        )
        self.rho_lo = rho_lo
        self.rho_hi = rho_hi


@dataclass(frozen=True)
class SparseMatrix:
    """Square or rectangular matrix as sorted, duplicate-free, zero-free triplets."""

    rows: int
    cols: int
    triplets: tuple[tuple[int, int, float], ...]

    @classmethod
    def from_scipy(cls, mat) -> "SparseMatrix":
        csr = canonical_csr(mat)
        coo = csr.tocoo()
        trips = tuple(
            (int(r), int(c), float(v)) for r, c, v in zip(coo.row, coo.col, coo.data)
        )
        return cls(csr.shape[0], csr.shape[1], trips)

    @classmethod
    def from_triplets(cls, rows: int, cols: int, triplets) -> "SparseMatrix":
        trips = list(triplets)
        if not trips:
            return cls(rows, cols, ())
        r, c, v = zip(*trips)
        return cls.from_scipy(sp.coo_matrix((v, (r, c)), shape=(rows, cols)))

    def to_scipy(self) -> sp.csr_matrix:
        if not self.triplets:
            return sp.csr_matrix((self.rows, self.cols))
        r, c, v = zip(*self.triplets)
        return canonical_csr(sp.coo_matrix((v, (r, c)), shape=(self.rows, self.cols)))

    @property
    def nnz(self) -> int:
        return len(self.triplets)


def _as_csr(A) -> sp.csr_matrix:
    if isinstance(A, SparseMatrix):
        return A.to_scipy()
    if sp.issparse(A):
        return sp.csr_matrix(A, dtype=np.float64)
    return sp.csr_matrix(np.asarray(A, dtype=np.float64))


@dataclass
class Trajectory:
    """Outputs of an iterated model; row ``k`` holds the value at iteration ``k``."""

    beta: float
    outputs: dict[str, np.ndarray]
    final_state: np.ndarray
    diverged_at: int | None = None

    @property
    def length(self) -> int:
        return len(next(iter(self.outputs.values()))) if self.outputs else 0


def iterate(
    model: StateSpaceModel,
    beta: float,
    k_max: int,
    y0: np.ndarray | None = None,
    record: Sequence[str] | None = None,
    every: int = 1,
    raise_on_divergence: bool = True,
) -> Trajectory:
    """Run ``k_max`` steps from ``y0`` (default: the model's initial state).

    Outputs are recorded at ``k = 0, every, 2*every, ...`` and always at
    ``k_max``. Divergence (non-finite state or norm above 1e12) raises
    :class:`DivergenceError` unless ``raise_on_divergence`` is false, in which
    case the trajectory is cut short and ``diverged_at`` is set.
    """
    if not beta > 0:
        raise ValueError("beta must be positive")
    if k_max < 0 or every < 1:
        raise ValueError("k_max must be >= 0 and every >= 1")
    if y0 is None:
        if model.initial is None:
            raise ValueError("model has no initial state; pass y0")
        y0 = model.initial
    y = np.array(y0, dtype=np.float64)
    if y.shape != (model.dim,):
        raise ValueError(f"y0 has shape {y.shape}, expected ({model.dim},)")
    names = list(model.outputs) if record is None else list(record)
    outs = [model.outputs[n] for n in names]
    A = model.transition(beta)
    if model.dim <= SMALL_DENSE:
        # per-step sparse overhead dominates for tiny systems
        A = A.toarray()
    b = model.forcing(beta)
    consts = np.array([o.constant_at(beta) for o in outs])
    R = np.array([o.row for o in outs]).reshape(len(outs), model.dim)

    steps = list(range(0, k_max + 1, every))
    if steps[-1] != k_max:
        steps.append(k_max)
    vals = np.empty((len(steps), len(outs)))
    vals[0] = R @ y + consts
    slot = 1
    diverged = None
    for k in range(1, k_max + 1):
        y = A @ y + b
        if k % 64 == 0 or k == k_max or slot < len(steps) and steps[slot] == k:
            norm = np.linalg.norm(y)
            if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
                if raise_on_divergence:
                    raise DivergenceError(k)
                diverged = k
                break
        if slot < len(steps) and steps[slot] == k:
            vals[slot] = R @ y + consts
            slot += 1
    vals = vals[:slot]
    return Trajectory(
        beta,
        {n: vals[:, j].copy() for j, n in enumerate(names)},
        y,
        diverged,
    )


def steady_state(model: StateSpaceModel, beta: float, check_stability: bool = True) -> dict[str, float]:
    """Outputs at the fixed point ``y = A y + b``.

    Raises :class:`UnstableError` if ``rho(A(beta)) >= 1`` or the solve
    fails to reach a residual of ``1e-10 ||b||``.
    """
    y = steady_state_vector(model, beta, check_stability)
    return {n: float(o.evaluate(y, beta)) for n, o in model.outputs.items()}


def steady_state_vector(model: StateSpaceModel, beta: float, check_stability: bool = True) -> np.ndarray:
    A = model.transition(beta)
    b = model.forcing(beta)
    if check_stability:
        rho = spectral_radius(A)
        if rho >= 1.0:
            raise UnstableError(f"spectral radius {rho:.9g} >= 1 at beta={beta:g}")
    M = (sp.identity(model.dim, format="csc") - A).tocsc()
    try:
        lu = spla.splu(M)
    except RuntimeError as exc:
        raise UnstableError(f"I - A(beta) is singular at beta={beta:g}") from exc
    y = lu.solve(b)
    bnorm = np.linalg.norm(b)
    target = 1e-10 * bnorm
    for _ in range(5):
        r = b - M @ y
        if np.linalg.norm(r) <= target:
            break
        y = y + lu.solve(r)
    if not np.all(np.isfinite(y)) or np.linalg.norm(b - M @ y) > target:
        raise UnstableError(f"steady-state solve did not converge at beta={beta:g}")
    return y


def _dense_radius(A: np.ndarray) -> float:
    if A.shape[0] == 0:
        return 0.0
    return float(np.max(np.abs(scipy.linalg.eigvals(A))))


def _power_estimate(A: sp.csr_matrix, tol: float, max_iter: int, seed: int = 0) -> float:
    n = A.shape[0]
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(n)
    v /= np.linalg.norm(v)
    history: list[float] = []
    block = 20
    for _ in range(max_iter // block + 1):
        v1 = A @ v
        Q, _ = np.linalg.qr(np.column_stack([v, v1]))
        H = Q.T @ (A @ Q)
        est = float(np.max(np.abs(np.linalg.eigvals(H))))
        history.append(est)
        if len(history) >= 3:
            a, b, c = history[-3:]
            scale = max(c, 1e-300)
            if abs(c - b) <= tol * scale and abs(b - a) <= tol * scale:
                return c
        for _ in range(block):
            v = A @ v
            norm = np.linalg.norm(v)
            if norm == 0.0:
                return 0.0
            v /= norm
    raise ConvergenceError(
        "power iteration did not converge",
        (min(history[-5:]), max(history[-5:])),
    )


def _power_radius(A: sp.csr_matrix, tol: float, max_iter: int) -> float:
    """Power iteration with two-vector Rayleigh-Ritz extraction.

    Every few steps the current iterate and its image span a subspace whose
    projected 2x2 eigenvalues capture a dominant real eigenvalue or a
    dominant complex-conjugate pair. If the estimate keeps oscillating, the
    same scheme is rerun on ``A @ A`` and square-rooted.
    """
    try:
        return _power_estimate(A, tol, max_iter)
    except ConvergenceError:
        log.info("power iteration oscillates; retrying on A @ A")
        return math.sqrt(_power_estimate((A @ A).tocsr(), tol, max_iter))


def spectral_radius(A, tol: float = 1e-8, max_iter: int = 20000, method: str = "auto") -> float:
    """Largest eigenvalue modulus of ``A``.

    Up to 512 rows the full spectrum is computed densely. Above that an
    implicitly restarted Arnoldi solve for the largest-magnitude eigenvalues
    is used, with the power scheme in :func:`_power_radius` as a fallback.
    """
    mat = _as_csr(A)
    n, m = mat.shape
    if n != m:
        raise ValueError(f"spectral radius of a non-square {n}x{m} matrix")
    if method == "auto":
        method = "dense" if n <= DENSE_LIMIT else "arnoldi"
    if method == "dense":
        return _dense_radius(mat.toarray())
    if method == "power":
        return _power_radius(mat, tol, max_iter)
    if method != "arnoldi":
        raise ValueError(f"unknown method {method!r}")
    k = min(6, n - 2)
    try:
        vals = spla.eigs(
            mat, k=k, which="LM", tol=tol * 1e-2, maxiter=max_iter,
            v0=np.ones(n) / np.sqrt(n), return_eigenvectors=False,
        )
        return float(np.max(np.abs(vals)))
    except spla.ArpackNoConvergence:
        log.info("Arnoldi did not converge on a %d-dimensional matrix; using power iteration", n)
        return _power_radius(mat, tol, max_iter)


@dataclass
class StabilityReport:
    beta_max: float
    bracket: tuple[float, float]
    samples: list[tuple[float, float]] = field(default_factory=list)
    iterations: int = 0
    tolerance: float = 1e-5
    method: str = ""

    def to_dict(self) -> dict:
        data = asdict(self)
        data["bracket"] = list(self.bracket)
        data["samples"] = [list(s) for s in self.samples]
        return data

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)


def find_beta_max(
    model: StateSpaceModel,
    scan_range: tuple[float, float],
    tol: float = 1e-5,
    points: int = 64,
    rho_tol: float = 1e-10,
) -> StabilityReport:
    """Smallest step size at which ``rho(A(beta))`` climbs through 1.

    A geometric grid over ``scan_range`` brackets the first upward crossing,
    which is then bisected to relative width ``tol``.
    """
    lo, hi = scan_range
    if not 0 < lo < hi:
        raise ValueError("scan_range must satisfy 0 < lo < hi")
    dense = model.dim <= DENSE_LIMIT

    def rho(beta: float) -> float:
        return spectral_radius(model.transition(beta), tol=rho_tol)

    grid = np.geomspace(lo, hi, points)
    samples: list[tuple[float, float]] = []
    prev = None
    bracket = None
    for beta in grid:
        r = rho(float(beta))
        samples.append((float(beta), r))
        if r >= 1.0:
            if prev is None:
                raise NoCrossingError(r, r, scan_range)
            bracket = [prev, float(beta)]
            break
        prev = float(beta)
    if bracket is None:
        raise NoCrossingError(samples[0][1], samples[-1][1], scan_range)
    its = 0
    while bracket[1] - bracket[0] > tol * bracket[0]:
        mid = 0.5 * (bracket[0] + bracket[1])
        r = rho(mid)
        samples.append((mid, r))
        bracket[r >= 1.0] = mid
        its += 1
    report = StabilityReport(
        beta_max=bracket[0],
        bracket=(bracket[0], bracket[1]),
        samples=sorted(samples),
        iterations=its,
        tolerance=tol,
        method="dense" if dense else "arnoldi",
    )
    log.debug("beta_max %.9g after %d bisection steps", report.beta_max, its)
    return report
