"""Mean and mean-square models of the LMS filter under the independence assumption.

Every expectation of a weight-error product times input samples is
factored as ``E[f(wt)] E[g(x)]``. The first-order model is the familiar
``E[wt(k+1)] = (I - beta R_x) E[wt(k)] - beta R_xxbar wbar*``; the second-order
model tracks ``E[wt_i wt_j]`` together with ``E[wt_i]``, which the colored
input couples in through the unmodeled tail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .config import ConfigError, SystemConfig
from .model import OutputFunctional, StateSpaceModel
from .symbolic import (
    Layout,
    Reducer,
    StateVariable,
    error_expression,
    expand_deviation_update,
    multiply,
    regressor_sample,
)


@dataclass(frozen=True)
class MomentMatrices:
    """Second and fourth moments of the regressor.

    ``R_x`` is ``E[x xT]`` for the ``N`` modeled taps, ``R_xbar`` is
    ``E[x xbarT]`` against the ``P`` tail taps, ``R_xbarxbar`` is
    ``E[xbar xbarT]`` and ``K4`` is ``E[x xT (x) x xT]`` in Kronecker layout.
    """

    R_x: np.ndarray
    R_xbar: np.ndarray
    R_xbarxbar: np.ndarray
    K4: np.ndarray


def _sample_keys(cfg: SystemConfig, layout: Layout, delays) -> list[dict[int, float]]:
    return [regressor_sample(cfg, layout, d).terms for d in delays]


def _pure_expectation(reducer: Reducer, factors: list[dict[int, float]]) -> float:
    # E[prod of MA samples], expanded term by term; keys add under multiplication
    acc = {0: 1.0}
    for fac in factors:
        nxt: dict[int, float] = {}
        for k1, c1 in acc.items():
            for k2, c2 in fac.items():
                nxt[k1 + k2] = nxt.get(k1 + k2, 0.0) + c1 * c2
        acc = nxt
    return sum(c * reducer.pure_moment(k) for k, c in sorted(acc.items()))


def compute_moment_matrices(cfg: SystemConfig) -> MomentMatrices:
    n, p = cfg.n_adaptive, cfg.p_excess
    layout = Layout.for_config(cfg)
    reducer = Reducer(layout, cfg.moments, cfg.noise_variance)
    xs = _sample_keys(cfg, layout, range(n + p))

    def second(i: int, j: int) -> float:
        return _pure_expectation(reducer, [xs[i], xs[j]])

    full = np.array([[second(i, j) for j in range(n + p)] for i in range(n + p)])
    K4 = np.empty((n * n, n * n))
    cache: dict[tuple[int, ...], float] = {}
    for a in range(n):
        for b in range(n):
            for c in range(n):
                for d in range(n):
                    idx = tuple(sorted((a, b, c, d)))
                    val = cache.get(idx)
                    if val is None:
                        val = _pure_expectation(reducer, [xs[i] for i in idx])
                        cache[idx] = val
                    K4[a * n + c, b * n + d] = val
    return MomentMatrices(full[:n, :n], full[:n, n:], full[n:, n:], K4)


def ia_beta_bound_mean(cfg: SystemConfig) -> float:
    """Mean-convergence bound ``2 / Tr(R_x)``."""
    tr = float(np.trace(compute_moment_matrices(cfg).R_x))
    if tr <= 0:
        raise ConfigError("input has zero energy")
    return 2.0 / tr


def _mean_outputs(cfg: SystemConfig, model: StateSpaceModel, offset: int) -> None:
    for i, w in enumerate(cfg.w_head):
        row = np.zeros(model.dim)
        row[offset + i] = -1.0
        model.add_output(f"mean_w_{i}", OutputFunctional(row, (w, 0.0, 0.0)))


def ia_first_order(cfg: SystemConfig) -> StateSpaceModel:
    """``E[wt(k+1)] = (I - beta R_x) E[wt(k)] - beta R_xxbar wbar*``."""
    n = cfg.n_adaptive
    mm = compute_moment_matrices(cfg)
    layout = Layout.for_config(cfg)
    variables = [StateVariable.build(layout, w_part=[(i, 1)]) for i in range(n)]
    wbar = np.asarray(cfg.w_tail)
    f1 = -(mm.R_xbar @ wbar) if cfg.p_excess else np.zeros(n)
    model = StateSpaceModel(
        variables,
        sp.identity(n, format="csr"),
        sp.csr_matrix(-mm.R_x),
        sp.csr_matrix((n, n)),
        np.zeros(n), f1, np.zeros(n),
        meta=_meta(cfg, 1),
        initial=np.asarray(cfg.w_head, dtype=np.float64),
    )
    _mean_outputs(cfg, model, 0)
    return model


def _meta(cfg: SystemConfig, order: int) -> dict:
    return {
        "kind": "ia",
        "order": order,
        "n": cfg.n_adaptive,
        "m": cfg.ma_order,
        "p": cfg.p_excess,
        "distribution": cfg.distribution,
    }


def ia_second_order(cfg: SystemConfig) -> StateSpaceModel:
    """Second-order IA model over ``E[wt_i wt_j]`` (``i <= j``) and ``E[wt_i]``.

    Rows come from squaring the update symbolically and factoring every
    input moment away from the weight errors, so colored inputs and
    non-Gaussian noise need no special casing. Registers ``mse`` and the
    mean weights as outputs.
    """
    n = cfg.n_adaptive
    layout = Layout.for_config(cfg)
    reducer = Reducer(layout, cfg.moments, cfg.noise_variance, mode="ia")
    updates = expand_deviation_update(cfg, layout)
    variables = [
        StateVariable.build(layout, w_part=[(i, 2)] if i == j else [(i, 1), (j, 1)])
        for i in range(n)
        for j in range(i, n)
    ]
    variables += [StateVariable.build(layout, w_part=[(i, 1)]) for i in range(n)]
    index = {v.key: k for k, v in enumerate(variables)}
    dim = len(variables)
    mats = [np.zeros((dim, dim)) for _ in range(3)]
    f = np.zeros((3, dim))
    for r, var in enumerate(variables):
        expr = layout.const(1.0)
        for i, q in var.w_part:
            for _ in range(q):
                expr = multiply(expr, updates[i])
        comb = reducer.expect(expr)
        for (key, bdeg), c in comb.coeffs.items():
            mats[bdeg][r, index[key]] += c
        for bdeg, c in comb.constant.items():
            f[bdeg, r] += c
    head = np.asarray(cfg.w_head)
    initial = np.array([np.prod([head[i] ** q for i, q in v.w_part]) for v in variables])
    model = StateSpaceModel(
        variables,
        sp.csr_matrix(mats[0]), sp.csr_matrix(mats[1]), sp.csr_matrix(mats[2]),
        f[0], f[1], f[2],
        meta=_meta(cfg, 2),
        initial=initial,
    )
    _mean_outputs(cfg, model, dim - n)
    err = error_expression(cfg, layout)
    comb = reducer.expect(multiply(err, err))
    row = np.zeros(dim)
    for (key, bdeg), c in comb.coeffs.items():
        row[index[key]] += c
    const = tuple(comb.constant.get(d, 0.0) for d in range(3))
    model.add_output("mse", OutputFunctional(row, const))
    return model


def ia_mse_steady_state(cfg: SystemConfig, mm: MomentMatrices, R_w: np.ndarray, mean_wt: np.ndarray) -> float:
    """``Tr(R_x R_wt) + 2 wbarT R_xxbarT E[wt] + wbarT R_xbarxbar wbar + sigma^2``."""
    wbar = np.asarray(cfg.w_tail)
    val = float(np.trace(mm.R_x @ R_w)) + cfg.noise_variance
    if cfg.p_excess:
        val += 2.0 * float(wbar @ mm.R_xbar.T @ mean_wt) + float(wbar @ mm.R_xbarxbar @ wbar)
    return val


def kronecker_transition(mm: MomentMatrices, beta: float) -> np.ndarray:
    """Covariance-block transition ``I - beta (I (x) R + R (x) I) + beta^2 K4`` on ``vec(R_wt)``."""
    n = mm.R_x.shape[0]
    eye = np.eye(n)
    return (
        np.eye(n * n)
        - beta * (np.kron(eye, mm.R_x) + np.kron(mm.R_x, eye))
        + beta * beta * mm.K4
    )
