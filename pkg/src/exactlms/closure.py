"""Exact-expectation moment closure for the deficient-length LMS filter.

Starting from the moments of interest, every joint moment that appears in a
recursion is itself given a recursion, until no new moment turns up. With a
moving-average input the regressor only remembers ``N+P+M-2`` past samples,
so the worklist always empties.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp

from .config import MomentOrderError, SystemConfig, make_config
from .model import OutputFunctional, StateSpaceModel
from .symbolic import (
    FIELD,
    Expression,
    Layout,
    Reducer,
    StateVariable,
    error_expression,
    expand_deviation_update,
    multiply,
    shift_forward,
    take_expectation,
)

log = logging.getLogger(__name__)

DEFAULT_CAP = 2_000_000


class ClosureCapExceeded(RuntimeError):
    def __init__(self, reached: int, cap: int):
        super().__init__(f"closure reached {reached} state variables (cap {cap})")
        self.reached = reached
        self.cap = cap


class ClosureError(RuntimeError):
    pass


@dataclass
class _TermTable:
    """Noise-reduced expansion of one deviation product at time ``k+1``.

    Terms are split by the parity of their ``u(k)`` power so that a state
    whose shifted ``u(k)`` power is odd only meets terms that make it even.
    """

    by_parity: tuple[list[tuple[int, int, float]], list[tuple[int, int, float]]]
    max_p0: int


class _Engine:
    def __init__(self, cfg: SystemConfig, count_only: bool = False):
        self.cfg = cfg
        self.layout = Layout.for_config(cfg)
        self.updates = expand_deviation_update(cfg, self.layout)
        self.reducer = Reducer(self.layout, cfg.moments, cfg.noise_variance)
        self.count_only = count_only
        self._tables: dict[int, _TermTable] = {}

    def deviation_product(self, wkey: int) -> Expression:
        lay = self.layout
        out = lay.const(1.0)
        for i, q in lay.w_powers(wkey):
            for _ in range(q):
                out = multiply(out, self.updates[i])
        return out

    def table(self, wkey: int) -> _TermTable:
        tab = self._tables.get(wkey)
        if tab is not None:
            return tab
        lay = self.layout
        expr = self.deviation_product(wkey)
        parts: tuple[list, list] = ([], [])
        max_p0 = 0
        for key in sorted(expr.terms, key=lay.sort_key):
            coeff = expr.terms[key]
            factor = self.reducer.noise_factor((key >> lay.nu_shift) & FIELD)
            if factor == 0.0:
                continue
            base = key & lay.state_mask
            if self.count_only and not base & lay.w_mask:
                continue
            p0 = base & FIELD
            max_p0 = max(max_p0, p0)
            parts[p0 & 1].append((base, key >> lay.beta_shift, coeff * factor))
        tab = _TermTable(parts, max_p0)
        self._tables[wkey] = tab
        return tab

    def recursion(self, skey: int):
        """Row of ``E[V(k+1)]`` for the state ``V`` packed in ``skey``.

        Returns ``(coeffs, const)``: per beta degree, a dict from state key to
        coefficient, and the constant part.
        """
        lay = self.layout
        shift = shift_forward(skey, lay)
        tab = self.table(skey & lay.w_mask)
        lag0 = shift & FIELD
        gamma = self.reducer.gamma
        if lag0 + tab.max_p0 > self.reducer.max_order:
            raise MomentOrderError(
                f"closure needs gamma_{lag0 + tab.max_p0}; moments stored up to "
                f"order {self.reducer.max_order}"
            )
        wmask = lay.w_mask
        coeffs: tuple[dict, dict, dict] = ({}, {}, {})
        const = [0.0, 0.0, 0.0]
        pure = self.reducer.pure_moment
        for base, bdeg, c in tab.by_parity[lag0 & 1]:
            m = base + shift
            p0 = m & FIELD
            rest = m - p0
            val = c * gamma[p0]
            if rest & wmask:
                row = coeffs[bdeg]
                row[rest] = row.get(rest, 0.0) + val
            else:
                const[bdeg] += val * pure(rest)
        return coeffs, const

    def successors(self, skey: int) -> Iterable[int]:
        lay = self.layout
        shift = shift_forward(skey, lay)
        tab = self.table(skey & lay.w_mask)
        for base, _, _ in tab.by_parity[shift & 1]:
            m = base + shift
            yield m - (m & FIELD)


def _first_order_seeds(layout: Layout) -> list[int]:
    return [StateVariable.build(layout, w_part=[(i, 1)]).key for i in range(layout.n_dev)]


def _second_order_seeds(cfg: SystemConfig, layout: Layout) -> list[int]:
    n = layout.n_dev
    seeds = []
    for i in range(n):
        for j in range(i, n):
            w_part = [(i, 2)] if i == j else [(i, 1), (j, 1)]
            seeds.append(StateVariable.build(layout, w_part=w_part).key)
    seeds.extend(k for k, _ in _mse_combination(cfg, layout).coeffs)
    seeds.extend(_first_order_seeds(layout))
    return list(dict.fromkeys(seeds))


def _mse_combination(cfg: SystemConfig, layout: Layout):
    err = error_expression(cfg, layout)
    return take_expectation(multiply(err, err), cfg.moments, cfg.noise_variance)


def _seeds(cfg: SystemConfig, layout: Layout, order: int) -> list[int]:
    if order == 1:
        return _first_order_seeds(layout)
    if order == 2:
        return _second_order_seeds(cfg, layout)
    raise ValueError(f"closure order must be 1 or 2, got {order}")


def initial_state(cfg: SystemConfig, variables: list[StateVariable]) -> np.ndarray:
    """Moments at ``k=0``: ``w(0)=0`` and a stationary prefilled delay line."""
    out = np.empty(len(variables))
    head = cfg.w_head
    for idx, var in enumerate(variables):
        val = 1.0
        for _, p in var.u_part:
            val *= cfg.moments.gamma(p)
        for i, q in var.w_part:
            val *= head[i] ** q
        out[idx] = val
    return out


def derive_model(cfg: SystemConfig, order: int = 1, cap: int = DEFAULT_CAP) -> StateSpaceModel:
    """Close the exact moment recursions of the given order into a linear model.

    Variables are numbered seeds first, then in breadth-first discovery
    order. Order-2 models are seeded with every ``E[wt_i wt_j]``, every
    moment in the MSE expression and every ``E[wt_i]``, so both the MSE and
    the mean weights are always readable from the state.
    """
    engine = _Engine(cfg)
    layout = engine.layout
    seeds = _seeds(cfg, layout, order)
    index: dict[int, int] = {}
    keys: list[int] = []
    for key in seeds:
        index[key] = len(keys)
        keys.append(key)
    if len(keys) > cap:
        raise ClosureCapExceeded(len(keys), cap)

    rows: tuple[list, list, list] = ([], [], [])
    cols: tuple[list, list, list] = ([], [], [])
    vals: tuple[list, list, list] = ([], [], [])
    forcing: list[list[float]] = []
    pos = 0
    while pos < len(keys):
        coeffs, const = engine.recursion(keys[pos])
        for d in range(3):
            for skey, v in coeffs[d].items():
                j = index.get(skey)
                if j is None:
                    j = len(keys)
                    if j >= cap:
                        raise ClosureCapExceeded(j + 1, cap)
                    index[skey] = j
                    keys.append(skey)
                rows[d].append(pos)
                cols[d].append(j)
                vals[d].append(v)
        forcing.append(const)
        pos += 1

    n = len(keys)
    mats = [
        sp.csr_matrix((vals[d], (rows[d], cols[d])), shape=(n, n)) for d in range(3)
    ]
    f = np.array(forcing, dtype=np.float64).reshape(n, 3)
    variables = [StateVariable(layout, k) for k in keys]
    model = StateSpaceModel(
        variables,
        mats[0], mats[1], mats[2],
        f[:, 0], f[:, 1], f[:, 2],
        meta={
            "kind": "exact",
            "order": order,
            "n": cfg.n_adaptive,
            "m": cfg.ma_order,
            "p": cfg.p_excess,
            "distribution": cfg.distribution,
        },
        initial=initial_state(cfg, variables),
    )
    mean_weight_functionals(cfg, model)
    if order == 2:
        mse_functional(cfg, model)
    log.debug("closure order %d for N=%d M=%d P=%d: %d variables",
              order, cfg.n_adaptive, cfg.ma_order, cfg.p_excess, n)
    return model


def _counting_config(n: int, m: int, p: int) -> SystemConfig:
    # generic positive taps: no accidental cancellation between terms
    return make_config(n, m, p, [1.0] * m, [1.0] * (n + p), 1.0, 1.0)


def count_equations(n: int, m: int, p: int, order: int, cap: int = DEFAULT_CAP) -> int:
    """Number of state variables of the closed system, without building matrices."""
    cfg = _counting_config(n, m, p)
    engine = _Engine(cfg, count_only=True)
    keys = _seeds(cfg, engine.layout, order) if order == 2 else _first_order_seeds(engine.layout)
    seen = set(keys)
    queue = deque(keys)
    while queue:
        for nxt in engine.successors(queue.popleft()):
            if nxt not in seen:
                seen.add(nxt)
                if len(seen) > cap:
                    raise ClosureCapExceeded(len(seen), cap)
                queue.append(nxt)
    return len(seen)


def _index_map(model: StateSpaceModel) -> dict[int, int]:
    return {var.key: i for i, var in enumerate(model.variables)}


def mse_functional(cfg: SystemConfig, model: StateSpaceModel) -> OutputFunctional:
    """Register ``mse(k) = E[e^2(k)]`` as a linear functional of the state."""
    if model.meta.get("order") != 2:
        raise ClosureError("the MSE functional needs a second-order model")
    layout = Layout.for_config(cfg)
    comb = _mse_combination(cfg, layout)
    index = _index_map(model)
    row = np.zeros(model.dim)
    for (key, bdeg), c in comb.coeffs.items():
        j = index.get(key)
        if j is None or bdeg:
            raise ClosureError(f"MSE term {StateVariable(layout, key)} is not a model variable")
        row[j] += c
    const = tuple(comb.constant.get(d, 0.0) for d in range(3))
    out = OutputFunctional(row, const)
    model.add_output("mse", out)
    return out


def mean_weight_functionals(cfg: SystemConfig, model: StateSpaceModel) -> list[OutputFunctional]:
    """Register ``mean_w_i(k) = w*_i - E[wt_i(k)]`` for every coefficient."""
    layout = Layout.for_config(cfg)
    index = _index_map(model)
    outs = []
    for i, w in enumerate(cfg.w_head):
        key = StateVariable.build(layout, w_part=[(i, 1)]).key
        j = index.get(key)
        if j is None:
            raise ClosureError(f"E[wt{i}(k)] is not a model variable")
        row = np.zeros(model.dim)
        row[j] = -1.0
        out = OutputFunctional(row, (w, 0.0, 0.0))
        model.add_output(f"mean_w_{i}", out)
        outs.append(out)
    return outs

