"""Polynomial algebra over lagged driving noise, weight deviations and
measurement noise, with the expectation rules for white symmetric input.

Generators are ``u(k-j)`` (driving noise of the MA input), ``wt_i(k)``
(weight deviation ``w*_i - w_i(k)``) and ``nu(k)`` (measurement noise). The
step size is carried as a formal marker so that one expansion serves every
step size: each monomial records how many factors of ``beta`` it holds.

Monomials are packed into one integer with an 8-bit exponent field per
generator, laid out from the least significant end as::

    u(k), u(k-1), ..., u(k-L), wt_0, ..., wt_{N-1}, nu, beta

so that multiplying monomials is integer addition and advancing every
``u`` lag by one step is a right shift of the ``u`` block.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .config import MomentOrderError, MomentSpec, SystemConfig

BITS = 8
FIELD = (1 << BITS) - 1

KINDS = ("noise_u", "deviation", "meas_noise")
_KIND_RANK = {k: r for r, k in enumerate(KINDS)}


class SymbolicError(ValueError):
    pass


@dataclass(frozen=True)
class Generator:
    kind: str
    lag: int = 0
    index: int = 0

    def __post_init__(self):
        if self.kind not in _KIND_RANK:
            raise SymbolicError(f"unknown generator kind {self.kind!r}")
        if self.lag < 0 or self.index < 0:
            raise SymbolicError("lags and indices are non-negative")
        if self.kind == "meas_noise" and self.lag:
            raise SymbolicError("nu only appears at lag 0")

    @property
    def sort_key(self) -> tuple[int, int, int]:
        return (_KIND_RANK[self.kind], self.lag, self.index)

    def __str__(self):
        if self.kind == "noise_u":
            return "u(k)" if self.lag == 0 else f"u(k-{self.lag})"
        if self.kind == "deviation":
            return f"wt{self.index}(k)"
        return "nu(k)"


def _power_str(gen: Generator, power: int) -> str:
    text = str(gen)
    if power == 1:
        return text
    name, _, rest = text.partition("(")
    return f"{name}^{power}({rest}"


class Layout:
    """Bit layout of packed monomials for a given filter length and lag depth."""

    __slots__ = (
        "n_dev", "max_lag", "u_mask", "w_mask", "w_offset", "nu_shift",
        "beta_shift", "state_mask",
    )

    def __init__(self, n_dev: int, max_lag: int):
        if n_dev < 1 or max_lag < 0:
            raise SymbolicError("layout needs n_dev >= 1 and max_lag >= 0")
        self.n_dev = n_dev
        self.max_lag = max_lag
        self.w_offset = max_lag + 1
        self.u_mask = (1 << (BITS * (max_lag + 1))) - 1
        self.w_mask = ((1 << (BITS * n_dev)) - 1) << (BITS * self.w_offset)
        self.nu_shift = BITS * (self.w_offset + n_dev)
        self.beta_shift = self.nu_shift + BITS
        self.state_mask = self.u_mask | self.w_mask

    @classmethod
    def for_config(cls, cfg: SystemConfig) -> "Layout":
        return cls(cfg.n_adaptive, cfg.max_lag)

    def __eq__(self, other):
        return (
            isinstance(other, Layout)
            and self.n_dev == other.n_dev
            and self.max_lag == other.max_lag
        )

    def __hash__(self):
        return hash((self.n_dev, self.max_lag))

    def __repr__(self):
        return f"Layout(n_dev={self.n_dev}, max_lag={self.max_lag})"

    # -- packing ---------------------------------------------------------
    def shift_of(self, gen: Generator) -> int:
        if gen.kind == "noise_u":
            if gen.lag > self.max_lag:
                raise SymbolicError(f"lag {gen.lag} exceeds layout depth {self.max_lag}")
            return BITS * gen.lag
        if gen.kind == "deviation":
            if gen.index >= self.n_dev:
                raise SymbolicError(f"deviation index {gen.index} >= N={self.n_dev}")
            return BITS * (self.w_offset + gen.index)
        return self.nu_shift

    def pack(self, factors: Iterable[tuple[Generator, int]], beta_degree: int = 0) -> int:
        key = beta_degree << self.beta_shift
        for gen, power in factors:
            if power < 0 or power > FIELD:
                raise SymbolicError(f"power {power} out of range")
            key += power << self.shift_of(gen)
        return key

    def unpack(self, key: int) -> tuple[list[tuple[Generator, int]], int]:
        factors = []
        for lag in range(self.max_lag + 1):
            p = (key >> (BITS * lag)) & FIELD
            if p:
                factors.append((Generator("noise_u", lag=lag), p))
        for i in range(self.n_dev):
            p = (key >> (BITS * (self.w_offset + i))) & FIELD
            if p:
                factors.append((Generator("deviation", index=i), p))
        p = (key >> self.nu_shift) & FIELD
        if p:
            factors.append((Generator("meas_noise"), p))
        return factors, key >> self.beta_shift

    def sort_key(self, key: int):
        factors, bdeg = self.unpack(key)
        return (tuple((g.sort_key, p) for g, p in factors), bdeg)

    def u_powers(self, key: int) -> list[tuple[int, int]]:
        return [
            (lag, (key >> (BITS * lag)) & FIELD)
            for lag in range(self.max_lag + 1)
            if (key >> (BITS * lag)) & FIELD
        ]

    def w_powers(self, key: int) -> list[tuple[int, int]]:
        base = BITS * self.w_offset
        return [
            (i, (key >> (base + BITS * i)) & FIELD)
            for i in range(self.n_dev)
            if (key >> (base + BITS * i)) & FIELD
        ]

    def w_degree(self, key: int) -> int:
        return sum(p for _, p in self.w_powers(key))

    # -- single-generator expressions -----------------------------------
    def u(self, lag: int) -> "Expression":
        return Expression(self, {1 << (BITS * self._check_lag(lag)): 1.0})

    def w(self, index: int) -> "Expression":
        return Expression(self, {self.pack([(Generator("deviation", index=index), 1)]): 1.0})

    def nu(self) -> "Expression":
        return Expression(self, {1 << self.nu_shift: 1.0})

    def beta(self) -> "Expression":
        return Expression(self, {1 << self.beta_shift: 1.0})

    def const(self, value: float) -> "Expression":
        return Expression(self, {0: float(value)})

    def _check_lag(self, lag: int) -> int:
        if not 0 <= lag <= self.max_lag:
            raise SymbolicError(f"lag {lag} outside 0..{self.max_lag}")
        return lag


@dataclass(frozen=True)
class Monomial:
    factors: tuple[tuple[Generator, int], ...]
    coefficient: float
    beta_degree: int = 0

    def __str__(self):
        parts = [repr(self.coefficient)]
        if self.beta_degree:
            parts.append("beta" if self.beta_degree == 1 else f"beta^{self.beta_degree}")
        parts.extend(_power_str(g, p) for g, p in self.factors)
        return "*".join(parts)


class Expression:
    """Expanded polynomial with float coefficients; zero terms never stored."""

    __slots__ = ("layout", "terms")

    def __init__(self, layout: Layout, terms: Mapping[int, float] | None = None):
        self.layout = layout
        self.terms = {k: float(c) for k, c in (terms or {}).items() if c != 0.0}

    @classmethod
    def from_monomials(cls, layout: Layout, monomials: Iterable[Monomial]) -> "Expression":
        acc: dict[int, list[float]] = defaultdict(list)
        for mono in monomials:
            acc[layout.pack(mono.factors, mono.beta_degree)].append(mono.coefficient)
        return cls(layout, {k: math.fsum(v) for k, v in acc.items()})

    def _coerce(self, other) -> "Expression":
        if isinstance(other, Expression):
            if other.layout != self.layout:
                raise SymbolicError("expressions from different layouts")
            return other
        if isinstance(other, (int, float)):
            return self.layout.const(other)
        return NotImplemented

    def __add__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        out = dict(self.terms)
        for k, c in other.terms.items():
            out[k] = out.get(k, 0.0) + c
        return Expression(self.layout, out)

    __radd__ = __add__

    def __neg__(self):
        return Expression(self.layout, {k: -c for k, c in self.terms.items()})

    def __sub__(self, other):
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return Expression(self.layout, {k: c * other for k, c in self.terms.items()})
        other = self._coerce(other)
        if other is NotImplemented:
            return other
        return multiply(self, other)

    __rmul__ = __mul__

    def __pow__(self, n: int):
        if n < 0:
            raise SymbolicError("negative powers are not polynomials")
        out = self.layout.const(1.0)
        for _ in range(n):
            out = multiply(out, self)
        return out

    def __eq__(self, other):
        if not isinstance(other, Expression):
            return NotImplemented
        return self.layout == other.layout and self.terms == other.terms

    def __len__(self):
        return len(self.terms)

    def __iter__(self):
        return iter(self.monomials())

    def __repr__(self):
        return f"Expression({self.dump(sep=' + ')!r})"

    def coefficient(self, factors: Iterable[tuple[Generator, int]], beta_degree: int = 0) -> float:
        return self.terms.get(self.layout.pack(factors, beta_degree), 0.0)

    def monomials(self) -> list[Monomial]:
        out = []
        for key in sorted(self.terms, key=self.layout.sort_key):
            factors, bdeg = self.layout.unpack(key)
            out.append(Monomial(tuple(factors), self.terms[key], bdeg))
        return out

    def max_beta_degree(self) -> int:
        return max((k >> self.layout.beta_shift for k in self.terms), default=0)

    def max_nu_power(self) -> int:
        sh = self.layout.nu_shift
        return max(((k >> sh) & FIELD for k in self.terms), default=0)

    def dump(self, sep: str = "\n") -> str:
        """Deterministic plain-text listing, one canonical term per line."""
        if not self.terms:
            return "0"
        return sep.join(str(m) for m in self.monomials())


def multiply(e1: Expression, e2: Expression) -> Expression:
    """Distribute and merge like terms.

    Each merged coefficient is an exactly rounded sum, so the result does
    not depend on operand order.
    """
    if e1.layout != e2.layout:
        raise SymbolicError("expressions from different layouts")
    acc: dict[int, list[float]] = defaultdict(list)
    for k1, c1 in e1.terms.items():
        for k2, c2 in e2.terms.items():
            acc[k1 + k2].append(c1 * c2)
    return Expression(e1.layout, {k: math.fsum(v) for k, v in acc.items()})


def regressor_sample(cfg: SystemConfig, layout: Layout, delay: int) -> Expression:
    """``x(k - delay)`` expanded through the MA filter."""
    return Expression(
        layout,
        {1 << (BITS * (delay + m)): b for m, b in enumerate(cfg.b_coeffs)},
    )


def error_expression(cfg: SystemConfig, layout: Layout | None = None) -> Expression:
    """``e(k) = sum_i x(k-i) wt_i(k) + sum_p x(k-N-p) wbar*_p + nu(k)``."""
    layout = layout or Layout.for_config(cfg)
    n = cfg.n_adaptive
    e = layout.nu()
    for i in range(n):
        e = e + multiply(regressor_sample(cfg, layout, i), layout.w(i))
    for p, wbar in enumerate(cfg.w_tail):
        e = e + regressor_sample(cfg, layout, n + p) * wbar
    return e


def expand_deviation_update(cfg: SystemConfig, layout: Layout | None = None) -> list[Expression]:
    """``wt_i(k+1)`` for each coefficient, in time-``k`` generators.

    Applies ``wt(k+1) = wt(k) - beta x(k) e(k)`` with every regressor
    sample written as its MA expansion; ``b``, the plant tail and noise
    variance are folded to numbers, ``beta`` stays formal.
    """
    layout = layout or Layout.for_config(cfg)
    err = error_expression(cfg, layout)
    beta = layout.beta()
    out = []
    for i in range(cfg.n_adaptive):
        step = multiply(multiply(beta, regressor_sample(cfg, layout, i)), err)
        out.append(layout.w(i) - step)
    return out


@dataclass(frozen=True)
class StateVariable:
    """Joint moment ``E[prod_j u(k-j)^p_j * prod_i wt_i(k)^q_i]`` with all lags >= 1."""

    layout: Layout
    key: int

    def __post_init__(self):
        if self.key & FIELD:
            raise SymbolicError("state variables carry no lag-0 noise factor")
        if self.key & ~self.layout.state_mask:
            raise SymbolicError("state variables carry no nu or beta factor")

    @classmethod
    def build(
        cls,
        layout: Layout,
        u_part: Iterable[tuple[int, int]] = (),
        w_part: Iterable[tuple[int, int]] = (),
    ) -> "StateVariable":
        factors = [(Generator("noise_u", lag=j), p) for j, p in u_part]
        factors += [(Generator("deviation", index=i), q) for i, q in w_part]
        return cls(layout, layout.pack(factors))

    @property
    def u_part(self) -> list[tuple[int, int]]:
        return self.layout.u_powers(self.key)

    @property
    def w_part(self) -> list[tuple[int, int]]:
        return self.layout.w_powers(self.key)

    @property
    def degree(self) -> int:
        return self.layout.w_degree(self.key)

    @property
    def sort_key(self):
        return (tuple(self.w_part), tuple(self.u_part))

    def __lt__(self, other: "StateVariable"):
        return self.sort_key < other.sort_key

    def __str__(self):
        factors, _ = self.layout.unpack(self.key)
        return "E[" + " ".join(_power_str(g, p) for g, p in factors) + "]"


@dataclass
class LinearCombination:
    """Result of an expectation: constant plus state-variable terms.

    Both parts are split by ``beta`` degree.
    """

    layout: Layout
    constant: dict[int, float]
    coeffs: dict[tuple[int, int], float]

    def __add__(self, other: "LinearCombination") -> "LinearCombination":
        const = dict(self.constant)
        for d, v in other.constant.items():
            const[d] = const.get(d, 0.0) + v
        coeffs = dict(self.coeffs)
        for k, v in other.coeffs.items():
            coeffs[k] = coeffs.get(k, 0.0) + v
        return LinearCombination(self.layout, _nonzero(const), _nonzero(coeffs))

    def __mul__(self, scale: float) -> "LinearCombination":
        return LinearCombination(
            self.layout,
            _nonzero({d: v * scale for d, v in self.constant.items()}),
            _nonzero({k: v * scale for k, v in self.coeffs.items()}),
        )

    __rmul__ = __mul__

    def __eq__(self, other):
        if not isinstance(other, LinearCombination):
            return NotImplemented
        return (
            self.layout == other.layout
            and _nonzero(self.constant) == _nonzero(other.constant)
            and _nonzero(self.coeffs) == _nonzero(other.coeffs)
        )

    def variables(self) -> list[StateVariable]:
        keys = dict.fromkeys(k for k, _ in self.coeffs)
        return [StateVariable(self.layout, k) for k in keys]

    def coefficient(self, var: StateVariable, beta_degree: int = 0) -> float:
        return self.coeffs.get((var.key, beta_degree), 0.0)

    def constant_at(self, beta: float) -> float:
        return sum(v * beta**d for d, v in self.constant.items())


def _nonzero(d: dict) -> dict:
    return {k: v for k, v in d.items() if v != 0.0}


class Reducer:
    """Expectation rules for one layout, moment table and noise variance.

    ``mode="exact"`` keeps joint input/deviation moments as state variables;
    only ``u(k)`` is factored out, since ``wt(k)`` is built from samples up
    to ``u(k-1)``. ``mode="ia"`` additionally factors every lagged sample
    out of the deviation moments (the independence assumption).

    Odd powers of a ``u`` sample annihilate a term before any moment
    lookup is made.
    """

    def __init__(self, layout: Layout, moments: MomentSpec, noise_variance: float, mode: str = "exact"):
        if mode not in ("exact", "ia"):
            raise SymbolicError(f"unknown reduction mode {mode!r}")
        self.layout = layout
        self.moments = moments
        self.gamma = moments.table()
        self.max_order = moments.max_order
        self.noise_variance = float(noise_variance)
        self.mode = mode
        self._pure: dict[int, float] = {}

    def lookup(self, p: int) -> float:
        # callers guarantee p is even
        if p > self.max_order:
            raise MomentOrderError(
                f"gamma_{p} requested but moments are stored up to order {self.max_order}"
            )
        return self.gamma[p]

    def pure_moment(self, ukey: int) -> float:
        """``E[prod_j u(k-j)^p_j]`` for a deviation-free packed u-part."""
        val = self._pure.get(ukey)
        if val is None:
            val = 1.0
            rest = ukey
            while rest:
                p = rest & FIELD
                if p:
                    if p & 1:
                        val = 0.0
                        break
                    val *= self.lookup(p)
                rest >>= BITS
            self._pure[ukey] = val
        return val

    def noise_factor(self, power: int) -> float:
        if power == 0:
            return 1.0
        if power == 1:
            return 0.0
        if power == 2:
            return self.noise_variance
        raise SymbolicError(f"nu(k)^{power} never arises from one squaring of the update")

    def reduce_key(self, key: int) -> tuple[int, float, int]:
        """Split one monomial into (state key or 0, numeric factor, beta degree)."""
        lay = self.layout
        bdeg = key >> lay.beta_shift
        factor = self.noise_factor((key >> lay.nu_shift) & FIELD)
        if factor == 0.0:
            return 0, 0.0, bdeg
        if self.mode == "ia":
            state = key & lay.w_mask
            return state, factor * self.pure_moment(key & lay.u_mask), bdeg
        p0 = key & FIELD
        if p0 & 1:
            return 0, 0.0, bdeg
        if p0:
            factor *= self.lookup(p0)
        rest = (key & lay.state_mask) - p0
        if rest & lay.w_mask:
            return rest, factor, bdeg
        return 0, factor * self.pure_moment(rest), bdeg

    def expect(self, expr: Expression) -> LinearCombination:
        if expr.layout != self.layout:
            raise SymbolicError("expression layout does not match reducer")
        const: dict[int, list[float]] = defaultdict(list)
        coeffs: dict[tuple[int, int], list[float]] = defaultdict(list)
        for key, c in expr.terms.items():
            state, factor, bdeg = self.reduce_key(key)
            if factor == 0.0:
                continue
            if state:
                coeffs[(state, bdeg)].append(c * factor)
            else:
                const[bdeg].append(c * factor)
        return LinearCombination(
            self.layout,
            _nonzero({d: math.fsum(v) for d, v in const.items()}),
            _nonzero({k: math.fsum(v) for k, v in coeffs.items()}),
        )


def take_expectation(
    expr: Expression, moments: MomentSpec, noise_variance: float, mode: str = "exact"
) -> LinearCombination:
    """Reduce ``E[expr]`` to a constant plus joint moments at time ``k``.

    ``nu(k)`` enters linearly (dropped) or squared (variance); ``u(k)`` is
    independent of everything else in the monomial; what remains either
    carries a deviation factor and becomes a :class:`StateVariable`, or is a
    product of independent lagged samples and becomes a constant.
    """
    return Reducer(expr.layout, moments, noise_variance, mode).expect(expr)


def shift_forward(key: int, layout: Layout) -> int:
    """Rewrite the u-part of a time-``k`` state as seen from time ``k+1``.

    ``u(k-j)`` at time ``k+1`` is ``u(k-(j-1))``: every lag drops by one.
    """
    return (key & layout.u_mask) >> BITS


def monomial_expression(layout: Layout, key: int, coefficient: float = 1.0) -> Expression:
    return Expression(layout, {key: coefficient})

