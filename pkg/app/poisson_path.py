from __future__ import annotations

import itertools
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property, lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from scipy import stats

from app.errors import BudgetExceeded, ContractViolation, ResidualChaosError
from app.kernels import SymKernel, indicator, inner, multiset_table, slice_first
from app.measure_space import MeasureSpace
from app.product_formula import LETTERS, ChaosVector
from app.rng import SAMPLE_BLOCK, block_generator, blocks

load_dotenv()

logger = logging.getLogger("chaos_lab")

MAX_DIFFERENCE_ORDER = 20
MAX_EXTRACT_ORDER = 8

# eval_integral keeps (multisets x samples) products below this many floats
_EVAL_CHUNK = 1 << 22


def _state_budget() -> int:
    return int(os.environ.get("CHAOS_STATE_BUDGET", "5000000"))


def _default_tol() -> float:
    return float(os.environ.get("CHAOS_EXPECT_TOL", "1e-12"))


def _workers() -> int:
    return max(1, int(os.environ.get("CHAOS_WORKERS", "1")))


# ---------------------------
# Configurations and functionals
# ---------------------------


@dataclass(frozen=True)
class PointConfiguration:
    """Counts N_i of the Poisson measure at each atom."""

    counts: Tuple[int, ...]

    def __post_init__(self):
        for i, c in enumerate(self.counts):
            if int(c) != c or c < 0:
                raise ContractViolation(f"count at atom {i} must be a nonnegative integer, got {c!r}")
        object.__setattr__(self, "counts", tuple(int(c) for c in self.counts))

    @property
    def n_atoms(self) -> int:
        return len(self.counts)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.counts, dtype=np.int64)

    def added(self, z: int, k: int = 1) -> "PointConfiguration":
        counts = list(self.counts)
        counts[z] += k
        return PointConfiguration(tuple(counts))


Counts = Union[PointConfiguration, np.ndarray, Sequence[int]]


def _as_counts(N: Counts, n_atoms: int) -> Tuple[np.ndarray, bool]:
    """(S, n) integer count matrix and whether a single configuration was given."""
    arr = N.as_array() if isinstance(N, PointConfiguration) else np.asarray(N)
    single = arr.ndim == 1
    arr = np.atleast_2d(arr).astype(np.int64, copy=False)
    if arr.shape[1] != n_atoms:
        raise ContractViolation(f"configuration has {arr.shape[1]} atoms, space has {n_atoms}")
    return arr, single


Rule = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class PathFunctional:
    """F = rule(eta) on a fixed space.

    rule maps an (S, n) count matrix to S values. degree bounds the
    polynomial growth in the counts; max_order is the declared highest
    chaos (None when unknown). chaos is set when F is a finite chaos
    expansion, so the add-one cost can use the chaos rule.
    """

    space: MeasureSpace
    rule: Rule
    degree: int
    max_order: Optional[int] = None
    name: str = "F"
    chaos: Optional[ChaosVector] = field(default=None, repr=False)

    def evaluate(self, N: Counts):
        counts, single = _as_counts(N, self.space.n_atoms)
        values = np.asarray(self.rule(counts), dtype=float).reshape(len(counts))
        return float(values[0]) if single else values

    def __call__(self, N: Counts):
        return self.evaluate(N)

    def _lift(self, other) -> "PathFunctional":
        if isinstance(other, PathFunctional):
            if other.space != self.space:
                raise ContractViolation("functionals live on different measure spaces")
            return other
        return constant_functional(self.space, float(other))

    def __add__(self, other) -> "PathFunctional":
        g = self._lift(other)
        chaos = self.chaos + g.chaos if self.chaos is not None and g.chaos is not None else None
        orders = None if self.max_order is None or g.max_order is None else max(self.max_order, g.max_order)
        return PathFunctional(
            self.space,
            lambda N, a=self.rule, b=g.rule: a(N) + b(N),
            max(self.degree, g.degree),
            orders,
            f"({self.name} + {g.name})",
            chaos,
        )

    __radd__ = __add__

    def __neg__(self) -> "PathFunctional":
        chaos = -self.chaos if self.chaos is not None else None
        return PathFunctional(self.space, lambda N, a=self.rule: -a(N), self.degree, self.max_order, f"-{self.name}", chaos)

    def __sub__(self, other) -> "PathFunctional":
        return self + (-self._lift(other))

    def __rsub__(self, other) -> "PathFunctional":
        return self._lift(other) - self

    def __mul__(self, other) -> "PathFunctional":
        if not isinstance(other, PathFunctional):
            c = float(other)
            chaos = self.chaos * c if self.chaos is not None else None
            return PathFunctional(self.space, lambda N, a=self.rule: c * a(N), self.degree, self.max_order, f"{c!r}*{self.name}", chaos)
        g = self._lift(other)
        orders = None if self.max_order is None or g.max_order is None else self.max_order + g.max_order
        return PathFunctional(
            self.space,
            lambda N, a=self.rule, b=g.rule: a(N) * b(N),
            self.degree + g.degree,
            orders,
            f"{self.name}*{g.name}",
        )

    __rmul__ = __mul__

    def __pow__(self, k: int) -> "PathFunctional":
        if not isinstance(k, int) or k < 0:
            raise ContractViolation(f"power must be a nonnegative integer, got {k!r}")
        orders = None if self.max_order is None else self.max_order * k
        return PathFunctional(
            self.space, lambda N, a=self.rule: a(N) ** k, self.degree * k, orders, f"{self.name}^{k}"
        )


def constant_functional(space: MeasureSpace, c: float) -> PathFunctional:
    return PathFunctional(
        space, lambda N: np.full(len(N), c), 0, 0, repr(c), ChaosVector.constant(space, c)
    )


def count_functional(space: MeasureSpace, atom: int) -> PathFunctional:
    """N_atom, the raw count; chaos terms {0: mu_atom, 1: 1_atom}."""
    _check_atom(space, atom)
    chaos = ChaosVector(space, {0: SymKernel.constant(space, space.masses[atom]), 1: indicator(space, [atom])})
    return PathFunctional(space, lambda N: N[:, atom].astype(float), 1, 1, f"N_{atom}", chaos)


# ---------------------------
# Sampling
# ---------------------------


def _draw_block(space: MeasureSpace, seed: int, block: int) -> np.ndarray:
    gen = block_generator(seed, block)
    return gen.poisson(space.mass_array, size=(SAMPLE_BLOCK, space.n_atoms)).astype(np.int64)


def sample_config(space: MeasureSpace, seed: int, index: int = 0) -> PointConfiguration:
    """Configuration number `index` of the stream keyed by seed."""
    if index < 0:
        raise ContractViolation(f"sample index must be >= 0, got {index}")
    row = _draw_block(space, seed, index // SAMPLE_BLOCK)[index % SAMPLE_BLOCK]
    return PointConfiguration(tuple(int(c) for c in row))


def sample_configs(space: MeasureSpace, seed: int, count: int) -> np.ndarray:
    """(count, n) matrix whose row i equals sample_config(space, seed, i)."""
    if count < 0:
        raise ContractViolation(f"sample count must be >= 0, got {count}")
    plan = list(blocks(count))

    def _one(item):
        block, start, stop = item
        return _draw_block(space, seed, block)[: stop - start]

    workers = _workers()
    if workers > 1 and len(plan) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_one, plan))
    else:
        parts = [_one(item) for item in plan]
    if not parts:
        return np.zeros((0, space.n_atoms), dtype=np.int64)
    return np.vstack(parts)


# ---------------------------
# Charlier polynomials and multiple integrals
# ---------------------------


def charlier(m: int, x: int, lam: float) -> float:
    """Monic Charlier polynomial C_m(x; lam)."""
    if m < 0:
        raise ContractViolation(f"degree must be >= 0, got {m}")
    if lam <= 0:
        raise ContractViolation(f"lambda must be > 0, got {lam}")
    prev, cur = 1.0, x - lam
    if m == 0:
        return prev
    for k in range(1, m):
        prev, cur = cur, (x - k - lam) * cur - k * lam * prev
    return float(cur)


def charlier_table(max_m: int, x, lam) -> np.ndarray:
    """C_k(x; lam) for k = 0..max_m, stacked on a new leading axis; x and lam broadcast."""
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    shape = np.broadcast_shapes(x.shape, lam.shape)
    out = np.empty((max_m + 1,) + shape)
    out[0] = 1.0
    if max_m >= 1:
        out[1] = x - lam
    for k in range(1, max_m):
        out[k + 1] = (x - k - lam) * out[k] - k * lam * out[k - 1]
    return out


def _integral_values(f: SymKernel, counts: np.ndarray) -> np.ndarray:
    S = len(counts)
    if f.order == 0:
        return np.full(S, f.scalar())
    nz = np.flatnonzero(f.values)
    out = np.zeros(S)
    if nz.size == 0:
        return out
    table = f.table
    coef = (table.multiplicity * f.values)[nz]
    tuples = table.tuples[nz]
    powers = table.powers[nz]
    charl = charlier_table(f.order, counts, f.space.mass_array)
    step = max(1, _EVAL_CHUNK // max(S, 1))
    for lo in range(0, nz.size, step):
        hi = min(lo + step, nz.size)
        prod = np.ones((hi - lo, S))
        for j in range(f.order):
            prod *= charl[powers[lo:hi, j], :, tuples[lo:hi, j]]
        out += coef[lo:hi] @ prod
    return out


def eval_integral(f: SymKernel, N: Counts):
    """I_p(f) at one configuration (float) or at each row of a count matrix."""
    counts, single = _as_counts(N, f.space.n_atoms)
    values = _integral_values(f, counts)
    return float(values[0]) if single else values


def eval_chaos(vector: ChaosVector, N: Counts):
    counts, single = _as_counts(N, vector.space.n_atoms)
    values = np.zeros(len(counts))
    for _, f in vector.terms.items():
        values = values + _integral_values(f, counts)
    return float(values[0]) if single else values


def integral_functional(f: SymKernel, name: Optional[str] = None) -> PathFunctional:
    return PathFunctional(
        f.space,
        lambda N: _integral_values(f, N),
        f.order,
        f.order,
        name or f"I_{f.order}(f)",
        ChaosVector.single(f),
    )


def chaos_functional(vector: ChaosVector, name: str = "F") -> PathFunctional:
    def _rule(N):
        values = np.zeros(len(N))
        for f in vector.terms.values():
            values = values + _integral_values(f, N)
        return values

    return PathFunctional(vector.space, _rule, vector.max_order, vector.max_order, name, vector)


# ---------------------------
# Difference operators
# ---------------------------


def _check_atom(space: MeasureSpace, z: int) -> None:
    if not 0 <= z < space.n_atoms:
        raise ContractViolation(f"atom {z} outside [0, {space.n_atoms})")


def chaos_derivative(vector: ChaosVector, z: int) -> ChaosVector:
    """D_z^+ on a chaos expansion: I_p(f) -> p I_{p-1}(f(z, .))."""
    _check_atom(vector.space, z)
    return ChaosVector(vector.space, {k - 1: slice_first(f, z) * k for k, f in vector.terms.items() if k > 0})


def finite_difference(F: PathFunctional, z: int) -> PathFunctional:
    """N -> F(N + e_z) - F(N)."""
    _check_atom(F.space, z)
    e = np.zeros(F.space.n_atoms, dtype=np.int64)
    e[z] = 1
    orders = None if F.max_order is None else max(F.max_order - 1, 0)
    return PathFunctional(F.space, lambda N, a=F.rule: a(N + e) - a(N), F.degree, orders, f"D_{z}{F.name}")


def add_one_cost(F: Union[PathFunctional, ChaosVector], z: int) -> PathFunctional:
    """D_z^+ F; chaos expansions take the chaos rule, opaque functionals the finite difference."""
    if isinstance(F, ChaosVector):
        return chaos_functional(chaos_derivative(F, z), name=f"D_{z}F")
    if F.chaos is not None:
        return chaos_functional(chaos_derivative(F.chaos, z), name=f"D_{z}{F.name}")
    return finite_difference(F, z)


def _difference_terms(n_atoms: int, atoms: Sequence[int]) -> List[Tuple[np.ndarray, int]]:
    """Distinct shifts of the alternating subset sum with their integer weights."""
    m = len(atoms)
    acc: Dict[Tuple[int, ...], int] = {}
    for mask in range(1 << m):
        shift = [0] * n_atoms
        size = 0
        for i in range(m):
            if mask >> i & 1:
                shift[atoms[i]] += 1
                size += 1
        key = tuple(shift)
        acc[key] = acc.get(key, 0) + (-1) ** (m - size)
    return [(np.asarray(k, dtype=np.int64), w) for k, w in sorted(acc.items()) if w != 0]


def iterated_difference(F: PathFunctional, atoms: Sequence[int]) -> PathFunctional:
    """D^(m)_{z_1..z_m} F = sum over J of (-1)^(m-|J|) F(eta + sum_{i in J} delta_{z_i})."""
    atoms = [int(z) for z in atoms]
    m = len(atoms)
    if m < 1:
        raise ContractViolation("iterated difference needs at least one atom")
    if m > MAX_DIFFERENCE_ORDER:
        raise BudgetExceeded(
            f"iterated difference of order {m} needs 2^{m} evaluations (limit order {MAX_DIFFERENCE_ORDER})",
            budget="difference-order",
            required=m,
        )
    for z in atoms:
        _check_atom(F.space, z)
    terms = _difference_terms(F.space.n_atoms, atoms)

    def _rule(N, a=F.rule):
        out = np.zeros(len(N))
        for shift, w in terms:
            out = out + w * a(N + shift)
        return out

    orders = None if F.max_order is None else max(F.max_order - m, 0)
    label = ",".join(str(z) for z in atoms)
    return PathFunctional(F.space, _rule, F.degree, orders, f"D^({m})_{{{label}}}{F.name}")


# ---------------------------
# Exact truncated expectations
# ---------------------------


@dataclass(frozen=True)
class ExpectationResult:
    value: float
    tail_bound: float
    level: int
    states: int


@lru_cache(maxsize=64)
def _stirling2_row(k: int) -> Tuple[int, ...]:
    """Stirling numbers of the second kind S(k, 0..k)."""
    row = [1]
    for j in range(1, k + 1):
        nxt = [0] * (j + 1)
        for i in range(1, j + 1):
            nxt[i] = i * (row[i] if i < j else 0) + row[i - 1]
        row = nxt
    return tuple(row)


def _poisson_raw_moment(mean: float, k: int) -> float:
    """E[S^k] for S ~ Poisson(mean), as the Touchard polynomial of degree k."""
    return math.fsum(s * mean ** i for i, s in enumerate(_stirling2_row(k)))


def _envelope_moment(total_mass: float, pad: int, degree: int) -> float:
    """E[(1 + pad + S)^degree] for S ~ Poisson(total_mass)."""
    a = 1.0 + pad
    return math.fsum(
        math.comb(degree, j) * a ** (degree - j) * _poisson_raw_moment(total_mass, j) for j in range(degree + 1)
    )


@lru_cache(maxsize=32)
def _monomials_from_values(d: int) -> np.ndarray:
    """A with a = A v for a polynomial of degree <= d in one variable, v its values at 0..d."""
    # T[b, i] = (-1)^(b-i) C(b, i): b-th forward difference at 0
    T = np.array([[(-1) ** (b - i) * math.comb(b, i) if i <= b else 0 for i in range(d + 1)]
                  for b in range(d + 1)], dtype=float)
    # M[k, b]: coefficient of x^k in C(x, b)
    M = np.zeros((d + 1, d + 1))
    falling = [1]
    for b in range(d + 1):
        M[: len(falling), b] = np.array(falling, dtype=float) / math.factorial(b)
        falling = [(falling[k - 1] if k > 0 else 0) - b * (falling[k] if k < len(falling) else 0)
                   for k in range(len(falling) + 1)]
    A = M @ T
    A.flags.writeable = False
    return A


class StateGrid:
    """F evaluated on {0..K+pad}^n with the Poisson weights of {0..K}^n.

    Expectations of F(N + beta) for |beta| <= pad are sums over shifted
    windows of the same value array. The tail bound covers |F|^power
    shifted by up to pad points.
    """

    def __init__(self, F: PathFunctional, level: int, pad: int):
        space = F.space
        n = space.n_atoms
        side = level + pad + 1
        self.F = F
        self.level = level
        self.pad = pad
        self.states = n * side ** n
        grid = np.indices((side,) * n, dtype=np.int64).reshape(n, -1).T
        self.values = F.evaluate(grid).reshape((side,) * n)
        self.totals = grid.sum(axis=1).reshape((side,) * n)

        ks = np.arange(level + 1)
        pmf = np.ones(())
        for mu in space.masses:
            pmf = np.multiply.outer(pmf, stats.poisson.pmf(ks, mu))
        self.pmf = pmf

    def window(self, beta: Sequence[int]) -> np.ndarray:
        K = self.level
        return self.values[tuple(slice(b, b + K + 1) for b in beta)]

    def expect(self, arr: np.ndarray) -> float:
        return math.fsum((arr * self.pmf).ravel())

    def difference(self, occupation: Sequence[int]) -> np.ndarray:
        """D^(m) F on {0..K}^n for the atom multiset with this occupation vector."""
        occ = [int(a) for a in occupation]
        m = sum(occ)
        out = np.zeros(self.pmf.shape)
        for beta in itertools.product(*(range(a + 1) for a in occ)):
            w = (-1) ** (m - sum(beta)) * math.prod(math.comb(a, b) for a, b in zip(occ, beta))
            out = out + w * self.window(beta)
        return out

    @cached_property
    def monomial_coefficients(self) -> np.ndarray:
        """a_alpha with F(x) = sum_alpha a_alpha x^alpha, alpha in {0..degree}^n.

        Read off the values on {0..degree}^n: forward differences at 0 give
        the binomial-basis coefficients, which expand into monomials.
        """
        d = self.F.degree
        n = self.F.space.n_atoms
        A = _monomials_from_values(d)
        coef = self.values[(slice(0, d + 1),) * n]
        for axis in range(n):
            coef = np.moveaxis(np.tensordot(A, coef, axes=([1], [axis])), 0, axis)
        return coef

    @cached_property
    def envelope(self) -> float:
        """C with |F(x)| <= C (1 + |x|)^degree for every configuration x.

        C = sum |a_alpha| over |alpha| <= degree, valid whenever F is a
        polynomial of total degree <= degree in the counts. The grid maximum
        of |F| / (1 + |x|)^degree is folded in for rules that are not.
        """
        d = self.F.degree
        n = self.F.space.n_atoms
        within = np.indices((d + 1,) * n).sum(axis=0) <= d
        certified = math.fsum(np.abs(self.monomial_coefficients[within]).tolist())
        ratios = np.abs(self.values) / (1.0 + self.totals) ** d
        return max(certified, float(np.max(ratios)))

    def tail_bound(self, power: int) -> float:
        space = self.F.space
        d = self.F.degree
        sf = stats.poisson.sf(self.level, space.mass_array)
        moment = _envelope_moment(space.total_mass(), self.pad, 2 * power * d)
        spread = 2.0 ** (self.pad * power)
        return float(
            spread * self.envelope ** power * math.sqrt(moment) * math.fsum(np.sqrt(sf).tolist())
        )


def _initial_level(space: MeasureSpace, degree: int) -> int:
    top = max(space.masses)
    return int(math.ceil(top + 6.0 * math.sqrt(top) + degree + 4))


def _build_grid(F: PathFunctional, tol: Optional[float], pad: int = 0, power: int = 1) -> Tuple[StateGrid, float]:
    tol = _default_tol() if tol is None else tol
    if not tol > 0:
        raise ContractViolation(f"tolerance must be > 0, got {tol}")
    n = F.space.n_atoms
    budget = _state_budget()
    K = _initial_level(F.space, F.degree)
    while True:
        states = n * (K + pad + 1) ** n
        if states > budget:
            raise BudgetExceeded(
                f"truncation level K={K} on {n} atoms needs {states} states, "
                f"over CHAOS_STATE_BUDGET={budget}",
                budget="CHAOS_STATE_BUDGET",
                required=K,
            )
        grid = StateGrid(F, K, pad)
        bound = grid.tail_bound(power)
        if bound < tol:
            logger.debug("truncation level K=%s for %s (tail bound %.3e)", K, F.name, bound)
            return grid, bound
        K += max(2, K // 4)


def expect_truncated(F: PathFunctional, tol: Optional[float] = None) -> ExpectationResult:
    """E[F] over {0..K}^n with K raised until the certified tail bound drops below tol."""
    grid, bound = _build_grid(F, tol)
    return ExpectationResult(grid.expect(grid.window([0] * F.space.n_atoms)), bound, grid.level, grid.states)


# ---------------------------
# Kernel extraction
# ---------------------------


def _check_max_order(F: PathFunctional, max_order: int) -> None:
    if not 0 <= max_order <= MAX_EXTRACT_ORDER:
        raise ContractViolation(f"max order must lie in [0, {MAX_EXTRACT_ORDER}], got {max_order}")
    if F.max_order is not None and F.max_order > max_order:
        raise ResidualChaosError(
            f"residual chaos beyond max order: {F.name} declares order {F.max_order} > {max_order}",
            field="max_order",
        )


def _kernels_from_grid(grid: StateGrid, max_order: int) -> Tuple[ChaosVector, float]:
    """Kernels f_p = E[D^(p) F] / p! over every atom multiset, and their worst tail error."""
    space = grid.F.space
    base = grid.tail_bound(1)
    terms: Dict[int, SymKernel] = {}
    worst = base
    for p in range(max_order + 1):
        table = multiset_table(space.n_atoms, p)
        values = np.array([grid.expect(grid.difference(occ)) for occ in table.occupation])
        terms[p] = SymKernel(space, p, values / math.factorial(p))
        worst = max(worst, base * 2.0 ** p / math.factorial(p))
    return ChaosVector(space, terms), worst


def extract_kernels(F: PathFunctional, max_order: int, tol: Optional[float] = None) -> ChaosVector:
    """Chaos kernels of F up to max_order from expected iterated differences."""
    _check_max_order(F, max_order)
    grid, _ = _build_grid(F, tol, pad=max_order)
    vector, _ = _kernels_from_grid(grid, max_order)
    return vector


@dataclass(frozen=True, eq=False)
class Decomposition:
    chaos: ChaosVector
    tail_bound: float
    level: int
    second_moment: float
    parseval_residual: float


def decompose(F: PathFunctional, max_order: int, tol: Optional[float] = None) -> Decomposition:
    """extract_kernels plus the Parseval residual E[F^2] - sum_k k! |f_k|^2."""
    _check_max_order(F, max_order)
    grid, _ = _build_grid(F, tol, pad=max_order, power=2)
    vector, bound = _kernels_from_grid(grid, max_order)
    base = grid.window([0] * F.space.n_atoms)
    second = grid.expect(base * base)
    captured = vector.mean() ** 2 + vector.variance()
    logger.info("decomposed %s up to order %s (K=%s)", F.name, max_order, grid.level)
    return Decomposition(vector, max(bound, grid.tail_bound(2)), grid.level, second, second - captured)


# ---------------------------
# Word operators on pairs
# ---------------------------


def apply_word(F: PathFunctional, G: PathFunctional, word: Sequence[str], atoms: Sequence[int]) -> Tuple[PathFunctional, PathFunctional]:
    """D^[W]_{z_1..z_k}(F, G): L differentiates F, R differentiates G, B both."""
    if len(word) != len(atoms):
        raise ContractViolation(f"word of length {len(word)} needs as many atoms, got {len(atoms)}")
    bad = [c for c in word if c not in LETTERS]
    if bad:
        raise ContractViolation(f"letters must be in {LETTERS}, got {bad[0]!r}")
    left = [z for c, z in zip(word, atoms) if c in ("L", "B")]
    right = [z for c, z in zip(word, atoms) if c in ("R", "B")]
    X = iterated_difference(F, left) if left else F
    Y = iterated_difference(G, right) if right else G
    return X, Y


def word_expansion(F: PathFunctional, G: PathFunctional, atoms: Sequence[int]) -> PathFunctional:
    """sum over words W of length k of K(D^[W](F, G)); equals D^(k)(FG)."""
    k = len(atoms)
    pieces = []
    for word in itertools.product(LETTERS, repeat=k):
        X, Y = apply_word(F, G, word, atoms)
        pieces.append(X * Y)

    def _rule(N):
        out = np.zeros(len(N))
        for piece in pieces:
            out = out + piece.rule(N)
        return out

    return PathFunctional(F.space, _rule, F.degree + G.degree, None, f"words_{k}({F.name},{G.name})")


def word_term_expectation(F: PathFunctional, G: PathFunctional, word: Sequence[str],
                          atoms: Sequence[int], tol: Optional[float] = None) -> ExpectationResult:
    X, Y = apply_word(F, G, word, atoms)
    return expect_truncated(X * Y, tol)


# ---------------------------
# Poincare inequality
# ---------------------------


@dataclass(frozen=True)
class PoincareCheck:
    second_moment: float
    mean_squared: float
    energy: float
    tail_bound: float

    @property
    def slack(self) -> float:
        return self.mean_squared + self.energy - self.second_moment


def poincare_check(F: PathFunctional, tol: Optional[float] = None) -> PoincareCheck:
    """E[F^2] against (E F)^2 + sum_z mu_z E[(D_z F)^2]."""
    space = F.space
    grid, bound = _build_grid(F, tol, pad=1, power=2)
    base = grid.window([0] * space.n_atoms)
    energy_terms = []
    for z in range(space.n_atoms):
        occ = [0] * space.n_atoms
        occ[z] = 1
        d = grid.difference(occ)
        energy_terms.append(space.masses[z] * grid.expect(d * d))
    return PoincareCheck(grid.expect(base * base), grid.expect(base) ** 2, math.fsum(energy_terms), bound)


@dataclass(frozen=True)
class PoincareChain:
    second_moment: float
    mean_squared: float
    energies: Tuple[float, ...]
    remainder: float
    tail_bound: float

    @property
    def chain_bound(self) -> float:
        """(E F)^2 + sum_m energies[m] + remainder; never below E[F^2]."""
        return self.mean_squared + math.fsum(self.energies) + self.remainder

    @property
    def exact(self) -> float:
        """(E F)^2 + sum_m energies[m] / m!, equal to E[F^2] once the remainder vanishes."""
        return self.mean_squared + math.fsum(e / math.factorial(m) for m, e in enumerate(self.energies, start=1))

    @property
    def residual(self) -> float:
        return self.second_moment - self.exact


def poincare_chain(F: PathFunctional, depth: int, tol: Optional[float] = None) -> PoincareChain:
    """Iterate the Poincare inequality depth times.

    energies[m-1] = sum over z in Z^m of mu^m(z) (E D^(m)_z F)^2 and the
    remainder is the order depth+1 term sum mu^(depth+1)(z) E[(D^(depth+1)_z F)^2].
    """
    if not 1 <= depth <= MAX_EXTRACT_ORDER:
        raise ContractViolation(f"depth must lie in [1, {MAX_EXTRACT_ORDER}], got {depth}")
    space = F.space
    grid, bound = _build_grid(F, tol, pad=depth + 1, power=2)
    base = grid.window([0] * space.n_atoms)
    energies = []
    for m in range(1, depth + 1):
        table = multiset_table(space.n_atoms, m)
        means = np.array([grid.expect(grid.difference(occ)) for occ in table.occupation])
        e = SymKernel(space, m, means)
        energies.append(inner(e, e))
    top = SymKernel.zeros(space, depth + 1)
    squares = []
    for occ in top.table.occupation:
        d = grid.difference(occ)
        squares.append(grid.expect(d * d))
    remainder = float(np.dot(top.weights, np.asarray(squares)))
    return PoincareChain(grid.expect(base * base), grid.expect(base) ** 2, tuple(energies), remainder, bound)


# ---------------------------
# Monte Carlo
# ---------------------------


@dataclass(frozen=True)
class MonteCarloResult:
    mean: float
    stderr: float
    samples: int


def mc_moment(F: PathFunctional, G: Optional[PathFunctional], samples: int, seed: int) -> MonteCarloResult:
    """Sample mean and standard error of F*G (of F when G is None)."""
    if samples < 2:
        raise ContractViolation(f"need at least 2 samples, got {samples}")
    counts = sample_configs(F.space, seed, samples)
    values = F.evaluate(counts)
    if G is not None:
        values = values * G.evaluate(counts)
    mean = math.fsum(values.tolist()) / samples
    stderr = float(np.std(values, ddof=1)) / math.sqrt(samples)
    return MonteCarloResult(mean, stderr, samples)
