from __future__ import annotations

import itertools
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass
from fractions import Fraction
from types import MappingProxyType
from typing import Dict, List, Mapping, Tuple

from dotenv import load_dotenv

from app.errors import BudgetExceeded, ContractViolation, IdentityCheckFailed
from app.kernels import SymKernel, contract, inner, symmetrize
from app.measure_space import MeasureSpace

load_dotenv()

logger = logging.getLogger("chaos_lab")


def _word_max_k() -> int:
    return int(os.environ.get("CHAOS_WORD_MAX_K", "12"))


# ---------------------------
# Chaotic decompositions
# ---------------------------


@dataclass(frozen=True, eq=False)
class ChaosVector:
    """Finite chaotic decomposition F = f_0 + sum_k I_k(f_k); absent orders are zero."""

    space: MeasureSpace
    terms: Mapping[int, SymKernel]

    def __post_init__(self):
        checked: Dict[int, SymKernel] = {}
        for k in sorted(self.terms):
            f = self.terms[k]
            if f.order != k:
                raise ContractViolation(f"term stored under order {k} has order {f.order}")
            if f.space != self.space:
                raise ContractViolation(f"order-{k} term lives on a different measure space")
            checked[k] = f
        object.__setattr__(self, "terms", MappingProxyType(checked))

    @classmethod
    def single(cls, f: SymKernel) -> "ChaosVector":
        return cls(f.space, {f.order: f})

    @classmethod
    def constant(cls, space: MeasureSpace, c: float) -> "ChaosVector":
        return cls(space, {0: SymKernel.constant(space, c)})

    @classmethod
    def zero(cls, space: MeasureSpace) -> "ChaosVector":
        return cls(space, {})

    @property
    def orders(self) -> List[int]:
        return list(self.terms)

    @property
    def max_order(self) -> int:
        return max(self.terms, default=0)

    def kernel(self, k: int) -> SymKernel:
        return self.terms.get(k) or SymKernel.zeros(self.space, k)

    def mean(self) -> float:
        return self.terms[0].scalar() if 0 in self.terms else 0.0

    def variance(self) -> float:
        return math.fsum(math.factorial(k) * inner(f, f) for k, f in self.terms.items() if k > 0)

    def second_moment(self) -> float:
        return self.mean() ** 2 + self.variance()

    def expect_product(self, other: "ChaosVector") -> float:
        """E[F G] through the isometry."""
        if other.space != self.space:
            raise ContractViolation("chaos vectors live on different measure spaces")
        common = set(self.terms) & set(other.terms)
        return math.fsum(math.factorial(k) * inner(self.terms[k], other.terms[k]) for k in common)

    def apply_generator(self) -> "ChaosVector":
        """L F: the order-k term is multiplied by -k."""
        return ChaosVector(self.space, {k: f * (-k) for k, f in self.terms.items() if k > 0})

    def pruned(self) -> "ChaosVector":
        return ChaosVector(self.space, {k: f for k, f in self.terms.items() if not f.is_zero()})

    def __add__(self, other: "ChaosVector") -> "ChaosVector":
        if other.space != self.space:
            raise ContractViolation("chaos vectors live on different measure spaces")
        out = dict(self.terms)
        for k, g in other.terms.items():
            out[k] = out[k] + g if k in out else g
        return ChaosVector(self.space, out)

    def __mul__(self, c: float) -> "ChaosVector":
        return ChaosVector(self.space, {k: f * c for k, f in self.terms.items()})

    __rmul__ = __mul__

    def __neg__(self) -> "ChaosVector":
        return self * -1.0

    def __sub__(self, other: "ChaosVector") -> "ChaosVector":
        return self + (-other)


# ---------------------------
# Closed-form product kernels
# ---------------------------


def _h_coefficient(p: int, q: int, s: int, m: int) -> int:
    """p! q! / ((p-s)! (q-s)! (2s-m)! (m-s)!), always an integer."""
    return math.factorial(s) * math.comb(p, s) * math.comb(q, s) * math.comb(s, m - s)


def h_kernel(f: SymKernel, g: SymKernel, m: int) -> SymKernel:
    """The order p+q-m kernel of the product I_p(f) I_q(g)."""
    p, q = f.order, g.order
    if p < 1 or q < 1:
        raise ContractViolation(f"product kernels need p, q >= 1; got p={p}, q={q}")
    if not 0 <= m <= 2 * min(p, q):
        raise ContractViolation(f"m must lie in [0, {2 * min(p, q)}], got {m}")
    acc = SymKernel.zeros(f.space, p + q - m)
    for s in range(-(-m // 2), min(m, p, q) + 1):
        acc = acc + symmetrize(contract(f, g, s, m - s)) * _h_coefficient(p, q, s, m)
    return acc


def h_kernels(f: SymKernel, g: SymKernel) -> List[SymKernel]:
    """[h_{p+q}, h_{p+q-1}, ..., h_{|p-q|}]; entry m has order p+q-m."""
    return [h_kernel(f, g, m) for m in range(2 * min(f.order, g.order) + 1)]


def product_second_moment(f: SymKernel, g: SymKernel) -> float:
    """E[(I_p(f) I_q(g))^2] from the orthogonal expansion."""
    p, q = f.order, g.order
    return math.fsum(math.factorial(p + q - m) * inner(h, h) for m, h in enumerate(h_kernels(f, g)))


def product_chaos(F: ChaosVector, G: ChaosVector) -> ChaosVector:
    """Chaotic decomposition of F G, bilinear over the terms of F and G."""
    if F.space != G.space:
        raise ContractViolation("chaos vectors live on different measure spaces")
    out: Dict[int, SymKernel] = {}

    def _add(h: SymKernel) -> None:
        out[h.order] = out[h.order] + h if h.order in out else h

    for p, f in F.terms.items():
        for q, g in G.terms.items():
            if p == 0:
                _add(g * f.scalar())
            elif q == 0:
                _add(f * g.scalar())
            else:
                for h in h_kernels(f, g):
                    _add(h)
    return ChaosVector(F.space, out)


# ---------------------------
# Classical (ungrouped) product terms
# ---------------------------


@dataclass(frozen=True, eq=False)
class ClassicalTerm:
    r: int
    l: int
    coefficient: int
    kernel: SymKernel

    @property
    def order(self) -> int:
        return self.kernel.order


def classical_product_terms(f: SymKernel, g: SymKernel) -> Dict[Tuple[int, int], ClassicalTerm]:
    """{(r, l): r! C(p,r) C(q,r) C(r,l) * sym(f *_r^l g)} for 0 <= l <= r <= min(p, q)."""
    p, q = f.order, g.order
    terms: Dict[Tuple[int, int], ClassicalTerm] = {}
    for r in range(min(p, q) + 1):
        for l in range(r + 1):
            coef = math.factorial(r) * math.comb(p, r) * math.comb(q, r) * math.comb(r, l)
            terms[(r, l)] = ClassicalTerm(r, l, coef, symmetrize(contract(f, g, r, l)))
    return terms


def regroup_classical(terms: Mapping[Tuple[int, int], ClassicalTerm], p: int, q: int,
                      space: MeasureSpace) -> List[SymKernel]:
    """Group the classical terms by m = r + l; entry m has order p+q-m."""
    grouped = [SymKernel.zeros(space, p + q - m) for m in range(2 * min(p, q) + 1)]
    for (r, l), term in sorted(terms.items()):
        grouped[r + l] = grouped[r + l] + term.kernel * term.coefficient
    return grouped


# ---------------------------
# Word enumeration
# ---------------------------

LETTERS = ("L", "R", "B")


@dataclass(frozen=True, order=True)
class WordCharacteristic:
    """Letter counts (l, r, b) of a word over {L, R, B}."""

    l: int
    r: int
    b: int

    @classmethod
    def of(cls, word: Tuple[str, ...]) -> "WordCharacteristic":
        c = Counter(word)
        return cls(c["L"], c["R"], c["B"])

    @property
    def length(self) -> int:
        return self.l + self.r + self.b

    def survives(self, p: int, q: int) -> bool:
        return self.l + self.b <= p and self.r + self.b <= q and p - self.l - self.b == q - self.r - self.b

    def class_size(self) -> int:
        return math.factorial(self.length) // (
            math.factorial(self.l) * math.factorial(self.r) * math.factorial(self.b)
        )

    def coefficient(self, p: int, q: int) -> Fraction:
        s = p - self.l - self.b
        return Fraction(
            math.factorial(p) * math.factorial(q),
            math.factorial(self.l) * math.factorial(self.r) * math.factorial(self.b) * math.factorial(s),
        )


def words(k: int):
    return itertools.product(LETTERS, repeat=k)


def word_classes(k: int) -> Dict[WordCharacteristic, int]:
    """Number of length-k words per characteristic, by explicit enumeration."""
    if k < 0:
        raise ContractViolation(f"word length must be >= 0, got {k}")
    cap = _word_max_k()
    if k > cap:
        raise BudgetExceeded(
            f"word enumeration of length {k} exceeds CHAOS_WORD_MAX_K={cap} (3^{k} words)",
            budget="CHAOS_WORD_MAX_K",
            required=k,
        )
    counts: Counter = Counter()
    if k == 0:
        counts[WordCharacteristic(0, 0, 0)] += 1
        return dict(counts)
    # partitioned by leading letter, reduced in fixed letter order
    for lead in LETTERS:
        part = Counter(WordCharacteristic.of((lead,) + tail) for tail in words(k - 1))
        counts.update(part)
    return dict(sorted(counts.items()))


def word_oracle_h(f: SymKernel, g: SymKernel, k: int) -> SymKernel:
    """h_k rebuilt class by class from the {L, R, B} word expansion of D^(k)(FG)."""
    p, q = f.order, g.order
    if k > p + q or k < 0:
        raise ContractViolation(f"target order must lie in [0, {p + q}], got {k}")
    acc = SymKernel.zeros(f.space, k)
    for ch, count in word_classes(k).items():
        if count != ch.class_size():
            raise IdentityCheckFailed(
                f"characteristic {ch} has {count} words, expected {ch.class_size()}"
            )
        if not ch.survives(p, q):
            continue
        s = p - ch.l - ch.b
        kernel = symmetrize(contract(f, g, p - ch.l, s))
        acc = acc + kernel * float(ch.coefficient(p, q))
        logger.debug("word class %s contributes to h_%s", ch, k)
    return acc
