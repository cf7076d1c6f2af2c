from __future__ import annotations

import itertools
import math
import os
import string
from dataclasses import dataclass
from functools import cached_property, lru_cache
from typing import Any, Dict, Mapping, Sequence, Tuple, Union

import numpy as np
from dotenv import load_dotenv

from app.errors import ContractViolation, ValidationError
from app.measure_space import MeasureSpace

load_dotenv()


def _symmetry_rtol() -> float:
    return float(os.environ.get("CHAOS_SYMMETRY_RTOL", "1e-12"))


# ---------------------------
# Multiset (occupation) indexing
# ---------------------------


@lru_cache(maxsize=16)
def _binomials(size: int) -> np.ndarray:
    out = np.zeros((size + 1, size + 2), dtype=np.int64)
    for c in range(size + 1):
        for k in range(c + 1):
            out[c, k] = math.comb(c, k)
    return out


def _row_count(tuples) -> int:
    arr = np.asarray(tuples)
    return arr.shape[0] if arr.ndim == 2 else 1


class MultisetTable:
    """Canonical storage order for multisets of `order` atoms out of `n_atoms`.

    A multiset is kept as its sorted tuple a_0 <= ... <= a_{p-1}; the storage
    slot is the colex rank of the strictly increasing tuple a_j + j.
    """

    def __init__(self, n_atoms: int, order: int):
        self.n_atoms = n_atoms
        self.order = order
        self.size = math.comb(n_atoms + order - 1, order)
        combos = np.array(
            list(itertools.combinations_with_replacement(range(n_atoms), order)), dtype=np.int64
        ).reshape(self.size, order)
        tuples = np.empty_like(combos)
        tuples[self.rank_sorted(combos)] = combos
        self.tuples = tuples
        self.tuples.setflags(write=False)

        # powers[:, j] > 0 only at the first position of each run of equal atoms
        powers = np.zeros_like(tuples)
        for j in range(order):
            first = np.ones(len(tuples), dtype=bool) if j == 0 else tuples[:, j] != tuples[:, j - 1]
            run = np.zeros(len(tuples), dtype=np.int64)
            for k in range(j, order):
                run += tuples[:, k] == tuples[:, j]
            powers[:, j] = np.where(first, run, 0)
        self.powers = powers
        self.powers.setflags(write=False)

        fact = np.array([math.factorial(i) for i in range(order + 1)], dtype=float)
        self.multiplicity = math.factorial(order) / np.prod(fact[powers], axis=1)
        self.multiplicity.setflags(write=False)

    def rank_sorted(self, tuples: np.ndarray) -> np.ndarray:
        """Storage slot of each row of an (m, order) array of ascending tuples."""
        if self.order == 0:
            return np.zeros(_row_count(tuples), dtype=np.int64)
        tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, self.order)
        binom = _binomials(self.n_atoms + self.order)
        shifted = tuples + np.arange(self.order, dtype=np.int64)
        return binom[shifted, np.arange(1, self.order + 1)].sum(axis=1)

    def rank(self, tuples: np.ndarray) -> np.ndarray:
        if self.order == 0:
            return np.zeros(_row_count(tuples), dtype=np.int64)
        tuples = np.asarray(tuples, dtype=np.int64).reshape(-1, self.order)
        return self.rank_sorted(np.sort(tuples, axis=1))

    @cached_property
    def dense_rank(self) -> np.ndarray:
        """Slot of every entry of the flattened (n,)*order tensor."""
        p = self.order
        if p == 0:
            return np.zeros(1, dtype=np.int64)
        grid = np.indices((self.n_atoms,) * p, dtype=np.int64).reshape(p, -1).T
        return self.rank(grid)

    @cached_property
    def occupation(self) -> np.ndarray:
        occ = np.zeros((self.size, self.n_atoms), dtype=np.int64)
        rows = np.arange(self.size)
        for j in range(self.order):
            np.add.at(occ, (rows, self.tuples[:, j]), 1)
        return occ


@lru_cache(maxsize=128)
def multiset_table(n_atoms: int, order: int) -> MultisetTable:
    return MultisetTable(n_atoms, order)


@lru_cache(maxsize=128)
def _multiset_weights(masses: Tuple[float, ...], order: int) -> np.ndarray:
    """multiplicity(alpha) * prod_i mu_i^alpha_i, the L2(mu^p) weight of each slot."""
    table = multiset_table(len(masses), order)
    mu = np.asarray(masses, dtype=float)
    w = table.multiplicity * np.prod(mu[table.tuples] ** table.powers, axis=1)
    w.setflags(write=False)
    return w


# ---------------------------
# Kernel types
# ---------------------------


@dataclass(frozen=True, eq=False)
class Kernel:
    """Dense real tensor on [n]^p; order 0 is a scalar."""

    space: MeasureSpace
    values: np.ndarray

    def __post_init__(self):
        arr = np.array(self.values, dtype=float)
        n = self.space.n_atoms
        if arr.shape != (n,) * arr.ndim:
            raise ContractViolation(f"kernel shape {arr.shape} does not match {n} atoms")
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("kernel entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @property
    def order(self) -> int:
        return self.values.ndim


@dataclass(frozen=True, eq=False)
class SymKernel:
    """Symmetric kernel stored once per multiset of atoms."""

    space: MeasureSpace
    order: int
    values: np.ndarray

    def __post_init__(self):
        if self.order < 0:
            raise ContractViolation(f"order must be >= 0, got {self.order}")
        arr = np.array(self.values, dtype=float).reshape(-1)
        expected = math.comb(self.space.n_atoms + self.order - 1, self.order)
        if arr.shape != (expected,):
            raise ContractViolation(
                f"order-{self.order} kernel on {self.space.n_atoms} atoms needs {expected} values, got {arr.size}"
            )
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("kernel entries must be finite")
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def zeros(cls, space: MeasureSpace, order: int) -> "SymKernel":
        return cls(space, order, np.zeros(math.comb(space.n_atoms + order - 1, order)))

    @classmethod
    def constant(cls, space: MeasureSpace, c: float) -> "SymKernel":
        return cls(space, 0, np.array([float(c)]))

    @property
    def table(self) -> MultisetTable:
        return multiset_table(self.space.n_atoms, self.order)

    @property
    def weights(self) -> np.ndarray:
        return _multiset_weights(self.space.masses, self.order)

    def scalar(self) -> float:
        if self.order != 0:
            raise ContractViolation(f"scalar() needs an order-0 kernel, got order {self.order}")
        return float(self.values[0])

    def value(self, atoms: Sequence[int]) -> float:
        if len(atoms) != self.order:
            raise ContractViolation(f"expected {self.order} atoms, got {len(atoms)}")
        return float(self.values[self.table.rank(np.array(atoms))[0]])

    def to_dense(self) -> Kernel:
        n, p = self.space.n_atoms, self.order
        return Kernel(self.space, self.values[self.table.dense_rank].reshape((n,) * p))

    def is_zero(self) -> bool:
        return not np.any(self.values)

    def _compatible(self, other: "SymKernel") -> None:
        if not isinstance(other, SymKernel):
            raise ContractViolation(f"expected SymKernel, got {type(other).__name__}")
        if other.order != self.order:
            raise ContractViolation(f"order mismatch: {self.order} vs {other.order}")
        if other.space != self.space:
            raise ContractViolation("kernels live on different measure spaces")

    def __add__(self, other: "SymKernel") -> "SymKernel":
        self._compatible(other)
        return SymKernel(self.space, self.order, self.values + other.values)

    def __sub__(self, other: "SymKernel") -> "SymKernel":
        self._compatible(other)
        return SymKernel(self.space, self.order, self.values - other.values)

    def __neg__(self) -> "SymKernel":
        return SymKernel(self.space, self.order, -self.values)

    def __mul__(self, c: float) -> "SymKernel":
        return SymKernel(self.space, self.order, self.values * float(c))

    __rmul__ = __mul__

    def __truediv__(self, c: float) -> "SymKernel":
        return SymKernel(self.space, self.order, self.values / float(c))


AnyKernel = Union[Kernel, SymKernel]


def _dense(f: AnyKernel) -> np.ndarray:
    return f.values if isinstance(f, Kernel) else f.to_dense().values


# ---------------------------
# Symmetrization and pairing
# ---------------------------


def symmetrize(f: AnyKernel) -> SymKernel:
    """Canonical symmetrization: average of f over all argument permutations."""
    if isinstance(f, SymKernel):
        return f
    table = multiset_table(f.space.n_atoms, f.order)
    if f.order == 0:
        return SymKernel(f.space, 0, f.values.reshape(1))
    slots = table.dense_rank
    sums = np.bincount(slots, weights=f.values.reshape(-1), minlength=table.size)
    return SymKernel(f.space, f.order, sums / table.multiplicity)


def from_dense(space: MeasureSpace, values: Any, *, validate: bool = True) -> SymKernel:
    """Build a SymKernel from a dense tensor, refusing asymmetric input when validate."""
    raw = Kernel(space, values)
    sym = symmetrize(raw)
    if validate and raw.order > 1:
        scale = max(1.0, float(np.max(np.abs(raw.values))))
        deviation = float(np.max(np.abs(sym.to_dense().values - raw.values)))
        if deviation > _symmetry_rtol() * scale:
            raise ContractViolation(f"kernel is not symmetric (max deviation {deviation:.3e})")
    return sym


def _check_pair(f: AnyKernel, g: AnyKernel) -> None:
    if f.space != g.space:
        raise ContractViolation("kernels live on different measure spaces")
    if f.order != g.order:
        raise ContractViolation(f"order mismatch: {f.order} vs {g.order}")


def _weighted_sum(arr: np.ndarray, mu: np.ndarray) -> float:
    p = arr.ndim
    if p == 0:
        return float(arr)
    letters = string.ascii_letters[:p]
    return float(np.einsum(f"{letters}," + ",".join(letters) + "->", arr, *([mu] * p), optimize=True))


def inner(f: AnyKernel, g: AnyKernel) -> float:
    """<f, g> in L2(mu^p)."""
    _check_pair(f, g)
    if isinstance(f, SymKernel) and isinstance(g, SymKernel):
        return float(np.dot(f.weights, f.values * g.values))
    return _weighted_sum(_dense(f) * _dense(g), f.space.mass_array)


def norm(f: AnyKernel) -> float:
    return math.sqrt(max(inner(f, f), 0.0))


# ---------------------------
# Contractions
# ---------------------------


def contract(f: AnyKernel, g: AnyKernel, r: int, l: int) -> Kernel:
    """Contraction f *_r^l g of order p + q - r - l.

    l shared arguments are integrated against mu, r - l further shared
    arguments are identified. Output arguments are ordered
    (identified, remaining f arguments, remaining g arguments).
    """
    p, q = f.order, g.order
    if not (0 <= l <= r <= min(p, q)):
        raise ContractViolation(f"need 0 <= l <= r <= min(p, q); got r={r}, l={l}, p={p}, q={q}")
    if f.space != g.space:
        raise ContractViolation("kernels live on different measure spaces")

    letters = iter(string.ascii_letters)
    xs = [next(letters) for _ in range(l)]
    ys = [next(letters) for _ in range(r - l)]
    ts = [next(letters) for _ in range(p - r)]
    ss = [next(letters) for _ in range(q - r)]
    f_sub = "".join(xs + ys + ts)
    g_sub = "".join(xs + ys + ss)
    out_sub = "".join(ys + ts + ss)
    subscripts = ",".join([f_sub, g_sub] + xs) + "->" + out_sub
    mu = f.space.mass_array
    values = np.einsum(subscripts, _dense(f), _dense(g), *([mu] * l), optimize=True)
    return Kernel(f.space, values)


def tensor(f: AnyKernel, g: AnyKernel) -> Kernel:
    return contract(f, g, 0, 0)


# ---------------------------
# Restriction, slicing, embedding
# ---------------------------


def slice_first(f: SymKernel, z: int) -> SymKernel:
    """The order p-1 kernel f(z, .)."""
    if f.order < 1:
        raise ContractViolation("cannot slice an order-0 kernel")
    if not 0 <= z < f.space.n_atoms:
        raise ContractViolation(f"atom {z} outside [0, {f.space.n_atoms})")
    sub = multiset_table(f.space.n_atoms, f.order - 1)
    extended = np.hstack([sub.tuples, np.full((sub.size, 1), z, dtype=np.int64)])
    return SymKernel(f.space, f.order - 1, f.values[f.table.rank(extended)])


def support_atoms(f: SymKernel) -> Tuple[int, ...]:
    nz = f.table.tuples[f.values != 0]
    return tuple(int(a) for a in np.unique(nz))


def restrict(f: SymKernel, atoms: Sequence[int]) -> SymKernel:
    """Restrict f to the sub-space spanned by `atoms` (ascending, distinct)."""
    atoms = np.asarray(sorted(set(int(a) for a in atoms)), dtype=np.int64)
    if atoms.size == 0:
        raise ContractViolation("restriction needs at least one atom")
    sub_space = MeasureSpace(int(atoms.size), tuple(f.space.masses[a] for a in atoms))
    sub = multiset_table(sub_space.n_atoms, f.order)
    return SymKernel(sub_space, f.order, f.values[f.table.rank_sorted(atoms[sub.tuples])])


def embed(f: SymKernel, space: MeasureSpace, offset: int) -> SymKernel:
    """Place f on atoms offset..offset+n_f-1 of `space`; zero elsewhere."""
    n_f = f.space.n_atoms
    if offset < 0 or offset + n_f > space.n_atoms:
        raise ContractViolation(f"block [{offset}, {offset + n_f}) does not fit in {space.n_atoms} atoms")
    if space.masses[offset:offset + n_f] != f.space.masses:
        raise ContractViolation("block masses differ from the kernel's space")
    big = multiset_table(space.n_atoms, f.order)
    out = np.zeros(big.size)
    out[big.rank_sorted(f.table.tuples + offset)] = f.values
    return SymKernel(space, f.order, out)


# ---------------------------
# Document I/O and builders
# ---------------------------


def _parse_tuple(key: Any, order: int) -> Tuple[int, ...]:
    if isinstance(key, str):
        parts = [s for s in key.replace("(", "").replace(")", "").split(",") if s.strip()]
        try:
            atoms = tuple(int(s) for s in parts)
        except ValueError:
            raise ValidationError(f"bad tuple key {key!r}", field="sparse")
    else:
        atoms = tuple(int(a) for a in key)
    if len(atoms) != order:
        raise ValidationError(f"tuple {atoms} has length {len(atoms)}, expected {order}", field="sparse")
    return atoms


def kernel_from_document(space: MeasureSpace, doc: Mapping[str, Any]) -> SymKernel:
    """Kernel from {"order": p, "dense": [...]} or {"order": p, "sparse": {"i,j": v}}.

    A sparse entry fixes the value on every permutation of its tuple.
    Dense input must be symmetric unless "symmetrize": true is given.
    """
    order = doc.get("order")
    if not isinstance(order, int) or isinstance(order, bool) or order < 0:
        raise ValidationError("must be a nonnegative integer", field="order")

    if "dense" in doc:
        try:
            arr = np.asarray(doc["dense"], dtype=float)
        except (TypeError, ValueError):
            raise ValidationError("not a numeric nested array", field="dense")
        if arr.shape != (space.n_atoms,) * order:
            raise ValidationError(f"shape {arr.shape} does not match order {order} on {space.n_atoms} atoms", field="dense")
        try:
            return from_dense(space, arr, validate=not doc.get("symmetrize", False))
        except ContractViolation as e:
            raise ValidationError(str(e), field="dense")

    if "sparse" in doc:
        entries = doc["sparse"]
        if not isinstance(entries, Mapping):
            raise ValidationError("must be an object mapping tuples to values", field="sparse")
        table = multiset_table(space.n_atoms, order)
        values = np.zeros(table.size)
        seen: Dict[int, float] = {}
        for key, v in entries.items():
            atoms = _parse_tuple(key, order)
            if any(a < 0 or a >= space.n_atoms for a in atoms):
                raise ValidationError(f"tuple {atoms} references a missing atom", field="sparse")
            slot = int(table.rank(np.array(atoms))[0])
            if slot in seen and seen[slot] != float(v):
                raise ValidationError(f"conflicting values for permutations of {atoms}", field="sparse")
            seen[slot] = float(v)
            values[slot] = float(v)
        return SymKernel(space, order, values)

    raise ValidationError("kernel needs a 'dense' or 'sparse' entry", field="kernel")


def kernel_to_document(f: SymKernel) -> Dict[str, Any]:
    sparse = {
        ",".join(str(int(a)) for a in t): float(v)
        for t, v in zip(f.table.tuples, f.values)
        if v != 0
    }
    return {"order": f.order, "sparse": sparse}


def random_symmetric(space: MeasureSpace, order: int, rng: np.random.Generator) -> SymKernel:
    return SymKernel(space, order, rng.standard_normal(math.comb(space.n_atoms + order - 1, order)))


def indicator(space: MeasureSpace, atoms: Sequence[int], value: float = 1.0) -> SymKernel:
    """value on the permutation orbit of `atoms`, zero elsewhere."""
    p = len(atoms)
    f = SymKernel.zeros(space, p)
    values = np.array(f.values)
    values[f.table.rank(np.array(atoms))[0]] = value
    return SymKernel(space, p, values)
