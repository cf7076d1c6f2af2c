from __future__ import annotations

import math
from functools import lru_cache
from pathlib import Path
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence

import numpy as np

from app.errors import ValidationError
from app.kernels import SymKernel, embed, kernel_from_document, multiset_table
from app.measure_space import MeasureSpace, concatenate, load_space, read_document

Family = Callable[[int], SymKernel]


def _check_index(n: int) -> int:
    if isinstance(n, bool) or not isinstance(n, (int, np.integer)) or n < 1:
        raise ValidationError(f"family index must be an integer >= 1, got {n!r}", field="indices")
    return int(n)


def _check_mass(mass: float) -> float:
    if not math.isfinite(mass) or mass <= 0:
        raise ValidationError(f"atom mass must be finite and > 0, got {mass!r}", field="param")
    return float(mass)


# ---------------------------
# Named builders
# ---------------------------


def uniform_p1(n: int, mass: float = 1.0) -> SymKernel:
    """f_n = (n * mass)^(-1/2) on n atoms of the given mass, so E[F_n^2] = 1."""
    n = _check_index(n)
    space = MeasureSpace.uniform(n, _check_mass(mass))
    return SymKernel(space, 1, np.full(n, 1.0 / math.sqrt(n * mass)))


def block_p2(n: int, mass: float = 1.0) -> SymKernel:
    """Normalised sum of n disjoint pair indicators on 2n atoms; E[F_n^2] = 1."""
    n = _check_index(n)
    mass = _check_mass(mass)
    space = MeasureSpace.uniform(2 * n, mass)
    table = multiset_table(2 * n, 2)
    pairs = np.column_stack([np.arange(0, 2 * n, 2), np.arange(1, 2 * n, 2)])
    values = np.zeros(table.size)
    values[table.rank_sorted(pairs)] = 1.0 / (2.0 * mass * math.sqrt(n))
    return SymKernel(space, 2, values)


def full_p2(n: int, mass: float = 1.0) -> SymKernel:
    """Normalised constant kernel on n atoms; its integrals do not tend to a normal law."""
    n = _check_index(n)
    mass = _check_mass(mass)
    space = MeasureSpace.uniform(n, mass)
    size = math.comb(n + 1, 2)
    return SymKernel(space, 2, np.full(size, 1.0 / (n * mass * math.sqrt(2.0))))


FAMILIES: Dict[str, Callable[[int, float], SymKernel]] = {
    "uniform-p1": uniform_p1,
    "block-p2": block_p2,
    "full-p2": full_p2,
}


def build_family(name: str, param: Optional[float] = None) -> Family:
    builder = FAMILIES.get(name)
    if builder is None:
        raise ValidationError(f"unknown family {name!r}; expected one of {sorted(FAMILIES)}", field="family")
    mass = 1.0 if param is None else _check_mass(param)

    @lru_cache(maxsize=8)
    def family(n: int) -> SymKernel:
        return builder(n, mass)

    return family


def explicit_family(document: Mapping[str, Any]) -> Family:
    """Per-index kernels from {"space": {...}, "kernels": {"1": {...}, "2": {...}}}.

    An entry may carry its own "space"; otherwise the top-level space is used.
    """
    entries = document.get("kernels")
    if not isinstance(entries, Mapping) or not entries:
        raise ValidationError("must be a nonempty object keyed by index", field="kernels")
    default_space = load_space(document["space"]) if "space" in document else None

    parsed: Dict[int, SymKernel] = {}
    for key, entry in entries.items():
        try:
            index = int(key)
        except (TypeError, ValueError):
            raise ValidationError(f"index key {key!r} is not an integer", field="kernels")
        if not isinstance(entry, Mapping):
            raise ValidationError(f"entry {key} must be an object", field="kernels")
        space = load_space(entry["space"]) if "space" in entry else default_space
        if space is None:
            raise ValidationError(f"entry {key} has no space and the document has none", field="space")
        parsed[index] = kernel_from_document(space, entry)

    def family(n: int) -> SymKernel:
        if n not in parsed:
            raise ValidationError(f"no kernel declared for index {n}", field="kernels")
        return parsed[n]

    return family


# ---------------------------
# Disjoint blocks
# ---------------------------


def embed_disjoint(kernels: Sequence[SymKernel]) -> List[SymKernel]:
    """Place each kernel on its own block of the concatenated space."""
    if not kernels:
        raise ValidationError("need at least one kernel", field="kernels")
    space = concatenate([f.space for f in kernels])
    out = []
    offset = 0
    for f in kernels:
        out.append(embed(f, space, offset))
        offset += f.space.n_atoms
    return out


def disjoint_families(families: Sequence[Family]) -> List[Family]:
    """Coordinate families whose kernels at each index live on disjoint atom blocks."""

    @lru_cache(maxsize=8)
    def _at(n: int):
        return tuple(embed_disjoint([fam(n) for fam in families]))

    return [lambda n, k=k: _at(n)[k] for k in range(len(families))]


# ---------------------------
# Multivariate coordinates
# ---------------------------

LAYOUTS = ("disjoint", "shared")


def _coordinate(entry: Any, k: int, base: Optional[Path], param: Optional[float]) -> Family:
    if not isinstance(entry, Mapping):
        raise ValidationError(f"coordinate {k} must be an object", field="coordinates")
    if "file" in entry:
        path = Path(entry["file"])
        if base is not None and not path.is_absolute():
            path = base / path
        return explicit_family(read_document(path))
    if "family" in entry:
        return build_family(entry["family"], entry.get("param", param))
    if "kernels" in entry:
        return explicit_family(entry)
    raise ValidationError(f"coordinate {k} needs 'family', 'kernels' or 'file'", field="coordinates")


def coordinate_families(document: Mapping[str, Any], *, base: Optional[Path] = None,
                        param: Optional[float] = None) -> List[Family]:
    """Coordinate families listed under "coordinates".

    A coordinate is {"family": name, "param": K}, an explicit family
    document, or {"file": path} naming one; relative paths resolve against
    base.
    """
    entries = document.get("coordinates", [])
    if not isinstance(entries, list):
        raise ValidationError("must be an array of coordinate objects", field="coordinates")
    return [_coordinate(entry, k, base, param) for k, entry in enumerate(entries)]


def arrange(families: Sequence[Family], layout: str = "disjoint") -> List[Family]:
    """Layout "disjoint" gives each coordinate its own atom block; "shared"
    keeps the kernels as given, so they must live on one space at every index."""
    if layout not in LAYOUTS:
        raise ValidationError(f"expected one of {LAYOUTS}, got {layout!r}", field="layout")
    if layout == "shared" or not families:
        return list(families)
    return disjoint_families(families)
