from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Mapping, Sequence, Tuple, Union

import numpy as np

from app.errors import ValidationError


@dataclass(frozen=True)
class MeasureSpace:
    """Finite atomic measure space: atom i carries mass masses[i] > 0."""

    n_atoms: int
    masses: Tuple[float, ...]

    def __post_init__(self):
        if not isinstance(self.n_atoms, int) or isinstance(self.n_atoms, bool) or self.n_atoms < 1:
            raise ValidationError("must be an integer >= 1", field="atoms")
        if len(self.masses) != self.n_atoms:
            raise ValidationError(
                f"expected {self.n_atoms} entries, got {len(self.masses)}", field="masses"
            )
        for i, m in enumerate(self.masses):
            if not math.isfinite(m) or m <= 0:
                raise ValidationError(f"entry {i} must be finite and > 0, got {m!r}", field="masses")

    @classmethod
    def uniform(cls, n_atoms: int, mass: float = 1.0) -> "MeasureSpace":
        return cls(n_atoms, tuple(float(mass) for _ in range(n_atoms)))

    @property
    def mass_array(self) -> np.ndarray:
        return np.asarray(self.masses, dtype=float)

    def total_mass(self) -> float:
        return math.fsum(self.masses)

    def to_document(self) -> Dict[str, Any]:
        return {"atoms": self.n_atoms, "masses": list(self.masses)}


def _reject_constant(name: str):
    raise ValidationError(f"non-finite literal {name} is not allowed", field="document")


def _loads(text: str) -> Any:
    return json.loads(text, parse_constant=_reject_constant)


def load_space(document: Union[str, Mapping[str, Any]]) -> MeasureSpace:
    """Parse and validate a space document ({"atoms": n, "masses": [...]})."""
    if isinstance(document, str):
        try:
            document = _loads(document)
        except json.JSONDecodeError as e:
            raise ValidationError(f"not a JSON document ({e.msg} at line {e.lineno})", field="document")
    if not isinstance(document, Mapping):
        raise ValidationError("top level must be an object", field="document")

    atoms = document.get("atoms")
    if atoms is None:
        raise ValidationError("missing", field="atoms")
    if not isinstance(atoms, int) or isinstance(atoms, bool):
        raise ValidationError(f"must be an integer, got {type(atoms).__name__}", field="atoms")

    masses = document.get("masses")
    if masses is None:
        raise ValidationError("missing", field="masses")
    if not isinstance(masses, Sequence) or isinstance(masses, (str, bytes)):
        raise ValidationError("must be an array of numbers", field="masses")
    parsed = []
    for i, m in enumerate(masses):
        if isinstance(m, bool) or not isinstance(m, (int, float)):
            raise ValidationError(f"entry {i} is not a number", field="masses")
        parsed.append(float(m))
    return MeasureSpace(atoms, tuple(parsed))


def serialize(space: MeasureSpace) -> str:
    # repr-based float output keeps the masses bit-exact through load_space.
    return json.dumps(space.to_document(), sort_keys=True)


def concatenate(spaces: Sequence[MeasureSpace]) -> MeasureSpace:
    """Disjoint union; atoms of spaces[k] follow those of spaces[k-1]."""
    if not spaces:
        raise ValidationError("need at least one space", field="spaces")
    masses: Tuple[float, ...] = tuple(m for s in spaces for m in s.masses)
    return MeasureSpace(len(masses), masses)


# ---------------------------
# File I/O
# ---------------------------


def read_document(path: Union[str, Path]) -> Dict[str, Any]:
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except OSError as e:
        raise ValidationError(f"cannot read {p}: {e.strerror}", field="path")
    try:
        doc = _loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"{p} is not a JSON document ({e.msg} at line {e.lineno})", field="document")
    if not isinstance(doc, dict):
        raise ValidationError(f"{p}: top level must be an object", field="document")
    return doc


def load_space_file(path: Union[str, Path]) -> MeasureSpace:
    return load_space(read_document(path))


def write_text(path: Union[str, Path], text: str) -> Path:
    p = Path(path)
    try:
        if p.parent and not p.parent.exists():
            p.parent.mkdir(parents=True, exist_ok=True)
        # newline="" keeps payload bytes identical across platforms
        with p.open("w", encoding="utf-8", newline="") as fh:
            fh.write(text)
    except OSError as e:
        raise ValidationError(f"cannot write {p}: {e.strerror or e}", field="out")
    return p
