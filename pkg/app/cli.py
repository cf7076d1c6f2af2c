from __future__ import annotations

import argparse
import asyncio
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
from dotenv import load_dotenv

from app import __version__, db
from app.errors import (
    BudgetExceeded,
    ContractViolation,
    IdentityCheckFailed,
    ValidationError,
    exit_code_for,
)
from app.families import arrange, build_family, coordinate_families, explicit_family
from app.fmt_diagnostics import diagnose_multivariate, diagnose_sequence
from app.kernels import SymKernel, kernel_from_document, random_symmetric
from app.measure_space import MeasureSpace, load_space, load_space_file, read_document, write_text
from app.poisson_path import (
    chaos_functional,
    decompose,
    eval_chaos,
    eval_integral,
    expect_truncated,
    extract_kernels,
    integral_functional,
    sample_configs,
)
from app.product_formula import (
    ChaosVector,
    classical_product_terms,
    h_kernels,
    product_chaos,
    product_second_moment,
    regroup_classical,
    word_oracle_h,
)
from app.reports import (
    FORMATS,
    Table,
    checks_table,
    chaos_table,
    diagnostics_table,
    multivariate_table,
    payload_digest,
    render,
    run_metadata,
    samples_table,
)
from app.rng import check_seed, kernel_generator

load_dotenv()

logger = logging.getLogger("chaos_lab")

COMMANDS = ("product-check", "diagnose", "diagnose-mv", "decompose", "simulate")

WORD_TOL = 1e-10
PATHWISE_TOL = 1e-8
MOMENT_TOL = 1e-8
EXTRACT_TOL = 1e-7
DEFAULT_CHECK_SAMPLES = 1000


def _default_tol() -> float:
    return float(os.environ.get("CHAOS_EXPECT_TOL", "1e-12"))


# ---------------------------
# Run specification
# ---------------------------


@dataclass
class RunSpec:
    command: str
    space: Optional[str] = None
    kernels: Optional[str] = None
    families: List[str] = field(default_factory=list)
    param: Optional[float] = None
    indices: Optional[Tuple[int, int]] = None
    seed: int = 0
    samples: Optional[int] = None
    tol: Optional[float] = None
    out: Optional[str] = None
    format: str = "csv"
    orders: Optional[Tuple[int, int]] = None
    atoms: Optional[int] = None
    max_order: Optional[int] = None
    archive: Optional[str] = None
    lattice: bool = False

    def validate(self) -> "RunSpec":
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}; expected one of {COMMANDS}", field="command")
        if self.format not in FORMATS:
            raise ValidationError(f"expected one of {FORMATS}, got {self.format!r}", field="format")
        check_seed(self.seed)
        if self.tol is not None and not self.tol > 0:
            raise ValidationError(f"must be > 0, got {self.tol}", field="tol")
        if self.samples is not None and self.samples < 1:
            raise ValidationError(f"must be >= 1, got {self.samples}", field="samples")
        if self.indices is not None and not 1 <= self.indices[0] <= self.indices[1]:
            raise ValidationError(f"need 1 <= A <= B, got {self.indices}", field="indices")

        c = self.command
        if c == "product-check":
            if self.kernels is None and self.orders is None:
                raise ValidationError("product-check needs --orders P,Q or --kernels", field="orders")
            if self.kernels is None and self.space is None and self.atoms is None:
                raise ValidationError("product-check needs --space or --atoms", field="space")
        elif c == "diagnose":
            if len(self.families) > 1:
                raise ValidationError("diagnose takes a single --family", field="family")
            if not self.families and self.kernels is None:
                raise ValidationError("diagnose needs --family or --kernels", field="family")
            if self.indices is None:
                raise ValidationError("diagnose needs --indices A..B", field="indices")
            if self.samples is not None and self.samples < 1000:
                raise ValidationError(f"Monte Carlo normality needs >= 1000 samples, got {self.samples}", field="samples")
        elif c == "diagnose-mv":
            if not self.families and self.kernels is None:
                raise ValidationError("diagnose-mv needs --family per coordinate or a --kernels coordinates document",
                                      field="family")
            if self.indices is None:
                raise ValidationError("diagnose-mv needs --indices A..B", field="indices")
        elif c == "decompose":
            if self.kernels is None:
                raise ValidationError("decompose needs --kernels describing the functional", field="kernels")
            if self.max_order is None:
                raise ValidationError("decompose needs --max-order", field="max_order")
        elif c == "simulate":
            if self.kernels is None and not self.families:
                raise ValidationError("simulate needs --kernels or --family", field="kernels")
            if self.families and self.indices is None:
                raise ValidationError("simulate with --family needs --indices", field="indices")
            if self.samples is None:
                raise ValidationError("simulate needs --samples", field="samples")
        return self

    def digest(self) -> str:
        """Digest of everything that determines the payload, referenced documents included."""
        fields = asdict(self)
        fields.pop("out")
        fields.pop("archive")
        for key in ("space", "kernels"):
            path = fields.get(key)
            if path:
                fields[key] = read_document(path)
        coordinates = fields["kernels"].get("coordinates") if self.kernels else None
        if isinstance(coordinates, list):
            base = Path(self.kernels).parent
            for entry in coordinates:
                if isinstance(entry, dict) and "file" in entry:
                    entry["document"] = read_document(base / entry["file"])
        canonical = json.dumps(fields, sort_keys=True, default=str)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


# ---------------------------
# Argument parsing
# ---------------------------


def _parse_indices(text: str) -> Tuple[int, int]:
    try:
        if ".." in text:
            a, b = text.split("..", 1)
            return int(a), int(b)
        return int(text), int(text)
    except ValueError:
        raise ValidationError(f"expected A..B, got {text!r}", field="indices")


def _parse_orders(text: str) -> Tuple[int, int]:
    parts = text.split(",")
    try:
        p, q = (int(s) for s in parts)
    except ValueError:
        raise ValidationError(f"expected P,Q, got {text!r}", field="orders")
    if p < 1 or q < 1:
        raise ValidationError(f"orders must be >= 1, got {text!r}", field="orders")
    return p, q


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ValidationError(message, field="arguments")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="chaos-lab", description="Poisson chaos product formula and fourth-moment diagnostics")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--space", help="measure space document (JSON)")
    parser.add_argument("--kernels", help="kernel / family / functional document (JSON)")
    parser.add_argument("--family", action="append", default=[], help="named family; repeat for diagnose-mv")
    parser.add_argument("--param", type=float, help="family parameter (atom mass)")
    parser.add_argument("--indices", help="index range A..B")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--samples", type=int)
    parser.add_argument("--tol", type=float, help="truncation tolerance for exact expectations")
    parser.add_argument("--out", help="output path; stdout when omitted")
    parser.add_argument("--format", default="csv", choices=FORMATS)
    parser.add_argument("--orders", help="product-check orders P,Q")
    parser.add_argument("--atoms", type=int, help="product-check: unit-mass atoms when no --space is given")
    parser.add_argument("--max-order", type=int, dest="max_order")
    parser.add_argument("--archive", help="sqlite run archive path (overrides CHAOS_RUN_ARCHIVE)")
    parser.add_argument("--lattice", action="store_true", help="mid-ECDF Kolmogorov distance for lattice laws")
    return parser


def spec_from_args(argv: Optional[Sequence[str]] = None) -> RunSpec:
    args = build_parser().parse_args(argv)
    return RunSpec(
        command=args.command,
        space=args.space,
        kernels=args.kernels,
        families=list(args.family),
        param=args.param,
        indices=_parse_indices(args.indices) if args.indices else None,
        seed=args.seed,
        samples=args.samples,
        tol=args.tol,
        out=args.out,
        format=args.format,
        orders=_parse_orders(args.orders) if args.orders else None,
        atoms=args.atoms,
        max_order=args.max_order,
        archive=args.archive,
        lattice=args.lattice,
    ).validate()


# ---------------------------
# Commands
# ---------------------------


def _relative(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b)) / max(1.0, float(np.max(np.abs(b)))))


def _space(spec: RunSpec) -> MeasureSpace:
    if spec.space:
        return load_space_file(spec.space)
    if spec.atoms is None or spec.atoms < 1:
        raise ValidationError("must be an integer >= 1", field="atoms")
    return MeasureSpace.uniform(spec.atoms)


def _product_inputs(spec: RunSpec) -> Tuple[SymKernel, SymKernel]:
    if spec.kernels:
        doc = read_document(spec.kernels)
        space = load_space(doc["space"]) if "space" in doc else _space(spec)
        for key in ("f", "g"):
            if key not in doc:
                raise ValidationError(f"missing kernel {key!r}", field="kernels")
        return kernel_from_document(space, doc["f"]), kernel_from_document(space, doc["g"])
    space = _space(spec)
    p, q = spec.orders
    return (random_symmetric(space, p, kernel_generator(spec.seed, 0)),
            random_symmetric(space, q, kernel_generator(spec.seed, 1)))


def product_check(spec: RunSpec) -> Tuple[Table, int]:
    f, g = _product_inputs(spec)
    p, q = f.order, g.order
    tol = spec.tol or _default_tol()
    hs = h_kernels(f, g)
    checks: List[Dict[str, Any]] = []

    word = max(_relative(word_oracle_h(f, g, p + q - m).values, h.values) for m, h in enumerate(hs))
    checks.append({"check": "word enumeration reproduces h-kernels", "residual": word, "tolerance": WORD_TOL})

    grouped = regroup_classical(classical_product_terms(f, g), p, q, f.space)
    regroup = max(_relative(a.values, h.values) for a, h in zip(grouped, hs))
    checks.append({"check": "regrouped classical terms reproduce h-kernels", "residual": regroup, "tolerance": WORD_TOL})

    counts = sample_configs(f.space, spec.seed, spec.samples or DEFAULT_CHECK_SAMPLES)
    lhs = eval_integral(f, counts) * eval_integral(g, counts)
    product = product_chaos(ChaosVector.single(f), ChaosVector.single(g))
    rhs = eval_chaos(product, counts)
    pathwise = float(np.max(np.abs(lhs - rhs) / np.maximum(1.0, np.abs(lhs)))) if lhs.size else 0.0
    checks.append({"check": "pathwise product equals its chaos expansion", "residual": pathwise, "tolerance": PATHWISE_TOL})

    FG = integral_functional(f) * integral_functional(g)
    exact = expect_truncated(FG * FG, tol)
    closed = product_second_moment(f, g)
    moment = abs(exact.value - closed) / max(1.0, abs(closed))
    checks.append({"check": "second moment of the product from h-kernel energies", "residual": moment, "tolerance": MOMENT_TOL})

    recovered = extract_kernels(FG, p + q, tol)
    extract = max(_relative(recovered.kernel(p + q - m).values, h.values) for m, h in enumerate(hs))
    checks.append({"check": "expected iterated differences recover h-kernels", "residual": extract, "tolerance": EXTRACT_TOL})

    meta = run_metadata("product-check", spec.seed, orders=[p, q], atoms=f.space.n_atoms,
                        samples=len(counts), tol=tol, truncation_level=exact.level, tail_bound=exact.tail_bound)
    table = checks_table(checks, meta)
    failed = [c["check"] for c in checks if not c["residual"] <= c["tolerance"]]
    for c in checks:
        logger.info("check %s: residual %.3e (tolerance %.0e)", c["check"], c["residual"], c["tolerance"])
    return table, 4 if failed else 0


def _family(spec: RunSpec, name: Optional[str] = None):
    if name is not None:
        return build_family(name, spec.param)
    return explicit_family(read_document(spec.kernels))


def diagnose(spec: RunSpec) -> Tuple[Table, int]:
    family = _family(spec, spec.families[0] if spec.families else None)
    a, b = spec.indices
    diag = diagnose_sequence(family, range(a, b + 1), samples=spec.samples, seed=spec.seed, lattice=spec.lattice)
    meta = run_metadata("diagnose", spec.seed, family=spec.families[0] if spec.families else "explicit",
                        param=spec.param, indices=[a, b], samples=spec.samples, lattice=spec.lattice)
    return diagnostics_table(diag, meta), 0


def diagnose_mv(spec: RunSpec) -> Tuple[Table, int]:
    coords = [build_family(name, spec.param) for name in spec.families]
    target = None
    layout = "disjoint"
    if spec.kernels:
        doc = read_document(spec.kernels)
        target = doc.get("target")
        layout = doc.get("layout", layout)
        coords += coordinate_families(doc, base=Path(spec.kernels).parent, param=spec.param)
    a, b = spec.indices
    diag = diagnose_multivariate(arrange(coords, layout), range(a, b + 1), target)
    meta = run_metadata("diagnose-mv", spec.seed, families=list(spec.families), param=spec.param,
                        indices=[a, b], layout=layout)
    return multivariate_table(diag, meta), 0


def _functional(doc: Dict[str, Any]):
    if "space" not in doc:
        raise ValidationError("missing", field="space")
    space = load_space(doc["space"])
    fdoc = doc.get("functional")
    if not isinstance(fdoc, dict):
        raise ValidationError("must be an object with 'terms'", field="functional")
    terms = fdoc.get("terms")
    if not isinstance(terms, list) or not terms:
        raise ValidationError("must be a nonempty array of kernels", field="terms")
    vector = ChaosVector.zero(space)
    for entry in terms:
        vector = vector + ChaosVector.single(kernel_from_document(space, entry))
    power = fdoc.get("power", 1)
    if not isinstance(power, int) or isinstance(power, bool) or power < 1:
        raise ValidationError(f"must be an integer >= 1, got {power!r}", field="power")
    F = chaos_functional(vector)
    return F ** power if power > 1 else F


def decompose_command(spec: RunSpec) -> Tuple[Table, int]:
    F = _functional(read_document(spec.kernels))
    tol = spec.tol or _default_tol()
    result = decompose(F, spec.max_order, tol)
    meta = run_metadata("decompose", spec.seed, max_order=spec.max_order, tol=tol,
                        truncation_level=result.level, tail_bound=result.tail_bound)
    sections = {"second_moment": result.second_moment, "parseval_residual": result.parseval_residual}
    return chaos_table(result.chaos, meta, sections), 0


def simulate(spec: RunSpec) -> Tuple[Table, int]:
    if spec.families:
        f = build_family(spec.families[0], spec.param)(spec.indices[1])
    else:
        doc = read_document(spec.kernels)
        if "space" not in doc or "kernel" not in doc:
            raise ValidationError("simulate document needs 'space' and 'kernel'", field="kernels")
        f = kernel_from_document(load_space(doc["space"]), doc["kernel"])
    values = eval_integral(f, sample_configs(f.space, spec.seed, spec.samples))
    meta = run_metadata("simulate", spec.seed, samples=spec.samples, atoms=f.space.n_atoms)
    return samples_table(values, f, meta), 0


HANDLERS = {
    "product-check": product_check,
    "diagnose": diagnose,
    "diagnose-mv": diagnose_mv,
    "decompose": decompose_command,
    "simulate": simulate,
}


# ---------------------------
# Orchestration
# ---------------------------


async def _archive(spec: RunSpec, text: str, code: int) -> Dict[str, Any]:
    await db.init_db()
    try:
        return await db.record_run(spec.command, spec.digest(), payload_digest(text), spec.seed, code)
    finally:
        await db.dispose()


def run(spec: RunSpec) -> int:
    """Execute one command, write its report, return the exit status."""
    spec.validate()
    logger.info("command %s started (seed %s)", spec.command, spec.seed)
    table, code = HANDLERS[spec.command](spec)
    text = render(table, spec.format)
    if spec.out:
        write_text(spec.out, text)
    else:
        sys.stdout.write(text)

    if db.configure(spec.archive):
        result = asyncio.run(_archive(spec, text, code))
        if result["determinism"] == "mismatch":
            logger.warning("run %s: payload differs from earlier runs of the same spec", result["run_id"])
            code = 4
    logger.info("command %s finished with exit %s", spec.command, code)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        return run(spec_from_args(argv))
    except (ValidationError, ContractViolation, BudgetExceeded, IdentityCheckFailed) as e:
        code = exit_code_for(e)
        if isinstance(e, BudgetExceeded):
            logger.error("budget %s exceeded: %s", e.budget, e)
        else:
            logger.error("%s", e)
        sys.stderr.write(f"error: {e}\n")
        return code
