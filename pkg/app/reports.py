from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from app import __version__
from app.errors import ValidationError
from app.fmt_diagnostics import MultivariateDiagnosis, SequenceDiagnosis, Verdict
from app.kernels import SymKernel
from app.measure_space import write_text
from app.product_formula import ChaosVector
from app.rng import RNG_ALGORITHM

FORMATS = ("csv", "json-doc")

# Column tags name the identity or definition each column realises.
TAGS: Dict[str, str] = {
    "index": "sequence index n",
    "n_atoms": "atoms carrying f_n",
    "order": "chaos order p",
    "second_moment": "isometry E[F^2] = p! |f|^2",
    "fourth_moment": "fourth moment from h-kernel and contraction energies",
    "fourth_cumulant_excess": "E[F^4] - 3 E[F^2]^2",
    "var_gamma": "variance of the carre-du-champ from h-kernel energies",
    "sandwich_lower_slack": "(2p-1)^2/(4p^2) excess - Var(Gamma/p)",
    "sandwich_upper_slack": "(6/p) Var Gamma - excess",
    "wasserstein_bound": "(sqrt(2/pi) + 2) sqrt(E[F^4] - 3)",
    "kolmogorov_bound": "15.6 sqrt(E[F^4] - 3)",
    "mc_ks_distance": "empirical Kolmogorov-Smirnov distance to N(0,1)",
    "covariance_distance": "max |Sigma_n - V|",
    "atoms": "atom multiset z_1..z_p",
    "value": "kernel value",
    "kernel_formula": "f_p(z) = E[D^(p)_z F] / p!",
    "check": "identity under test",
    "residual": "max relative residual",
    "tolerance": "acceptance tolerance",
    "passed": "residual <= tolerance",
    "sample": "sample index",
    "integral": "I_p(f) at the sampled configuration",
}


def h_tag(m: int) -> str:
    return f"|h_(2p-{m})|, product-formula kernel of F^2"


def contraction_tag(r: int) -> str:
    return f"|f (x)_{r} f|, contraction with {r} integrated arguments"


def fmt(x: Any) -> str:
    """17 significant digits for floats; round-trips exactly through float()."""
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


def _json_value(x: Any) -> Any:
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not math.isfinite(x):
        return repr(x)
    if isinstance(x, dict):
        return {str(k): _json_value(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_json_value(v) for v in x]
    if isinstance(x, np.ndarray):
        return _json_value(x.tolist())
    return x


@dataclass
class Table:
    """Rows under tagged columns plus run metadata."""

    columns: List[str]
    rows: List[List[Any]] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)
    tags: Dict[str, str] = field(default_factory=dict)
    sections: Dict[str, Any] = field(default_factory=dict)

    def tag(self, column: str) -> str:
        return self.tags.get(column) or TAGS.get(column, column)


def run_metadata(command: str, seed: int, **extra: Any) -> Dict[str, Any]:
    meta = {"tool": "chaos_lab", "version": __version__, "command": command, "seed": seed, "rng": RNG_ALGORITHM}
    meta.update({k: v for k, v in extra.items() if v is not None})
    return meta


# ---------------------------
# Renderers
# ---------------------------


def render_csv(table: Table) -> str:
    buf = io.StringIO()
    for key, value in table.metadata.items():
        buf.write(f"# {key}: {fmt(value) if not isinstance(value, (list, dict)) else json.dumps(_json_value(value))}\n")
    for col in table.columns:
        buf.write(f"# column {col}: {table.tag(col)}\n")
    for name, section in table.sections.items():
        buf.write(f"# {name}: {json.dumps(_json_value(section), sort_keys=True)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(table.columns)
    for row in table.rows:
        writer.writerow([fmt(v) for v in row])
    return buf.getvalue()


def render_json_doc(table: Table) -> str:
    doc = {
        "metadata": _json_value(table.metadata),
        "columns": [{"name": c, "tag": table.tag(c)} for c in table.columns],
        "rows": [{c: _json_value(v) for c, v in zip(table.columns, row)} for row in table.rows],
    }
    doc.update({k: _json_value(v) for k, v in table.sections.items()})
    # json.dumps writes floats with repr, the shortest exact round-trip form
    return json.dumps(doc, indent=2, allow_nan=False) + "\n"


def render(table: Table, fmt_name: str) -> str:
    if fmt_name == "csv":
        return render_csv(table)
    if fmt_name == "json-doc":
        return render_json_doc(table)
    raise ValidationError(f"unknown format {fmt_name!r}; expected one of {FORMATS}", field="format")


def payload_digest(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def write_report(path: Union[str, Path], table: Table, fmt_name: str) -> str:
    text = render(table, fmt_name)
    write_text(path, text)
    return text


# ---------------------------
# Table builders
# ---------------------------


def _verdicts_section(verdicts: Dict[str, Verdict]) -> Dict[str, Any]:
    return {
        name: {"quantity": v.quantity, "verdict": v.label, "slope": v.slope, "terminal": v.terminal}
        for name, v in verdicts.items()
    }


def diagnostics_table(diag: SequenceDiagnosis, metadata: Dict[str, Any]) -> Table:
    reports = diag.reports
    p = reports[0].order
    h_cols = [f"h_norm_{m}" for m in range(1, 2 * p)]
    c_cols = [f"contraction_norm_{r}" for r in range(1, p)]
    columns = (["index", "n_atoms", "second_moment", "fourth_moment", "fourth_cumulant_excess"]
               + h_cols + c_cols
               + ["var_gamma", "sandwich_lower_slack", "sandwich_upper_slack",
                  "wasserstein_bound", "kolmogorov_bound", "mc_ks_distance"])
    tags = {f"h_norm_{m}": h_tag(m) for m in range(1, 2 * p)}
    tags.update({f"contraction_norm_{r}": contraction_tag(r) for r in range(1, p)})
    rows = []
    for r in reports:
        if r.order != p:
            raise ValidationError(f"index {r.index} has order {r.order}, expected {p}", field="family")
        rows.append(
            [r.index, r.n_atoms, r.second_moment, r.fourth_moment, r.fourth_cumulant_excess]
            + [r.h_norms[m] for m in range(1, 2 * p)]
            + [r.contraction_norms[k] for k in range(1, p)]
            + [r.var_gamma, r.sandwich.lower_slack, r.sandwich.upper_slack,
               r.wasserstein_bound, r.kolmogorov_bound, r.mc_ks_distance]
        )
    meta = dict(metadata)
    meta["order"] = p
    sections = {
        "verdicts": _verdicts_section(diag.verdicts),
        "overall": "consistent with convergence" if diag.consistent else "not consistent",
        "audit": list(diag.audit_flags),
        "warnings": list(diag.warnings),
        "notes": list(diag.notes),
    }
    return Table(columns, rows, meta, tags, sections)


def multivariate_table(diag: MultivariateDiagnosis, metadata: Dict[str, Any]) -> Table:
    d = diag.reports[0].dimension
    cov_cols = [f"sigma_{i}{j}" for i in range(d) for j in range(i, d)]
    coord_cols = []
    for k in range(d):
        coord_cols += [f"c{k}_second_moment", f"c{k}_fourth_cumulant_excess", f"c{k}_max_h_norm", f"c{k}_var_gamma"]
    columns = ["index"] + cov_cols + ["covariance_distance"] + coord_cols
    tags = {f"sigma_{i}{j}": f"Sigma_n({i},{j}) = delta_(p_i p_j) p_i! <f_i, f_j>" for i in range(d) for j in range(i, d)}
    for k in range(d):
        tags[f"c{k}_second_moment"] = f"coordinate {k}: " + TAGS["second_moment"]
        tags[f"c{k}_fourth_cumulant_excess"] = f"coordinate {k}: " + TAGS["fourth_cumulant_excess"]
        tags[f"c{k}_max_h_norm"] = f"coordinate {k}: max_m |h_(2p-m)|"
        tags[f"c{k}_var_gamma"] = f"coordinate {k}: " + TAGS["var_gamma"]
    rows = []
    for rep in diag.reports:
        row: List[Any] = [rep.index]
        row += [float(rep.covariance[i, j]) for i in range(d) for j in range(i, d)]
        row.append(rep.distance)
        for c in rep.coordinates:
            row += [c.second_moment, c.fourth_cumulant_excess, max(c.h_norms.values(), default=0.0), c.var_gamma]
        rows.append(row)
    meta = dict(metadata)
    meta["orders"] = diag.reports[0].orders
    meta["target"] = diag.reports[0].target.tolist()
    sections = {
        "covariance_verdict": _verdicts_section({"covariance": diag.covariance_verdict})["covariance"],
        "coordinate_verdicts": [_verdicts_section(v) for v in diag.coordinate_verdicts],
        "overall": "consistent with convergence" if diag.consistent else "not consistent",
        "audit": list(diag.audit_flags),
        "warnings": list(diag.warnings),
        "notes": list(diag.notes),
    }
    return Table(columns, rows, meta, tags, sections)


def chaos_table(vector: ChaosVector, metadata: Dict[str, Any], sections: Optional[Dict[str, Any]] = None) -> Table:
    """One row per stored kernel entry, zero entries omitted."""
    rows = []
    for p, f in vector.terms.items():
        for atoms, v in zip(f.table.tuples, f.values):
            if v != 0:
                rows.append([p, ",".join(str(int(a)) for a in atoms), float(v)])
    tags = {"value": TAGS["kernel_formula"]}
    return Table(["order", "atoms", "value"], rows, dict(metadata), tags, dict(sections or {}))


def checks_table(checks: Sequence[Dict[str, Any]], metadata: Dict[str, Any]) -> Table:
    rows = [[c["check"], c["residual"], c["tolerance"], c["residual"] <= c["tolerance"]] for c in checks]
    passed = all(r[3] for r in rows)
    return Table(["check", "residual", "tolerance", "passed"], rows, dict(metadata), {},
                 {"overall": "pass" if passed else "fail"})


def samples_table(values: Sequence[float], kernel: SymKernel, metadata: Dict[str, Any]) -> Table:
    meta = dict(metadata)
    meta["order"] = kernel.order
    rows = [[i, float(v)] for i, v in enumerate(values)]
    return Table(["sample", "integral"], rows, meta)
