from __future__ import annotations

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
from dotenv import load_dotenv
from scipy import stats

from app.errors import ContractViolation, IdentityCheckFailed, ValidationError
from app.kernels import SymKernel, contract, inner, norm, restrict, support_atoms, symmetrize
from app.product_formula import ChaosVector, h_kernel, product_second_moment
from app.poisson_path import eval_integral, sample_configs

load_dotenv()

logger = logging.getLogger("chaos_lab")

WASSERSTEIN_CONSTANT = math.sqrt(2.0 / math.pi) + 2.0
KOLMOGOROV_CONSTANT = 15.6
NORMALIZATION_WARN = 0.1
NORMALIZATION_EXACT = 1e-6
PSD_TOL = 1e-10
ZERO_FLOOR = 1e-14
LATTICE_DECIMALS = 9

NOTES = (
    "Uniform integrability of F_n^4 has no finite-sample test; convergence in law is never used "
    "to infer convergence of fourth moments.",
    "E[F_n^4] < infinity holds for every kernel on a finite atomic space and is not tested.",
    "Verdicts report trend evidence over the computed indices, not convergence.",
)

MULTIVARIATE_NOTE = (
    "Carre-du-champ targets use p_k * V(k,k) per coordinate, with p_k the order of coordinate k."
)


def _verdict_threshold() -> float:
    return float(os.environ.get("CHAOS_VERDICT_THRESHOLD", "0.05"))


def _workers() -> int:
    return max(1, int(os.environ.get("CHAOS_WORKERS", "1")))


def _check_order(f: SymKernel) -> int:
    if f.order < 1:
        raise ContractViolation(f"diagnostics need a kernel of order >= 1, got order {f.order}")
    return f.order


def _compact(f: SymKernel) -> SymKernel:
    """f restricted to the atoms it charges; all norms below are unchanged."""
    atoms = support_atoms(f)
    if not atoms or len(atoms) == f.space.n_atoms:
        return f
    return restrict(f, atoms)


# ---------------------------
# Fourth-moment identities
# ---------------------------


def _h_self_coefficient(p: int, s: int, m: int) -> Fraction:
    return Fraction(
        math.factorial(p) ** 2,
        math.factorial(p - s) ** 2 * math.factorial(2 * s - m) * math.factorial(m - s),
    )


def h_self_kernel(f: SymKernel, m: int) -> SymKernel:
    """h_{2p-m} of F^2 for F = I_p(f)."""
    p = _check_order(f)
    if not 0 <= m <= 2 * p:
        raise ContractViolation(f"m must lie in [0, {2 * p}], got {m}")
    acc = SymKernel.zeros(f.space, 2 * p - m)
    for s in range(-(-m // 2), min(m, p) + 1):
        acc = acc + symmetrize(contract(f, f, s, m - s)) * float(_h_self_coefficient(p, s, m))
    return acc


def h_norm_sequence(f: SymKernel) -> Dict[int, float]:
    """{m: |h_{2p-m}|} for m = 1 .. 2p-1."""
    p = _check_order(f)
    f = _compact(f)
    return {m: norm(h_self_kernel(f, m)) for m in range(1, 2 * p)}


def contraction_norms(f: SymKernel) -> Dict[int, float]:
    """{r: |f (x)_r f|} for r = 1 .. p-1, with r arguments integrated out."""
    p = _check_order(f)
    f = _compact(f)
    return {r: norm(contract(f, f, r, r)) for r in range(1, p)}


def _excess_terms(p: int, h_norms: Dict[int, float], c_norms: Dict[int, float]) -> float:
    """E F^4 - 3 (E F^2)^2 assembled from the h and contraction energies."""
    h_part = math.fsum(math.factorial(2 * p - m) * v * v for m, v in h_norms.items())
    c_part = math.factorial(p) ** 2 * math.fsum(math.comb(p, r) ** 2 * v * v for r, v in c_norms.items())
    return h_part + c_part


def fourth_moment(f: SymKernel) -> float:
    """E[I_p(f)^4] from the h-kernel and contraction energies of f."""
    p = _check_order(f)
    second = math.factorial(p) * inner(f, f)
    return 3.0 * second * second + _excess_terms(p, h_norm_sequence(f), contraction_norms(f))


def fourth_moment_from_product(f: SymKernel) -> float:
    """E[(F^2)^2] = sum_k k! |h_k|^2 with h from the product formula of F with itself."""
    _check_order(f)
    f = _compact(f)
    return product_second_moment(f, f)


# ---------------------------
# Carre-du-champ
# ---------------------------


def gamma(F: ChaosVector, G: ChaosVector) -> ChaosVector:
    """Gamma(F, G) = (L(FG) - F LG - G LF) / 2 = 1/2 sum_{p,q} sum_m m I_{p+q-m}(h^{pq}_{p+q-m})."""
    if F.space != G.space:
        raise ContractViolation("chaos vectors live on different measure spaces")
    out: Dict[int, SymKernel] = {}
    for p, f in F.terms.items():
        for q, g in G.terms.items():
            if p == 0 or q == 0:
                continue
            for m in range(1, 2 * min(p, q) + 1):
                h = h_kernel(f, g, m) * (0.5 * m)
                out[h.order] = out[h.order] + h if h.order in out else h
    return ChaosVector(F.space, out)


def var_gamma(f: SymKernel) -> float:
    """Var Gamma(F, F) = 1/4 sum_{m=1}^{2p-1} m^2 (2p-m)! |h_{2p-m}|^2."""
    p = _check_order(f)
    return _var_gamma_terms(p, h_norm_sequence(f))


def _var_gamma_terms(p: int, h_norms: Dict[int, float]) -> float:
    return 0.25 * math.fsum(m * m * math.factorial(2 * p - m) * v * v for m, v in h_norms.items())


@dataclass(frozen=True)
class SandwichAudit:
    """Both sides of excess <-> Var Gamma comparisons; slacks are >= 0 when they hold."""

    order: int
    excess: float
    var_gamma: float

    @property
    def lower_slack(self) -> float:
        p = self.order
        return (2 * p - 1) ** 2 / (4 * p * p) * self.excess - self.var_gamma / (p * p)

    @property
    def upper_slack(self) -> float:
        return 6.0 / self.order * self.var_gamma - self.excess

    def holds(self, rtol: float = 1e-10) -> bool:
        scale = max(abs(self.excess), abs(self.var_gamma), 1e-300)
        return self.lower_slack >= -rtol * scale and self.upper_slack >= -rtol * scale


def sandwich_audit(order: int, excess: float, var_gamma_value: float) -> SandwichAudit:
    return SandwichAudit(order, excess, var_gamma_value)


# ---------------------------
# Per-kernel report
# ---------------------------


@dataclass(frozen=True)
class DiagnosticsReport:
    index: int
    order: int
    n_atoms: int
    second_moment: float
    fourth_moment: float
    fourth_cumulant_excess: float
    contraction_norms: Dict[int, float]
    h_norms: Dict[int, float]
    var_gamma: float
    wasserstein_bound: Optional[float]
    kolmogorov_bound: Optional[float]
    mc_ks_distance: Optional[float] = None
    target_variance: float = 1.0

    @property
    def sandwich(self) -> SandwichAudit:
        return SandwichAudit(self.order, self.fourth_cumulant_excess, self.var_gamma)

    @property
    def h_energy(self) -> float:
        return max((v * v for v in self.h_norms.values()), default=0.0)

    @property
    def contraction_energy(self) -> float:
        return max((v * v for v in self.contraction_norms.values()), default=0.0)


def diagnose_kernel(f: SymKernel, index: int = 0, target_variance: float = 1.0) -> DiagnosticsReport:
    p = _check_order(f)
    n_atoms = f.space.n_atoms
    f = _compact(f)
    second = math.factorial(p) * inner(f, f)
    h_norms = h_norm_sequence(f)
    c_norms = contraction_norms(f)
    excess = _excess_terms(p, h_norms, c_norms)
    fourth = 3.0 * second * second + excess
    vg = _var_gamma_terms(p, h_norms)

    w_bound = k_bound = None
    radicand = fourth - 3.0
    if abs(second - 1.0) <= NORMALIZATION_EXACT and radicand >= 0:
        w_bound = WASSERSTEIN_CONSTANT * math.sqrt(radicand)
        k_bound = KOLMOGOROV_CONSTANT * math.sqrt(radicand)
    logger.debug("diagnosed index %s: E F^2=%.6g excess=%.6g", index, second, excess)
    return DiagnosticsReport(
        index=index,
        order=p,
        n_atoms=n_atoms,
        second_moment=second,
        fourth_moment=fourth,
        fourth_cumulant_excess=excess,
        contraction_norms=c_norms,
        h_norms=h_norms,
        var_gamma=vg,
        wasserstein_bound=w_bound,
        kolmogorov_bound=k_bound,
        target_variance=target_variance,
    )


# ---------------------------
# Verdicts
# ---------------------------

CONSISTENT = "consistent with convergence"
NOT_CONSISTENT = "not consistent"


@dataclass(frozen=True)
class Verdict:
    quantity: str
    consistent: bool
    slope: Optional[float]
    terminal: float

    @property
    def label(self) -> str:
        return CONSISTENT if self.consistent else NOT_CONSISTENT


def trend_verdict(quantity: str, indices: Sequence[int], values: Sequence[float],
                  threshold: Optional[float] = None) -> Verdict:
    """Fit log(value) against log(index) over the top half of the indices.

    Consistent when the terminal value is zero, or when the fitted slope is
    negative and the terminal value is below threshold.
    """
    if len(indices) != len(values) or not indices:
        raise ContractViolation("verdict needs matching, nonempty index and value sequences")
    threshold = _verdict_threshold() if threshold is None else threshold
    terminal = float(abs(values[-1]))
    if terminal <= ZERO_FLOOR:
        return Verdict(quantity, True, None, terminal)
    top = len(indices) // 2
    pts = [(i, abs(v)) for i, v in zip(indices[top:], values[top:]) if i > 0 and abs(v) > ZERO_FLOOR]
    if len(pts) < 2:
        return Verdict(quantity, False, None, terminal)
    x = np.log([i for i, _ in pts])
    y = np.log([v for _, v in pts])
    slope = float(np.polyfit(x, y, 1)[0])
    return Verdict(quantity, slope < -1e-9 and terminal < threshold, slope, terminal)


def _variance_verdict(indices: Sequence[int], reports: Sequence[DiagnosticsReport],
                      threshold: Optional[float]) -> Verdict:
    """|E F_n^2 - target| over the indices; exact normalisation counts as converged."""
    gaps = [abs(r.second_moment - r.target_variance) for r in reports]
    if gaps[-1] <= NORMALIZATION_EXACT * max(1.0, reports[-1].target_variance):
        return Verdict("|E F^2 - target|", True, None, gaps[-1])
    return trend_verdict("|E F^2 - target|", indices, gaps, threshold)


def _sequence_verdicts(indices: Sequence[int], reports: Sequence[DiagnosticsReport],
                       threshold: Optional[float]) -> Dict[str, Verdict]:
    """Keys name the condition each verdict tracks; energies are squared norms."""
    return {
        "variance": _variance_verdict(indices, reports, threshold),
        "fourth_moment": trend_verdict(
            "fourth_cumulant_excess", indices, [r.fourth_cumulant_excess for r in reports], threshold
        ),
        "h_and_contractions": trend_verdict(
            "max h and contraction energy", indices,
            [max(r.h_energy, r.contraction_energy) for r in reports], threshold,
        ),
        "carre_du_champ": trend_verdict("var_gamma", indices, [r.var_gamma for r in reports], threshold),
        "h_norms": trend_verdict("max h energy", indices, [r.h_energy for r in reports], threshold),
    }


# ---------------------------
# Sequence diagnostics
# ---------------------------

Family = Callable[[int], SymKernel]


@dataclass
class SequenceDiagnosis:
    reports: List[DiagnosticsReport]
    verdicts: Dict[str, Verdict]
    audit_flags: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=lambda: list(NOTES))

    @property
    def consistent(self) -> bool:
        return all(v.consistent for v in self.verdicts.values())


def _map_indices(fn, indices: Sequence[int]) -> list:
    workers = _workers()
    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, indices))
    return [fn(n) for n in indices]


def _audit(reports: Sequence[DiagnosticsReport], verdicts: Dict[str, Verdict], label: str = "") -> List[str]:
    flags = []
    for r in reports:
        if not r.sandwich.holds():
            msg = (f"{label}index {r.index}: excess/Var Gamma inequalities violated "
                   f"(lower slack {r.sandwich.lower_slack:.3e}, upper slack {r.sandwich.upper_slack:.3e})")
            logger.warning(msg)
            flags.append(msg)
        if r.fourth_moment < r.second_moment ** 2 * (1 - 1e-12):
            msg = f"{label}index {r.index}: E F^4 below (E F^2)^2"
            logger.warning(msg)
            flags.append(msg)
    if verdicts["h_norms"].consistent != verdicts["h_and_contractions"].consistent:
        msg = f"{label}h-norm verdict disagrees with the h-and-contraction verdict"
        logger.warning(msg)
        flags.append(msg)
    return flags


def diagnose_sequence(family: Family, indices: Sequence[int], *, samples: Optional[int] = None,
                      seed: int = 0, threshold: Optional[float] = None, target_variance: float = 1.0,
                      lattice: bool = False) -> SequenceDiagnosis:
    """Diagnostics for F_n = I_p(f_n) at each index, with trend verdicts.

    Monte Carlo normality is computed only at the last index and only when
    samples is given.
    """
    indices = list(indices)
    if not indices:
        raise ValidationError("need at least one index", field="indices")
    reports = _map_indices(lambda n: diagnose_kernel(family(n), n, target_variance), indices)
    warnings = []
    last = reports[-1]
    if abs(last.second_moment - target_variance) > NORMALIZATION_WARN:
        msg = (f"E[F_n^2] = {last.second_moment:.6g} at index {last.index} is not normalized "
               f"near {target_variance:g}")
        logger.warning(msg)
        warnings.append(msg)
    if samples is not None:
        ks = mc_normality(family(indices[-1]), samples, seed, lattice=lattice)
        reports[-1] = _with_ks(last, ks)

    verdicts = _sequence_verdicts(indices, reports, threshold)
    flags = _audit(reports, verdicts)
    for name, v in verdicts.items():
        logger.info("verdict %s: %s (terminal %.3e)", name, v.label, v.terminal)
    return SequenceDiagnosis(reports, verdicts, flags, warnings)


def _with_ks(report: DiagnosticsReport, ks: float) -> DiagnosticsReport:
    return replace(report, mc_ks_distance=ks)


# ---------------------------
# Multivariate diagnostics
# ---------------------------


@dataclass(frozen=True)
class MultivariateReport:
    index: int
    dimension: int
    orders: List[int]
    covariance: np.ndarray
    target: np.ndarray
    coordinates: List[DiagnosticsReport]

    @property
    def distance(self) -> float:
        return float(np.max(np.abs(self.covariance - self.target)))


@dataclass
class MultivariateDiagnosis:
    reports: List[MultivariateReport]
    coordinate_verdicts: List[Dict[str, Verdict]]
    covariance_verdict: Verdict
    audit_flags: List[str] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    notes: List[str] = field(default_factory=lambda: list(NOTES) + [MULTIVARIATE_NOTE])

    @property
    def consistent(self) -> bool:
        return self.covariance_verdict.consistent and all(
            v.consistent for coord in self.coordinate_verdicts for v in coord.values()
        )


def covariance_matrix(kernels: Sequence[SymKernel]) -> np.ndarray:
    """Sigma(i, j) = delta_{p_i p_j} p_i! <f_i, f_j>."""
    d = len(kernels)
    out = np.zeros((d, d))
    for i in range(d):
        for j in range(i, d):
            fi, fj = kernels[i], kernels[j]
            if fi.order == fj.order:
                out[i, j] = out[j, i] = math.factorial(fi.order) * inner(fi, fj)
    return out


def _check_target(target, d: int) -> np.ndarray:
    V = np.asarray(target, dtype=float)
    if V.shape != (d, d):
        raise ContractViolation(f"target has shape {V.shape}, expected ({d}, {d})")
    if not np.allclose(V, V.T, rtol=0, atol=PSD_TOL):
        raise ValidationError("target matrix must be symmetric", field="target")
    if float(np.min(np.linalg.eigvalsh(V))) < -PSD_TOL:
        raise ValidationError("target matrix must be positive semidefinite", field="target")
    return V


def diagnose_multivariate(families: Sequence[Family], indices: Sequence[int], target=None, *,
                          threshold: Optional[float] = None) -> MultivariateDiagnosis:
    """Covariance and per-coordinate diagnostics for (I_{p_1}(f_1^n), ..., I_{p_d}(f_d^n))."""
    d = len(families)
    if d < 1:
        raise ValidationError("need at least one coordinate family", field="family")
    indices = list(indices)
    if not indices:
        raise ValidationError("need at least one index", field="indices")
    V = _check_target(np.eye(d) if target is None else target, d)

    def _one(n: int) -> MultivariateReport:
        kernels = [fam(n) for fam in families]
        space = kernels[0].space
        if any(f.space != space for f in kernels):
            raise ContractViolation(f"index {n}: coordinates live on different measure spaces")
        sigma = covariance_matrix(kernels)
        low = float(np.min(np.linalg.eigvalsh(sigma)))
        if low < -PSD_TOL * max(1.0, float(np.max(np.abs(sigma)))):
            raise IdentityCheckFailed(f"index {n}: covariance has eigenvalue {low:.3e} < 0")
        coords = [diagnose_kernel(f, n, float(V[k, k])) for k, f in enumerate(kernels)]
        return MultivariateReport(n, d, [f.order for f in kernels], sigma, V, coords)

    reports = _map_indices(_one, indices)
    coordinate_verdicts = []
    flags: List[str] = []
    warnings: List[str] = []
    for k in range(d):
        coord_reports = [r.coordinates[k] for r in reports]
        verdicts = _sequence_verdicts(indices, coord_reports, threshold)
        coordinate_verdicts.append(verdicts)
        flags.extend(_audit(coord_reports, verdicts, label=f"coordinate {k}: "))
        last = coord_reports[-1]
        if abs(last.second_moment - V[k, k]) > NORMALIZATION_WARN:
            msg = f"coordinate {k}: E[F^2] = {last.second_moment:.6g} is not near V(k,k) = {V[k, k]:g}"
            logger.warning(msg)
            warnings.append(msg)
    cov = trend_verdict("max |Sigma_n - V|", indices, [r.distance for r in reports], threshold)
    logger.info("covariance verdict: %s (distance %.3e)", cov.label, cov.terminal)
    return MultivariateDiagnosis(reports, coordinate_verdicts, cov, flags, warnings)


# ---------------------------
# Monte Carlo normality
# ---------------------------


def _lattice_ks(values: np.ndarray) -> float:
    """sup over atoms of |mid-ECDF - Phi|, for laws carried by a lattice.

    Values are rounded to LATTICE_DECIMALS first so one lattice point reached
    through different summation orders counts once.
    """
    atoms, counts = np.unique(np.round(values, LATTICE_DECIMALS), return_counts=True)
    right = np.cumsum(counts) / values.size
    mid = right - 0.5 * counts / values.size
    return float(np.max(np.abs(mid - stats.norm.cdf(atoms))))


def mc_normality(f: SymKernel, samples: int, seed: int, *, lattice: bool = False) -> float:
    """Kolmogorov-Smirnov distance between sampled I_p(f) and the standard normal law."""
    if samples < 1000:
        raise ContractViolation(f"mc_normality needs at least 1000 samples, got {samples}")
    values = eval_integral(f, sample_configs(f.space, seed, samples))
    if lattice:
        return _lattice_ks(values)
    return float(stats.kstest(values, "norm").statistic)
