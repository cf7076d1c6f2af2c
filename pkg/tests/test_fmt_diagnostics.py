import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from app.errors import ContractViolation, ValidationError
from app.families import arrange, block_p2, build_family, disjoint_families, full_p2, uniform_p1
from app.fmt_diagnostics import (
    KOLMOGOROV_CONSTANT,
    WASSERSTEIN_CONSTANT,
    contraction_norms,
    covariance_matrix,
    diagnose_kernel,
    diagnose_multivariate,
    diagnose_sequence,
    fourth_moment,
    fourth_moment_from_product,
    gamma,
    h_norm_sequence,
    mc_normality,
    sandwich_audit,
    trend_verdict,
    var_gamma,
)
from app.kernels import SymKernel, indicator, norm, random_symmetric
from app.measure_space import MeasureSpace
from app.poisson_path import expect_truncated, integral_functional
from app.product_formula import ChaosVector, h_kernels, product_chaos
from app.rng import kernel_generator


def positive_kernel(space, order, index):
    f = random_symmetric(space, order, kernel_generator(5, index))
    return SymKernel(space, order, np.abs(f.values))


# ---------------------------
# Fourth moment
# ---------------------------


def test_first_order_unit_atom():
    f = indicator(MeasureSpace(1, (1.0,)), [0])
    assert fourth_moment(f) == pytest.approx(4.0)
    assert fourth_moment_from_product(f) == pytest.approx(4.0)
    assert contraction_norms(f) == {}


SPACES = {
    1: MeasureSpace(1, (0.8,)),
    2: MeasureSpace(2, (0.7, 1.3)),
    3: MeasureSpace(3, (0.5, 1.0, 1.5)),
}


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("p", [1, 2, 3])
def test_fourth_moment_matches_exact_expectation(random_kernel, n, p):
    f = random_kernel(SPACES[n], p)
    exact = expect_truncated(integral_functional(f) ** 4).value
    assert fourth_moment(f) == pytest.approx(exact, rel=1e-7)
    assert fourth_moment_from_product(f) == pytest.approx(exact, rel=1e-7)


def test_fourth_moment_with_idle_atoms(space3):
    f = indicator(space3, [0, 2], 0.8)
    exact = expect_truncated(integral_functional(f) ** 4).value
    assert fourth_moment(f) == pytest.approx(exact, rel=1e-8)


@pytest.mark.parametrize("lam", [0.5, 1.0, 2.0])
def test_single_atom_second_order(lam):
    f = indicator(MeasureSpace(1, (lam,)), [0, 0])
    report = diagnose_kernel(f)
    assert report.second_moment == pytest.approx(2 * lam**2)
    assert report.fourth_cumulant_excess == pytest.approx(48 * lam**4 + 144 * lam**3 + 8 * lam**2, rel=1e-12)
    assert report.var_gamma == pytest.approx(32 * lam**4 + 92 * lam**3 + 8 * lam**2, rel=1e-12)
    assert var_gamma(f) == pytest.approx(report.var_gamma)
    assert report.sandwich.holds()


def test_h_norms_agree_with_product_kernels(space2, random_kernel):
    f = random_kernel(space2, 2)
    hs = h_kernels(f, f)
    seq = h_norm_sequence(f)
    assert sorted(seq) == [1, 2, 3]
    for m, v in seq.items():
        assert v == pytest.approx(norm(hs[m]), rel=1e-12)
    assert sorted(contraction_norms(f)) == [1]


def test_order_zero_is_rejected(space2):
    with pytest.raises(ContractViolation):
        fourth_moment(SymKernel.constant(space2, 1.0))


# ---------------------------
# Carre-du-champ
# ---------------------------


@pytest.mark.parametrize("p", [1, 2, 3])
def test_var_gamma_equals_gamma_variance(space2, random_kernel, p):
    f = random_kernel(space2, p)
    F = ChaosVector.single(f)
    G = gamma(F, F)
    assert G.mean() == pytest.approx(p * F.second_moment(), rel=1e-12)
    assert var_gamma(f) == pytest.approx(G.variance(), rel=1e-10)


def test_gamma_from_generator(space2, random_kernel):
    F = ChaosVector.single(random_kernel(space2, 2, 0))
    G = ChaosVector.single(random_kernel(space2, 1, 1))
    lhs = gamma(F, G)
    rhs = (product_chaos(F, G).apply_generator()
           - product_chaos(F, G.apply_generator())
           - product_chaos(G, F.apply_generator())) * 0.5
    for k in set(lhs.orders) | set(rhs.orders):
        assert_allclose(lhs.kernel(k).values, rhs.kernel(k).values, atol=1e-12)


def test_gamma_of_constant_is_zero(space2, random_kernel):
    F = ChaosVector.single(random_kernel(space2, 2))
    assert gamma(F, ChaosVector.constant(space2, 3.0)).orders == []


@pytest.mark.parametrize("n, p", [(1, 1), (2, 1), (2, 2), (3, 2), (2, 3), (3, 3)])
def test_sandwich_on_positive_kernels(n, p):
    space = MeasureSpace(n, tuple(0.3 + 0.6 * i for i in range(n)))
    for i in range(4):
        f = positive_kernel(space, p, i)
        report = diagnose_kernel(f)
        assert report.sandwich.lower_slack >= -1e-10 * report.fourth_cumulant_excess
        assert report.sandwich.upper_slack >= -1e-10 * report.fourth_cumulant_excess
        assert report.fourth_moment >= report.second_moment**2


@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("p", [2, 3])
def test_sandwich_on_signed_kernels(n, p):
    space = SPACES[n]
    for i in range(30):
        f = random_symmetric(space, p, kernel_generator(41, 100 * p + i))
        report = diagnose_kernel(f)
        assert report.sandwich.lower_slack >= -1e-10 * report.fourth_cumulant_excess
        assert report.sandwich.upper_slack >= -1e-10 * report.fourth_cumulant_excess
        assert report.sandwich.holds()


def test_lower_sandwich_is_tight_in_first_order(space3, random_kernel):
    report = diagnose_kernel(random_kernel(space3, 1))
    assert abs(report.sandwich.lower_slack) < 1e-12 * report.fourth_cumulant_excess
    audit = sandwich_audit(2, excess=1.0, var_gamma_value=10.0)
    assert not audit.holds()


# ---------------------------
# Sequences and verdicts
# ---------------------------


def test_uniform_first_order_sequence():
    diag = diagnose_sequence(build_family("uniform-p1"), range(1, 51))
    for r in diag.reports:
        assert r.second_moment == pytest.approx(1.0, rel=1e-12)
        assert r.fourth_cumulant_excess == pytest.approx(1.0 / r.index, rel=1e-10)
        assert r.var_gamma == pytest.approx(0.25 / r.index, rel=1e-10)
        assert r.wasserstein_bound == pytest.approx(WASSERSTEIN_CONSTANT / math.sqrt(r.index), rel=1e-9)
        assert r.kolmogorov_bound == pytest.approx(KOLMOGOROV_CONSTANT / math.sqrt(r.index), rel=1e-9)
    assert diag.consistent
    assert set(diag.verdicts) == {"variance", "fourth_moment", "h_and_contractions", "carre_du_champ", "h_norms"}
    assert diag.verdicts["fourth_moment"].terminal == pytest.approx(0.02)
    assert diag.verdicts["fourth_moment"].slope == pytest.approx(-1.0, abs=1e-6)
    assert diag.audit_flags == []
    assert diag.warnings == []
    assert len(diag.notes) == 3


@pytest.mark.parametrize("n", [3, 7])
def test_block_pairs_excess(n):
    report = diagnose_kernel(block_p2(n))
    assert report.second_moment == pytest.approx(1.0, rel=1e-12)
    assert report.fourth_cumulant_excess == pytest.approx(13.0 / n, rel=1e-10)
    assert report.var_gamma == pytest.approx(10.5 / n, rel=1e-10)


def test_block_pairs_sequence_is_consistent():
    diag = diagnose_sequence(block_p2, range(10, 31, 4), threshold=0.5)
    assert diag.consistent
    assert diag.verdicts["fourth_moment"].slope == pytest.approx(-1.0, abs=1e-6)


def test_full_second_order_sequence_is_not_consistent():
    diag = diagnose_sequence(full_p2, range(1, 9))
    assert not diag.verdicts["fourth_moment"].consistent
    assert diag.verdicts["fourth_moment"].terminal > 5.0
    assert not diag.consistent


def test_fixed_kernel_is_not_consistent(space2, random_kernel):
    f = random_kernel(space2, 2)
    f = f / math.sqrt(2 * norm(f) ** 2)
    diag = diagnose_sequence(lambda n: f, range(1, 11))
    assert not diag.verdicts["fourth_moment"].consistent


def test_unnormalized_sequence_warns(space2, random_kernel):
    f = random_kernel(space2, 1)
    f = f * (3.0 / norm(f))
    diag = diagnose_sequence(lambda n: f, [1, 2])
    assert diag.warnings
    assert diag.reports[-1].wasserstein_bound is None
    assert diag.reports[-1].kolmogorov_bound is None
    assert not diag.verdicts["variance"].consistent
    assert diag.verdicts["variance"].terminal == pytest.approx(8.0, rel=1e-12)


def test_variance_verdict_tracks_drifting_normalisation():
    diag = diagnose_sequence(lambda n: uniform_p1(n) * math.sqrt(1.0 + 1.0 / n), range(1, 51))
    verdict = diag.verdicts["variance"]
    assert verdict.terminal == pytest.approx(0.02, rel=1e-9)
    assert verdict.slope == pytest.approx(-1.0, abs=1e-6)
    assert verdict.consistent
    exact = diagnose_sequence(uniform_p1, range(1, 4)).verdicts["variance"]
    assert exact.consistent and exact.slope is None


def test_trend_verdict_rules():
    idx = list(range(1, 11))
    assert trend_verdict("x", idx, [1.0 / n for n in idx], threshold=0.2).consistent
    assert not trend_verdict("x", idx, [1.0 / n for n in idx], threshold=0.05).consistent
    assert not trend_verdict("x", idx, [0.01] * 10).consistent
    zero = trend_verdict("x", idx, [1.0] * 9 + [0.0])
    assert zero.consistent and zero.slope is None
    with pytest.raises(ContractViolation):
        trend_verdict("x", [1, 2], [1.0])


def test_empty_indices():
    with pytest.raises(ValidationError):
        diagnose_sequence(uniform_p1, [])


# ---------------------------
# Multivariate
# ---------------------------


def test_disjoint_first_order_pair():
    coords = disjoint_families([build_family("uniform-p1"), build_family("uniform-p1")])
    diag = diagnose_multivariate(coords, range(1, 51))
    last = diag.reports[-1]
    assert_allclose(last.covariance, np.eye(2), atol=1e-14)
    assert last.distance < 1e-14
    assert diag.covariance_verdict.consistent
    assert diag.consistent
    assert len(diag.notes) == 4


def test_mixed_orders_are_uncorrelated():
    coords = disjoint_families([build_family("uniform-p1"), build_family("block-p2")])
    diag = diagnose_multivariate(coords, [2, 3])
    for r in diag.reports:
        assert r.orders == [1, 2]
        assert r.covariance[0, 1] == 0.0
        assert r.covariance[1, 1] == pytest.approx(1.0)


def test_covariance_of_shared_atoms(space2, random_kernel):
    f, g = random_kernel(space2, 2, 0), random_kernel(space2, 2, 1)
    sigma = covariance_matrix([f, g, random_kernel(space2, 1, 2)])
    F, G = integral_functional(f), integral_functional(g)
    assert sigma[0, 1] == pytest.approx(expect_truncated(F * G).value, rel=1e-8)
    assert sigma[0, 2] == 0.0


def _correlated_pair(n):
    """f = n^(-1/2) 1 and g = n^(-1/2) (0.6 + 0.8 a) with a alternating +-1, on one space."""
    space = MeasureSpace.uniform(n)
    alt = np.array([(-1.0) ** i for i in range(n)])
    f = SymKernel(space, 1, np.full(n, 1.0 / math.sqrt(n)))
    g = SymKernel(space, 1, (0.6 + 0.8 * alt) / math.sqrt(n))
    return f, g


def test_shared_coordinates_approach_a_correlated_target():
    target = [[1.0, 0.6], [0.6, 1.0]]
    coords = arrange([lambda n: _correlated_pair(n)[0], lambda n: _correlated_pair(n)[1]], "shared")
    indices = range(5, 62, 4)
    diag = diagnose_multivariate(coords, indices, target)
    last = diag.reports[-1]
    # odd n leaves one unpaired alternating entry
    assert last.covariance[0, 1] == pytest.approx(0.6 + 0.8 / 61, rel=1e-12)
    assert last.covariance[1, 1] == pytest.approx(1.0 + 0.96 / 61, rel=1e-12)
    assert last.distance == pytest.approx(0.96 / 61, rel=1e-12)
    assert diag.covariance_verdict.slope == pytest.approx(-1.0, abs=1e-6)
    assert diag.covariance_verdict.consistent
    assert diag.coordinate_verdicts[1]["variance"].slope is not None
    assert diag.consistent


def test_disjoint_layout_decorrelates_the_same_coordinates():
    coords = arrange([lambda n: _correlated_pair(n)[0], lambda n: _correlated_pair(n)[1]])
    diag = diagnose_multivariate(coords, [5], [[1.0, 0.6], [0.6, 1.0]])
    assert diag.reports[0].covariance[0, 1] == 0.0
    assert diag.reports[0].distance == pytest.approx(0.6)


def test_single_coordinate_matches_sequence():
    fam = build_family("uniform-p1")
    mv = diagnose_multivariate([fam], range(1, 6))
    seq = diagnose_sequence(fam, range(1, 6))
    for a, b in zip(mv.reports, seq.reports):
        assert a.covariance[0, 0] == pytest.approx(b.second_moment)
        assert a.coordinates[0].fourth_cumulant_excess == pytest.approx(b.fourth_cumulant_excess)


def test_bad_targets():
    coords = [build_family("uniform-p1")] * 2
    with pytest.raises(ContractViolation):
        diagnose_multivariate(coords, [1], target=np.eye(3))
    with pytest.raises(ValidationError) as exc:
        diagnose_multivariate(coords, [1], target=[[1.0, 2.0], [2.0, 1.0]])
    assert exc.value.field == "target"
    with pytest.raises(ValidationError):
        diagnose_multivariate(coords, [1], target=[[1.0, 0.5], [0.0, 1.0]])


# ---------------------------
# Monte Carlo normality
# ---------------------------


def test_degenerate_integral_is_half_a_unit_away(space2):
    assert mc_normality(SymKernel.zeros(space2, 1), 1000, 0) == pytest.approx(0.5)
    with pytest.raises(ContractViolation):
        mc_normality(SymKernel.zeros(space2, 1), 999, 0)


def test_mc_normality_is_reproducible():
    f = uniform_p1(20)
    assert mc_normality(f, 2000, 7) == mc_normality(f, 2000, 7)


def test_sequence_records_ks_at_last_index():
    diag = diagnose_sequence(uniform_p1, range(1, 6), samples=2000, seed=3)
    assert diag.reports[-1].mc_ks_distance is not None
    assert all(r.mc_ks_distance is None for r in diag.reports[:-1])


@pytest.mark.slow
def test_lattice_distance_for_large_first_order():
    assert mc_normality(uniform_p1(50), 100_000, 1, lattice=True) < 0.02
