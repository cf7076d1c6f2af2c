import itertools
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from app.errors import BudgetExceeded, ContractViolation, ResidualChaosError
from app.kernels import SymKernel, indicator, inner, random_symmetric
from app.measure_space import MeasureSpace
from app.poisson_path import (
    PointConfiguration,
    StateGrid,
    add_one_cost,
    chaos_derivative,
    chaos_functional,
    charlier,
    charlier_table,
    constant_functional,
    count_functional,
    decompose,
    eval_chaos,
    eval_integral,
    expect_truncated,
    extract_kernels,
    finite_difference,
    integral_functional,
    iterated_difference,
    mc_moment,
    poincare_chain,
    poincare_check,
    sample_config,
    sample_configs,
    word_expansion,
    word_term_expectation,
)
from app.product_formula import ChaosVector, h_kernels, product_chaos
from app.rng import SAMPLE_BLOCK, kernel_generator


def _max_rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


# ---------------------------
# Charlier polynomials and integrals
# ---------------------------


def test_low_degree_charlier():
    for x in range(6):
        assert charlier(0, x, 1.7) == 1.0
        assert charlier(1, x, 1.7) == pytest.approx(x - 1.7)
        assert charlier(2, x, 1.7) == pytest.approx((x - 1.7) ** 2 - x)
    with pytest.raises(ContractViolation):
        charlier(2, 1, 0.0)


def test_charlier_table_matches_scalar_recurrence():
    xs = np.arange(12)
    table = charlier_table(6, xs, 2.5)
    for m in range(7):
        assert_allclose(table[m], [charlier(m, int(x), 2.5) for x in xs], rtol=1e-13)


@pytest.mark.parametrize("lam", [0.5, 3.0])
def test_charlier_orthogonality(lam):
    xs = np.arange(90)
    pmf = stats.poisson.pmf(xs, lam)
    table = charlier_table(5, xs, lam)
    for j in range(6):
        for k in range(6):
            value = math.fsum(table[j] * table[k] * pmf)
            expected = math.factorial(j) * lam**j if j == k else 0.0
            assert value == pytest.approx(expected, rel=1e-8, abs=1e-8)


def test_first_and_second_order_integrals(space2):
    counts = np.array([[0, 0], [3, 1], [1, 4]])
    assert_allclose(eval_integral(indicator(space2, [0]), counts), counts[:, 0] - 0.7)
    lam = 1.3
    n1 = counts[:, 1]
    assert_allclose(eval_integral(indicator(space2, [1, 1]), counts), (n1 - lam) ** 2 - n1)
    assert_allclose(
        eval_integral(indicator(space2, [0, 1]), counts), 2 * (counts[:, 0] - 0.7) * (n1 - lam)
    )
    assert eval_integral(SymKernel.constant(space2, 2.5), [4, 4]) == 2.5


def test_eval_chaos_sums_terms(space2, random_kernel):
    f1, f2 = random_kernel(space2, 1, 0), random_kernel(space2, 2, 1)
    vector = ChaosVector(space2, {0: SymKernel.constant(space2, -1.0), 1: f1, 2: f2})
    counts = sample_configs(space2, 3, 40)
    assert_allclose(eval_chaos(vector, counts), -1.0 + eval_integral(f1, counts) + eval_integral(f2, counts))


PAIRS = [(p, q) for p in (1, 2, 3) for q in (1, 2, 3)]


@pytest.mark.slow
@pytest.mark.parametrize("n", [1, 2, 3])
@pytest.mark.parametrize("p, q", PAIRS)
def test_pathwise_product_identity_grid(n, p, q, random_kernel):
    space = MeasureSpace(n, tuple(0.4 + 0.7 * i for i in range(n)))
    counts = sample_configs(space, 7 + n, 1000)
    for pair in range(20):
        f, g = random_kernel(space, p, 2 * pair), random_kernel(space, q, 2 * pair + 1)
        lhs = eval_integral(f, counts) * eval_integral(g, counts)
        rhs = eval_chaos(product_chaos(ChaosVector.single(f), ChaosVector.single(g)), counts)
        assert _max_rel(lhs, rhs) <= 1e-8


def test_configuration_checks(space2):
    with pytest.raises(ContractViolation):
        PointConfiguration((1, -1))
    with pytest.raises(ContractViolation):
        eval_integral(indicator(space2, [0]), [1, 2, 3])
    N = PointConfiguration((2, 0)).added(1, 3)
    assert N.counts == (2, 3)
    assert N.n_atoms == 2


# ---------------------------
# Sampling
# ---------------------------


def test_sampling_is_keyed_by_seed_and_index(space3):
    a = sample_configs(space3, 42, SAMPLE_BLOCK + 10)
    b = sample_configs(space3, 42, SAMPLE_BLOCK + 10)
    assert np.array_equal(a, b)
    for i in (0, 17, SAMPLE_BLOCK - 1, SAMPLE_BLOCK + 6):
        assert sample_config(space3, 42, i).counts == tuple(a[i])
    assert not np.array_equal(a, sample_configs(space3, 43, SAMPLE_BLOCK + 10))
    # a shorter run is a prefix of a longer one
    assert np.array_equal(sample_configs(space3, 42, 5), a[:5])


def test_parallel_sampling_matches_serial(space2, monkeypatch):
    serial = sample_configs(space2, 9, 5 * SAMPLE_BLOCK + 3)
    monkeypatch.setenv("CHAOS_WORKERS", "4")
    assert np.array_equal(sample_configs(space2, 9, 5 * SAMPLE_BLOCK + 3), serial)


def test_sample_means_within_clt_band(space3):
    S = 100_000
    counts = sample_configs(space3, 2024, S)
    for i, mu in enumerate(space3.masses):
        assert abs(counts[:, i].mean() - mu) < 4 * math.sqrt(mu / S)


def test_tiny_mass_gives_empty_configurations():
    space = MeasureSpace(1, (1e-9,))
    assert not sample_configs(space, 5, 1000).any()
    assert sample_configs(space, 5, 0).shape == (0, 1)


# ---------------------------
# Difference operators
# ---------------------------


@pytest.mark.parametrize("p", [1, 2, 3])
def test_add_one_cost_chaos_rule_matches_finite_difference(space2, random_kernel, p):
    f = random_kernel(space2, p)
    F = integral_functional(f)
    counts = sample_configs(space2, 1, 200)
    for z in range(2):
        via_chaos = add_one_cost(F, z).evaluate(counts)
        via_paths = finite_difference(F, z).evaluate(counts)
        assert _max_rel(via_chaos, via_paths) < 1e-10


def test_add_one_cost_on_examples(space2, random_kernel):
    assert not add_one_cost(constant_functional(space2, 4.0), 0).evaluate(sample_configs(space2, 0, 10)).any()
    f = random_kernel(space2, 1)
    # D_z I_1(f) = f(z)
    assert add_one_cost(ChaosVector.single(f), 1).evaluate([5, 0]) == pytest.approx(f.value((1,)))
    derivative = chaos_derivative(ChaosVector.single(random_kernel(space2, 2)), 0)
    assert derivative.orders == [1]


def test_finite_difference_uses_added_point(space2, random_kernel):
    F = integral_functional(random_kernel(space2, 2))
    N = PointConfiguration((1, 2))
    assert finite_difference(F, 1).evaluate(N) == pytest.approx(F(N.added(1)) - F(N))


def test_product_rule(space2, random_kernel):
    F = integral_functional(random_kernel(space2, 2, 0))
    G = integral_functional(random_kernel(space2, 1, 1))
    counts = sample_configs(space2, 8, 100)
    for z in range(2):
        DF, DG = finite_difference(F, z), finite_difference(G, z)
        lhs = finite_difference(F * G, z).evaluate(counts)
        rhs = (F * DG + G * DF + DF * DG).evaluate(counts)
        assert _max_rel(lhs, rhs) < 1e-10


def test_iterated_difference(space3, random_kernel):
    F = integral_functional(random_kernel(space3, 3))
    counts = sample_configs(space3, 4, 50)
    assert_allclose(iterated_difference(F, [2]).evaluate(counts), finite_difference(F, 2).evaluate(counts))
    a = iterated_difference(F, [0, 2, 2]).evaluate(counts)
    b = iterated_difference(F, [2, 0, 2]).evaluate(counts)
    assert _max_rel(a, b) < 1e-10
    # D^(3) of a third-order integral is the constant 3! f
    f = F.chaos.kernel(3)
    assert_allclose(a, 6 * f.value((0, 2, 2)), rtol=1e-9, atol=1e-9)
    assert np.max(np.abs(iterated_difference(F, [0, 1, 2, 1]).evaluate(counts))) < 1e-8


def test_iterated_difference_limits(space2):
    F = count_functional(space2, 0)
    with pytest.raises(ContractViolation):
        iterated_difference(F, [])
    with pytest.raises(BudgetExceeded) as exc:
        iterated_difference(F, [0] * 21)
    assert exc.value.budget == "difference-order"
    with pytest.raises(ContractViolation):
        iterated_difference(F, [2])


# ---------------------------
# Exact expectations
# ---------------------------


def test_expectation_examples():
    one = MeasureSpace(1, (1.0,))
    two = MeasureSpace(1, (2.0,))
    assert expect_truncated(count_functional(two, 0)).value == pytest.approx(2.0, rel=1e-12)
    result = expect_truncated(integral_functional(indicator(one, [0])) ** 4)
    assert result.value == pytest.approx(4.0, rel=1e-10)
    assert result.tail_bound < 1e-12
    assert result.states == result.level + 1


def test_envelope_reads_monomial_coefficients(space2):
    one = MeasureSpace(1, (1.0,))
    N = count_functional(one, 0)
    assert StateGrid(N * N - N * 10.0, 12, 0).envelope == pytest.approx(11.0, rel=1e-12)
    assert StateGrid(N, 12, 0).envelope == pytest.approx(1.0, rel=1e-12)
    A, B = count_functional(space2, 0), count_functional(space2, 1)
    assert StateGrid(A * B - 2.0, 8, 0).envelope == pytest.approx(3.0, rel=1e-12)


def test_envelope_holds_beyond_the_grid(space2, random_kernel):
    F = integral_functional(random_kernel(space2, 2)) * integral_functional(random_kernel(space2, 1, 1))
    grid = StateGrid(F, 10, 0)
    far = np.random.default_rng(3).integers(0, 400, size=(500, 2))
    bound = grid.envelope * (1.0 + far.sum(axis=1)) ** F.degree
    assert np.all(np.abs(F.evaluate(far)) <= bound * (1 + 1e-9))


def test_integrals_have_mean_zero(space2, random_kernel):
    for p in (1, 2, 3):
        assert abs(expect_truncated(integral_functional(random_kernel(space2, p))).value) < 1e-9


def test_isometry_and_orthogonality(space2, random_kernel):
    for p in (1, 2):
        for q in (1, 2):
            f, g = random_kernel(space2, p, 0), random_kernel(space2, q, 1)
            value = expect_truncated(integral_functional(f) * integral_functional(g)).value
            expected = math.factorial(p) * inner(f, g) if p == q else 0.0
            assert value == pytest.approx(expected, rel=1e-9, abs=1e-9)


@pytest.mark.slow
@pytest.mark.parametrize("n", [1, 2, 3])
def test_isometry_grid(n, random_kernel):
    space = MeasureSpace(n, tuple(0.5 + 0.5 * i for i in range(n)))
    for p in (1, 2, 3):
        for q in (1, 2, 3):
            f, g = random_kernel(space, p, 2 * p), random_kernel(space, q, 2 * q + 1)
            value = expect_truncated(integral_functional(f) * integral_functional(g)).value
            expected = math.factorial(p) * inner(f, g) if p == q else 0.0
            assert abs(value - expected) <= 1e-9 * max(1.0, abs(expected))


def test_state_budget(space3, random_kernel, monkeypatch):
    monkeypatch.setenv("CHAOS_STATE_BUDGET", "100")
    with pytest.raises(BudgetExceeded) as exc:
        expect_truncated(integral_functional(random_kernel(space3, 2)))
    assert exc.value.budget == "CHAOS_STATE_BUDGET"


def test_tolerance_must_be_positive(space2):
    with pytest.raises(ContractViolation):
        expect_truncated(count_functional(space2, 0), tol=0.0)


# ---------------------------
# Kernel extraction
# ---------------------------


def test_extract_recovers_single_integral(space2, random_kernel):
    f = random_kernel(space2, 2)
    vector = extract_kernels(integral_functional(f), 2)
    assert abs(vector.mean()) < 1e-9
    assert np.max(np.abs(vector.kernel(1).values)) < 1e-9
    assert_allclose(vector.kernel(2).values, f.values, rtol=1e-9, atol=1e-9)


def test_extract_count(space2):
    vector = extract_kernels(count_functional(space2, 1), 1)
    assert vector.mean() == pytest.approx(1.3)
    assert_allclose(vector.kernel(1).values, [0.0, 1.0], atol=1e-10)


@pytest.mark.parametrize("p, q", [(1, 1), (2, 1), (2, 2)])
def test_extract_product_gives_h_kernels(space2, random_kernel, p, q):
    f, g = random_kernel(space2, p, 0), random_kernel(space2, q, 1)
    vector = extract_kernels(integral_functional(f) * integral_functional(g), p + q)
    for m, h in enumerate(h_kernels(f, g)):
        assert _max_rel(vector.kernel(p + q - m).values, h.values) < 1e-7
    # orders below |p - q| stay empty
    for k in range(abs(p - q)):
        assert np.max(np.abs(vector.kernel(k).values)) < 1e-7


def test_residual_chaos(space2, random_kernel):
    F = integral_functional(random_kernel(space2, 2))
    with pytest.raises(ResidualChaosError, match="residual chaos beyond max order"):
        extract_kernels(F, 1)
    with pytest.raises(ContractViolation):
        extract_kernels(F, 9)


def test_decompose_parseval(space2, random_kernel):
    vector = ChaosVector(space2, {0: SymKernel.constant(space2, 0.5), 1: random_kernel(space2, 1, 0),
                                  2: random_kernel(space2, 2, 1)})
    result = decompose(chaos_functional(vector), 2)
    assert result.second_moment == pytest.approx(vector.second_moment(), rel=1e-9)
    assert abs(result.parseval_residual) < 1e-8
    for k in range(3):
        assert_allclose(result.chaos.kernel(k).values, vector.kernel(k).values, atol=1e-8)


def test_decompose_square_of_first_order(space2, random_kernel):
    f = random_kernel(space2, 1)
    square = integral_functional(f) ** 2
    result = decompose(square, 2)
    expected = product_chaos(ChaosVector.single(f), ChaosVector.single(f))
    for k in range(3):
        assert_allclose(result.chaos.kernel(k).values, expected.kernel(k).values, rtol=1e-8, atol=1e-8)
    assert abs(result.parseval_residual) < 1e-8


# ---------------------------
# Word operators
# ---------------------------


@pytest.mark.parametrize("atoms", [(0, 1), (1, 1, 0)])
def test_word_expansion_equals_iterated_difference(space2, random_kernel, atoms):
    F = integral_functional(random_kernel(space2, 2, 0))
    G = integral_functional(random_kernel(space2, 1, 1))
    counts = sample_configs(space2, 12, 100)
    lhs = word_expansion(F, G, atoms).evaluate(counts)
    rhs = iterated_difference(F * G, atoms).evaluate(counts)
    assert _max_rel(lhs, rhs) < 1e-9


def test_discarded_words_have_zero_expectation(space2, random_kernel):
    F = integral_functional(random_kernel(space2, 2, 0))
    G = integral_functional(random_kernel(space2, 1, 1))
    # R alone leaves I_2(f) times a constant
    assert abs(word_term_expectation(F, G, ("R",), (0,)).value) < 1e-9
    # three L letters differentiate a second-order integral to zero
    assert abs(word_term_expectation(F, G, ("L", "L", "L"), (0, 1, 1)).value) < 1e-9


def test_word_expectations_rebuild_h(space2, random_kernel):
    f, g = random_kernel(space2, 1, 0), random_kernel(space2, 1, 1)
    F, G = integral_functional(f), integral_functional(g)
    total = math.fsum(
        word_term_expectation(F, G, w, (0, 1)).value for w in itertools.product("LRB", repeat=2)
    )
    h2 = h_kernels(f, g)[0]
    assert total / 2 == pytest.approx(h2.value((0, 1)), rel=1e-9, abs=1e-12)


def test_apply_word_rejects_bad_letters(space2):
    F = count_functional(space2, 0)
    with pytest.raises(ContractViolation):
        word_term_expectation(F, F, ("X",), (0,))
    with pytest.raises(ContractViolation):
        word_term_expectation(F, F, ("L", "R"), (0,))


# ---------------------------
# Poincare
# ---------------------------


@pytest.mark.slow
def test_poincare_on_random_expansions():
    spaces = [MeasureSpace(1, (0.8,)), MeasureSpace(2, (0.7, 1.3)), MeasureSpace(3, (0.5, 1.0, 1.5))]
    for i in range(50):
        space = spaces[i % 3]
        gen = kernel_generator(77, i)
        orders = (0, 1, 2, 3) if i % 2 else (0, 1, 2)
        vector = ChaosVector(space, {k: random_symmetric(space, k, gen) for k in orders})
        check = poincare_check(chaos_functional(vector))
        assert check.slack >= -1e-10 * max(1.0, check.second_moment)
        # the energy is sum_k k * k! |f_k|^2
        energy = math.fsum(k * math.factorial(k) * inner(f, f) for k, f in vector.terms.items())
        assert check.energy == pytest.approx(energy, rel=1e-8)


def test_poincare_on_a_nonlinear_count(space2):
    N = count_functional(space2, 0)
    check = poincare_check(N * N)
    assert check.slack >= 0.0
    # first chaos saturates the inequality
    linear = poincare_check(N)
    assert abs(linear.slack) < 1e-9


def test_poincare_chain_identity(space2, random_kernel):
    F = integral_functional(random_kernel(space2, 2))
    chain = poincare_chain(F, 2)
    assert abs(chain.remainder) < 1e-8
    assert abs(chain.residual) < 1e-8 * max(1.0, chain.second_moment)
    assert chain.chain_bound >= chain.second_moment - 1e-8
    with pytest.raises(ContractViolation):
        poincare_chain(F, 0)


def test_short_chain_is_an_upper_bound(space2):
    N = count_functional(space2, 1)
    chain = poincare_chain(N ** 3, 1)
    assert chain.remainder > 0
    assert chain.chain_bound >= chain.second_moment


# ---------------------------
# Monte Carlo
# ---------------------------


def test_mc_isometry(space2, random_kernel):
    f, g = random_kernel(space2, 1, 0), random_kernel(space2, 1, 1)
    result = mc_moment(integral_functional(f), integral_functional(g), 100_000, 31)
    assert abs(result.mean - inner(f, g)) < 4 * result.stderr
    again = mc_moment(integral_functional(f), integral_functional(g), 100_000, 31)
    assert again.mean == result.mean
    with pytest.raises(ContractViolation):
        mc_moment(integral_functional(f), None, 1, 0)


def test_functional_arithmetic(space2):
    N0, N1 = count_functional(space2, 0), count_functional(space2, 1)
    counts = np.array([[2, 5]])
    assert (N0 + N1).evaluate(counts)[0] == 7
    assert (1 - N0).evaluate(counts)[0] == -1
    assert (N0 * 3).evaluate(counts)[0] == 6
    assert (-N1).evaluate(counts)[0] == -5
    assert (N0 + N1).chaos.mean() == pytest.approx(2.0)
    assert (N0 * N1).chaos is None
    assert (N0 ** 2).degree == 2
    with pytest.raises(ContractViolation):
        N0 + count_functional(MeasureSpace.uniform(2), 0)
