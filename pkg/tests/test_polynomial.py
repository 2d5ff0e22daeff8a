import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgr.polynomial import (
    CapacityError,
    DimensionError,
    PolyEvaluator,
    Polynomial,
    null_basis_entries,
    parse_polynomial,
    power_vector,
    smr_dimensions,
    smr_lift,
    smr_null_basis,
    smr_of,
    sub_power_vector,
)

EXAMPLE = "3*x1^4 + 4*x1^3 + 6*x1^2 + 7"


def poly_strategy(max_vars=3, max_deg=4, max_terms=6):
    @st.composite
    def build(draw):
        n = draw(st.integers(1, max_vars))
        k = draw(st.integers(0, max_terms))
        terms = {}
        for _ in range(k):
            d = draw(st.integers(0, max_deg))
            cuts = sorted(draw(st.lists(st.integers(0, d), min_size=n - 1, max_size=n - 1)))
            mono = tuple(b - a for a, b in zip([0] + cuts, cuts + [d]))
            terms[mono] = draw(st.integers(-9, 9))
        return Polynomial(n, terms)

    return build()


class TestArithmetic:
    def test_parse_and_print_round_trip(self):
        p = parse_polynomial("2.5*x1^2*x3 - x2 + 4", 3)
        assert Polynomial.parse(p.to_string(), 3).almost_equal(p, 0.0)

    def test_evaluate_constant_term(self):
        assert Polynomial.parse(EXAMPLE, 1).evaluate([0.0]) == 7.0

    def test_gradient_by_hand(self):
        g = Polynomial.parse("x1^2*x2", 2).gradient()
        assert g[0].almost_equal(Polynomial.parse("2*x1*x2", 2))
        assert g[1].almost_equal(Polynomial.parse("x1^2", 2))

    def test_substitute_affine_shift(self):
        p = Polynomial.parse("x1^2", 1).substitute_affine([[1.0]], [1.0])
        assert p.almost_equal(Polynomial.parse("x1^2 + 2*x1 + 1", 1))

    def test_unknown_variable_rejected(self):
        with pytest.raises(ValueError):
            parse_polynomial("x3 + 1", 2)

    def test_mixed_variable_counts_rejected(self):
        with pytest.raises(DimensionError):
            Polynomial.parse("x1", 1) + Polynomial.parse("x1", 2)

    @given(poly_strategy(), poly_strategy())
    @settings(max_examples=60, deadline=None)
    def test_product_evaluates_pointwise(self, p, q):
        if p.num_vars != q.num_vars:
            return
        x = np.linspace(-1.1, 0.9, p.num_vars)
        assert np.isclose((p * q).evaluate(x), p.evaluate(x) * q.evaluate(x), rtol=1e-9, atol=1e-9)

    @given(poly_strategy())
    @settings(max_examples=60, deadline=None)
    def test_batched_evaluator_matches_scalar(self, p):
        pts = np.random.default_rng(0).uniform(-1, 1, size=(5, p.num_vars))
        ev = PolyEvaluator([p])(pts)[:, 0]
        assert np.allclose(ev, [p.evaluate(x) for x in pts], atol=1e-9)


class TestPowerVector:
    @pytest.mark.parametrize("n,d,expected", [(1, 2, (3, 1)), (1, 0, (1, 0)), (2, 2, (6, 6)), (1, 1, (2, 0)),
                                              (2, 1, (3, 0))])
    def test_dimensions(self, n, d, expected):
        assert smr_dimensions(n, d) == expected

    def test_monomial_sets(self):
        assert set(power_vector(1, 2).monomials) == {(0,), (1,), (2,)}
        assert set(power_vector(1, 0).monomials) == {(0,)}
        assert set(power_vector(2, 1).monomials) == {(0, 0), (1, 0), (0, 1)}

    def test_prefix_property(self):
        lo, hi = power_vector(3, 2), power_vector(3, 3)
        assert hi.monomials[: len(lo)] == lo.monomials

    def test_capacity_error(self):
        with pytest.raises(CapacityError):
            smr_dimensions(40, 8)

    def test_sub_power_vector_keeps_order(self):
        phi = power_vector(2, 2)
        sub = sub_power_vector(phi, [(0, 2), (1, 0), (0, 0)])
        assert sub.monomials == ((0, 0), (1, 0), (0, 2))


class TestSmr:
    def test_example_gram_exact(self):
        form = smr_of(Polynomial.parse(EXAMPLE, 1))
        # ascending order (1, x, x^2); reversing gives the descending layout
        assert np.array_equal(form.base[::-1, ::-1], [[3, 2, 0], [2, 6, 0], [0, 0, 7]])
        assert len(form.null_basis) == 1
        N = form.null_basis[0].toarray()[::-1, ::-1]
        assert np.array_equal(N, [[0, 0, -1], [0, 2, 0], [-1, 0, 0]])

    def test_constant(self):
        form = smr_of(Polynomial.constant(1, 7.0))
        assert form.base.tolist() == [[7.0]]

    def test_cross_term_split(self):
        base = smr_of(Polynomial.parse("x1*x2", 2)).base
        assert base[1, 2] == base[2, 1] == 0.5
        assert np.count_nonzero(base) == 2

    def test_lift_examples(self):
        phi = power_vector(1, 2)
        M = smr_lift(Polynomial.parse("x1^2", 1), phi)
        assert M[1, 1] == 1.0 and np.count_nonzero(M) == 1
        M = smr_lift(Polynomial.constant(1, 7.0), phi)
        assert M[0, 0] == 7.0 and np.count_nonzero(M) == 1
        p = Polynomial.parse(EXAMPLE, 1)
        assert np.array_equal(smr_lift(p, phi), smr_of(p).base)

    def test_empty_null_spaces(self):
        assert smr_null_basis(1, 1) == []
        assert smr_null_basis(2, 1) == []

    def test_degree_too_high_rejected(self):
        with pytest.raises(DimensionError):
            smr_lift(Polynomial.parse("x1^5", 1), power_vector(1, 2))

    def test_null_matrices_vanish_and_are_independent(self):
        n, d = 3, 2
        l, theta = smr_dimensions(n, d)
        basis = smr_null_basis(n, d)
        assert len(basis) == theta
        phi = power_vector(n, d)
        for N in basis:
            assert phi.quadratic_form(N).is_zero()
        stacked = np.array([N.toarray().ravel() for N in basis])
        assert np.linalg.matrix_rank(stacked) == theta

    @given(poly_strategy(max_vars=3, max_deg=6))
    @settings(max_examples=80, deadline=None)
    def test_reconstruction_any_delta(self, p):
        form = smr_of(p)
        delta = np.random.default_rng(1).normal(size=len(form.null_basis))
        assert form.reconstruct(delta).almost_equal(p, 1e-9)
        assert np.allclose(form.base, form.base.T)

    def test_null_entries_cancel_per_matrix(self):
        ks, rows, cols, vals = null_basis_entries(2, 3)
        phi = power_vector(2, 3)
        x = np.random.default_rng(2).uniform(-1, 1, size=(4, 2))
        v = phi.evaluate(x)
        contrib = vals[None] * v[:, rows] * v[:, cols]
        sums = np.zeros((4, ks.max() + 1))
        np.add.at(sums.T, ks, contrib.T)
        assert np.max(np.abs(sums)) < 1e-12
