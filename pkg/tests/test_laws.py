import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import BERN, F, one_type
from mbpire.errors import DominationViolated, InvalidMinorization, InvalidTables
from mbpire.laws import (
    FiniteLaw, LawTables, MinorizationSpec, minorization_check, mixture, moments, require_valid,
    residual_law, validate_tables,
)


def test_bernoulli_moments():
    m = moments(one_type([BERN], [BERN]))
    assert m.M[0, 0, 0] == 0.5 and m.I[0, 0] == 0.5


def test_two_type_moments(two_type):
    m = moments(two_type)
    np.testing.assert_allclose(m.M[0], [[0.5, 0.2], [0.1, 0.4]], atol=1e-15)
    np.testing.assert_allclose(m.I[0], [0.25, 0.25], atol=1e-15)


def test_beta_two_norm():
    m = moments(one_type([BERN], [BERN]), beta=2)
    assert m.M_beta[0, 0, 0] == pytest.approx(math.sqrt(0.5), abs=1e-15)
    with pytest.raises(ValueError):
        moments(one_type([BERN], [BERN]), beta=0.5)


laws_2d = st.integers(1, 5).flatmap(lambda k: st.tuples(
    st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=k, max_size=k, unique=True),
    st.lists(st.floats(0.01, 1.0), min_size=k, max_size=k),
))


def _law(pair):
    pts, w = pair
    w = np.array(w) / np.sum(w)
    return FiniteLaw.from_pairs(zip(pts, w))


@settings(max_examples=50, deadline=None)
@given(laws_2d, laws_2d, laws_2d, st.sampled_from([1.0, 2.0, 3.5]))
def test_moments_match_brute_force(a, b, q, beta):
    p1, p2, imm = _law(a), _law(b), _law(q)
    m = moments(LawTables.from_lists([[p1, p2]], [imm]), beta)
    for i, law in enumerate((p1, p2)):
        for j in range(2):
            direct = sum(p * v[j] for v, p in law.as_dict().items())
            direct_b = sum(p * v[j] ** beta for v, p in law.as_dict().items()) ** (1 / beta)
            assert m.M[0, j, i] == pytest.approx(direct, abs=1e-12)
            assert m.M_beta[0, j, i] == pytest.approx(direct_b, abs=1e-12)
    for j in range(2):
        assert m.I[0, j] == pytest.approx(sum(p * v[j] for v, p in imm.as_dict().items()), abs=1e-12)


def test_issues_are_reported_by_code():
    codes = lambda law: {i.code for i in law.issues()}
    assert codes(F([(0, 0.5), (1, 0.6)])) == {"NonStochastic"}
    assert codes(F([(0, 1.5), (1, -0.5)])) == {"NegativeProb"}
    assert codes(F([(0, 0.5), (0, 0.5)])) == {"DuplicateSupport"}
    assert codes(F([(-1, 0.5), (1, 0.5)])) == {"NegativeSupport"}
    assert codes(FiniteLaw(np.array([[0.5], [1.0]]), np.array([0.5, 0.5]))) == {"NonInteger"}
    assert codes(FiniteLaw(np.zeros((0, 1), dtype=int), np.zeros(0))) == {"Malformed"}
    assert BERN.issues() == []


def test_validate_tables_flags_missing_and_mismatched_laws():
    t = LawTables(2, 1, {(0, 0): F([((0, 0), 1.0)])}, {0: BERN})
    codes = {i.code for i in validate_tables(t)}
    assert codes == {"MissingLaw", "DimensionMismatch"}
    with pytest.raises(InvalidTables):
        require_valid(t)


def test_minorization_check_accepts_and_reports_violations(bern, bern_spec):
    assert minorization_check(bern, bern_spec) == (True, None)
    tight = MinorizationSpec(0.5, (FiniteLaw.point(0),), FiniteLaw.point(0))
    assert minorization_check(bern, tight)[0]  # equality is allowed
    too_big = MinorizationSpec(0.6, (FiniteLaw.point(0),), FiniteLaw.point(0))
    ok, viol = minorization_check(bern, too_big)
    assert not ok and viol.point == (0,) and viol.have == 0.5 and viol.need == pytest.approx(0.6)


def test_minorization_spec_validation():
    with pytest.raises(InvalidMinorization):
        MinorizationSpec(0.0, (FiniteLaw.point(0),), FiniteLaw.point(0))
    with pytest.raises(InvalidMinorization):
        MinorizationSpec(1.0, (FiniteLaw.point(0),), FiniteLaw.point(0))
    with pytest.raises(InvalidMinorization):
        MinorizationSpec(0.3, (FiniteLaw.point(1),), FiniteLaw.point(0))  # no mass at 0
    with pytest.raises(InvalidMinorization):
        MinorizationSpec(0.3, (F([(0, 0.7)]),), FiniteLaw.point(0))


def test_residual_law_rejects_domination_failure():
    with pytest.raises(DominationViolated):
        residual_law(BERN, FiniteLaw.point(0), 0.6)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0.05, 1.0), min_size=2, max_size=5), st.floats(0.01, 0.99))
def test_residual_recombines_to_original(weights, frac):
    w = np.array(weights) / np.sum(weights)
    law = FiniteLaw.from_pairs(enumerate(w))
    minorant = FiniteLaw.point(0)
    eps = frac * w[0]
    back = mixture(minorant, residual_law(law, minorant, eps), eps)
    for v, p in law.as_dict().items():
        assert back.prob(v) == pytest.approx(p, abs=1e-12)
    assert back.probs.sum() == pytest.approx(1.0, abs=1e-12)
