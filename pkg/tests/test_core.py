import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nullstrap_de.core import (
    CountMatrix,
    DesignInfo,
    SizeFactors,
    ValidationError,
    estimate_size_factors,
    normalize_counts,
    validate_inputs,
)

# median-of-ratios on the 3 x 4 worked table, evaluated with the statistics module
WORKED = [[10, 20, 5, 8], [12, 18, 6, 9], [30, 60, 15, 24]]
WORKED_SF = [0.6595723034307387, 0.7664867641168862, 1.9787169102922162]
WORKED_NORM = [
    [15.161340080511877, 30.322680161023754, 7.580670040255939, 12.129072064409502],
    [15.655847643795774, 23.48377146569366, 7.827923821897887, 11.74188573284683],
    [15.161340080511875, 30.32268016102375, 7.580670040255938, 12.1290720644095],
]


def test_all_zero_gene_flagged():
    counts = CountMatrix.from_array([[1, 0, 3], [2, 0, 1], [4, 0, 2], [5, 0, 7]])
    data = validate_inputs(counts, DesignInfo([1, 1, 2, 2]))
    assert data.flagged == {"g2": "ALL_ZERO"}
    assert data.analyzable.tolist() == [True, False, True]


def test_negative_count_reports_cell():
    with pytest.raises(ValidationError) as err:
        CountMatrix.from_array([[1, 2], [3, -1]])
    issue = err.value.issues[0]
    assert (issue.code, issue.row, issue.col) == ("NEGATIVE_COUNT", 1, 1)


def test_non_integer_count():
    with pytest.raises(ValidationError) as err:
        CountMatrix.from_array([[1, 2.5], [3, 1]])
    assert err.value.codes == {"NON_INTEGER_COUNT"}


def test_two_group_design():
    design = DesignInfo([1, 1, 1, 2, 2, 2])
    data = validate_inputs(CountMatrix.from_array(np.ones((6, 2), int)), design)
    assert data.design.K == 2
    assert design.X.shape == (6, 1)
    assert design.X[:, 0].tolist() == [1, 1, 1, 0, 0, 0]


@pytest.mark.parametrize(
    "n_samples, treatment, code",
    [(3, [1, 1, 2], "SMALL_GROUP"), (4, [1, 1, 3, 3], "SMALL_GROUP"), (4, [1, 1, 2, 2, 2], "DIMENSION_MISMATCH")],
)
def test_design_errors(n_samples, treatment, code):
    counts = CountMatrix.from_array(np.ones((n_samples, 2), int))
    with pytest.raises(ValidationError) as err:
        validate_inputs(counts, DesignInfo(treatment))
    assert code in err.value.codes


def test_unknown_label():
    with pytest.raises(ValidationError) as err:
        validate_inputs(CountMatrix.from_array(np.ones((4, 1), int)), DesignInfo([1, 1, 2, 5], K=2))
    assert "UNKNOWN_CONDITION" in err.value.codes


def test_duplicate_ids():
    with pytest.raises(ValidationError) as err:
        CountMatrix(np.ones((2, 2), int), ("a", "a"), ("x", "y"))
    assert "DUPLICATE_ID" in err.value.codes


def test_size_factors_identity():
    y = np.array([[3, 5, 9], [3, 5, 9]])
    np.testing.assert_allclose(estimate_size_factors(y).values, [1.0, 1.0])


def test_size_factors_fourfold():
    y = np.array([[2, 7, 11], [8, 28, 44]])
    np.testing.assert_allclose(estimate_size_factors(y).values, [0.5, 2.0])


def test_size_factors_worked_table():
    np.testing.assert_allclose(estimate_size_factors(np.array(WORKED)).values, WORKED_SF, rtol=1e-12)


def test_normalize_worked_table():
    s = estimate_size_factors(np.array(WORKED))
    np.testing.assert_allclose(normalize_counts(np.array(WORKED), s), WORKED_NORM, rtol=1e-12)


def test_normalize_definition():
    np.testing.assert_allclose(normalize_counts(np.array([[10]]), SizeFactors([2.0])), [[5.0]])
    y = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(normalize_counts(y, SizeFactors([1.0, 1.0])), y)


def test_no_reference_gene():
    with pytest.raises(ValidationError) as err:
        estimate_size_factors(np.array([[0, 1], [1, 0]]))
    assert err.value.codes == {"NO_REFERENCE_GENE"}


def test_size_factors_must_be_positive():
    with pytest.raises(ValueError):
        SizeFactors([1.0, 0.0])


positive_rows = arrays(np.int64, st.integers(2, 12), elements=st.integers(1, 10_000))


@given(positive_rows, st.integers(1, 50))
def test_size_factor_scale_equivariance(base, c):
    y = np.vstack([base, c * base])
    s = estimate_size_factors(y).values
    assert s[1] / s[0] == pytest.approx(c, rel=1e-12)
    assert s[0] * s[1] == pytest.approx(1.0, rel=1e-12)


@given(positive_rows, arrays(np.int64, st.integers(2, 6), elements=st.integers(1, 20)))
def test_pure_depth_effect_removed(base, depth):
    y = depth[:, None] * base[None, :]
    norm = normalize_counts(y, estimate_size_factors(y))
    np.testing.assert_allclose(norm, np.broadcast_to(norm[0], norm.shape), rtol=1e-10)


@given(arrays(np.int64, st.tuples(st.integers(4, 8), st.integers(1, 10)), elements=st.integers(0, 3)))
def test_validation_partitions_and_preserves(y):
    n = y.shape[0]
    counts = CountMatrix.from_array(y)
    before = counts.counts.copy()
    data = validate_inputs(counts, DesignInfo([1] * (n // 2) + [2] * (n - n // 2)))
    assert set(data.analyzable_ids) | set(data.flagged) == set(counts.gene_ids)
    assert not set(data.analyzable_ids) & set(data.flagged)
    np.testing.assert_array_equal(counts.counts, before)
