import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import stats

from nullstrap_de.baselines import (
    CovariatesUnsupportedError,
    Method,
    _u_distribution,
    bh_discoveries,
    run_baseline,
    wilcoxon_matrix,
    wilcoxon_rank_sum,
)
from nullstrap_de.core import CountMatrix, DesignInfo, SizeFactors, estimate_size_factors
from nullstrap_de.simulate import SimulationConfig, generate_dataset

from oracles import bh_bruteforce, u_enumeration


def test_bh_worked():
    # 0.03 <= 3 * 0.05 / 4 = 0.0375, 0.5 > 0.05
    assert bh_discoveries([0.01, 0.02, 0.03, 0.5], 0.05) == {0, 1, 2}


def test_bh_edge_cases():
    assert bh_discoveries([1.0] * 5, 0.05) == set()
    assert bh_discoveries([0.04], 0.05) == {0}
    assert bh_discoveries([0.01, math.nan, 0.9], 0.05) == {0}
    assert bh_discoveries([], 0.05) == set()


p_lists = st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=10)


@given(p_lists, st.floats(0.001, 0.5))
def test_bh_bruteforce(p, q):
    assert bh_discoveries(p, q) == bh_bruteforce(p, q)


@given(p_lists, st.floats(0.001, 0.5), st.floats(0.001, 0.5))
def test_bh_nested(p, q1, q2):
    q1, q2 = sorted((q1, q2))
    assert bh_discoveries(p, q1) <= bh_discoveries(p, q2)


def test_wilcoxon_worked():
    # one-sided 1 / C(6, 3) = 0.05
    assert wilcoxon_rank_sum([1, 2, 3], [4, 5, 6]) == pytest.approx(0.1)


def test_wilcoxon_degenerate():
    assert wilcoxon_rank_sum([7, 7, 7], [7, 7, 7]) == 1.0


def test_wilcoxon_empty_group():
    with pytest.raises(ValueError):
        wilcoxon_rank_sum([], [1.0, 2.0])


@pytest.mark.parametrize("n1, n2", [(1, 1), (2, 3), (3, 3), (4, 7), (5, 5)])
def test_u_distribution_enumeration(n1, n2):
    np.testing.assert_allclose(_u_distribution(n1, n2), u_enumeration(n1, n2), rtol=1e-12)


distinct = st.lists(st.integers(-10_000, 10_000), min_size=2, max_size=16, unique=True)


@given(distinct, st.integers(1, 15))
def test_wilcoxon_symmetric(values, k):
    k = min(k, len(values) - 1)
    a, b = values[:k], values[k:]
    assert wilcoxon_rank_sum(a, b) == pytest.approx(wilcoxon_rank_sum(b, a), rel=1e-12)


@given(distinct, st.integers(1, 15))
def test_wilcoxon_exact_matches_scipy(values, k):
    k = min(k, len(values) - 1)
    a, b = values[:k], values[k:]
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="exact").pvalue
    assert wilcoxon_rank_sum(a, b) == pytest.approx(ref, rel=1e-9)


@given(st.lists(st.integers(0, 6), min_size=18, max_size=30), st.integers(3, 12))
def test_wilcoxon_ties_match_scipy_asymptotic(values, k):
    a, b = values[:k], values[k:]
    if len(set(values)) == 1:
        return
    ref = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True).pvalue
    assert wilcoxon_rank_sum(a, b) == pytest.approx(ref, rel=1e-9, abs=1e-12)


@given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=16, max_size=16, unique=True))
def test_exact_and_normal_agree_at_8_8(values):
    a, b = values[:8], values[8:]
    approx = stats.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True).pvalue
    assert abs(wilcoxon_rank_sum(a, b) - approx) < 0.02


def test_minimum_p_three_vs_three():
    # every split of 6 distinct values: the most extreme gives 2 / C(6, 3) = 0.1
    values = np.array([[1.0, 2, 3, 4, 5, 6]]).T
    assert wilcoxon_matrix(values, np.r_[[True] * 3, [False] * 3]).min() == pytest.approx(0.1)


def _toy(n, m=200, covariates=False, seed=3):
    return generate_dataset(SimulationConfig(n=n, m=m, pi_de=0.2, fc=4.0, covariate_setting=covariates, seed=seed), 0)


def test_wilcoxon_cannot_reject_at_n6():
    counts, design, _ = _toy(6)
    s = estimate_size_factors(counts)
    in_a = design.treatment == 1
    tie_free = np.array([np.unique(col).size == 6 for col in counts.counts.T])
    for meth in (Method.WILCOXON_RAW, Method.WILCOXON_NORM):
        res = run_baseline(meth, counts, design, s, 0.05)
        assert np.nanmin(res.p_values[tie_free]) >= 0.1 - 1e-12
        assert not res.discoveries
    assert in_a.sum() == 3


def test_tied_three_vs_three_floor():
    # every 3-vs-3 pattern over six values; ties fall back to the normal
    # approximation, whose smallest p (scipy asymptotic agrees) is reached at
    # (0, 0, 0) vs (1, 1, 1)
    cols = np.array(list(itertools.product(range(6), repeat=6)), dtype=float).T
    p = wilcoxon_matrix(cols, np.r_[[True] * 3, [False] * 3])
    assert p.min() == pytest.approx(0.04685417760387376, rel=1e-12)
    # BH at q = 0.05 could then only reject k genes out of m when k >= 0.937 m


def test_wilcoxon_rejects_covariates():
    counts, design, _ = _toy(8, covariates=True)
    s = estimate_size_factors(counts)
    with pytest.raises(CovariatesUnsupportedError) as err:
        run_baseline(Method.WILCOXON_RAW, counts, design, s, 0.1)
    assert err.value.code == "COVARIATES_UNSUPPORTED"
    blind = run_baseline(Method.WILCOXON_RAW, counts, design, s, 0.1, ignore_covariates=True)
    assert blind.p_values.shape == (counts.m,)


def test_wilcoxon_needs_two_conditions():
    counts = CountMatrix.from_array(np.arange(1, 25).reshape(6, 4))
    with pytest.raises(ValueError):
        run_baseline("WILCOXON_RAW", counts, DesignInfo([1, 1, 2, 2, 3, 3]), SizeFactors(np.ones(6)), 0.1)


def test_nullstrap_is_not_a_baseline():
    counts, design, _ = _toy(6, m=20)
    with pytest.raises(ValueError):
        run_baseline(Method.NULLSTRAP, counts, design, estimate_size_factors(counts), 0.1)


def test_discoveries_within_analyzable():
    counts, design, _ = _toy(10, m=100)
    y = counts.counts.copy()
    y[:, 0] = 0
    counts = CountMatrix(y, counts.sample_ids, counts.gene_ids)
    s = estimate_size_factors(counts)
    for meth in (Method.NBGLM_BH, Method.WILCOXON_RAW, Method.WILCOXON_NORM):
        res = run_baseline(meth, counts, design, s, 0.5)
        assert math.isnan(res.p_values[0])
        assert counts.gene_ids[0] not in res.discoveries


def test_nbglm_bh_global_null():
    found = []
    for rep in range(50):
        counts, design, _ = generate_dataset(SimulationConfig(n=8, m=1000, pi_de=0.0, seed=11), rep)
        res = run_baseline(Method.NBGLM_BH, counts, design, estimate_size_factors(counts), 0.1)
        found.append(len(res.discoveries))
    assert np.mean(found) <= 1.0
