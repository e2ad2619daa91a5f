import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nullstrap_de.core import CountMatrix, DesignInfo, SizeFactors
from nullstrap_de.nbglm import fit_all_genes
from nullstrap_de.synthetic import SyntheticNullSpec, build_null_spec, generate_null_matrix, sample_nb

DRAWS = 1_000_000


def _within_3se(x, mean, var):
    se_mean = math.sqrt(x.var() / x.size)
    dev2 = (x - x.mean()) ** 2
    se_var = dev2.std() / math.sqrt(x.size)
    assert abs(x.mean() - mean) < 3 * se_mean
    assert abs(x.var(ddof=1) - var) < 3 * se_var


def test_poisson_limit(rng):
    x = sample_nb(np.full(DRAWS, 5.0), 1e-8, rng)
    _within_3se(x, 5.0, 5.0)


def test_variance_formula(rng):
    x = sample_nb(np.full(DRAWS, 10.0), 0.5, rng)
    _within_3se(x, 10.0, 60.0)


@pytest.mark.parametrize("mu, phi", [(0.0, 0.1), (-1.0, 0.1), (5.0, 0.0), (math.nan, 0.1)])
def test_sampler_rejects_bad_parameters(mu, phi, rng):
    with pytest.raises(ValueError):
        sample_nb(mu, phi, rng)


def test_scalar_draw_is_int(rng):
    assert isinstance(sample_nb(3.0, 0.2, rng), int)


def _two_group_fits(beta, alpha=math.log(5.0)):
    y = np.array([[10, 4], [12, 5], [11, 6], [2, 5], [3, 4], [2, 6]])
    design = DesignInfo([1, 1, 1, 2, 2, 2])
    fits = fit_all_genes(CountMatrix.from_array(y), design, SizeFactors(np.ones(6)), dispersions=[0.1, 0.1])
    return fits, design


def test_intercept_only_null_means():
    y = np.full((4, 3), 5)
    design = DesignInfo([1, 1, 2, 2])
    fits = fit_all_genes(CountMatrix.from_array(y), design, SizeFactors(np.ones(4)), dispersions=[0.1] * 3)
    spec = build_null_spec(fits, design, SizeFactors(np.ones(4)), seed=1)
    np.testing.assert_allclose(spec.null_means, 5.0, rtol=1e-10)


def test_null_means_ignore_treatment():
    fits, design = _two_group_fits(None)
    assert abs(fits.beta[0, 0]) > 1.0
    spec = build_null_spec(fits, design, SizeFactors(np.ones(6)), seed=3)
    np.testing.assert_allclose(spec.null_means[:3].mean(axis=0), spec.null_means[3:].mean(axis=0))


def test_covariate_effect_retained():
    rng = np.random.default_rng(0)
    z = np.array([0, 1, 0, 1, 0, 1, 0, 1.0])
    mu = 20 * np.exp(1.5 * z)[:, None] * np.ones((1, 50))
    y = sample_nb(mu, np.full((1, 50), 0.05), rng)
    design = DesignInfo([1, 1, 1, 1, 2, 2, 2, 2], covariates=z)
    s = SizeFactors(np.ones(8))
    fits = fit_all_genes(CountMatrix.from_array(y), design, s, dispersions=np.full(50, 0.05))
    spec = build_null_spec(fits, design, s, seed=0)
    expected = np.exp(fits.alpha[None, :] + z[:, None] * fits.gamma[:, 0][None, :])
    np.testing.assert_allclose(spec.null_means, expected, rtol=1e-12)


def test_resampled_size_factors_reproducible():
    fits, design = _two_group_fits(None)
    s = SizeFactors([0.8, 0.9, 1.0, 1.1, 1.2, 1.3])
    a = build_null_spec(fits, design, s, seed=42).resampled_size_factors
    b = build_null_spec(fits, design, s, seed=42).resampled_size_factors
    assert a.tobytes() == b.tobytes()
    assert set(a) <= set(s.values)


def test_per_gene_resample_shape():
    fits, design = _two_group_fits(None)
    s = SizeFactors([0.8, 0.9, 1.0, 1.1, 1.2, 1.3])
    spec = build_null_spec(fits, design, s, seed=1, per_gene_resample=True)
    assert spec.resampled_size_factors.shape == (6, 2)


def _constant_spec(n, m, mu, phi, seed):
    return SyntheticNullSpec(
        null_means=np.full((n, m), mu),
        resampled_size_factors=np.ones(n),
        dispersions=np.full(m, phi),
        seed=seed,
        gene_ids=tuple(f"g{j}" for j in range(m)),
        sample_ids=tuple(f"s{i}" for i in range(n)),
        usable=np.ones(m, dtype=bool),
    )


def test_null_matrix_moments():
    y = generate_null_matrix(_constant_spec(10_000, 1, 5.0, 0.1, seed=9)).counts[:, 0]
    se = math.sqrt((5.0 + 0.1 * 25.0) / y.size)
    assert abs(y.mean() - 5.0) < 3 * se


def test_null_matrix_determinism():
    a = generate_null_matrix(_constant_spec(8, 30, 7.0, 0.3, seed=5)).counts
    b = generate_null_matrix(_constant_spec(8, 30, 7.0, 0.3, seed=5)).counts
    c = generate_null_matrix(_constant_spec(8, 30, 7.0, 0.3, seed=6)).counts
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_gene_streams_are_order_free():
    spec = _constant_spec(6, 12, 9.0, 0.2, seed=77)
    whole = generate_null_matrix(spec).counts
    for j in reversed(range(12)):
        rng = np.random.default_rng(np.random.SeedSequence(77, spawn_key=(1, j)))
        np.testing.assert_array_equal(whole[:, j], sample_nb(spec.null_means[:, j], 0.2, rng))


def test_null_refit_is_centred(rng):
    n, m = 10, 1000
    mu = 40 * np.ones((n, m))
    y = sample_nb(mu, np.full((1, m), 0.2), rng)
    design = DesignInfo([1] * 5 + [2] * 5)
    s = SizeFactors(np.ones(n))
    fits = fit_all_genes(CountMatrix.from_array(y), design, s)
    spec = build_null_spec(fits, design, s, seed=2)
    null = generate_null_matrix(spec)
    refit = fit_all_genes(null, design, SizeFactors(spec.resampled_size_factors), dispersions=spec.dispersions)
    assert np.median(np.abs(refit.beta[:, 0])) < np.median(refit.se_beta[:, 0])


@given(st.floats(0.5, 50.0), st.floats(0.01, 3.0), st.integers(0, 2**32 - 1))
def test_moment_fidelity(mu, phi, seed):
    y = generate_null_matrix(_constant_spec(200, 100, mu, phi, seed)).counts.ravel().astype(float)
    var = mu + phi * mu**2
    assert abs(y.mean() - mu) < 5 * math.sqrt(var / y.size)
    assert abs(y.var() - var) / var < 0.25
