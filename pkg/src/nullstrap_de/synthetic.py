"""Synthetic null count matrices drawn from fitted models with the treatment effect removed."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import CountMatrix, DesignInfo, SizeFactors
from .nbglm import FitSet

# below this dispersion the gamma mixing step is skipped
POISSON_SHORTCUT = 1e-8


def sample_nb(mu, phi, rng: np.random.Generator, size=None):
    """Draw NB counts with mean ``mu`` and variance ``mu + phi * mu**2``.

    Gamma-Poisson mixture: ``lambda ~ Gamma(1/phi, phi*mu)``, ``Y ~ Poisson(lambda)``.
    ``mu`` and ``phi`` broadcast against each other and ``size``.
    """
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if not (np.all(np.isfinite(mu)) and np.all(mu > 0)):
        raise ValueError("mu must be finite and positive")
    if not (np.all(np.isfinite(phi)) and np.all(phi > 0)):
        raise ValueError("phi must be finite and positive")
    shape = np.broadcast_shapes(mu.shape, phi.shape) if size is None else size
    mu_b = np.broadcast_to(mu, shape)
    phi_b = np.broadcast_to(phi, shape)
    if np.all(phi_b < POISSON_SHORTCUT):
        lam = mu_b
    else:
        safe_phi = np.maximum(phi_b, POISSON_SHORTCUT)
        lam = rng.gamma(1.0 / safe_phi, safe_phi * mu_b)
        lam = np.where(phi_b < POISSON_SHORTCUT, mu_b, lam)
    out = rng.poisson(lam)
    return int(out) if np.ndim(out) == 0 else out


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


@dataclass(frozen=True)
class SyntheticNullSpec:
    """Null generating means (n x m), the resampled size factors and dispersions.

    ``resampled_size_factors`` is (n,) for the default shared draw, or (n, m)
    when every gene received its own resample.
    """

    null_means: NDArray[np.float64]
    resampled_size_factors: NDArray[np.float64]
    dispersions: NDArray[np.float64]
    seed: int
    gene_ids: tuple[str, ...] = ()
    sample_ids: tuple[str, ...] = ()
    usable: NDArray[np.bool_] = None


def build_null_spec(
    fits: FitSet,
    design: DesignInfo,
    s: SizeFactors,
    seed: int,
    *,
    per_gene_resample: bool = False,
    gene_ids=None,
    sample_ids=None,
) -> SyntheticNullSpec:
    """Null means ``exp(log s~_i + alpha_j + z_i' gamma_j)``, with ``s~`` resampled from ``s``.

    One size-factor resample is shared by every gene unless
    ``per_gene_resample`` is set.
    """
    n, m = design.n, len(fits)
    sv = np.asarray(s.values, dtype=float)
    rng = _rng(seed, 0)
    if per_gene_resample:
        s_tilde = sv[rng.integers(0, n, size=(n, m))]
        log_s = np.log(s_tilde)
    else:
        s_tilde = sv[rng.integers(0, n, size=n)]
        log_s = np.log(s_tilde)[:, None]
    usable = fits.usable
    alpha = np.where(usable, fits.alpha, 0.0)
    gamma = np.where(usable[:, None], fits.gamma, 0.0) if design.p else np.zeros((m, 0))
    eta = log_s + alpha[None, :] + design.covariates @ gamma.T
    mu0 = np.exp(eta)
    mu0[:, ~usable] = np.nan
    phi = np.where(usable, fits.phi, np.nan)
    return SyntheticNullSpec(
        null_means=mu0,
        resampled_size_factors=s_tilde,
        dispersions=phi,
        seed=int(seed),
        gene_ids=tuple(gene_ids) if gene_ids is not None else tuple(f"g{j + 1}" for j in range(m)),
        sample_ids=tuple(sample_ids) if sample_ids is not None else tuple(f"s{i + 1}" for i in range(n)),
        usable=usable,
    )


def generate_null_matrix(spec: SyntheticNullSpec) -> CountMatrix:
    """Draw ``Y~_ij ~ NB(mu0_ij, phi_j)`` gene by gene.

    Gene j uses its own generator keyed on ``(seed, j)``, so the output does
    not depend on the order or concurrency in which genes are drawn. Genes
    without a usable fit are left at zero.
    """
    n, m = spec.null_means.shape
    out = np.zeros((n, m), dtype=np.int64)
    for j in range(m):
        mu = spec.null_means[:, j]
        if not np.all(np.isfinite(mu)):
            continue
        # tiny means can underflow to zero; they would draw zero anyway
        mu = np.maximum(mu, 1e-300)
        out[:, j] = sample_nb(mu, spec.dispersions[j], _rng(spec.seed, 1, j))
    return CountMatrix(out, spec.sample_ids, spec.gene_ids)
