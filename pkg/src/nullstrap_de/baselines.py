"""Comparison methods: NB-GLM Wald + BH and Wilcoxon rank-sum tests on raw or normalized counts."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from functools import lru_cache

import numpy as np
from numpy.typing import NDArray
from scipy import stats

from .core import CountMatrix, DesignInfo, SizeFactors, normalize_counts, validate_inputs
from .nbglm import FitSet, fit_all_genes, fit_statistics

EXACT_MAX_N = 16


class Method(str, Enum):
    NULLSTRAP = "NULLSTRAP"
    NBGLM_BH = "NBGLM_BH"
    WILCOXON_RAW = "WILCOXON_RAW"
    WILCOXON_NORM = "WILCOXON_NORM"

    @classmethod
    def parse(cls, text: str) -> "Method":
        return cls(text.strip().upper())

    @property
    def is_wilcoxon(self) -> bool:
        return self in (Method.WILCOXON_RAW, Method.WILCOXON_NORM)


class CovariatesUnsupportedError(ValueError):
    code = "COVARIATES_UNSUPPORTED"


@dataclass(frozen=True)
class MethodResult:
    method: Method
    p_values: NDArray[np.float64] | None
    discoveries: frozenset
    discovery_mask: NDArray[np.bool_]


def bh_discoveries(p, q: float) -> set[int]:
    """Benjamini-Hochberg step-up; NaN p-values are left out of the family."""
    p = np.asarray(p, dtype=float)
    idx = np.nonzero(~np.isnan(p))[0]
    m = idx.size
    if m == 0:
        return set()
    order = np.argsort(p[idx], kind="stable")
    ranked = p[idx][order]
    passed = np.nonzero(ranked <= q * np.arange(1, m + 1) / m)[0]
    if passed.size == 0:
        return set()
    cutoff = ranked[passed[-1]]
    return set(idx[p[idx] <= cutoff].tolist())


@lru_cache(maxsize=None)
def _u_distribution(n1: int, n2: int) -> NDArray[np.float64]:
    """Null probabilities of the Mann-Whitney U statistic, index = U."""
    # f[i, j, u]: orderings of i A's and j B's with U = u. The largest value
    # is either an A (beating all j B's) or a B (adding nothing).
    size = n1 * n2 + 1
    f = np.zeros((n1 + 1, n2 + 1, size))
    f[0, :, 0] = 1.0
    f[:, 0, 0] = 1.0
    for i in range(1, n1 + 1):
        for j in range(1, n2 + 1):
            f[i, j] = f[i, j - 1]
            f[i, j, j:] += f[i - 1, j, : size - j]
    freq = f[n1, n2]
    return freq / freq.sum()


def _tie_sums(values: NDArray) -> NDArray[np.float64]:
    srt = np.sort(values, axis=0)
    out = np.zeros(values.shape[1])
    for j in range(values.shape[1]):
        _, t = np.unique(srt[:, j], return_counts=True)
        out[j] = np.sum(t.astype(float) ** 3 - t)
    return out


def wilcoxon_matrix(values, in_a) -> NDArray[np.float64]:
    """Two-sided rank-sum p-value per column of ``values`` (samples x genes).

    Exact null distribution when the total sample size is at most 16 and the
    column has no ties; otherwise the normal approximation with tie-corrected
    variance and continuity correction.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim == 1:
        values = values[:, None]
    in_a = np.asarray(in_a, dtype=bool)
    n1 = int(in_a.sum())
    n2 = int((~in_a).sum())
    if n1 == 0 or n2 == 0:
        raise ValueError("both groups must be nonempty")
    N = n1 + n2
    ranks = stats.rankdata(values, axis=0)
    u = ranks[in_a].sum(axis=0) - n1 * (n1 + 1) / 2.0
    ties = _tie_sums(values)
    mean = n1 * n2 / 2.0
    var = n1 * n2 / 12.0 * ((N + 1) - ties / (N * (N - 1)))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = (np.abs(u - mean) - 0.5) / np.sqrt(var)
    p = np.where(var > 0, np.minimum(1.0, 2.0 * stats.norm.sf(np.maximum(z, 0.0))), 1.0)

    exact = (ties == 0) & (N <= EXACT_MAX_N)
    if exact.any():
        pmf = _u_distribution(n1, n2)
        cdf = np.cumsum(pmf)
        sf = pmf[::-1].cumsum()[::-1]  # P(U >= k)
        k = np.rint(u[exact]).astype(int)
        p[exact] = np.minimum(1.0, 2.0 * np.minimum(cdf[k], sf[k]))
    return p


def wilcoxon_rank_sum(a, b) -> float:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both groups must be nonempty")
    vals = np.concatenate([a, b])[:, None]
    mask = np.r_[np.ones(a.size, bool), np.zeros(b.size, bool)]
    return float(wilcoxon_matrix(vals, mask)[0])


def _result(method, pvals, q, gene_ids, usable):
    p = np.where(usable, pvals, np.nan)
    idx = bh_discoveries(p, q)
    mask = np.zeros(p.size, dtype=bool)
    mask[list(idx)] = True
    return MethodResult(method, p, frozenset(gene_ids[j] for j in idx), mask)


def run_baseline(
    method: Method | str,
    counts: CountMatrix,
    design: DesignInfo,
    s: SizeFactors,
    q: float,
    *,
    fits: FitSet | None = None,
    ignore_covariates: bool = False,
    threads: int | None = None,
) -> MethodResult:
    """Raw p-values from one baseline followed by BH at level ``q``.

    Wilcoxon methods need a two-group design without covariates;
    ``ignore_covariates=True`` runs them covariate-blind instead of raising.
    """
    method = Method.parse(method) if isinstance(method, str) else method
    data = validate_inputs(counts, design)
    if method is Method.NBGLM_BH:
        if fits is None:
            fits = fit_all_genes(counts, design, s, threads=threads)
        _, pvals = fit_statistics(fits, "neg_log_p")
        return _result(method, pvals, q, counts.gene_ids, data.analyzable & fits.usable)
    if method.is_wilcoxon:
        if design.K != 2:
            raise ValueError("Wilcoxon baselines need exactly two conditions")
        if design.p > 0 and not ignore_covariates:
            raise CovariatesUnsupportedError("Wilcoxon rank-sum test does not support covariate adjustment")
        values = counts.counts if method is Method.WILCOXON_RAW else normalize_counts(counts, s)
        pvals = wilcoxon_matrix(values, design.treatment == 1)
        return _result(method, pvals, q, counts.gene_ids, data.analyzable)
    raise ValueError(f"{method} is not a baseline; use run_nullstrap")
