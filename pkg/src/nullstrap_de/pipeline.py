"""End-to-end Nullstrap-DE run: fit, synthesize a null, refit, threshold, declare."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .core import CountMatrix, DesignInfo, SizeFactors, estimate_size_factors, validate_inputs
from .filter import NullstrapResult, nullstrap_filter
from .nbglm import FitSet, StatisticPair, StatMode, fit_all_genes, fit_statistics
from .synthetic import SyntheticNullSpec, build_null_spec, generate_null_matrix


@dataclass(frozen=True)
class NullstrapRun:
    fits: FitSet
    null_fits: FitSet
    size_factors: SizeFactors
    null_spec: SyntheticNullSpec
    null_counts: CountMatrix
    stats: StatisticPair
    p_values: NDArray[np.float64]
    result: NullstrapResult


def run_nullstrap(
    counts: CountMatrix,
    design: DesignInfo,
    q: float,
    seed: int,
    *,
    mode: StatMode | str | None = None,
    adjust: bool = True,
    size_factors: SizeFactors | None = None,
    fits: FitSet | None = None,
    shrink: bool = True,
    per_gene_resample: bool = False,
    threads: int | None = None,
) -> NullstrapRun:
    """Run the five Nullstrap-DE steps on a validated dataset.

    ``fits`` may be passed in to reuse a real-data fit (e.g. when a baseline
    on the same data has already fitted it).
    """
    data = validate_inputs(counts, design)
    mode = StatMode.default_for(design.K) if mode is None else StatMode(mode)
    s = estimate_size_factors(counts) if size_factors is None else size_factors
    if fits is None:
        fits = fit_all_genes(counts, design, s, shrink=shrink, threads=threads)
    observed, pvals = fit_statistics(fits, mode)
    observed[~data.analyzable] = np.nan

    spec = build_null_spec(
        fits, design, s, seed,
        per_gene_resample=per_gene_resample,
        gene_ids=counts.gene_ids, sample_ids=counts.sample_ids,
    )
    null_counts = generate_null_matrix(spec)
    s_tilde = spec.resampled_size_factors
    null_fits = fit_all_genes(null_counts, design, s_tilde if s_tilde.ndim == 2 else SizeFactors(s_tilde),
                              dispersions=np.where(spec.usable, spec.dispersions, np.nan), threads=threads)
    null_stat, _ = fit_statistics(null_fits, mode)
    null_stat[~spec.usable] = np.nan

    pair = StatisticPair(observed, null_stat, mode, design.K - 1)
    result = nullstrap_filter(pair, q, n=design.n, adjust=adjust, gene_ids=counts.gene_ids)
    return NullstrapRun(fits, null_fits, s, spec, null_counts, pair, pvals, result)
