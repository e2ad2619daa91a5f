"""Estimated-FDP curve, data-driven threshold and discovery selection."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .nbglm import StatisticPair

INFINITE = math.inf


class EmptyStatisticsError(ValueError):
    """No gene carries an observed statistic."""


@dataclass(frozen=True)
class FdpCurve:
    candidate_thresholds: NDArray[np.float64]
    fdp_values: NDArray[np.float64]
    null_counts: NDArray[np.int64]
    observed_counts: NDArray[np.int64]


@dataclass(frozen=True)
class NullstrapResult:
    tau: float
    effective_q: float
    discoveries: frozenset
    curve: FdpCurve
    adjusted: bool
    discovery_mask: NDArray[np.bool_] = None


def _abs_pair(stats: StatisticPair):
    obs = np.abs(np.asarray(stats.observed, dtype=float))
    null = np.abs(np.asarray(stats.null, dtype=float))
    keep = ~np.isnan(obs)
    if not keep.any():
        raise EmptyStatisticsError("no analyzable genes")
    # a missing null statistic (e.g. all-zero synthetic gene) never exceeds t > 0
    null = np.where(np.isnan(null), 0.0, null)
    return obs[keep], null[keep]


def _count_at_least(sorted_vals, t):
    return sorted_vals.size - np.searchsorted(sorted_vals, t, side="left")


def fdp_curve(stats: StatisticPair) -> FdpCurve:
    """Evaluate ``#{|null| >= t} / max(#{|obs| >= t}, 1)`` at every jump point.

    Candidates are the distinct positive values of both vectors plus a
    sentinel one unit above the largest, where the estimate is always 0.
    """
    obs, null = _abs_pair(stats)
    pooled = np.concatenate([obs, null])
    pooled = pooled[np.isfinite(pooled) & (pooled > 0)]
    top = float(pooled.max()) if pooled.size else 0.0
    cand = np.append(np.unique(pooled), top + 1.0)
    n_null = _count_at_least(np.sort(null), cand)
    n_obs = _count_at_least(np.sort(obs), cand)
    fdp = n_null / np.maximum(n_obs, 1)
    return FdpCurve(cand, fdp.astype(float), n_null.astype(np.int64), n_obs.astype(np.int64))


def adjust_q(q: float, m: int, n: int) -> float:
    """Small-sample target ``q / (1 + sqrt(log(m) / n))``."""
    if m < 2 or n < 2:
        raise ValueError("adjust_q needs m >= 2 and n >= 2")
    return q / (1.0 + math.sqrt(math.log(m) / n))


def select_threshold(curve: FdpCurve, effective_q: float) -> float:
    ok = np.nonzero(curve.fdp_values <= effective_q)[0]
    if ok.size == 0:
        return INFINITE
    return float(curve.candidate_thresholds[ok[0]])


def declare_discoveries(stats: StatisticPair, tau: float) -> set[int]:
    """Indices ``j`` with ``|observed_j| > tau`` (strict); missing genes never qualify."""
    obs = np.abs(np.asarray(stats.observed, dtype=float))
    with np.errstate(invalid="ignore"):
        hit = obs > tau
    return set(np.nonzero(hit)[0].tolist())


def nullstrap_filter(
    stats: StatisticPair,
    q: float,
    *,
    n: int | None = None,
    adjust: bool = True,
    gene_ids=None,
) -> NullstrapResult:
    """Threshold a statistic pair at target ``q``.

    With ``adjust`` the target is shrunk by the small-sample factor using the
    number of analyzable genes and the sample count ``n``.
    """
    if not 0 < q < 1:
        raise ValueError("q must lie in (0, 1)")
    curve = fdp_curve(stats)
    m_used = int(np.sum(~np.isnan(np.asarray(stats.observed, dtype=float))))
    effective_q = q
    if adjust:
        if n is None:
            raise ValueError("the small-sample adjustment needs the sample count n")
        effective_q = adjust_q(q, max(m_used, 2), n)
    tau = select_threshold(curve, effective_q)
    idx = declare_discoveries(stats, tau)
    mask = np.zeros(len(stats.observed), dtype=bool)
    mask[list(idx)] = True
    if gene_ids is None:
        found = frozenset(idx)
    else:
        found = frozenset(gene_ids[j] for j in idx)
    return NullstrapResult(tau, effective_q, found, curve, adjust, mask)
