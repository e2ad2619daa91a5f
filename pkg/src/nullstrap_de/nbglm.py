"""Negative-binomial GLMs with log link and size-factor offsets.

Everything here is vectorized across genes: the design matrix is shared, so
each IRLS step solves a stack of small ``d x d`` systems at once. Genes are
processed in fixed-size chunks so that results never depend on how many
worker threads are used.
"""

from __future__ import annotations

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.typing import NDArray
from scipy import stats
from scipy.optimize import nnls
from scipy.special import betaln, gammaln, polygamma

from .core import CountMatrix, DesignInfo, SizeFactors

log = logging.getLogger(__name__)

PHI_MIN = 1e-8
PHI_MAX = 1e4
MAX_ITER = 50
DEV_TOL = 1e-8
SCORE_TOL = 1e-6
MAX_HALVINGS = 10
COND_MAX = 1e12
P_FLOOR = 1e-300
CHUNK = 256
ETA_BOUND = 100.0
PRIOR_SD_MIN = 0.25


class FitStatus(str, Enum):
    CONVERGED = "CONVERGED"
    MAX_ITER = "MAX_ITER"
    SINGULAR = "SINGULAR"
    ALL_ZERO = "ALL_ZERO"


class StatMode(str, Enum):
    WALD_QUAD = "wald_quad"
    SCALED_WALD = "scaled_wald"
    NEG_LOG_P = "neg_log_p"

    @classmethod
    def default_for(cls, K: int) -> "StatMode":
        return cls.SCALED_WALD if K == 2 else cls.NEG_LOG_P


class ModeError(ValueError):
    pass


# statuses whose statistics are treated as missing
EXCLUDED = (FitStatus.SINGULAR, FitStatus.ALL_ZERO)


@dataclass(frozen=True)
class GeneFit:
    alpha: float
    beta: NDArray[np.float64]
    gamma: NDArray[np.float64]
    phi: float
    beta_cov: NDArray[np.float64]
    se_beta: NDArray[np.float64]
    fitted_means: NDArray[np.float64]
    status: FitStatus
    iterations: int
    dispersion_fallback: bool = False

    @property
    def K(self) -> int:
        return self.beta.size + 1


@dataclass(frozen=True)
class FitSet:
    """Per-gene fits stored column-wise; ``fits[j]`` gives a :class:`GeneFit`."""

    alpha: NDArray[np.float64]          # (m,)
    beta: NDArray[np.float64]           # (m, K-1)
    gamma: NDArray[np.float64]          # (m, p)
    phi: NDArray[np.float64]            # (m,)
    beta_cov: NDArray[np.float64]       # (m, K-1, K-1)
    fitted_means: NDArray[np.float64]   # (n, m)
    status: NDArray[np.object_]         # (m,) FitStatus
    iterations: NDArray[np.int64]       # (m,)
    dispersion_fallback: NDArray[np.bool_]

    def __len__(self) -> int:
        return self.alpha.size

    def __getitem__(self, j: int) -> GeneFit:
        return GeneFit(
            alpha=float(self.alpha[j]),
            beta=self.beta[j].copy(),
            gamma=self.gamma[j].copy(),
            phi=float(self.phi[j]),
            beta_cov=self.beta_cov[j].copy(),
            se_beta=self.se_beta[j].copy(),
            fitted_means=self.fitted_means[:, j].copy(),
            status=self.status[j],
            iterations=int(self.iterations[j]),
            dispersion_fallback=bool(self.dispersion_fallback[j]),
        )

    def __iter__(self):
        return (self[j] for j in range(len(self)))

    @property
    def se_beta(self) -> NDArray[np.float64]:
        d = np.diagonal(self.beta_cov, axis1=1, axis2=2)
        return np.sqrt(np.clip(d, 0, None))

    def has_status(self, status: FitStatus) -> NDArray[np.bool_]:
        return np.array([s is status for s in self.status], dtype=bool)

    @property
    def usable(self) -> NDArray[np.bool_]:
        return np.array([s not in EXCLUDED for s in self.status], dtype=bool)


@dataclass(frozen=True)
class StatisticPair:
    """Observed and synthetic-null statistics; NaN marks a missing gene."""

    observed: NDArray[np.float64]
    null: NDArray[np.float64]
    mode: StatMode
    df: int

    def __post_init__(self):
        if np.shape(self.observed) != np.shape(self.null):
            raise ValueError("observed and null statistics differ in length")


# ---------------------------------------------------------------------------
# likelihood pieces

def nb_logpmf(y, mu, phi):
    """Elementwise NB log-probability with variance ``mu + phi * mu**2``.

    Written to stay accurate as ``phi -> 0`` where the naive gamma-function
    form cancels catastrophically.
    """
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    r = 1.0 / phi
    ypos = np.maximum(y, 1.0)
    # lgamma(y + r) - lgamma(r), via betaln which has a large-argument expansion
    lg = np.where(y > 0, gammaln(ypos) - betaln(r, ypos), 0.0)
    pm = phi * mu
    return lg - gammaln(y + 1.0) - (r + y) * np.log1p(pm) + np.where(y > 0, y * np.log(pm), 0.0)


def nb_loglik(y, mu, phi) -> float:
    return float(np.sum(nb_logpmf(y, mu, phi)))


def nb_unit_deviance(y, mu, phi):
    y = np.asarray(y, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        term1 = np.where(y > 0, y * np.log(y / mu), 0.0)
    term2 = (y + 1.0 / phi) * (np.log1p(phi * y) - np.log1p(phi * mu))
    return 2.0 * (term1 - term2)


def nb_score(y, D, mu, phi):
    """Gradient of the log-likelihood in the linear-predictor coefficients, shape (m, d)."""
    r = (y - mu) / (1.0 + phi * mu)
    return (D.T @ r).T


# ---------------------------------------------------------------------------
# IRLS

def _status_array(size: int, status: FitStatus) -> NDArray[np.object_]:
    # np.full would coerce the str-valued enum to a fixed-width string
    out = np.empty(size, dtype=object)
    out[:] = [status] * size
    return out


def _irls_chunk(Y, D, off, phi):
    """Fixed-dispersion IRLS for a chunk of genes.

    Y (n, m), D (n, d), off (n, m), phi (m,). Returns theta (m, d), mu (n, m),
    status (m,) object array, iterations (m,), info matrices (m, d, d).
    """
    n, m = Y.shape
    d = D.shape[1]
    theta = np.zeros((m, d))
    theta[:, 0] = np.log(Y.sum(axis=0) / np.exp(off).sum(axis=0))

    def means(th):
        eta = np.clip(D @ th.T + off, -ETA_BOUND, ETA_BOUND)
        return eta, np.exp(eta)

    def deviance(mu):
        return nb_unit_deviance(Y, mu, phi).sum(axis=0)

    eta, mu = means(theta)
    dev = deviance(mu)
    active = np.ones(m, dtype=bool)
    # genes that met the stopping rule once and take one more polishing step
    polishing = np.zeros(m, dtype=bool)
    status = _status_array(m, FitStatus.MAX_ITER)
    iters = np.zeros(m, dtype=np.int64)
    eye = np.eye(d)

    for it in range(1, MAX_ITER + 1):
        if not active.any():
            break
        w = mu / (1.0 + phi * mu)
        z = eta - off + (Y - mu) / mu
        A = np.einsum("ia,ib,ij->jab", D, D, w)
        b = np.einsum("ia,ij->ja", D, w * z)
        cond = np.linalg.cond(A)
        sing = active & ~(cond < COND_MAX)
        status[sing] = FitStatus.SINGULAR
        iters[sing] = it
        active &= ~sing
        A[~active] = eye
        b[~active] = 0.0
        proposal = np.linalg.solve(A, b[..., None])[..., 0]
        proposal[~active] = theta[~active]

        new_eta, new_mu = means(proposal)
        new_dev = deviance(new_mu)
        worse = active & ~(new_dev <= dev + 1e-12 * (np.abs(dev) + 1.0))
        halvings = 0
        while worse.any() and halvings < MAX_HALVINGS:
            proposal[worse] = 0.5 * (theta[worse] + proposal[worse])
            new_eta, new_mu = means(proposal)
            new_dev = deviance(new_mu)
            worse &= ~(new_dev <= dev + 1e-12 * (np.abs(dev) + 1.0))
            halvings += 1
        if worse.any():
            # no descent direction found; keep the last iterate
            proposal[worse] = theta[worse]
            status[worse & polishing] = FitStatus.CONVERGED
            active &= ~worse
            iters[worse] = it
            new_eta, new_mu = means(proposal)
            new_dev = deviance(new_mu)

        rel = np.abs(new_dev - dev) / (np.abs(new_dev) + 0.1)
        theta, eta, mu, dev = proposal, new_eta, new_mu, new_dev
        score = np.abs(nb_score(Y, D, mu, phi)).max(axis=1)
        met = active & (rel < DEV_TOL) & (score < SCORE_TOL)
        done = met & polishing
        polishing |= met
        status[done] = FitStatus.CONVERGED
        iters[active] = it
        active &= ~done

    w = mu / (1.0 + phi * mu)
    A = np.einsum("ia,ib,ij->jab", D, D, w)
    bad = ~(np.linalg.cond(A) < COND_MAX)
    status[bad] = FitStatus.SINGULAR
    return theta, mu, status, iters, A


def _chunks(m: int):
    return [slice(a, min(a + CHUNK, m)) for a in range(0, m, CHUNK)]


def _resolve_threads(threads: int | None) -> int:
    if threads is None:
        threads = int(os.environ.get("NULLSTRAP_THREADS", "1") or 1)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def _map_chunks(fn, m: int, threads: int | None):
    parts = _chunks(m)
    threads = _resolve_threads(threads)
    if threads == 1 or len(parts) == 1:
        return [fn(sl) for sl in parts]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, parts))


def _offsets(s, n: int, m: int) -> NDArray[np.float64]:
    """Log size factors broadcast to (n, m); accepts per-gene size factors."""
    v = s.values if isinstance(s, SizeFactors) else np.asarray(s, dtype=float)
    if v.ndim == 1:
        return np.broadcast_to(np.log(v)[:, None], (n, m))
    return np.log(v)


# ---------------------------------------------------------------------------
# dispersion

# below this dispersion lgamma differences lose precision; use betaln there
_SMALL_PHI = 1e-6


def _phi_loglik(Y, mu, logphi, prior_center=None, prior_sd=None):
    """Per-gene NB log-likelihood up to terms that do not involve phi, plus an optional log-normal prior."""
    phi = np.exp(logphi)
    r = 1.0 / phi
    lg = gammaln(Y + r) - gammaln(r)
    small = phi < _SMALL_PHI
    if small.any():
        ys = np.maximum(Y[:, small], 1.0)
        lg[:, small] = np.where(Y[:, small] > 0, gammaln(ys) - betaln(r[small], ys), 0.0)
    ll = (lg - (r + Y) * np.log1p(phi * mu) + Y * logphi).sum(axis=0)
    if prior_center is not None:
        ll = ll - 0.5 * ((logphi - prior_center) / prior_sd) ** 2
    return ll


_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0
_LOG_BOUNDS = (np.log(PHI_MIN), np.log(PHI_MAX))


def _golden(f, lo, hi, iters):
    c = hi - _GOLDEN * (hi - lo)
    d = lo + _GOLDEN * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        # left: maximum lies in [lo, d], so the old c becomes the new d
        left = fc >= fd
        hi = np.where(left, d, hi)
        lo = np.where(left, lo, c)
        c, d = (np.where(left, hi - _GOLDEN * (hi - lo), d),
                np.where(left, c, lo + _GOLDEN * (hi - lo)))
        fx = f(np.where(left, c, d))
        fc, fd = np.where(left, fx, fd), np.where(left, fc, fx)
    return 0.5 * (lo + hi)


def _grid_search(f, m):
    lo_b, hi_b = _LOG_BOUNDS
    grid = np.linspace(lo_b, hi_b, 37)
    vals = np.stack([f(np.full(m, g)) for g in grid])
    k = np.argmax(vals, axis=0)
    best = _golden(f, grid[np.maximum(k - 1, 0)], grid[np.minimum(k + 1, grid.size - 1)], 30)
    return best, k == grid.size - 1


def _maximize_logphi(Y, mu, start=None, prior_center=None, prior_sd=None):
    """Maximize over log(phi) in [log PHI_MIN, log PHI_MAX] for every gene.

    Without ``start`` a coarse grid brackets the maximum before golden-section
    refinement; with ``start`` the search is confined to +-0.5 around it and
    widened to the full grid only where the optimum hits the bracket edge.
    Returns the maximizer and a mask of genes whose maximum is the upper bound.
    """
    m = Y.shape[1]
    lo_b, hi_b = _LOG_BOUNDS

    def f(x, cols=slice(None)):
        pc = None if prior_center is None else prior_center[cols]
        return _phi_loglik(Y[:, cols], mu[:, cols], x, pc, prior_sd)

    if start is None:
        best, at_upper = _grid_search(f, m)
    else:
        lo = np.clip(start - 0.5, lo_b, hi_b)
        hi = np.clip(start + 0.5, lo_b, hi_b)
        best = _golden(f, lo, hi, 24)
        at_upper = np.zeros(m, dtype=bool)
        edge = ((best - lo < 1e-3) & (lo > lo_b)) | ((hi - best < 1e-3) & (hi < hi_b))
        if edge.any():
            cols = np.nonzero(edge)[0]
            sub, up = _grid_search(lambda x: f(x, cols), cols.size)
            best[cols] = sub
            at_upper[cols] = up
    # the lower bound is a legitimate answer for under-dispersed genes
    floor = np.full(m, lo_b)
    best = np.where(f(floor) >= f(best), lo_b, best)
    at_upper |= best >= hi_b - 1e-6
    return np.clip(best, lo_b, hi_b), at_upper


def moments_dispersion(Y, design: DesignInfo, s, null_model: bool = False) -> NDArray[np.float64]:
    """Method-of-moments start ``max((v - ybar) / ybar**2, PHI_MIN)`` on normalized counts.

    ``v`` is the average within-condition variance (overall variance for the
    intercept-only model).
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    sv = s.values if isinstance(s, SizeFactors) else np.asarray(s, dtype=float)
    norm = Y / (sv[:, None] if sv.ndim == 1 else sv)
    ybar = norm.mean(axis=0)
    if null_model:
        v = norm.var(axis=0, ddof=1)
    else:
        groups = [norm[design.treatment == k] for k in range(1, design.K + 1)]
        v = np.mean([g.var(axis=0, ddof=1) for g in groups if g.shape[0] > 1], axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = (v - ybar) / ybar**2
    phi = np.where(np.isfinite(phi), phi, PHI_MIN)
    return np.clip(phi, PHI_MIN, PHI_MAX)


def _dispersion_chunk(Y, D, off, phi0, warm=False, prior_center=None, prior_sd=None,
                      max_outer=20, tol=1e-4):
    """Alternate IRLS mean fits with 1-D dispersion maximization until log(phi) settles."""
    logphi = np.log(phi0)
    fallback = np.zeros(Y.shape[1], dtype=bool)
    for it in range(max_outer):
        _, mu, _, _, _ = _irls_chunk(Y, D, off, np.exp(logphi))
        new, at_upper = _maximize_logphi(Y, mu, logphi if (warm or it) else None, prior_center, prior_sd)
        # no interior maximum: keep the starting value
        new = np.where(at_upper, np.log(phi0), new)
        fallback = at_upper
        delta = np.abs(new - logphi)
        logphi = new
        if np.all(delta < tol):
            break
    return np.exp(logphi), fallback


def _dispersion_trend(Y, s, phi):
    """Non-negative least-squares fit of ``phi ~ a0 + a1 / mean`` over informative genes."""
    sv = s.values if isinstance(s, SizeFactors) else np.asarray(s, dtype=float)
    base = (Y / (sv[:, None] if sv.ndim == 1 else sv)).mean(axis=0)
    ok = (phi > 1e-6) & (phi < PHI_MAX) & (base > 0)
    if ok.sum() < 3:
        return np.full_like(phi, np.median(phi))
    A = np.column_stack([np.ones(ok.sum()), 1.0 / base[ok]])
    coef, _ = nnls(A, phi[ok])
    trend = coef[0] + coef[1] / np.maximum(base, 1e-8)
    return np.clip(trend, PHI_MIN, PHI_MAX)


def _prior_sd(logphi, log_trend, n, d):
    """Empirical-Bayes width of the log-dispersion prior.

    Robust spread of ``log(phi / trend)`` minus the sampling variance
    expected from ``n - d`` residual degrees of freedom, floored at
    ``PRIOR_SD_MIN``.
    """
    resid = logphi - log_trend
    resid = resid[np.isfinite(resid)]
    if resid.size < 3 or n <= d:
        return PRIOR_SD_MIN
    spread = stats.median_abs_deviation(resid, scale="normal") ** 2
    var = spread - polygamma(1, (n - d) / 2.0)
    return float(np.sqrt(max(var, PRIOR_SD_MIN**2)))


def estimate_dispersions(
    counts,
    design: DesignInfo,
    s,
    null_model: bool = False,
    shrink: bool = False,
    prior_sd: float | None = None,
    df_correct: bool | None = None,
    threads: int | None = None,
):
    """Per-gene dispersions for an (n, m) count array.

    Plain mode is the profile maximum-likelihood estimate. With ``shrink``
    the estimate is the posterior mode under a log-normal prior centred on a
    fitted ``a0 + a1 / mean`` trend. The prior sd is ``prior_sd`` if given,
    otherwise estimated from the data (see :func:`_prior_sd`). Genes whose
    MLE lies more than two prior sds above the trend keep their MLE.
    ``df_correct`` (default: on when shrinking) rescales by ``n / (n - d)``
    for the ``d`` estimated mean parameters, countering the downward bias
    shared by the likelihood and the trend.

    Returns ``(phi, fallback)``; ``fallback`` marks genes whose search failed
    to bracket a maximum and kept the moments estimate.
    """
    Y = np.asarray(counts.counts if isinstance(counts, CountMatrix) else counts, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, m = Y.shape
    D = design.model_matrix(null_model)
    d = D.shape[1]
    off = _offsets(s, n, m)
    phi0 = moments_dispersion(Y, design, np.exp(off), null_model)

    parts = _map_chunks(lambda sl: _dispersion_chunk(Y[:, sl], D, off[:, sl], phi0[sl]), m, threads)
    phi = np.concatenate([p[0] for p in parts])
    fallback = np.concatenate([p[1] for p in parts])
    if shrink:
        log_trend = np.log(_dispersion_trend(Y, np.exp(off), phi))
        informative = phi > 100 * PHI_MIN
        sd = prior_sd if prior_sd is not None else _prior_sd(
            np.log(phi[informative]), log_trend[informative], n, d)

        def run(sl):
            return _dispersion_chunk(Y[:, sl], D, off[:, sl], phi[sl], warm=True,
                                     prior_center=log_trend[sl], prior_sd=sd)

        parts = _map_chunks(run, m, threads)
        shrunk = np.concatenate([p[0] for p in parts])
        outlier = np.log(phi) > log_trend + 2.0 * sd
        phi = np.where(outlier, phi, shrunk)
        fallback = np.where(outlier, fallback, np.concatenate([p[1] for p in parts]))
    if df_correct is None:
        df_correct = shrink
    if df_correct and n > d:
        phi = np.clip(phi * n / (n - d), PHI_MIN, PHI_MAX)
    return phi, fallback


def estimate_dispersion(y, design: DesignInfo, s, null_model: bool = False) -> float:
    """Profile maximum-likelihood dispersion for one gene."""
    y = np.asarray(y, dtype=float)
    if not np.any(y > 0):
        raise ValueError("dispersion is undefined for an all-zero gene")
    phi, fallback = estimate_dispersions(y[:, None], design, s, null_model=null_model, threads=1)
    if fallback[0]:
        log.warning("dispersion search did not bracket a maximum; using the moments estimate")
    return float(phi[0])


# ---------------------------------------------------------------------------
# fitting

def _fit_batch(Y, design: DesignInfo, off, phi, null_model: bool, threads=None) -> FitSet:
    n, m = Y.shape
    D = design.model_matrix(null_model)
    k1 = design.K - 1
    p = design.p
    positive = Y.sum(axis=0) > 0

    def run(sl):
        idx = np.arange(m)[sl]
        keep = idx[positive[sl]]
        out_theta = np.full((idx.size, D.shape[1]), np.nan)
        out_mu = np.full((n, idx.size), np.nan)
        out_status = _status_array(idx.size, FitStatus.ALL_ZERO)
        out_iter = np.zeros(idx.size, dtype=np.int64)
        out_A = np.full((idx.size, D.shape[1], D.shape[1]), np.nan)
        if keep.size:
            local = keep - sl.start
            th, mu, st, it, A = _irls_chunk(Y[:, keep], D, off[:, keep], phi[keep])
            out_theta[local], out_mu[:, local], out_status[local] = th, mu, st
            out_iter[local], out_A[local] = it, A
        return out_theta, out_mu, out_status, out_iter, out_A

    parts = _map_chunks(run, m, threads)
    theta = np.concatenate([q[0] for q in parts])
    mu = np.concatenate([q[1] for q in parts], axis=1)
    status = np.concatenate([q[2] for q in parts])
    iters = np.concatenate([q[3] for q in parts])
    A = np.concatenate([q[4] for q in parts])

    cov = np.full((m, k1, k1), np.nan)
    ok = np.array([s_ not in EXCLUDED for s_ in status], dtype=bool)
    if null_model:
        beta = np.zeros((m, k1))
        cov = np.zeros((m, k1, k1))
        gamma = theta[:, 1:]
    else:
        beta = theta[:, 1:1 + k1]
        gamma = theta[:, 1 + k1:]
        if ok.any():
            inv = np.linalg.inv(A[ok])
            cov[ok] = inv[:, 1:1 + k1, 1:1 + k1]
    if p == 0:
        gamma = np.zeros((m, 0))
    return FitSet(
        alpha=theta[:, 0],
        beta=beta,
        gamma=gamma,
        phi=np.asarray(phi, dtype=float),
        beta_cov=cov,
        fitted_means=mu,
        status=status,
        iterations=iters,
        dispersion_fallback=np.zeros(m, dtype=bool),
    )


def fit_nb_glm(y, design: DesignInfo, s, phi: float, null_model: bool = False) -> GeneFit:
    """Maximum-likelihood NB-GLM fit for one gene at fixed dispersion ``phi``.

    With ``null_model=True`` the treatment block is dropped and ``beta`` is
    returned as zeros.
    """
    if not phi > 0:
        raise ValueError("phi must be positive")
    y = np.asarray(y, dtype=float)[:, None]
    off = _offsets(s, y.shape[0], 1)
    return _fit_batch(y, design, off, np.array([phi]), null_model, threads=1)[0]


def fit_all_genes(
    counts,
    design: DesignInfo,
    s,
    dispersions=None,
    *,
    shrink: bool = True,
    threads: int | None = None,
) -> FitSet:
    """Fit the full model to every gene, in gene order.

    When ``dispersions`` is given they are held fixed and no dispersion is
    estimated. Otherwise dispersions come from :func:`estimate_dispersions`,
    trend-shrunk and bias-corrected unless ``shrink=False`` (plain MLE).
    ``s`` may be a :class:`SizeFactors` or an (n, m) array of per-gene size
    factors. All-zero genes come back with status ALL_ZERO.
    """
    Y = np.asarray(counts.counts if isinstance(counts, CountMatrix) else counts, dtype=float)
    n, m = Y.shape
    off = _offsets(s, n, m)
    positive = Y.sum(axis=0) > 0
    fallback = np.zeros(m, dtype=bool)
    if dispersions is None:
        phi = np.full(m, np.nan)
        if positive.any():
            est, fb = estimate_dispersions(
                Y[:, positive], design, np.exp(off[:, positive]), shrink=shrink, threads=threads
            )
            phi[positive] = est
            fallback[positive] = fb
        phi_fit = np.where(positive, phi, 1.0)
    else:
        phi = np.asarray(dispersions, dtype=float)
        if phi.shape != (m,):
            raise ValueError(f"expected {m} dispersions, got shape {phi.shape}")
        phi_fit = np.where(np.isfinite(phi) & (phi > 0), phi, 1.0)
    fits = _fit_batch(Y, design, off, phi_fit, null_model=False, threads=threads)
    n_iter = int(fits.has_status(FitStatus.MAX_ITER).sum())
    if n_iter:
        log.warning("%d gene(s) reached the IRLS iteration limit; keeping last iterate", n_iter)
    return FitSet(
        alpha=fits.alpha,
        beta=fits.beta,
        gamma=fits.gamma,
        phi=phi,
        beta_cov=fits.beta_cov,
        fitted_means=fits.fitted_means,
        status=fits.status,
        iterations=fits.iterations,
        dispersion_fallback=fallback,
    )


# ---------------------------------------------------------------------------
# Wald statistics

def _wald_quad(beta, cov):
    if beta.shape[-1] == 1:
        return beta[..., 0] ** 2 / cov[..., 0, 0]
    return np.einsum("...a,...a->...", beta, np.linalg.solve(cov, beta[..., None])[..., 0])


def _p_values(beta, cov):
    k1 = beta.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        if k1 == 1:
            z = beta[..., 0] / np.sqrt(cov[..., 0, 0])
            return np.where(beta[..., 0] == 0, 1.0, 2.0 * stats.norm.sf(np.abs(z)))
        w = _wald_quad(beta, cov)
        return np.where(np.all(beta == 0, axis=-1), 1.0, stats.chi2.sf(w, k1))


def _statistics(beta, cov, mode: StatMode):
    mode = StatMode(mode)
    k1 = beta.shape[-1]
    with np.errstate(divide="ignore", invalid="ignore"):
        if mode is StatMode.WALD_QUAD:
            return np.where(np.all(beta == 0, axis=-1), 0.0, _wald_quad(beta, cov))
        if mode is StatMode.SCALED_WALD:
            if k1 != 1:
                raise ModeError("SCALED_WALD is only defined for two conditions (K = 2)")
            return np.where(beta[..., 0] == 0, 0.0, np.abs(beta[..., 0]) / np.sqrt(cov[..., 0, 0]))
        return -np.log(np.maximum(_p_values(beta, cov), P_FLOOR))


def wald_p_value(fit: GeneFit) -> float:
    """Two-sided normal p-value for K = 2, chi-square(K-1) upper tail otherwise."""
    return float(_p_values(fit.beta, fit.beta_cov))


def wald_statistic(fit: GeneFit, mode: StatMode | str) -> float:
    return float(_statistics(fit.beta, fit.beta_cov, StatMode(mode)))


def fit_statistics(fits: FitSet, mode: StatMode | str):
    """Vectorized statistic and p-value per gene; NaN for SINGULAR / ALL_ZERO genes."""
    stat = np.full(len(fits), np.nan)
    pval = np.full(len(fits), np.nan)
    ok = fits.usable
    if ok.any():
        stat[ok] = _statistics(fits.beta[ok], fits.beta_cov[ok], StatMode(mode))
        pval[ok] = _p_values(fits.beta[ok], fits.beta_cov[ok])
    return stat, pval
