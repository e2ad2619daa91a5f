"""Simulation benchmark: data generation, method runs, empirical FDR / power, permutation controls."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import product
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.typing import NDArray

from .baselines import CovariatesUnsupportedError, Method, run_baseline
from .core import CountMatrix, DesignInfo, estimate_size_factors
from .nbglm import _resolve_threads, fit_all_genes
from .pipeline import run_nullstrap
from .synthetic import sample_nb

log = logging.getLogger(__name__)

BUILTIN = "BUILTIN"
ALL_METHODS = (Method.NULLSTRAP, Method.NBGLM_BH, Method.WILCOXON_RAW, Method.WILCOXON_NORM)

SETTING_GRIDS = {
    1: dict(n=list(range(6, 25, 2)), fc=[2.0, 2.5, 3.0], pi_de=[0.1, 0.15, 0.2],
            q=[0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4]),
    2: dict(n=list(range(6, 25, 2)), fc=[2.5, 3.0, 3.5], pi_de=[0.1, 0.15, 0.2],
            q=[0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4]),
}


@dataclass(frozen=True)
class SimulationConfig:
    n: int = 16
    m: int = 1000
    pi_de: float = 0.1
    fc: float = 3.0
    q: float = 0.1
    replicates: int = 50
    covariate_setting: bool = False
    covariate_gene_frac: float = 0.2
    imbalance: float = 0.8
    gamma_range: tuple[float, float] = (2.0, 3.0)
    sf_range: tuple[float, float] = (0.9, 1.1)
    seed: int = 0
    param_source: str = BUILTIN
    all_up: bool = False
    adjust: bool = True

    def __post_init__(self):
        if self.n < 4 or self.n % 2:
            raise ValueError(f"n must be even and at least 4, got {self.n}")
        if self.m < 2:
            raise ValueError("m must be at least 2")
        # pi_de = 0 is allowed for global-null datasets
        if not 0 <= self.pi_de < 1:
            raise ValueError(f"pi_de must lie in [0, 1), got {self.pi_de}")
        if not self.fc > 1:
            raise ValueError(f"fc must exceed 1, got {self.fc}")
        if not 0 < self.q < 1:
            raise ValueError(f"q must lie in (0, 1), got {self.q}")
        if self.replicates < 0:
            raise ValueError("replicates must be non-negative")

    @property
    def setting(self) -> int:
        return 2 if self.covariate_setting else 1


@dataclass(frozen=True)
class TruthLabels:
    de_set: frozenset
    null_set: frozenset
    true_beta: NDArray[np.float64]
    de_mask: NDArray[np.bool_] = None


@dataclass(frozen=True)
class MetricsRow:
    setting: int
    n: int
    m: int
    pi_de: float
    fc: float
    q: float
    covariates: bool
    method: str
    fdr: float
    fdr_se: float
    power: float
    power_se: float
    replicates: int
    status: str = "OK"


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def _child_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence(seed, spawn_key=key).generate_state(1, np.uint64)[0] >> np.uint64(1))


def read_param_table(path) -> NDArray[np.float64]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if not row or not "".join(row).strip():
                continue
            try:
                mean, disp = float(row[0]), float(row[1])
            except (ValueError, IndexError):
                if lineno == 1:
                    continue  # header
                raise ValueError(f"{path}:{lineno}: expected two numeric columns (base_mean, dispersion)")
            if not (mean > 0 and disp > 0 and math.isfinite(mean) and math.isfinite(disp)):
                raise ValueError(f"{path}:{lineno}: base_mean and dispersion must be positive")
            rows.append((mean, disp))
    if not rows:
        raise ValueError(f"{path}: no parameter rows")
    return np.array(rows)


def load_gene_params(source, m: int, rng: np.random.Generator):
    """Draw ``m`` (log base mean, dispersion) pairs.

    ``BUILTIN`` draws log means from Normal(log 50, 1) truncated to means >= 1
    and dispersions ``0.05 + (2 / mean) * LogNormal(0, 0.3**2)``. A file
    source is resampled row-wise with replacement, keeping each pair intact.
    """
    if source is None or str(source) == BUILTIN:
        logmu = np.empty(m)
        filled = 0
        while filled < m:
            draw = rng.normal(np.log(50.0), 1.0, size=2 * (m - filled))
            draw = draw[draw >= 0.0][: m - filled]
            logmu[filled:filled + draw.size] = draw
            filled += draw.size
        noise = rng.lognormal(0.0, 0.3, size=m)
        phi = 0.05 + 2.0 / np.exp(logmu) * noise
        return logmu, phi
    table = read_param_table(source)
    pick = rng.integers(0, table.shape[0], size=m)
    return np.log(table[pick, 0]), table[pick, 1]


def _draw_covariate(x: NDArray, imbalance: float, rng: np.random.Generator) -> NDArray:
    prob = np.where(x == 1, imbalance, 1.0 - imbalance)
    for _ in range(10_000):
        z = (rng.random(x.size) < prob).astype(float)
        # a constant z or z == x (or 1 - x) makes the design rank deficient
        if 0 < z.sum() < z.size and not np.array_equal(z, x) and not np.array_equal(z, 1 - x):
            return z
    raise RuntimeError("could not draw a non-degenerate covariate")


def generate_dataset(config: SimulationConfig, rep_index: int, cell_index: int = 0):
    """One simulated dataset: counts, design (treated = label 1, control = reference 2), truth."""
    rng = _rng(config.seed, cell_index, rep_index)
    n, m = config.n, config.m
    logmu, phi = load_gene_params(config.param_source, m, rng)
    s = rng.uniform(*config.sf_range, size=n)
    x = np.r_[np.zeros(n // 2), np.ones(n // 2)]

    n_de = int(round(config.pi_de * m))
    de_idx = np.sort(rng.choice(m, size=n_de, replace=False))
    beta = np.zeros(m)
    signs = np.ones(n_de) if config.all_up else rng.choice([-1.0, 1.0], size=n_de)
    beta[de_idx] = signs * math.log(config.fc)

    eta = np.log(s)[:, None] + logmu[None, :] + x[:, None] * beta[None, :]
    covariates = None
    if config.covariate_setting:
        z = _draw_covariate(x, config.imbalance, rng)
        n_cov = int(round(config.covariate_gene_frac * m))
        cov_idx = rng.choice(m, size=n_cov, replace=False)
        gamma = np.zeros(m)
        gamma[cov_idx] = rng.uniform(*config.gamma_range, size=n_cov)
        eta = eta + z[:, None] * gamma[None, :]
        covariates = z[:, None]

    y = sample_nb(np.exp(eta), phi[None, :], rng)
    sample_ids = [f"ctrl{i + 1}" for i in range(n // 2)] + [f"trt{i + 1}" for i in range(n // 2)]
    gene_ids = [f"gene{j + 1:05d}" for j in range(m)]
    counts = CountMatrix(y, tuple(sample_ids), tuple(gene_ids))
    treatment = np.where(x == 1, 1, 2)
    design = DesignInfo(treatment, covariates, 2, ("treatment", "control"),
                        ("z1",) if covariates is not None else None)
    de_mask = np.zeros(m, dtype=bool)
    de_mask[de_idx] = True
    truth = TruthLabels(
        de_set=frozenset(gene_ids[j] for j in de_idx),
        null_set=frozenset(g for g, d in zip(gene_ids, de_mask) if not d),
        true_beta=beta,
        de_mask=de_mask,
    )
    return counts, design, truth


def checksum(counts: CountMatrix) -> str:
    return hashlib.sha256(np.ascontiguousarray(counts.counts).tobytes()).hexdigest()


def fdp_and_tpr(mask: NDArray[np.bool_], truth: TruthLabels) -> tuple[float, float]:
    """Per-replicate FDP (denominator floored at 1) and true-positive rate."""
    found = int(mask.sum())
    false = int(np.sum(mask & ~truth.de_mask))
    n_de = int(truth.de_mask.sum())
    fdp = false / max(found, 1)
    tpr = float(np.sum(mask & truth.de_mask)) / n_de if n_de else math.nan
    return fdp, tpr


def run_methods(
    counts: CountMatrix,
    design: DesignInfo,
    q: float,
    seed: int,
    methods: Sequence[Method],
    *,
    adjust: bool = True,
    blind_wilcoxon: bool = False,
    threads: int | None = 1,
) -> dict[Method, NDArray[np.bool_] | None]:
    """Discovery masks per method on one dataset; ``None`` marks a skipped method.

    NULLSTRAP and NBGLM_BH share one real-data fit.
    """
    s = estimate_size_factors(counts)
    digest = checksum(counts)
    out: dict[Method, NDArray[np.bool_] | None] = {}
    fits = None
    if Method.NULLSTRAP in methods or Method.NBGLM_BH in methods:
        fits = fit_all_genes(counts, design, s, threads=threads)
    for method in methods:
        assert checksum(counts) == digest, "dataset changed between methods"
        if method is Method.NULLSTRAP:
            run = run_nullstrap(counts, design, q, seed, adjust=adjust, size_factors=s,
                                fits=fits, threads=threads)
            out[method] = run.result.discovery_mask
            continue
        try:
            res = run_baseline(method, counts, design, s, q, fits=fits,
                               ignore_covariates=blind_wilcoxon, threads=threads)
        except CovariatesUnsupportedError:
            out[method] = None
            continue
        out[method] = res.discovery_mask
    return out


def _replicate(config: SimulationConfig, cell: int, rep: int, methods, blind_wilcoxon: bool):
    counts, design, truth = generate_dataset(config, rep, cell)
    masks = run_methods(counts, design, config.q, _child_seed(config.seed, cell, rep, 1), methods,
                        adjust=config.adjust, blind_wilcoxon=blind_wilcoxon)
    return {meth: (None if mask is None else fdp_and_tpr(mask, truth)) for meth, mask in masks.items()}


def _mean_se(values: Sequence[float]) -> tuple[float, float]:
    arr = np.asarray(values, dtype=float)
    if arr.size == 0 or np.all(np.isnan(arr)):
        return math.nan, math.nan
    arr = arr[~np.isnan(arr)]
    se = float(arr.std(ddof=1) / math.sqrt(arr.size)) if arr.size > 1 else 0.0
    return float(arr.mean()), se


def run_grid(
    configs: Iterable[SimulationConfig],
    methods: Sequence[Method] = ALL_METHODS,
    *,
    threads: int | None = 1,
    blind_wilcoxon: bool = False,
    progress: Callable[[str], None] | None = None,
) -> list[MetricsRow]:
    """Run every (cell, replicate) and average FDP / TPR per cell and method.

    Replicate data depend only on (seed, cell index, replicate index), so
    the table is identical for any thread count.
    """
    configs = list(configs)
    methods = [Method.parse(m) if isinstance(m, str) else m for m in methods]
    jobs = [(c, r) for c, cfg in enumerate(configs) for r in range(cfg.replicates)]

    def work(job):
        c, r = job
        try:
            res = _replicate(configs[c], c, r, methods, blind_wilcoxon)
        except Exception as exc:  # one failed replicate must not stop the grid
            log.error("cell %d replicate %d failed: %s", c, r, exc)
            res = exc
        if progress:
            progress(f"cell {c + 1}/{len(configs)} rep {r + 1}/{configs[c].replicates}")
        return res

    n_threads = _resolve_threads(threads)
    if n_threads == 1:
        results = [work(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(work, jobs))
    by_job = dict(zip(jobs, results))

    rows: list[MetricsRow] = []
    for c, cfg in enumerate(configs):
        reps = [by_job[(c, r)] for r in range(cfg.replicates)]
        ok = [r for r in reps if not isinstance(r, Exception)]
        for meth in methods:
            base = dict(setting=cfg.setting, n=cfg.n, m=cfg.m, pi_de=cfg.pi_de, fc=cfg.fc, q=cfg.q,
                        covariates=cfg.covariate_setting, method=meth.value)
            vals = [r[meth] for r in ok]
            if not ok:
                rows.append(MetricsRow(**base, fdr=math.nan, fdr_se=math.nan, power=math.nan,
                                       power_se=math.nan, replicates=0, status="FAILED"))
            elif all(v is None for v in vals):
                rows.append(MetricsRow(**base, fdr=math.nan, fdr_se=math.nan, power=math.nan,
                                       power_se=math.nan, replicates=0, status="SKIPPED"))
            else:
                vals = [v for v in vals if v is not None]
                fdr, fdr_se = _mean_se([v[0] for v in vals])
                power, power_se = _mean_se([v[1] for v in vals])
                rows.append(MetricsRow(**base, fdr=fdr, fdr_se=fdr_se, power=power, power_se=power_se,
                                       replicates=len(vals)))
    return rows


def setting_grid(setting: int, base: SimulationConfig, **overrides) -> list[SimulationConfig]:
    """Cartesian grid over a setting's values; any override (a list) replaces that axis."""
    axes = {k: list(v) for k, v in SETTING_GRIDS[setting].items()}
    for key, vals in overrides.items():
        if vals is not None:
            axes[key] = list(vals)
    base = replace(base, covariate_setting=(setting == 2))
    return [replace(base, n=n, fc=fc, pi_de=pi, q=q)
            for pi, fc, n, q in product(axes["pi_de"], axes["fc"], axes["n"], axes["q"])]


METRIC_COLUMNS = ["setting", "n", "m", "pi_de", "fc", "q", "covariates", "method",
                  "fdr", "fdr_se", "power", "power_se", "replicates"]


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, float):
        if math.isnan(x):
            return "NA"
        return f"{x:.6f}"
    return str(x)


def write_metrics(rows: Sequence[MetricsRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(METRIC_COLUMNS) + "\n")
        for row in rows:
            rec = asdict(row)
            cells = []
            for col in METRIC_COLUMNS:
                val = rec[col]
                if row.status != "OK" and col in ("fdr", "fdr_se", "power", "power_se"):
                    cells.append(row.status)
                else:
                    cells.append(_fmt(val))
            fh.write("\t".join(cells) + "\n")


# ---------------------------------------------------------------------------
# permutation negative control

@dataclass(frozen=True)
class NullCheckRow:
    method: str
    counts: NDArray[np.int64] = field(repr=False)
    status: str = "OK"

    @property
    def mean_discoveries(self) -> float:
        return float(self.counts.mean()) if self.counts.size else math.nan

    def percentile(self, pct: float) -> float:
        return float(np.percentile(self.counts, pct)) if self.counts.size else math.nan

    @property
    def maximum(self) -> float:
        return float(self.counts.max()) if self.counts.size else math.nan

    def histogram(self) -> dict[int, int]:
        vals, freq = np.unique(self.counts, return_counts=True)
        return {int(v): int(f) for v, f in zip(vals, freq)}


def permute_labels(treatment, rng: np.random.Generator) -> NDArray[np.int64]:
    return rng.permutation(np.asarray(treatment))


def permutation_null_check(
    counts: CountMatrix,
    design: DesignInfo,
    permutations: int,
    q: float,
    methods: Sequence[Method] = ALL_METHODS,
    seed: int = 0,
    *,
    adjust: bool = True,
    blind_wilcoxon: bool = False,
    threads: int | None = 1,
    runner: Callable | None = None,
) -> list[NullCheckRow]:
    """Discovery counts per method over label-permuted copies of a dataset.

    Labels are shuffled uniformly, which preserves group sizes. Every
    discovery on permuted data is false by construction.
    """
    if design.K != 2:
        raise ValueError("the permutation check needs a two-condition design")
    methods = [Method.parse(m) if isinstance(m, str) else m for m in methods]
    runner = runner or (lambda c, d, s_: run_methods(c, d, q, s_, methods, adjust=adjust,
                                                     blind_wilcoxon=blind_wilcoxon, threads=1))

    def work(b):
        rng = _rng(seed, b)
        perm = design.with_treatment(permute_labels(design.treatment, rng))
        return runner(counts, perm, _child_seed(seed, b, 1))

    n_threads = _resolve_threads(threads)
    if n_threads == 1 or permutations <= 1:
        results = [work(b) for b in range(permutations)]
    else:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            results = list(pool.map(work, range(permutations)))

    rows = []
    for meth in methods:
        masks = [r.get(meth) for r in results]
        if masks and all(mk is None for mk in masks):
            rows.append(NullCheckRow(meth.value, np.zeros(0, dtype=np.int64), "SKIPPED"))
            continue
        found = np.array([int(np.sum(mk)) for mk in masks if mk is not None], dtype=np.int64)
        rows.append(NullCheckRow(meth.value, found))
    return rows


def write_null_check(rows: Sequence[NullCheckRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("method\tmean_discoveries\tp50\tp95\tmax\n")
        for row in rows:
            if row.status != "OK":
                fh.write(f"{row.method}\t{row.status}\t{row.status}\t{row.status}\t{row.status}\n")
                continue
            fh.write("\t".join([row.method, _fmt(row.mean_discoveries), _fmt(row.percentile(50)),
                                _fmt(row.percentile(95)), _fmt(row.maximum)]) + "\n")
