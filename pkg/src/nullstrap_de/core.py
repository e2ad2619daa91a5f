"""Count matrices, experimental designs and size-factor normalization.

Internal orientation is samples x genes. On disk, count tables are stored
genes x samples (see :mod:`nullstrap_de.io`).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numpy.typing import NDArray


@dataclass(frozen=True)
class Issue:
    code: str
    message: str
    row: int | None = None
    col: int | None = None

    def __str__(self) -> str:
        where = ""
        if self.row is not None or self.col is not None:
            where = f" at (row={self.row}, col={self.col})"
        return f"{self.code}{where}: {self.message}"


class ValidationError(ValueError):
    """Input problem; carries every issue found, not only the first."""

    def __init__(self, issues: Sequence[Issue]):
        self.issues = list(issues)
        super().__init__("; ".join(str(i) for i in self.issues[:20]))

    @property
    def codes(self) -> set[str]:
        return {i.code for i in self.issues}


def _frozen(a: NDArray) -> NDArray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class CountMatrix:
    """Non-negative integer read counts, ``counts[i, j]`` = sample i, gene j."""

    counts: NDArray[np.int64]
    sample_ids: tuple[str, ...]
    gene_ids: tuple[str, ...]

    def __post_init__(self):
        raw = np.asarray(self.counts)
        if raw.ndim != 2:
            raise ValidationError([Issue("DIMENSION_MISMATCH", f"counts must be 2-D, got {raw.ndim}-D")])
        issues = list(count_issues(raw))
        n, m = raw.shape
        sample_ids = tuple(str(s) for s in self.sample_ids)
        gene_ids = tuple(str(g) for g in self.gene_ids)
        if len(sample_ids) != n:
            issues.append(Issue("DIMENSION_MISMATCH", f"{len(sample_ids)} sample ids for {n} rows"))
        if len(gene_ids) != m:
            issues.append(Issue("DIMENSION_MISMATCH", f"{len(gene_ids)} gene ids for {m} columns"))
        for label, ids in (("sample", sample_ids), ("gene", gene_ids)):
            if len(set(ids)) != len(ids):
                seen: set[str] = set()
                dups = sorted({x for x in ids if x in seen or seen.add(x)})
                issues.append(Issue("DUPLICATE_ID", f"duplicate {label} ids: {dups[:5]}"))
        if issues:
            raise ValidationError(issues)
        object.__setattr__(self, "counts", _frozen(np.rint(raw).astype(np.int64)))
        object.__setattr__(self, "sample_ids", sample_ids)
        object.__setattr__(self, "gene_ids", gene_ids)

    @property
    def n(self) -> int:
        return self.counts.shape[0]

    @property
    def m(self) -> int:
        return self.counts.shape[1]

    @classmethod
    def from_array(cls, counts, sample_ids=None, gene_ids=None) -> "CountMatrix":
        counts = np.asarray(counts)
        n, m = counts.shape
        if sample_ids is None:
            sample_ids = [f"s{i + 1}" for i in range(n)]
        if gene_ids is None:
            gene_ids = [f"g{j + 1}" for j in range(m)]
        return cls(counts, tuple(sample_ids), tuple(gene_ids))


def count_issues(raw: NDArray) -> list[Issue]:
    """Cell-level problems in a raw count grid: non-finite, fractional or negative entries."""
    issues: list[Issue] = []
    try:
        values = np.asarray(raw, dtype=float)
    except (TypeError, ValueError):
        return [Issue("NON_INTEGER_COUNT", "counts are not numeric")]
    bad = ~np.isfinite(values)
    for i, j in zip(*np.nonzero(bad)):
        issues.append(Issue("NON_INTEGER_COUNT", "non-finite count", int(i), int(j)))
    with np.errstate(invalid="ignore"):
        frac = np.isfinite(values) & (values != np.round(values))
        neg = np.isfinite(values) & (values < 0)
    for i, j in zip(*np.nonzero(frac)):
        issues.append(Issue("NON_INTEGER_COUNT", f"value {values[i, j]!r} is not an integer", int(i), int(j)))
    for i, j in zip(*np.nonzero(neg & ~frac)):
        issues.append(Issue("NEGATIVE_COUNT", f"value {int(values[i, j])} is negative", int(i), int(j)))
    return issues


@dataclass(frozen=True)
class DesignInfo:
    """Per-sample treatment labels in ``1..K`` (``K`` is the reference) plus covariates.

    ``level_names[k-1]`` is the human-readable condition name for label ``k``.
    """

    treatment: NDArray[np.int64]
    covariates: NDArray[np.float64] = None
    K: int = None
    level_names: tuple[str, ...] = None
    covariate_names: tuple[str, ...] = None

    def __post_init__(self):
        t = np.asarray(self.treatment).astype(np.int64).ravel()
        n = t.size
        z = np.zeros((n, 0)) if self.covariates is None else np.asarray(self.covariates, dtype=float)
        if z.ndim == 1:
            z = z[:, None]
        K = int(t.max()) if self.K is None else int(self.K)
        names = self.level_names or tuple(str(k) for k in range(1, K + 1))
        cnames = self.covariate_names or tuple(f"z{c + 1}" for c in range(z.shape[1]))
        object.__setattr__(self, "treatment", _frozen(t))
        object.__setattr__(self, "covariates", _frozen(z))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "level_names", tuple(names))
        object.__setattr__(self, "covariate_names", tuple(cnames))

    @property
    def n(self) -> int:
        return self.treatment.size

    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def X(self) -> NDArray[np.float64]:
        """Treatment dummies, n x (K-1); the reference level K is all zeros."""
        return (self.treatment[:, None] == np.arange(1, self.K)[None, :]).astype(float)

    def model_matrix(self, null_model: bool = False) -> NDArray[np.float64]:
        """Columns ``[intercept, X, Z]``; ``X`` dropped for the null model."""
        blocks = [np.ones((self.n, 1))]
        if not null_model:
            blocks.append(self.X)
        blocks.append(self.covariates)
        return np.hstack(blocks)

    def with_treatment(self, treatment) -> "DesignInfo":
        return DesignInfo(treatment, self.covariates, self.K, self.level_names, self.covariate_names)

    def without_covariates(self) -> "DesignInfo":
        return DesignInfo(self.treatment, None, self.K, self.level_names)


@dataclass(frozen=True)
class SizeFactors:
    values: NDArray[np.float64]

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if not (np.all(np.isfinite(v)) and np.all(v > 0)):
            raise ValueError("size factors must be finite and strictly positive")
        object.__setattr__(self, "values", _frozen(v))

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class ValidatedDataset:
    counts: CountMatrix
    design: DesignInfo
    analyzable: NDArray[np.bool_]
    flagged: dict[str, str] = field(default_factory=dict)

    @property
    def analyzable_ids(self) -> list[str]:
        return [g for g, ok in zip(self.counts.gene_ids, self.analyzable) if ok]


def validate_inputs(counts: CountMatrix, design: DesignInfo) -> ValidatedDataset:
    """Check that counts and design agree and flag all-zero genes.

    All-zero genes stay in the dataset with status ``ALL_ZERO`` but are
    excluded from fitting. Every problem found is reported together.
    """
    issues = count_issues(counts.counts)
    if counts.n != design.n:
        issues.append(Issue("DIMENSION_MISMATCH", f"counts have {counts.n} samples, design has {design.n}"))
    if design.covariates.shape[0] != design.n:
        issues.append(Issue("DIMENSION_MISMATCH", "covariate rows do not match the treatment vector"))
    if design.K < 2:
        issues.append(Issue("UNKNOWN_CONDITION", f"need at least 2 conditions, got K={design.K}"))
    for i, lab in enumerate(design.treatment):
        if not 1 <= lab <= design.K:
            issues.append(Issue("UNKNOWN_CONDITION", f"label {lab} outside 1..{design.K}", row=i))
    for k in range(1, design.K + 1):
        size = int(np.sum(design.treatment == k))
        if size < 2:
            issues.append(Issue("SMALL_GROUP", f"condition {design.level_names[k - 1]!r} has {size} sample(s)"))
    if design.p and not np.all(np.isfinite(design.covariates)):
        issues.append(Issue("BAD_COVARIATE", "non-finite covariate value"))
    if issues:
        raise ValidationError(issues)
    analyzable = counts.counts.sum(axis=0) > 0
    flagged = {g: "ALL_ZERO" for g, ok in zip(counts.gene_ids, analyzable) if not ok}
    analyzable.setflags(write=False)
    return ValidatedDataset(counts, design, analyzable, flagged)


def estimate_size_factors(counts: CountMatrix | NDArray) -> SizeFactors:
    """Median-of-ratios size factors over genes positive in every sample."""
    y = np.asarray(counts.counts if isinstance(counts, CountMatrix) else counts, dtype=float)
    ref = np.all(y > 0, axis=0)
    if not ref.any():
        raise ValidationError([Issue("NO_REFERENCE_GENE", "no gene has positive counts in all samples")])
    yr = y[:, ref]
    geo = np.exp(np.mean(np.log(yr), axis=0))
    return SizeFactors(np.median(yr / geo, axis=1))


def normalize_counts(counts: CountMatrix | NDArray, s: SizeFactors) -> NDArray[np.float64]:
    y = np.asarray(counts.counts if isinstance(counts, CountMatrix) else counts, dtype=float)
    return y / s.values[:, None]
