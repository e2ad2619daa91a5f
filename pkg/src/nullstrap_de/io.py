"""TSV readers and writers for count tables, sample metadata and reports.

Count tables on disk are genes x samples: a header row of sample ids after a
leading gene-id column, then one row per gene.
"""

from __future__ import annotations

import csv
import hashlib
import math
from typing import Sequence

import numpy as np
from numpy.typing import NDArray

from .core import CountMatrix, DesignInfo, Issue, ValidationError

MAX_REPORTED = 50


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), start=1):
            if row and any(cell.strip() for cell in row):
                yield lineno, [cell.strip() for cell in row]


def _issue(code, path, lineno, message, col=None) -> Issue:
    where = f"{path}:{lineno}" + (f":{col}" if col is not None else "")
    return Issue(code, f"{where}: {message}", row=lineno, col=col)


def read_counts_tsv(path) -> CountMatrix:
    """Parse a genes x samples count table into a samples x genes :class:`CountMatrix`.

    Every malformed cell is reported with its line and column number.
    """
    rows = list(_rows(path))
    if not rows:
        raise ValidationError([_issue("EMPTY_INPUT", path, 1, "no header row")])
    _, header = rows[0]
    sample_ids = header[1:]
    issues: list[Issue] = []
    if not sample_ids:
        issues.append(_issue("DIMENSION_MISMATCH", path, rows[0][0], "header names no samples"))
    gene_ids, values = [], []
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            issues.append(_issue("DIMENSION_MISMATCH", path, lineno,
                                 f"expected {len(header)} fields, found {len(row)}"))
            continue
        gene_ids.append(row[0])
        parsed = []
        for col, cell in enumerate(row[1:], start=2):
            try:
                v = float(cell)
            except ValueError:
                issues.append(_issue("NON_INTEGER_COUNT", path, lineno, f"{cell!r} is not a number", col))
                parsed.append(0)
                continue
            if not math.isfinite(v) or v != round(v):
                issues.append(_issue("NON_INTEGER_COUNT", path, lineno, f"{cell!r} is not an integer", col))
            elif v < 0:
                issues.append(_issue("NEGATIVE_COUNT", path, lineno, f"{cell} is negative", col))
            parsed.append(v if math.isfinite(v) else 0)
        values.append(parsed)
    if not gene_ids and not issues:
        issues.append(_issue("EMPTY_INPUT", path, rows[0][0], "no gene rows"))
    if issues:
        raise ValidationError(issues[:MAX_REPORTED])
    grid = np.array(values, dtype=float).T
    return CountMatrix(np.rint(grid).astype(np.int64), tuple(sample_ids), tuple(gene_ids))


def _encode_covariate(name: str, cells: Sequence[str], path, linenos) -> tuple[NDArray, list[Issue]]:
    """Numeric columns pass through; two-valued text columns become 0/1 (sorted order)."""
    try:
        return np.array([float(c) for c in cells]), []
    except ValueError:
        pass
    levels = sorted(set(cells))
    if len(levels) == 2 and "" not in levels:
        return np.array([float(c == levels[1]) for c in cells]), []
    bad = [i for i, c in enumerate(cells) if c == ""]
    line = linenos[bad[0]] if bad else linenos[0]
    msg = (f"covariate {name!r} must be numeric or binary, "
           f"found {len(levels)} distinct values")
    return np.zeros(len(cells)), [_issue("BAD_COVARIATE", path, line, msg)]


def read_metadata_tsv(path, sample_ids: Sequence[str], reference: str | None = None) -> DesignInfo:
    """Build a design aligned to ``sample_ids`` from a metadata table.

    Required columns are ``sample_id`` and ``condition``; any further columns
    are covariates. The reference condition (label K) is ``reference`` when
    given, otherwise the first condition in sorted order. The remaining
    levels take labels 1..K-1 in sorted order.
    """
    rows = list(_rows(path))
    if not rows:
        raise ValidationError([_issue("EMPTY_INPUT", path, 1, "no header row")])
    hline, header = rows[0]
    issues: list[Issue] = []
    for need in ("sample_id", "condition"):
        if need not in header:
            issues.append(_issue("MISSING_COLUMN", path, hline, f"no {need!r} column"))
    if issues:
        raise ValidationError(issues)
    i_sid, i_cond = header.index("sample_id"), header.index("condition")
    cov_cols = [c for c in range(len(header)) if c not in (i_sid, i_cond)]

    table: dict[str, tuple[int, list[str]]] = {}
    for lineno, row in rows[1:]:
        if len(row) != len(header):
            issues.append(_issue("DIMENSION_MISMATCH", path, lineno,
                                 f"expected {len(header)} fields, found {len(row)}"))
            continue
        sid = row[i_sid]
        if sid in table:
            issues.append(_issue("DUPLICATE_ID", path, lineno, f"sample {sid!r} listed twice"))
            continue
        if not row[i_cond]:
            issues.append(_issue("UNKNOWN_CONDITION", path, lineno, "empty condition", i_cond + 1))
        table[sid] = (lineno, row)
    for sid in sample_ids:
        if sid not in table:
            issues.append(_issue("DIMENSION_MISMATCH", path, hline, f"sample {sid!r} from the counts has no metadata row"))
    if issues:
        raise ValidationError(issues[:MAX_REPORTED])

    linenos = [table[sid][0] for sid in sample_ids]
    conds = [table[sid][1][i_cond] for sid in sample_ids]
    levels = sorted(set(conds))
    if reference is None:
        reference = levels[0]
    elif reference not in levels:
        raise ValidationError([_issue("UNKNOWN_CONDITION", path, hline,
                                      f"reference {reference!r} is not among conditions {levels}")])
    order = [lv for lv in levels if lv != reference] + [reference]
    label = {lv: k + 1 for k, lv in enumerate(order)}
    treatment = np.array([label[c] for c in conds], dtype=np.int64)

    covs, names = [], []
    for c in cov_cols:
        name = header[c]
        cells = [table[sid][1][c] for sid in sample_ids]
        vec, probs = _encode_covariate(name, cells, path, linenos)
        issues.extend(probs)
        covs.append(vec)
        names.append(name)
    if issues:
        raise ValidationError(issues)
    z = np.column_stack(covs) if covs else None
    return DesignInfo(treatment, z, len(order), tuple(order), tuple(names) if names else None)


def write_counts_tsv(counts: CountMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("gene_id\t" + "\t".join(counts.sample_ids) + "\n")
        for j, gid in enumerate(counts.gene_ids):
            fh.write(gid + "\t" + "\t".join(str(int(v)) for v in counts.counts[:, j]) + "\n")


def fmt(x) -> str:
    """Stable text form of a number: ``NA`` for missing, 10 significant digits otherwise."""
    if x is None:
        return "NA"
    if isinstance(x, (bool, np.bool_)):
        return "1" if x else "0"
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    x = float(x)
    if math.isnan(x):
        return "NA"
    if math.isinf(x):
        return "Inf" if x > 0 else "-Inf"
    return f"{x:.10g}"


def write_table(path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for row in rows:
            fh.write("\t".join(c if isinstance(c, str) else fmt(c) for c in row) + "\n")
