"""Shared helpers for the experiment scripts."""

import sys

from nullstrap_de.simulate import METRIC_COLUMNS


def print_rows(rows, columns=METRIC_COLUMNS, stream=sys.stdout):
    print("\t".join(columns), file=stream)
    for row in rows:
        cells = []
        for col in columns:
            val = getattr(row, col)
            cells.append(f"{val:.4f}" if isinstance(val, float) else str(val))
        print("\t".join(cells), file=stream)
