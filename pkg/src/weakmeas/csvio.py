"""CSV output with shortest round-trip number formatting."""

import csv
import numbers

import numpy as np


def format_cell(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, numbers.Integral):
        return str(int(value))
    if isinstance(value, numbers.Real):
        return repr(float(value))
    return str(value)


def write_rows(path, header, rows):
    """Write ``header`` then ``rows``; floats use ``repr`` so that output is
    byte-identical whenever the values are."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([format_cell(v) for v in row])
