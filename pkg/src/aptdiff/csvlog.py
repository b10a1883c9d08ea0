"""Fixed-column CSV logs that survive resume."""

from __future__ import annotations

import csv
from pathlib import Path


def _cell(v):
    # repr round-trips floats exactly, so logs can be compared bit-for-bit
    return repr(v) if isinstance(v, float) else v


class CsvLog:
    """Header row plus one row per ``write``; column 0 must be the step.

    Opening with ``resume_step=k`` keeps the rows of steps ``<= k`` and drops
    the rest, so a resumed run appends onto exactly the prefix it restored.
    """

    def __init__(self, path, columns, resume_step: int | None = None):
        self.path = Path(path)
        self.columns = tuple(columns)
        kept = []
        if resume_step is not None and self.path.exists():
            with self.path.open(newline="") as f:
                kept = [r for r in list(csv.reader(f))[1:] if int(r[0]) <= resume_step]
        self._fh = self.path.open("w", newline="")
        self._writer = csv.writer(self._fh, lineterminator="\n")
        self._writer.writerow(self.columns)
        self._writer.writerows(kept)

    def write(self, row) -> None:
        if len(row) != len(self.columns):
            raise ValueError(f"expected {len(self.columns)} cells, got {len(row)}")
        self._writer.writerow([_cell(v) for v in row])

    def flush(self):
        self._fh.flush()

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_rows(path) -> list[dict]:
    with Path(path).open(newline="") as f:
        return list(csv.DictReader(f))
