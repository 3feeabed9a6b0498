"""CSV and text formats for paths, tables and reports."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .errors import DomainError
from .fbm_core import SamplePath, TimeGrid


def write_rows_csv(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_rows_csv(path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return header, np.array(rows, dtype=float).reshape(-1, len(header))


def path_rows(sp: SamplePath) -> tuple[list[str], list]:
    """Schema: path_id, t, x0, x1, ..."""
    header = ["path_id", "t"] + [f"x{j}" for j in range(sp.dim)]
    rows = []
    for p in range(sp.n_paths):
        for k, t in enumerate(sp.times):
            rows.append([p, float(t), *map(float, sp.values[p, k])])
    return header, rows


def write_paths_csv(path, sp: SamplePath) -> None:
    write_rows_csv(path, *path_rows(sp))


def read_paths_csv(path, label: str = "B") -> SamplePath:
    header, data = read_rows_csv(path)
    if header[:2] != ["path_id", "t"]:
        raise DomainError("not a path table")
    ids = data[:, 0].astype(int)
    n_paths = ids.max() + 1
    times = data[ids == 0, 1]
    values = data[:, 2:].reshape(n_paths, times.size, len(header) - 2)
    return SamplePath(TimeGrid(times), values, label)


def write_kde_csv(path, kde) -> None:
    """Schema: x0[, x1, ...], kde, lower, upper."""
    pts = kde.points()
    header = [f"x{j}" for j in range(pts.shape[1])] + ["kde", "lower", "upper"]
    rows = np.column_stack([pts, kde.density.ravel(), kde.lower.ravel(), kde.upper.ravel()])
    write_rows_csv(path, header, rows.tolist())


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def parse_qp(text: str) -> tuple[np.ndarray, float, float]:
    """Text format: a line ``a b`` followed by the rows of Q; ``#`` starts a comment."""
    lines = [ln.split("#", 1)[0].strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if len(lines) < 2:
        raise DomainError("QP file needs a bounds line and at least one matrix row")
    try:
        a, b = (float(v) for v in lines[0].replace(",", " ").split())
        q = np.array([[float(v) for v in ln.replace(",", " ").split()] for ln in lines[1:]])
    except ValueError as exc:
        raise DomainError(f"malformed QP file: {exc}") from exc
    return q, a, b


def format_qp(q, a: float, b: float) -> str:
    rows = "\n".join(" ".join(repr(float(v)) for v in row) for row in np.asarray(q))
    return f"{a!r} {b!r}\n{rows}\n"
