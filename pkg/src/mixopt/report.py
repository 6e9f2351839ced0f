"""Weight tables and tidy CSV exports."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dro import DROTrace, MixtureWeights
from .exceptions import DataValidationError
from .reference import CheckpointRecord

HIGHLIGHT = 0.25
ROW_SUM_TOL = 0.1  # percent
EXPORT_SCHEMA_VERSION = 1
UP, DOWN = "+", "-"


@dataclass(frozen=True)
class WeightReport:
    methods: tuple[str, ...]
    domains: tuple[str, ...]
    percent: np.ndarray  # (n_methods, k)
    marks: tuple[tuple[str, ...], ...]

    def row(self, method: str) -> dict[str, float]:
        i = self.methods.index(method)
        return dict(zip(self.domains, self.percent[i]))


def format_percent(p: float) -> str:
    """Two decimals below 10%, one below 100%: ``0.43``, ``3.42``, ``22.7``."""
    digits = 2 if abs(p) < 10 else 1 if abs(p) < 100 else 0
    return f"{p:.{digits}f}"


def _as_vector(w) -> np.ndarray:
    return np.asarray(getattr(w, "alpha", w), dtype=np.float64)


def build_weight_report(
    weights: Sequence, methods: Sequence[str], domains: Sequence[str], baseline: int = 0
) -> WeightReport:
    """Percentages per method plus up/down marks relative to the ``baseline`` row."""
    if len(weights) != len(methods):
        raise DataValidationError("one method name per weight vector is required")
    k = len(domains)
    rows = []
    for name, w in zip(methods, weights):
        v = _as_vector(w)
        if v.shape != (k,):
            raise DataValidationError(f"weights for {name!r} have length {v.size}, expected {k}")
        pct = 100.0 * v
        if abs(pct.sum() - 100.0) > ROW_SUM_TOL:
            raise DataValidationError(f"weights for {name!r} sum to {pct.sum():.3f}%")
        rows.append(pct)
    pct = np.stack(rows)
    base = pct[baseline]
    marks = []
    for i, row in enumerate(pct):
        if i == baseline:
            marks.append(("",) * k)
            continue
        rel = np.divide(row - base, base, out=np.zeros(k), where=base > 0)
        marks.append(tuple(UP if r > HIGHLIGHT else DOWN if r < -HIGHLIGHT else "" for r in rel))
    return WeightReport(tuple(methods), tuple(domains), pct, tuple(marks))


def render_weight_table(
    weights: Sequence, methods: Sequence[str], domains: Sequence[str], baseline: int = 0
) -> tuple[str, str]:
    """Render a mixture-weight table as aligned text and as CSV.

    Cells more than 25% above (``+``) or below (``-``) the baseline row,
    relative to the baseline value, are marked.
    """
    rep = build_weight_report(weights, methods, domains, baseline)
    cells = [
        [format_percent(p) + "%" + m for p, m in zip(rep.percent[i], rep.marks[i])]
        for i in range(len(methods))
    ]
    header = ["method", *domains]
    body = [[m, *c] for m, c in zip(methods, cells)]
    widths = [max(len(r[j]) for r in [header, *body]) for j in range(len(header))]
    lines = ["  ".join(s.ljust(w) for s, w in zip(r, widths)).rstrip() for r in [header, *body]]
    text = "\n".join(lines) + "\n"

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "domain", "percent", "mark"])
    for i, m in enumerate(methods):
        for j, d in enumerate(domains):
            w.writerow([m, d, format_percent(rep.percent[i, j]), rep.marks[i][j]])
    return text, buf.getvalue()


# --------------------------------------------------------------------- exports


def export_trace(
    trace: DROTrace,
    records: Sequence[CheckpointRecord],
    out_dir,
    names: Sequence[str] | None = None,
) -> dict[str, Path]:
    """Write long-format ``trace.csv`` and ``records.csv`` (step, domain, metric, value).

    A small ``export.json`` carries the schema version and column meanings.
    """
    if trace is None or len(trace) == 0:
        raise DataValidationError("cannot export an empty trace")
    if not records:
        raise DataValidationError("cannot export without checkpoint records")
    k = trace.k
    names = list(names) if names is not None else [str(i) for i in range(k)]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"trace": out / "trace.csv", "records": out / "records.csv", "schema": out / "export.json"}
    with open(paths["trace"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "domain", "metric", "value"])
        for t, (a, lam) in enumerate(zip(trace.alphas, trace.excess), start=1):
            for j, name in enumerate(names):
                w.writerow([t, name, "alpha", repr(float(a[j]))])
            for j, name in enumerate(names):
                w.writerow([t, name, "excess_loss", repr(float(lam[j]))])
    with open(paths["records"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "domain", "metric", "value"])
        for rec in records:
            for j, name in enumerate(names):
                w.writerow([rec.step, name, "train_loss", repr(float(rec.train_loss[j]))])
                w.writerow([rec.step, name, "val_loss", repr(float(rec.val_loss[j]))])
    paths["schema"].write_text(
        json.dumps(
            {
                "version": EXPORT_SCHEMA_VERSION,
                "columns": ["step", "domain", "metric", "value"],
                "metrics": {
                    "trace.csv": ["alpha", "excess_loss"],
                    "records.csv": ["train_loss", "val_loss"],
                },
                "domains": names,
            },
            indent=2,
        )
        + "\n",
        encoding="utf-8",
    )
    return paths


def read_trace(path) -> tuple[DROTrace, list[str]]:
    """Rebuild a :class:`DROTrace` from a long-format ``trace.csv``."""
    data: dict[int, dict[str, dict[str, float]]] = {}
    names: list[str] = []
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            d = row["domain"]
            if d not in names:
                names.append(d)
            data.setdefault(int(row["step"]), {}).setdefault(row["metric"], {})[d] = float(row["value"])
    trace = DROTrace()
    for t in sorted(data):
        m = data[t]
        trace.append(np.array([m["alpha"][n] for n in names]), np.array([m["excess_loss"][n] for n in names]))
    return trace, names


def load_weights_json(path) -> tuple[list[str], np.ndarray]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(obj, dict) or not obj:
        raise DataValidationError(f"{path}: expected a non-empty {{domain: weight}} object")
    return list(obj), np.array([float(v) for v in obj.values()])


def write_weights_json(weights: MixtureWeights | np.ndarray, names: Sequence[str], path) -> None:
    vec = _as_vector(weights)
    if len(names) != vec.size:
        raise DataValidationError("one name per weight is required")
    payload = {n: float(v) for n, v in zip(names, vec)}
    Path(path).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
