"""History CSV, summary JSON and similarity dumps."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .runtime import ClientMetrics, History

HISTORY_COLUMNS = ["round", "client", "train_loss", "val_acc", "test_acc"]


def _fmt(x: float) -> str:
    return repr(float(x))


def write_history_csv(history: History, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for m in history.records:
            w.writerow([m.round, m.client, _fmt(m.train_loss), _fmt(m.val_acc), _fmt(m.test_acc)])


def read_history_csv(path) -> History:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != HISTORY_COLUMNS:
            raise ValueError(f"{path}: expected columns {HISTORY_COLUMNS}, got {reader.fieldnames}")
        records = [ClientMetrics(int(r["round"]), int(r["client"]), float(r["train_loss"]),
                                 float(r["val_acc"]), float(r["test_acc"])) for r in reader]
    return History(records=records)


def write_matrix_csv(matrix, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in np.asarray(matrix):
            w.writerow([_fmt(v) for v in row])


def read_matrix_csv(path) -> np.ndarray:
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def summary(history: History, stats: dict | None = None) -> dict:
    stats = stats or {}
    return {
        "avg_test_acc_at_best_val": history.avg_test_acc_at_best_val(),
        "best_val_test_acc": {str(c): a for c, a in history.best_val_test().items()},
        "epsilon": history.epsilon,
        "missing_links": stats.get("missing_links"),
        "heterogeneity": stats.get("heterogeneity"),
        "client_sizes": stats.get("client_sizes"),
        "rounds": history.num_rounds,
    }


def write_json(data: dict, path) -> None:
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def emit_report(history: History, stats: dict | None, out_dir, dump_similarity: bool = False) -> list:
    """Write ``history.csv``, ``summary.json`` and optionally per-round S/alpha CSVs."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc}") from exc
    written = [out / "history.csv", out / "summary.json"]
    write_history_csv(history, written[0])
    write_json(summary(history, stats), written[1])
    if dump_similarity:
        for r, (s, a) in enumerate(zip(history.similarity, history.weights), start=1):
            if s is None:
                continue
            for name, mat in (("similarity", s), ("alpha", a)):
                path = out / f"{name}_round{r:03d}.csv"
                write_matrix_csv(mat, path)
                written.append(path)
    return written
