"""Accuracy matrix, forgetting, confusion counts, and report files.

The accuracy matrix holds one row per training stage and one column per
split: entry (t, j) is the accuracy on split j's test set after stage t.
Forgetting compares, for every non-final split, the best accuracy it ever
reached at intermediate stages against its accuracy after the final stage.
Evaluation always picks the argmax over all classes; it is never told which
split an example came from.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .ensemble import EnsembleConfig, EnsembleState, forward_batch

__all__ = [
    "SCHEMA_VERSION",
    "ExperimentReport",
    "predict_labels",
    "evaluate",
    "final_average_accuracy",
    "forgetting",
    "confusion",
    "write_report",
    "read_report",
    "report_to_dict",
]

SCHEMA_VERSION = 1

_EVAL_CHUNK = 512


def predict_labels(state: EnsembleState, cfg: EnsembleConfig,
                   X: np.ndarray) -> np.ndarray:
    """Predicted class per row of X, evaluated in chunks."""
    out = np.empty(X.shape[0], dtype=np.int64)
    for start in range(0, X.shape[0], _EVAL_CHUNK):
        chunk = X[start:start + _EVAL_CHUNK]
        bf = forward_batch(state, cfg, chunk, keep_tape=False)
        out[start:start + chunk.shape[0]] = np.argmax(bf.predictions, axis=1)
    return out


def evaluate(state: EnsembleState, cfg: EnsembleConfig,
             test_sets: Sequence[tuple[np.ndarray, np.ndarray]]) -> np.ndarray:
    """Accuracy on each split's test set; one matrix row."""
    row = np.empty(len(test_sets))
    for j, (X, y) in enumerate(test_sets):
        if X.shape[0] == 0:
            raise ValueError(f"empty test set for split {j}")
        predicted = predict_labels(state, cfg, X)
        row[j] = float(np.mean(predicted == np.asarray(y)))
    return row


def final_average_accuracy(matrix: np.ndarray, test_sizes: Sequence[int]) -> float:
    """Size-weighted mean of the last row; equals overall test accuracy."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"accuracy matrix must be 2-D, got shape {m.shape}")
    last = m[-1]
    if np.any(np.isnan(last)):
        raise ValueError("incomplete last row in accuracy matrix")
    sizes = np.asarray(test_sizes, dtype=np.float64)
    if sizes.shape != last.shape:
        raise ValueError("one test size per split required")
    if np.any(sizes <= 0):
        raise ValueError("test sizes must be positive")
    return float(last @ sizes / sizes.sum())


def forgetting(matrix: np.ndarray) -> float:
    """Mean over non-final splits of (best earlier accuracy - final accuracy).

    For split j the best is taken over stages j..T-2; the final stage's own
    split is excluded since nothing later can degrade it. Negative values
    are reported as computed, not clamped.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"accuracy matrix must be square, got shape {m.shape}")
    t = m.shape[0]
    if t < 2:
        raise ValueError("forgetting needs at least two stages")
    total = 0.0
    for j in range(t - 1):
        past = m[j:t - 1, j]
        if np.any(np.isnan(past)) or np.isnan(m[t - 1, j]):
            raise ValueError("incomplete lower triangle in accuracy matrix")
        total += float(past.max() - m[t - 1, j])
    return total / (t - 1)


def confusion(state: EnsembleState, cfg: EnsembleConfig,
              test_set: tuple[np.ndarray, np.ndarray]) -> np.ndarray:
    """K x K count matrix with true classes on rows."""
    X, y = test_set
    if X.shape[0] == 0:
        raise ValueError("empty test set")
    predicted = predict_labels(state, cfg, X)
    counts = np.zeros((cfg.n_classes, cfg.n_classes), dtype=np.int64)
    np.add.at(counts, (np.asarray(y, dtype=np.int64), predicted), 1)
    return counts


@dataclass
class ExperimentReport:
    """One run's resolved configuration and every reported number.

    The config snapshot includes all hyperparameters and seeds, so a report
    is sufficient to reproduce its run; ``train_seconds`` is the only field
    expected to differ between reruns.
    """

    config: dict
    accuracy_matrix: np.ndarray
    final_accuracy: float
    forgetting: float
    confusion: np.ndarray
    train_seconds: float
    schema_version: int = SCHEMA_VERSION


def report_to_dict(report: ExperimentReport) -> dict:
    matrix = np.asarray(report.accuracy_matrix, dtype=np.float64)
    cells = [[None if np.isnan(v) else float(v) for v in row] for row in matrix]
    return {
        "schema_version": report.schema_version,
        "config": report.config,
        "accuracy_matrix": cells,
        "final_accuracy": float(report.final_accuracy),
        "forgetting": float(report.forgetting),
        "confusion": np.asarray(report.confusion, dtype=np.int64).tolist(),
        "train_seconds": float(report.train_seconds),
    }


def write_report(report: ExperimentReport, path) -> Path:
    """Write the JSON report plus a CSV of the accuracy matrix.

    Serialization is canonical (sorted keys, fixed separators) so reruns
    with equal numbers produce byte-identical files. The CSV lands next to
    the JSON with an ``_accuracy.csv`` suffix.
    """
    path = Path(path)
    payload = json.dumps(report_to_dict(report), sort_keys=True, indent=2)
    path.write_text(payload + "\n")

    csv_path = path.with_name(path.stem + "_accuracy.csv")
    matrix = np.asarray(report.accuracy_matrix, dtype=np.float64)
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"split_{j}" for j in range(matrix.shape[1])])
        for row in matrix:
            writer.writerow(["" if np.isnan(v) else repr(float(v)) for v in row])
    return path


def read_report(path) -> ExperimentReport:
    data = json.loads(Path(path).read_text())
    cells = data["accuracy_matrix"]
    matrix = np.array(
        [[np.nan if v is None else float(v) for v in row] for row in cells])
    return ExperimentReport(
        config=data["config"],
        accuracy_matrix=matrix,
        final_accuracy=float(data["final_accuracy"]),
        forgetting=float(data["forgetting"]),
        confusion=np.array(data["confusion"], dtype=np.int64),
        train_seconds=float(data["train_seconds"]),
        schema_version=int(data["schema_version"]),
    )
