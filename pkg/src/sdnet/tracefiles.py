"""CSV formats for per-sample exit results and full per-head traces.

``traces.csv`` is one row per sample after applying an exit policy:
sample_id, true_label, exit_head, pred_label, confidence, flops_fraction.

``probs.csv`` is one row per (sample, head) with the full probability
vector and each head's cumulative exit cost; it is what the analysis
command consumes, since the policy rows alone cannot reconstruct how a
prediction evolved.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .errors import DataError
from .exits import ExitDecision, PredictionTrace

TRACE_HEADER = ["sample_id", "true_label", "exit_head", "pred_label", "confidence", "flops_fraction"]


def write_trace_csv(path, decisions: list[ExitDecision], traces: list[PredictionTrace], labels) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    full = traces[0].full_cost
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRACE_HEADER)
        for i, (d, t, y) in enumerate(zip(decisions, traces, labels)):
            writer.writerow([
                i,
                int(y),
                d.head,
                d.label,
                f"{t.confidences[d.head]:.9f}",
                f"{d.flops / full:.9f}",
            ])


def write_probs_csv(path, traces: list[PredictionTrace], labels) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    k = traces[0].probs.shape[1]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["sample_id", "true_label", "head_index", "exit_flops"] + [f"p{j}" for j in range(k)])
        for i, (t, y) in enumerate(zip(traces, labels)):
            for h in range(t.num_heads):
                writer.writerow(
                    [i, int(y), h, t.exit_flops[h]]
                    + [f"{p:.12g}" for p in t.probs[h]]
                )


def read_probs_csv(path) -> tuple[list[PredictionTrace], np.ndarray]:
    """Rebuild traces and labels; malformed rows raise with their row number."""
    path = Path(path)
    rows_by_sample: dict[int, list[tuple[int, int, np.ndarray]]] = {}
    labels: dict[int, int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or header[:4] != ["sample_id", "true_label", "head_index", "exit_flops"]:
            raise DataError(f"{path}: row 1: bad probs header {header!r}")
        k = len(header) - 4
        if k < 1:
            raise DataError(f"{path}: row 1: no probability columns")
        for rowno, row in enumerate(reader, start=2):
            if len(row) != 4 + k:
                raise DataError(f"{path}: row {rowno}: expected {4 + k} fields, got {len(row)}")
            try:
                sid, lab, head, flops = int(row[0]), int(row[1]), int(row[2]), int(row[3])
                probs = np.array([float(v) for v in row[4:]], dtype=np.float64)
            except ValueError as e:
                raise DataError(f"{path}: row {rowno}: {e}") from e
            if labels.setdefault(sid, lab) != lab:
                raise DataError(f"{path}: row {rowno}: sample {sid} has conflicting labels")
            rows_by_sample.setdefault(sid, []).append((head, flops, probs))
    if not rows_by_sample:
        raise DataError(f"{path}: no trace rows")
    traces = []
    ordered = sorted(rows_by_sample)
    num_heads = len(rows_by_sample[ordered[0]])
    for sid in ordered:
        entries = sorted(rows_by_sample[sid])
        if len(entries) != num_heads or [h for h, _, _ in entries] != list(range(num_heads)):
            raise DataError(f"{path}: sample {sid} does not cover heads 0..{num_heads - 1}")
        traces.append(
            PredictionTrace(
                probs=np.stack([p for _, _, p in entries]),
                exit_flops=tuple(fl for _, fl, _ in entries),
            )
        )
    return traces, np.array([labels[sid] for sid in ordered], dtype=np.int64)


def write_histogram_csv(path, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["bin_low", "bin_high", "count_correct", "count_wrong"])
        for lo, hi, cc, cw in rows:
            writer.writerow([f"{lo:.6f}", f"{hi:.6f}", cc, cw])
