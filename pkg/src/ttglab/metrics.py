"""Accuracy, Expected Calibration Error with configurable bins,
accuracy-vs-step curves, and batch-size sweep summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Array


@dataclass(frozen=True)
class CalibrationReport:
    n_bins: int
    counts: Array
    confidences: Array   # mean max-probability per bin (0 where empty)
    accuracies: Array    # fraction correct per bin (0 where empty)
    ece: float


def accuracy(probs: Array, labels: Array) -> float:
    """Fraction of rows whose argmax (lowest index on ties) hits the label."""
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(probs) == 0:
        raise ValueError("accuracy of an empty prediction set is undefined")
    if len(probs) != len(labels):
        raise ValueError("predictions and labels disagree on sample count")
    return float(np.mean(np.argmax(probs, axis=1) == labels))


def ece(probs: Array, labels: Array, n_bins: int = 10) -> CalibrationReport:
    """Equal-width confidence bins on (0, 1], right-inclusive."""
    if n_bins < 1:
        raise ValueError("need at least one bin")
    probs = np.asarray(probs)
    labels = np.asarray(labels)
    if len(probs) == 0:
        raise ValueError("calibration of an empty prediction set is undefined")
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    # confidence c lands in bin k iff k/n < c <= (k+1)/n
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    safe = np.maximum(counts, 1)
    confidences = np.bincount(idx, weights=conf, minlength=n_bins) / safe
    accuracies = np.bincount(idx, weights=correct, minlength=n_bins) / safe
    weights = counts / len(conf)
    value = float(np.sum(weights * np.abs(accuracies - confidences)))
    return CalibrationReport(n_bins, counts, confidences, accuracies, value)


def curve_record(values) -> tuple[Array, Array]:
    """Plot-ready (x, y) columns for a per-step series."""
    ys = np.asarray(list(values), dtype=np.float64)
    return np.arange(1, len(ys) + 1, dtype=np.float64), ys


def write_curve(path, xs, ys) -> None:
    """Two-column whitespace-delimited data file."""
    with open(path, "w", encoding="utf-8") as fh:
        for x, y in zip(xs, ys):
            fh.write(f"{float(x)!r} {float(y)!r}\n")


def saturation_drop(step_acc, window: int = 10) -> float:
    """Final-window mean minus the best window mean; negative means the
    curve peaked earlier and then decayed."""
    acc = np.asarray(list(step_acc), dtype=np.float64)
    if len(acc) < window:
        raise ValueError("curve shorter than the window")
    means = np.convolve(acc, np.ones(window) / window, mode="valid")
    return float(means[-1] - means.max())


@dataclass(frozen=True)
class SweepCell:
    method: str
    batch_size: int
    n_seeds: int
    acc_mean: float
    acc_std: float


def summarize_sweep(records) -> tuple[list[SweepCell], dict[str, float]]:
    """Aggregate (method, batch_size, final_acc) records to mean +- std per
    cell, plus each method's accuracy drop from the largest to the smallest
    batch size."""
    cells: dict[tuple[str, int], list[float]] = {}
    for rec in records:
        cells.setdefault((rec["method"], int(rec["batch_size"])), []).append(
            float(rec["final_acc"]))
    table = [SweepCell(m, b, len(v), float(np.mean(v)),
                       float(np.std(v)))
             for (m, b), v in sorted(cells.items())]
    drops: dict[str, float] = {}
    by_method: dict[str, dict[int, float]] = {}
    for cell in table:
        by_method.setdefault(cell.method, {})[cell.batch_size] = cell.acc_mean
    for method, accs in by_method.items():
        if len(accs) >= 2:
            drops[method] = accs[max(accs)] - accs[min(accs)]
    return table, drops
