"""Report aggregation: the method ladder with accuracy and calibration
columns, the batch-size sweep table, and matplotlib figures rendered next
to the delimited output."""

from __future__ import annotations

import glob
import json
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

from . import metrics  # noqa: E402

# canonical row order; unknown labels follow alphabetically
LADDER_ORDER = ("source_only", "tent", "hard_pl", "soft_pl", "prob_pl",
                "vnl", "meta_vnl")


def _fmt(x: float) -> str:
    return repr(float(x))


def _load_json_records(paths) -> list[dict]:
    records = []
    for path in sorted(paths):
        with open(path, encoding="utf-8") as fh:
            records.append(json.load(fh))
    return records


def _label_key(label: str):
    return (LADDER_ORDER.index(label) if label in LADDER_ORDER
            else len(LADDER_ORDER), label)


def ladder_table(records: list[dict]) -> list[dict]:
    by_label: dict[str, list[dict]] = {}
    for rec in records:
        by_label.setdefault(rec["label"], []).append(rec)
    rows = []
    for label in sorted(by_label, key=_label_key):
        # average over targets within a seed first, then over seeds
        per_seed: dict[int, list[dict]] = {}
        for rec in by_label[label]:
            per_seed.setdefault(rec["seed"], []).append(rec)
        accs = [np.mean([r["final_acc"] for r in rs])
                for rs in per_seed.values()]
        eces = [np.mean([r["ece"] for r in rs]) for rs in per_seed.values()]
        rows.append({
            "label": label, "n_seeds": len(per_seed),
            "acc_mean": float(np.mean(accs)), "acc_std": float(np.std(accs)),
            "ece_mean": float(np.mean(eces)), "ece_std": float(np.std(eces)),
        })
    return rows


def _mean_curves(in_dir: str) -> dict[str, np.ndarray]:
    """Per-label mean accuracy-vs-step curve over all ttg CSVs."""
    curves: dict[str, list[np.ndarray]] = {}
    for path in sorted(glob.glob(os.path.join(in_dir, "ttg_*.csv"))):
        label = os.path.basename(path)[len("ttg_"):].split("_target")[0]
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if rows.size:
            curves.setdefault(label, []).append(rows[:, 1])
    out = {}
    for label, runs in curves.items():
        n = min(len(r) for r in runs)
        out[label] = np.mean([r[:n] for r in runs], axis=0)
    return out


def _figure_curves(curves: dict[str, np.ndarray], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    for label in sorted(curves, key=_label_key):
        ys = curves[label]
        ax.plot(np.arange(1, len(ys) + 1), ys, label=label)
    ax.set_xlabel("online step")
    ax.set_ylabel("batch accuracy")
    ax.set_title("accuracy along the target stream")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _figure_ece(rows: list[dict], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    labels = [r["label"] for r in rows]
    ax.bar(labels, [r["ece_mean"] for r in rows],
           yerr=[r["ece_std"] for r in rows], capsize=3)
    ax.set_ylabel("expected calibration error")
    ax.set_title("calibration by method")
    ax.tick_params(axis="x", rotation=30)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def _figure_sweep(cells: list[metrics.SweepCell], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    methods = sorted({c.method for c in cells}, key=_label_key)
    for method in methods:
        pts = sorted((c.batch_size, c.acc_mean, c.acc_std)
                     for c in cells if c.method == method)
        xs, ys, errs = zip(*pts)
        ax.errorbar(xs, ys, yerr=errs, marker="o", capsize=3, label=method)
    ax.set_xscale("log", base=2)
    ax.set_xlabel("online batch size")
    ax.set_ylabel("final accuracy")
    ax.set_title("robustness to the online batch size")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def write_report(in_dir: str, out_file: str) -> int:
    ttg_records = _load_json_records(
        glob.glob(os.path.join(in_dir, "ttg_*.json")))
    sweep_records = _load_json_records(
        glob.glob(os.path.join(in_dir, "sweep_*.json")))
    stem, _ = os.path.splitext(out_file)
    out_dir = os.path.dirname(os.path.abspath(out_file))
    os.makedirs(out_dir, exist_ok=True)

    rows = ladder_table(ttg_records)
    lines = ["label,n_seeds,acc_mean,acc_std,ece_mean,ece_std"]
    lines += [f"{r['label']},{r['n_seeds']},{_fmt(r['acc_mean'])},"
              f"{_fmt(r['acc_std'])},{_fmt(r['ece_mean'])},{_fmt(r['ece_std'])}"
              for r in rows]
    with open(out_file, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")

    if rows:
        _figure_ece(rows, stem + "_ece.png")
    curves = _mean_curves(in_dir)
    if curves:
        _figure_curves(curves, stem + "_accuracy_steps.png")
        for label, ys in curves.items():
            xs, ys = metrics.curve_record(ys)
            metrics.write_curve(f"{stem}_curve_{label}.dat", xs, ys)

    if sweep_records:
        cells, drops = metrics.summarize_sweep(sweep_records)
        lines = ["method,batch_size,n_seeds,acc_mean,acc_std"]
        lines += [f"{c.method},{c.batch_size},{c.n_seeds},"
                  f"{_fmt(c.acc_mean)},{_fmt(c.acc_std)}" for c in cells]
        lines += [f"drop_{m},,,{_fmt(d)}," for m, d in sorted(drops.items())]
        with open(stem + "_sweep.csv", "w", encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
        _figure_sweep(cells, stem + "_batch_size.png")
    return 0
