"""Render figures and a delimited summary from a completed run directory.

Reads metrics.jsonl and eval_report.json, writes PNG figures next to a
long-format CSV so downstream tooling can consume either form.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .errors import InputError


def _load_metrics(run_dir: Path) -> list[dict]:
    path = run_dir / "metrics.jsonl"
    if not path.exists():
        raise InputError(f"{run_dir}: no metrics.jsonl found")
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                records.append(json.loads(line))
    return records


def _write_summary_csv(records: list[dict], out_path: Path) -> None:
    with open(out_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["round", "phase", "step", "name", "value"])
        for rec in records:
            for name, value in rec["metrics"].items():
                writer.writerow([rec["round"], rec["phase"], rec["step"], name, value])


def _plot_training(records: list[dict], out_path: Path) -> bool:
    local = [r for r in records if r["phase"] == "client_local"]
    distill = [r for r in records if r["phase"] == "distill"]
    if not local and not distill:
        return False
    n_panels = int(bool(local)) + int(bool(distill))
    fig, axes = plt.subplots(1, n_panels, figsize=(5.5 * n_panels, 4.0), squeeze=False)
    col = 0
    if local:
        ax = axes[0][col]
        col += 1
        by_client: dict[int, list[tuple[int, float]]] = {}
        for rec in local:
            cid = int(rec["metrics"]["client_id"])
            by_client.setdefault(cid, []).append((rec["round"], rec["metrics"]["loss"]))
        for cid, points in sorted(by_client.items()):
            xs = list(range(len(points)))
            ax.plot(xs, [p[1] for p in points], marker="o", markersize=3,
                    label=f"client {cid}" if cid >= 0 else "pooled")
        ax.set_xlabel("local epoch (cumulative)")
        ax.set_ylabel("training loss")
        ax.set_title("Local fine-tuning")
        ax.legend(fontsize=8)
    if distill:
        ax = axes[0][col]
        xs = list(range(len(distill)))
        ax.plot(xs, [r["metrics"]["loss_f"] for r in distill], label="large model loss")
        ax.plot(xs, [r["metrics"]["loss_g"] for r in distill], label="small model loss")
        ax.set_xlabel("transfer step (cumulative)")
        ax.set_ylabel("loss")
        ax.set_title("Server mutual transfer")
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def _plot_eval(run_dir: Path, out_path: Path) -> bool:
    report_path = run_dir / "eval_report.json"
    if not report_path.exists():
        return False
    report = json.loads(report_path.read_text(encoding="utf-8"))
    labels, ppls, accs = [], [], []
    for side in ("slm", "llm"):
        metrics = report.get(side) or {}
        if metrics.get("perplexity") is not None:
            labels.append(side.upper())
            ppls.append(metrics["perplexity"])
            accs.append(metrics.get("mcq_accuracy"))
    if not labels:
        return False
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.bar(labels, ppls, color="#4878d0")
    ax1.set_ylabel("held-out perplexity")
    ax1.set_title(f"Perplexity ({report.get('method', '?')})")
    ax2.bar(labels, [a if a is not None else 0.0 for a in accs], color="#ee854a")
    ax2.set_ylim(0, 1)
    ax2.set_ylabel("choice accuracy")
    ax2.set_title("Multiple-choice accuracy")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return True


def generate_report(run_dir, out_dir=None) -> list[str]:
    """Render figures and the CSV summary; returns the written paths."""
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir is not None else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    records = _load_metrics(run_dir)
    written = []

    csv_path = out_dir / "metrics_summary.csv"
    _write_summary_csv(records, csv_path)
    written.append(str(csv_path))

    training_path = out_dir / "training_curves.png"
    if _plot_training(records, training_path):
        written.append(str(training_path))
    eval_path = out_dir / "eval_metrics.png"
    if _plot_eval(run_dir, eval_path):
        written.append(str(eval_path))
    return written
