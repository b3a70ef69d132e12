"""Figures: sample grids, training curves, rate curves and robustness bars.

Every figure is written next to a CSV holding exactly the plotted points.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
import torch  # noqa: E402

from . import cgan  # noqa: E402


class MissingColumnError(KeyError):
    pass


def _write_sidecar(path: Path, rows: list[dict], columns):
    with open(path.with_suffix(".csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(columns))
        writer.writeheader()
        writer.writerows(rows)


def _save(fig, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata keeps PNG bytes reproducible
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def save_sample_grid(G, n_classes: int, K: int, path, n_per_row: int = 10, seed: int = 0):
    """One row per generation label; rows of the negative class sit below a red line.

    Vector-valued generators are drawn as a labeled scatter instead. A JSON
    manifest maps grid positions to intended labels.
    """
    path = Path(path)
    gen = torch.Generator().manual_seed(seed)
    labels = torch.arange(n_classes).repeat_interleave(n_per_row)
    x = cgan.make_sampler(G)(labels, gen)
    fig = plt.figure(figsize=(max(4, n_per_row * 0.6), max(3, n_classes * 0.6)))
    ax = fig.add_subplot(111)
    manifest = []
    if x.ndim == 4:
        c, h, w = x.shape[1:]
        canvas = np.zeros((n_classes * h, n_per_row * w, c))
        for i, (img, y) in enumerate(zip(x, labels.tolist())):
            r, col = divmod(i, n_per_row)
            canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = np.transpose(img, (1, 2, 0))
            manifest.append({"row": r, "col": col, "label": y})
        canvas = canvas.squeeze(-1) if c == 1 else canvas
        ax.imshow(np.clip(canvas, 0, 1), cmap="gray" if c == 1 else None, vmin=0, vmax=1)
        if n_classes > K:
            ax.axhline(K * h - 0.5, color="red", linewidth=2)
        ax.set_xticks([])
        ax.set_yticks([(r + 0.5) * h for r in range(n_classes)])
        ax.set_yticklabels([str(r) if r < K else f"{r} (neg)" for r in range(n_classes)])
    else:
        flat = x.reshape(len(x), -1)
        for y in range(n_classes):
            pts = flat[labels.numpy() == y]
            ax.scatter(pts[:, 0], pts[:, 1], s=8, label=f"{y}" if y < K else f"{y} (neg)")
        ax.legend(fontsize=7)
        manifest = [{"index": i, "label": int(y)} for i, y in enumerate(labels.tolist())]
    _save(fig, path)
    path.with_suffix(".json").write_text(json.dumps(
        {"n_classes": n_classes, "K": K, "n_per_row": n_per_row, "cells": manifest}, indent=1))
    return path


def _require(rows, columns):
    for col in columns:
        if rows and col not in rows[0]:
            raise MissingColumnError(f"metric column {col!r} missing")


def training_curves(metrics: list[dict], losses: list[dict], path):
    """Losses per step and per-round metrics of a single run."""
    path = Path(path)
    _require(metrics, ("outer_round", "pu_test_acc", "trace_mean"))
    _require(losses, ("step", "d_objective", "g_loss"))
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    steps = [int(r["step"]) for r in losses]
    axes[0].plot(steps, [float(r["d_objective"]) for r in losses], label="D objective")
    axes[0].plot(steps, [float(r["g_loss"]) for r in losses], label="G loss")
    axes[0].set_xlabel("step")
    axes[0].legend()
    rounds = [int(r["outer_round"]) for r in metrics]
    axes[1].plot(rounds, [float(r["pu_test_acc"]) for r in metrics], "o-", label="PU accuracy")
    axes[1].plot(rounds, [float(r["trace_mean"]) for r in metrics], "s-", label="trace mean")
    axes[1].set_xlabel("outer round")
    axes[1].legend()
    _save(fig, path)
    rows = [{"series": "loss", "x": r["step"], "d_objective": r["d_objective"],
             "g_loss": r["g_loss"], "pu_test_acc": "", "trace_mean": ""} for r in losses]
    rows += [{"series": "round", "x": r["outer_round"], "d_objective": "", "g_loss": "",
              "pu_test_acc": r["pu_test_acc"], "trace_mean": r["trace_mean"]} for r in metrics]
    _write_sidecar(path, rows, ("series", "x", "d_objective", "g_loss", "pu_test_acc", "trace_mean"))
    return path


def rate_curves(summary: list[dict], path, metrics=("gen_label_acc", "pu_test_acc")):
    """One panel per metric, one curve per variant, positive rate on the x axis."""
    path = Path(path)
    _require(summary, ("variant", "positive_rate", *metrics))
    fig, axes = plt.subplots(1, len(metrics), figsize=(5 * len(metrics), 3.5), squeeze=False)
    points = []
    for ax, metric in zip(axes[0], metrics):
        series = defaultdict(list)
        for r in summary:
            v = float(r[metric])
            if np.isfinite(v):
                series[r["variant"]].append((float(r["positive_rate"]), v))
        for variant, pts in sorted(series.items()):
            pts.sort()
            ax.plot([100 * p[0] for p in pts], [p[1] for p in pts], "o-", label=variant)
            points += [{"metric": metric, "variant": variant, "positive_rate": p[0], "value": p[1]}
                       for p in pts]
        ax.set_xscale("log")
        ax.set_xlabel("positive rate (%)")
        ax.set_title(metric)
        ax.legend()
    _save(fig, path)
    _write_sidecar(path, points, ("metric", "variant", "positive_rate", "value"))
    return path


def robustness_bars(summary: list[dict], path):
    """Grouped bars of final PU accuracy per (distribution type, rate) cell and variant."""
    path = Path(path)
    _require(summary, ("variant", "positive_rate", "unlabeled_dist", "pu_test_acc"))
    cells = sorted({(r["unlabeled_dist"], float(r["positive_rate"])) for r in summary})
    variants = sorted({r["variant"] for r in summary})
    width = 0.8 / max(len(variants), 1)
    fig, ax = plt.subplots(figsize=(max(5, 1.5 * len(cells)), 3.5))
    points = []
    for j, variant in enumerate(variants):
        vals = []
        for dist, rate in cells:
            match = [float(r["pu_test_acc"]) for r in summary if r["variant"] == variant
                     and r["unlabeled_dist"] == dist and float(r["positive_rate"]) == rate]
            vals.append(match[0] if match else np.nan)
            points.append({"variant": variant, "unlabeled_dist": dist, "positive_rate": rate,
                           "pu_test_acc": vals[-1]})
        ax.bar(np.arange(len(cells)) + j * width, vals, width, label=variant)
    ax.set_xticks(np.arange(len(cells)) + 0.4 - width / 2)
    ax.set_xticklabels([f"{d}\n{100 * r:g}%" for d, r in cells])
    ax.set_ylabel("final PU accuracy")
    ax.legend()
    _save(fig, path)
    _write_sidecar(path, points, ("variant", "unlabeled_dist", "positive_rate", "pu_test_acc"))
    return path
