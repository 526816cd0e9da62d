"""Figure rendering. Every figure is derived from persisted CSV/NPZ artifacts,
never from in-memory state, so plots can be regenerated without recomputation."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

METRICS = ("error", "tsuc", "utr", "ttr")
_PNG_META = {"Software": None}  # keep PNGs free of tool/timestamp metadata


def _read_csv(path: str | Path) -> list[dict]:
    with Path(path).open() as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def _eps_tag(eps: str) -> str:
    return f"eps{round(float(eps) * 255)}" if eps else "eps-default"


def render_sweep_plots(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Metric-vs-tap-depth curves, one file per (pair, epsilon, metric).

    Variant lines average over eval seeds; logit-layer baselines draw as
    horizontal dashed lines.
    """
    rows = [r for r in _read_csv(csv_path) if r["status"] == "ok"]
    out_dir = Path(out_dir)
    groups = defaultdict(list)
    for r in rows:
        groups[(r["whitebox_id"], r["blackbox_id"], r["epsilon"])].append(r)
    written = []
    for (white, black, eps), cell_rows in sorted(groups.items()):
        for metric in METRICS:
            fig, ax = plt.subplots(figsize=(5.2, 3.6))
            by_variant = defaultdict(list)
            for r in cell_rows:
                by_variant[r["variant"]].append(r)
            for variant in sorted(by_variant):
                vrows = by_variant[variant]
                per_tap = defaultdict(list)
                for r in vrows:
                    per_tap[r["tap_index"]].append(float(r[metric]))
                if len(per_tap) == 1 and variant in ("tpgd", "tmim", "upgd", "umim"):
                    val = float(np.mean(next(iter(per_tap.values()))))
                    ax.axhline(val, linestyle="--", linewidth=1.2, label=variant)
                    continue
                xs = sorted(int(t) for t in per_tap if t != "")
                ys = [float(np.mean(per_tap[str(t)])) for t in xs]
                ax.plot(xs, ys, marker="o", markersize=3, label=variant)
            ax.set_xlabel("relative tap depth")
            ax.set_ylabel(metric)
            ax.set_ylim(-0.02, 1.02)
            ax.set_title(f"{white} → {black} ({_eps_tag(eps)})")
            ax.legend(fontsize=7)
            fig.tight_layout()
            written.append(_save(fig, out_dir / f"sweep_{white}_to_{black}_{_eps_tag(eps)}_{metric}.png"))
    return written


def render_disruption_plots(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Mean disruption vs tap depth, one file per probed model, lines per attack."""
    rows = _read_csv(csv_path)
    out_dir = Path(out_dir)
    groups = defaultdict(list)
    for r in rows:
        groups[r["model_id"]].append(r)
    written = []
    for model, mrows in sorted(groups.items()):
        fig, ax = plt.subplots(figsize=(5.2, 3.6))
        by_attack = defaultdict(list)
        for r in mrows:
            by_attack[r["attack_id"]].append((int(r["tap_index"]), float(r["mean_disruption"])))
        for attack, pts in sorted(by_attack.items()):
            pts.sort()
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=attack)
        ax.set_xlabel("relative tap depth")
        ax.set_ylabel("disruption")
        ax.set_ylim(-1.02, 1.02)
        ax.axhline(0.0, color="gray", linewidth=0.6)
        ax.set_title(f"feature disruption in {model}")
        ax.legend(fontsize=7)
        fig.tight_layout()
        written.append(_save(fig, out_dir / f"disruption_{model}.png"))
    return written


def render_correlation_plot(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Auxiliary/model correlation (and raw KL) vs tap depth, lines per model."""
    rows = _read_csv(csv_path)
    out_dir = Path(out_dir)
    fig, axes = plt.subplots(1, 2, figsize=(9.0, 3.4))
    by_model = defaultdict(list)
    for r in rows:
        by_model[r["model_id"]].append(
            (int(r["tap_index"]), float(r["correlation"]), float(r["mean_discrepancy"])))
    for model, pts in sorted(by_model.items()):
        pts.sort()
        axes[0].plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=model)
        axes[1].plot([p[0] for p in pts], [p[2] for p in pts], marker="o", markersize=3, label=model)
    axes[0].set_xlabel("relative tap depth")
    axes[0].set_ylabel("correlation = 1/(1+KL)")
    axes[1].set_xlabel("relative tap depth")
    axes[1].set_ylabel("discrepancy (KL, nats)")
    for ax in axes:
        ax.legend(fontsize=7)
    fig.tight_layout()
    return [_save(fig, out_dir / "correlation.png")]


def render_separability_plot(csv_path: str | Path, out_dir: str | Path) -> list[Path]:
    rows = _read_csv(csv_path)
    out_dir = Path(out_dir)
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    by_model = defaultdict(list)
    for r in rows:
        if r["separability"] == "":
            continue
        by_model[r["model_id"]].append((int(r["tap_index"]), float(r["separability"])))
    for model, pts in sorted(by_model.items()):
        pts.sort()
        ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", markersize=3, label=model)
    ax.set_xlabel("relative tap depth")
    ax.set_ylabel("separability (perturbation steps)")
    ax.axhline(0.0, color="gray", linewidth=0.6)
    ax.legend(fontsize=7)
    fig.tight_layout()
    return [_save(fig, out_dir / "separability.png")]


def render_saliency_grid(npz_path: str | Path, out_dir: str | Path) -> list[Path]:
    """Rows = source images, columns = input then per-tap saliency maps."""
    npz_path = Path(npz_path)
    blob = np.load(npz_path)
    images = blob["images"]  # (N, 3, H, W)
    taps = [int(t) for t in blob["tap_indices"]]
    n = len(images)
    fig, axes = plt.subplots(n, len(taps) + 1, figsize=(1.35 * (len(taps) + 1), 1.4 * n),
                             squeeze=False)
    for i in range(n):
        axes[i][0].imshow(images[i].transpose(1, 2, 0))
        axes[i][0].set_ylabel(f"class {int(blob['class_ids'][i])}", fontsize=7)
        for j, t in enumerate(taps):
            sal = blob[f"map_{i}_{t}"]
            peak = sal.max()
            axes[i][j + 1].imshow(sal / peak if peak > 0 else sal, cmap="inferno")
            if i == 0:
                axes[i][j + 1].set_title(f"tap {t}", fontsize=7)
    for ax in axes.ravel():
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    return [_save(fig, Path(out_dir) / f"{npz_path.stem}.png")]
