"""Report rendering: evaluation tables as JSON/CSV plus matplotlib figures
saved next to them.

Figures carry fixed PNG metadata so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

_PNG_META = {"Software": "cvaeseg"}


def _save(fig, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)


def read_metrics_csv(path: Path) -> dict[str, np.ndarray]:
    with open(path) as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    out: dict[str, list] = {k: [] for k in reader.fieldnames}
    for row in rows:
        for k, v in row.items():
            out[k].append(v)
    return {k: (np.array(v) if k == "phase" else np.array(v, dtype=np.float64))
            for k, v in out.items()}


def training_curves_figure(log_dir: str | Path, phases: list[str], out_path: str | Path) -> Path:
    """Objective and KL trajectories for the given phases, one global step axis."""
    log_dir = Path(log_dir)
    out_path = Path(out_path)
    fig, (ax_obj, ax_kl) = plt.subplots(1, 2, figsize=(10, 3.6))
    offset = 0
    for phase in phases:
        path = log_dir / f"{phase}_metrics.csv"
        if not path.exists():
            continue
        cols = read_metrics_csv(path)
        steps = np.arange(len(cols["step"])) + offset
        ax_obj.plot(steps, cols["objective"], label=phase, linewidth=1.0)
        if np.any(cols["kl"] != 0.0):
            ax_kl.plot(steps, cols["kl"], label=phase, linewidth=1.0)
        offset = steps[-1] + 1 if len(steps) else offset
    ax_obj.set_xlabel("step")
    ax_obj.set_ylabel("objective")
    ax_obj.set_yscale("log")
    if ax_obj.lines:
        ax_obj.legend(fontsize=8)
    ax_kl.set_xlabel("step")
    ax_kl.set_ylabel("KL term")
    if ax_kl.lines:
        ax_kl.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)
    return out_path


def write_eval_report(rows: list[dict], json_path: str | Path, csv_path: str | Path) -> None:
    """Evaluation rows as structured text (JSON) and as delimited output."""
    json_path = Path(json_path)
    csv_path = Path(csv_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(rows, indent=1, sort_keys=True) + "\n")
    classes = sorted({c for row in rows for c in row["iou_per_class"]})
    header = ["variant", "split", "pixel_accuracy", "mean_iou", "sap", "fg_iou_native"] \
        + [f"iou_class_{c}" for c in classes]
    lines = [",".join(header)]
    for row in rows:
        cells = [row["variant"], row["split"], repr(row["pixel_accuracy"]),
                 repr(row["mean_iou"]), repr(row["sap"]), repr(row["fg_iou_native"])]
        cells += [repr(row["iou_per_class"].get(c, float("nan"))) for c in classes]
        lines.append(",".join(cells))
    csv_path.write_text("\n".join(lines) + "\n")


def eval_figure(rows: list[dict], panels: list[dict], out_path: str | Path) -> Path:
    """Bar chart of the headline metrics plus sample prediction panels.

    `panels` entries carry {"image": HxW array, "gt": mask, "<variant>": mask...}.
    """
    out_path = Path(out_path)
    n_rows = len(panels)
    variant_names = [r["variant"] for r in rows]
    panel_cols = 2 + len(variant_names)
    fig = plt.figure(figsize=(1.9 * max(panel_cols, 4), 2.0 * (n_rows + 1.4)))
    grid = fig.add_gridspec(n_rows + 1, panel_cols, height_ratios=[1.4] + [1.0] * n_rows)

    ax = fig.add_subplot(grid[0, :])
    idx = np.arange(len(rows))
    width = 0.27
    ax.bar(idx - width, [r["pixel_accuracy"] for r in rows], width, label="pixel acc")
    ax.bar(idx, [r["mean_iou"] for r in rows], width, label="mean IoU")
    ax.bar(idx + width, [r["sap"] for r in rows], width, label="SAP")
    ax.set_xticks(idx, variant_names)
    ax.set_ylim(0.0, 1.05)
    ax.legend(fontsize=8, ncol=3)
    ax.set_title(f"evaluation on split '{rows[0]['split']}'" if rows else "evaluation")

    for i, panel in enumerate(panels):
        titles = ["image", "truth"] + variant_names
        images = [panel["image"], panel["gt"]] + [panel[v] for v in variant_names]
        for j, (title, img) in enumerate(zip(titles, images)):
            axp = fig.add_subplot(grid[i + 1, j])
            axp.imshow(img, cmap="gray", vmin=0,
                       vmax=1 if j == 0 else max(1, int(np.max(img, initial=1))))
            axp.set_xticks([])
            axp.set_yticks([])
            if i == 0:
                axp.set_title(title, fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)
    return out_path


def verification_figure(check_names: list[str], measured: list[float],
                        thresholds: list[float], out_path: str | Path) -> Path:
    """Measured error of each oracle check against its threshold."""
    out_path = Path(out_path)
    fig, ax = plt.subplots(figsize=(7, 0.5 * len(check_names) + 1.5))
    y = np.arange(len(check_names))
    eps = 1e-18
    ax.barh(y, [max(abs(m), eps) for m in measured], 0.6, label="measured")
    ax.plot([max(abs(t), eps) for t in thresholds], y, "k|", markersize=12, label="threshold")
    ax.set_yticks(y, check_names, fontsize=8)
    ax.set_xscale("log")
    ax.invert_yaxis()
    ax.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, out_path)
    return out_path
