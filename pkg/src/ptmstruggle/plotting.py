"""Figures rendered from the artifact CSVs."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .errors import MissingInput  # noqa: E402
from .labeling import CANONICAL_CONCEPTS  # noqa: E402

SENSITIVITY_FIGURE = "sensitivity.svg"
LACKING_FIGURE = "concept_lacking.svg"

_STYLE = {
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "svg.hashsalt": "ptmstruggle",  # stable element ids across runs
    "svg.fonttype": "none",
}


def _read_rows(path: Path, columns) -> list:
    if not path.is_file():
        raise MissingInput(f"{path.name} not found in {path.parent}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in columns if c not in (reader.fieldnames or [])]
        if missing:
            raise MissingInput(f"{path.name} lacks columns {missing}")
        rows = list(reader)
    if not rows:
        raise MissingInput(f"{path.name} has no data rows")
    return rows


def plot_sensitivity(rows, out_path):
    """AUC against the number of past tasks kept."""
    lengths = np.array([int(r["length"]) for r in rows])
    aucs = np.array([float(r["auc"]) for r in rows])
    order = np.argsort(lengths)
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(lengths[order], aucs[order], marker="o", markersize=3, color="tab:blue")
        ax.set_xlabel("Number of past coding tasks")
        ax.set_ylabel("ROC-AUC")
        ax.set_xlim(lengths.min() - 0.5, lengths.max() + 0.5)
        fig.tight_layout()
        fig.savefig(out_path, metadata={"Date": None})
        plt.close(fig)
    return Path(out_path)


def plot_lacking_concepts(rows, out_path):
    """Grouped bars: share of final submissions lacking each concept, by struggle group."""
    pct = {(r["concept"], r["group"]): float(r["pct"]) for r in rows}
    x = np.arange(len(CANONICAL_CONCEPTS))
    width = 0.4
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(7.0, 3.2))
        for offset, group, color in ((-width / 2, "struggling", "tab:red"), (width / 2, "non_struggling", "tab:gray")):
            heights = [pct.get((c, group), 0.0) for c in CANONICAL_CONCEPTS]
            ax.bar(x + offset, heights, width, label=group.replace("_", "-"), color=color)
        ax.set_xticks(x)
        ax.set_xticklabels([c.replace("_", " ") for c in CANONICAL_CONCEPTS], rotation=35, ha="right")
        ax.set_ylabel("Lacking concept (%)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out_path, metadata={"Date": None})
        plt.close(fig)
    return Path(out_path)


def emit_plots(artifact_dir) -> list:
    """Render both figures from ``sensitivity.csv`` and ``concept_lacking.csv``."""
    artifact_dir = Path(artifact_dir)
    sens = _read_rows(artifact_dir / "sensitivity.csv", ("length", "auc"))
    lacking = _read_rows(artifact_dir / "concept_lacking.csv", ("concept", "group", "pct"))
    return [
        plot_sensitivity(sens, artifact_dir / SENSITIVITY_FIGURE),
        plot_lacking_concepts(lacking, artifact_dir / LACKING_FIGURE),
    ]
