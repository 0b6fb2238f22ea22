"""Markdown + CSV + PNG report bundle for a finished experiment directory.

The inputs are the aggregated ``accuracy.csv`` and ``similarity.csv`` written by
``run_experiment``. When either is missing the per-cell copies under
``<cell>/seed_<s>/`` are collected instead; anything still absent is listed in
the report's gaps section rather than raising.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .simsuite import SimilarityReport

SPLITS = ("train", "holdout")
DASH = "—"


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def _collect(root: Path, name: str, gaps: list[str]) -> list[dict]:
    top = root / name
    if top.is_file():
        return _read_csv(top)
    rows = []
    cells = sorted(p.parent for p in root.glob(f"*/seed_*/{name}"))
    for p in cells:
        rows.extend(_read_csv(p / name))
    if not cells:
        gaps.append(f"{name} not found")
    else:
        gaps.append(f"{name} missing at top level; rebuilt from {len(cells)} cell file(s)")
    return rows


def _mean_sd(vals: list[float]) -> tuple[float, float | None]:
    vals = [v for v in vals if not math.isnan(v)]
    if not vals:
        return float("nan"), None
    sd = float(np.std(vals, ddof=1)) if len(vals) > 1 else None
    return float(np.mean(vals)), sd


def _fmt(x: float | None, digits: int = 4) -> str:
    if x is None:
        return DASH
    if math.isnan(x):
        return "nan"
    return f"{x:.{digits}f}"


def _ordered(rows: list[dict], key: str) -> list[str]:
    seen: dict[str, None] = {}
    for r in rows:
        seen.setdefault(r[key], None)
    return list(seen)


def accuracy_table(rows: list[dict]) -> tuple[list[str], list[list]]:
    """One row per model, mean/sd/n per modality. sd is None for a single seed."""
    models = _ordered(rows, "model")
    modalities = sorted({int(r["modality"]) for r in rows})
    header = ["model"]
    for m in modalities:
        header += [f"acc{m}_mean", f"acc{m}_sd", f"acc{m}_n"]
    table = []
    for model in models:
        line: list = [model]
        for m in modalities:
            vals = [float(r["acc"]) for r in rows if r["model"] == model and int(r["modality"]) == m]
            mean, sd = _mean_sd(vals)
            line += [mean, sd, len(vals)]
        table.append(line)
    return header, table


def similarity_table(rows: list[dict]) -> tuple[list[str], list[list]]:
    """One row per model; five measures for each of the train and holdout splits."""
    models = _ordered(rows, "model")
    header = ["model"] + [f"{s}_{m}" for s in SPLITS for m in SimilarityReport.MEASURES]
    table = []
    for model in models:
        line: list = [model]
        for split in SPLITS:
            sel = [r for r in rows if r["model"] == model and r["split"] == split]
            for measure in SimilarityReport.MEASURES:
                line.append(_mean_sd([float(r[measure]) for r in sel])[0] if sel else float("nan"))
        table.append(line)
    return header, table


def _write_table(path: Path, header: list[str], table: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for line in table:
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v) for v in line])


def _plot_accuracy(path: Path, header: list[str], table: list[list]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    modalities = [h[3:-5] for h in header if h.endswith("_mean")]
    models = [t[0] for t in table]
    x = np.arange(len(models))
    width = 0.8 / max(len(modalities), 1)
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(models)), 3.2))
    for k, m in enumerate(modalities):
        col = header.index(f"acc{m}_mean")
        means = [t[col] for t in table]
        sds = [t[col + 1] or 0.0 for t in table]
        ax.bar(x + k * width, means, width, yerr=sds, label=f"modality {m}", capsize=2)
    ax.set_xticks(x + width * (len(modalities) - 1) / 2)
    ax.set_xticklabels(models, rotation=30, ha="right")
    ax.set_ylabel("linear-eval accuracy")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _plot_similarity(path: Path, header: list[str], table: list[list]) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    measures = SimilarityReport.MEASURES
    models = [t[0] for t in table]
    fig, axes = plt.subplots(1, len(SPLITS), figsize=(max(6.0, 2.0 * len(models)), 3.2), sharey=True)
    x = np.arange(len(models))
    width = 0.8 / len(measures)
    for ax, split in zip(axes, SPLITS):
        for k, measure in enumerate(measures):
            col = header.index(f"{split}_{measure}")
            ax.bar(x + k * width, [t[col] for t in table], width, label=measure)
        ax.set_title(split)
        ax.set_xticks(x + width * (len(measures) - 1) / 2)
        ax.set_xticklabels(models, rotation=30, ha="right")
    axes[0].set_ylabel("similarity")
    axes[-1].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, dpi=100, metadata={"Software": None})
    plt.close(fig)


def _surrogate_models(root: Path) -> list[str]:
    """Models whose objective contains the soft (whitened) CCA edge."""
    names = set()
    for p in sorted(root.glob("*/seed_*/config.json")):
        cfg = json.loads(p.read_text(encoding="utf-8"))
        if any(str(e).startswith("CCA") for e in cfg.get("edges", [])):
            names.add(cfg.get("name") or p.parent.parent.name)
    return sorted(names)


def _markdown(acc: tuple, sim: tuple, gaps: list[str], notes: list[str]) -> str:
    lines = ["# Experiment report", ""]
    header, table = acc
    lines += ["## Linear-eval accuracy (test split)", ""]
    if table:
        mods = [h[3:-5] for h in header if h.endswith("_mean")]
        lines.append("| model | " + " | ".join(f"modality {m}" for m in mods) + " | seeds |")
        lines.append("|---" * (len(mods) + 2) + "|")
        for t in table:
            cells = []
            for m in mods:
                col = header.index(f"acc{m}_mean")
                cells.append(f"{_fmt(t[col])} ± {_fmt(t[col + 1])}")
            lines.append(f"| {t[0]} | " + " | ".join(cells) + f" | {t[header.index(f'acc{mods[0]}_n')]} |")
        lines += ["", "![accuracy](accuracy.png)", ""]
    else:
        lines += ["_no accuracy rows_", ""]

    header, table = sim
    lines += ["## Representation similarity between modalities", ""]
    if table:
        lines.append("| model | " + " | ".join(header[1:]) + " |")
        lines.append("|---" * len(header) + "|")
        for t in table:
            lines.append(f"| {t[0]} | " + " | ".join(_fmt(v) for v in t[1:]) + " |")
        lines += ["", "![similarity](similarity.png)", ""]
    else:
        lines += ["_no similarity rows_", ""]

    if notes:
        lines += ["## Notes", ""] + [f"- {n}" for n in notes] + [""]
    if gaps:
        lines += ["## Gaps", ""] + [f"- {g}" for g in gaps] + [""]
    return "\n".join(lines)


def emit_report(directory) -> Path:
    """Write report.md, accuracy_table.csv, similarity_table.csv and PNG charts into ``directory``."""
    root = Path(directory)
    if not root.is_dir():
        raise FileNotFoundError(f"report directory {root} does not exist")
    gaps: list[str] = []
    acc_rows = _collect(root, "accuracy.csv", gaps)
    sim_rows = _collect(root, "similarity.csv", gaps)
    failures = root / "failures.txt"
    if failures.is_file():
        failed = [ln[len("FAILED "):] for ln in failures.read_text(encoding="utf-8").splitlines()
                  if ln.startswith("FAILED ")]
        gaps += [f"failed cell: {ln}" for ln in failed]

    acc = accuracy_table(acc_rows)
    sim = similarity_table(sim_rows)
    _write_table(root / "accuracy_table.csv", *acc)
    _write_table(root / "similarity_table.csv", *sim)
    if acc[1]:
        _plot_accuracy(root / "accuracy.png", *acc)
    if sim[1]:
        _plot_similarity(root / "similarity.png", *sim)
    path = root / "report.md"
    notes = [f"{m}: CCA edge trained with the ridge-whitened soft surrogate (eps=1e-3), "
             "not exact canonical correlations" for m in _surrogate_models(root)]
    notes.append("CKA is computed on column-centred features; PWCCA ij takes weights from modality 0")
    path.write_text(_markdown(acc, sim, gaps, notes), encoding="utf-8")
    return path
