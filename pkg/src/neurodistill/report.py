"""Evaluation reports: tab-separated tables plus rendered summary figures.

Tables are the machine-readable product; each figure is a convenience
rendering of one table, written alongside it. Float formatting is fixed
so re-running a command reproduces the files byte for byte.
"""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

CKA_NOTE = (
    "# cka: standard linear form |Yc'Xc|_F^2 / (|Xc'Xc|_F |Yc'Yc|_F); "
    "a squared-denominator variant would not give CKA(X,X)=1"
)


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


def write_tsv(path, header, rows, notes=()):
    with open(path, "w") as f:
        for note in notes:
            f.write(note + "\n")
        f.write("\t".join(header) + "\n")
        for row in rows:
            f.write("\t".join(_fmt(v) for v in row) + "\n")
    return path


def read_tsv(path):
    header, rows = None, []
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            cells = line.split("\t")
            if header is None:
                header = cells
            else:
                rows.append(cells)
    return header, rows


def _grouped_bars(path, groups, series, values, errors, ylabel, title):
    """values[series][group] -> one bar; errors may be None."""
    fig, ax = plt.subplots(figsize=(max(4.0, 1.2 * len(groups) + 2), 3.2))
    width = 0.8 / max(len(series), 1)
    xs = np.arange(len(groups))
    for i, name in enumerate(series):
        vals = [values[name].get(g, np.nan) for g in groups]
        errs = [errors[name].get(g, 0.0) for g in groups] if errors else None
        ax.bar(xs + i * width, vals, width, yerr=errs, capsize=2, label=name)
    ax.set_xticks(xs + width * (len(series) - 1) / 2)
    ax.set_xticklabels(groups, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel(ylabel)
    ax.set_title(title, fontsize=10)
    if len(series) > 1:
        ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def decode_figure(out_dir, rows):
    """rows: (model, session, r2). One bar group per session."""
    models = sorted({r[0] for r in rows})
    sessions = sorted({r[1] for r in rows})
    by = {m: {} for m in models}
    err = {m: {} for m in models}
    for m in models:
        for s in sessions:
            vals = [r[2] for r in rows if r[0] == m and r[1] == s]
            if vals:
                by[m][s] = float(np.mean(vals))
                err[m][s] = float(np.std(vals))
    return _grouped_bars(
        os.path.join(out_dir, "decode_r2.png"), sessions, models, by, err,
        "decoding R^2 (test)", "Linear behavior decoding from pooled latents",
    )


def retrieval_figure(out_dir, rows):
    """rows: (pair, session, top1, top5, mean_rank)."""
    pairs = sorted({r[0] for r in rows})
    vals = {"top1": {}, "top5": {}}
    for p in pairs:
        sel = [r for r in rows if r[0] == p]
        vals["top1"][p] = float(np.mean([r[2] for r in sel]))
        vals["top5"][p] = float(np.mean([r[3] for r in sel]))
    return _grouped_bars(
        os.path.join(out_dir, "retrieval.png"), pairs, ["top1", "top5"], vals, None,
        "retrieval accuracy", "Cross-model sequence retrieval (cosine)",
    )


def cka_figure(out_dir, rows):
    """rows: (pair, session, cka)."""
    pairs = sorted({r[0] for r in rows})
    vals = {"cka": {p: float(np.mean([r[2] for r in rows if r[0] == p])) for p in pairs}}
    return _grouped_bars(
        os.path.join(out_dir, "cka.png"), pairs, ["cka"], vals, None,
        "linear CKA", "Representation alignment",
    )
