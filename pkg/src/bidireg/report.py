"""Run reporting: convergence figures and slice previews rendered to files.

Reads a registration output directory (trace.jsonl plus the written
artifacts) and produces PNG figures next to a flattened trace.csv. Purely
diagnostic; nothing here feeds back into the numerics.
"""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from . import io as bio


def read_trace(path):
    rows = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line:
            rows.append(json.loads(line))
    return rows


def write_trace_csv(rows, path):
    cols = ["level", "iter", "total", "sim", "reg", "inv", "mask_mag",
            "mask_fraction_fwd", "mask_fraction_bwd", "tau_fwd", "tau_bwd",
            "max_disp"]
    lines = [",".join(cols)]
    for r in rows:
        cells = []
        for c in cols:
            v = r.get(c)
            cells.append("" if v is None else f"{v:.9g}" if isinstance(v, float) else str(v))
        lines.append(",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def render_trace_figure(rows, path):
    """Loss components and mask fractions over the whole run."""
    it = np.arange(len(rows))
    levels = np.array([r["level"] for r in rows])
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(8, 6), sharex=True)
    for key, style in (("total", "-"), ("sim", "--"), ("reg", ":"), ("inv", "-.")):
        ax1.plot(it, [r[key] for r in rows], style, label=key)
    for boundary in np.flatnonzero(np.diff(levels)) + 1:
        ax1.axvline(boundary, color="0.8", lw=0.8)
        ax2.axvline(boundary, color="0.8", lw=0.8)
    ax1.set_ylabel("loss")
    ax1.legend(loc="best", fontsize=8)
    ax1.set_title("objective per iteration (vertical lines: pyramid levels)")
    ax2.plot(it, [r["mask_fraction_fwd"] for r in rows], label="mask fwd")
    ax2.plot(it, [r["mask_fraction_bwd"] for r in rows], label="mask bwd")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("mask fraction")
    ax2.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _mid_slices(data):
    nx, ny, nz = data.shape
    return (data[nx // 2, :, :], data[:, ny // 2, :], data[:, :, nz // 2])


def render_slices_figure(run_dir, path):
    """Orthogonal mid-slice panels of the run's artifacts."""
    run_dir = Path(run_dir)
    panels = []
    for name, label in (("warped_moving.nii", "warped moving"),
                        ("warped_fixed.nii", "warped fixed"),
                        ("fberr_fwd.nii", "fb error fwd"),
                        ("mask_fwd.nii", "mask fwd")):
        p = run_dir / name
        if p.exists():
            panels.append((label, bio.read_volume_nifti(p).data))
    if not panels:
        raise FileNotFoundError(f"no renderable artifacts in {run_dir}")
    fig, axes = plt.subplots(3, len(panels), figsize=(3 * len(panels), 8),
                             squeeze=False)
    for col, (label, data) in enumerate(panels):
        for row, sl in enumerate(_mid_slices(data)):
            ax = axes[row][col]
            ax.imshow(sl.T, cmap="gray", origin="lower")
            ax.set_xticks([])
            ax.set_yticks([])
            if row == 0:
                ax.set_title(label, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def render_run_report(run_dir, out_dir=None):
    """Render every report artifact for one run directory.

    Returns the list of written paths.
    """
    run_dir = Path(run_dir)
    out_dir = Path(out_dir) if out_dir else run_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    trace_path = run_dir / "trace.jsonl"
    if trace_path.exists():
        rows = read_trace(trace_path)
        csv_path = out_dir / "trace.csv"
        write_trace_csv(rows, csv_path)
        written.append(csv_path)
        fig_path = out_dir / "loss_trace.png"
        render_trace_figure(rows, fig_path)
        written.append(fig_path)
    slices_path = out_dir / "slices.png"
    try:
        render_slices_figure(run_dir, slices_path)
        written.append(slices_path)
    except FileNotFoundError:
        pass
    if not written:
        raise FileNotFoundError(f"nothing to report in {run_dir}")
    return written
