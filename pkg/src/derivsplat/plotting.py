"""Matplotlib figures written next to the CLI's tabular reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_training_curves(losses, metrics_rows, path, window=50):
    """Per-iteration loss (with a running mean) and held-out PSNR over training."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.4))
    losses = np.asarray(losses, dtype=np.float64)
    ax1.plot(losses, lw=0.4, alpha=0.4, color="tab:blue", label="loss")
    if losses.size >= window:
        smooth = np.convolve(losses, np.ones(window) / window, mode="valid")
        ax1.plot(np.arange(window - 1, losses.size), smooth, color="tab:blue", label=f"mean of {window}")
    ax1.set_xlabel("iteration")
    ax1.set_ylabel("loss")
    ax1.set_yscale("log")
    ax1.legend(fontsize=8)
    if metrics_rows:
        it = [r[0] for r in metrics_rows]
        ax2.plot(it, [r[2] for r in metrics_rows], marker=".", color="tab:green")
        ax3 = ax2.twinx()
        ax3.plot(it, [r[3] for r in metrics_rows], color="tab:gray", ls="--")
        ax3.set_ylabel("Gaussians", color="tab:gray")
    ax2.set_xlabel("iteration")
    ax2.set_ylabel("held-out PSNR (dB)")
    return _save(fig, path)


def plot_eval(report, path):
    fig, ax = plt.subplots(figsize=(6, 3))
    vals = [r.psnr for r in report.rows]
    ax.bar(np.arange(len(vals)), vals, color="tab:purple")
    ax.axhline(report.mean_psnr, color="k", lw=0.8, ls="--", label=f"mean {report.mean_psnr:.2f} dB")
    ax.set_xlabel(f"{report.split} frame")
    ax.set_ylabel("PSNR (dB)")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_render(image, reference, path, depth=None):
    panels = [("render", image)] + ([("reference", reference)] if reference is not None else [])
    if depth is not None:
        panels.append(("depth", depth))
    fig, axes = plt.subplots(1, len(panels), figsize=(2.6 * len(panels), 2.8))
    for ax, (title, img) in zip(np.atleast_1d(axes), panels):
        if img.ndim == 2:
            ax.imshow(img, cmap="viridis")
        else:
            ax.imshow(np.clip(img, 0, 1))
        ax.set_title(title, fontsize=9)
        ax.axis("off")
    return _save(fig, path)


def plot_dilution(reports, path):
    """Occupied-cell fraction per plane, axis-aligned vs derived lookup."""
    planes = list(reports["axis_aligned"])
    x = np.arange(len(planes))
    fig, ax = plt.subplots(figsize=(5, 3))
    for off, mode in ((-0.2, "axis_aligned"), (0.2, "derived")):
        ax.bar(x + off, [reports[mode][p].occupied_cell_fraction for p in planes], width=0.4, label=mode)
    ax.set_xticks(x, [f"P_{p}" for p in planes])
    ax.set_ylabel("occupied cell fraction")
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_param_counts(rows, path):
    fig, ax = plt.subplots(figsize=(5, 3))
    names = [r[0] for r in rows]
    ax.bar(names, [r[1] for r in rows], color=["tab:orange", "tab:blue"][: len(rows)])
    ax.set_yscale("log")
    ax.set_ylabel("plane parameters")
    return _save(fig, path)
