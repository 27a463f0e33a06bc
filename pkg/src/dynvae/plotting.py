"""Figures for training and evaluation reports (PNG files, headless backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "figure.dpi": 100,
    "savefig.dpi": 120,
    "font.size": 9,
    "axes.titlesize": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, bbox_inches="tight")
    plt.close(fig)
    return path


def loss_curves(report, path):
    """Training loss (and validation loss when present) per epoch, plus the stationarity residual."""
    epochs = [e.epoch for e in report.epochs]
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3))
        ax1.plot(epochs, [e.loss for e in report.epochs], label="train")
        val = [e.val_loss for e in report.epochs]
        if any(v is not None for v in val):
            ax1.plot(epochs, val, label="validation")
        ax1.set_xlabel("epoch")
        ax1.set_ylabel("loss")
        ax1.legend(frameon=False)
        ax2.semilogy(epochs, np.maximum([e.stationarity for e in report.epochs], 1e-16))
        ax2.set_xlabel("epoch")
        ax2.set_ylabel(r"$\|AA^T+BB^T-I\|_F$")
        return _save(fig, path)


def autocorr_comparison(report, path):
    lags = np.arange(1, len(report.autocorr_ref) + 1)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4, 3))
        ax.plot(lags, report.autocorr_ref, "o-", label="reference")
        ax.plot(lags, report.autocorr_gen, "s--", label="generated")
        ax.set_xlabel("lag")
        ax.set_ylabel("mean pixel autocorrelation")
        ax.set_xticks(lags)
        ax.legend(frameon=False)
        return _save(fig, path)


def frame_strip(seq, path, count=10, title=None):
    """The first ``count`` frames side by side."""
    images = seq.images()[:count]
    count = images.shape[0]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, max(count, 1), figsize=(1.2 * max(count, 1), 1.4), squeeze=False)
        for i, ax in enumerate(axes[0]):
            ax.axis("off")
            if i < count:
                img = images[i]
                ax.imshow(img[..., 0] if img.shape[-1] == 1 else img, cmap="gray", vmin=0, vmax=1)
                ax.set_title(str(i), fontsize=7)
        if title:
            fig.suptitle(title)
        return _save(fig, path)


def mean_std_images(ref, gen, path):
    """Per-pixel mean and standard deviation of two sequences."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, 2, figsize=(4.5, 4.5))
        for row, (name, seq) in enumerate((("reference", ref), ("generated", gen))):
            imgs = seq.images()[..., 0]
            for col, (stat, img) in enumerate((("mean", imgs.mean(axis=0)), ("std", imgs.std(axis=0)))):
                ax = axes[row, col]
                ax.imshow(img, cmap="gray", vmin=0, vmax=1 if stat == "mean" else 0.5)
                ax.set_title(f"{name} {stat}")
                ax.axis("off")
        return _save(fig, path)


def eval_figures(ref, gen, report, directory):
    directory = Path(directory)
    return [
        autocorr_comparison(report, directory / "autocorr.png"),
        frame_strip(ref, directory / "ref_frames.png", title="reference"),
        frame_strip(gen, directory / "gen_frames.png", title="generated"),
        mean_std_images(ref, gen, directory / "mean_std.png"),
    ]
