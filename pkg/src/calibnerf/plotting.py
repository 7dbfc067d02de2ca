"""Figures written next to the CSV/JSON reports."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

matplotlib.rcParams["font.size"] = 8
matplotlib.rcParams["axes.titlesize"] = 9
matplotlib.rcParams["legend.fontsize"] = 7
matplotlib.rcParams["legend.framealpha"] = 0.5
matplotlib.rcParams["savefig.dpi"] = 150


def plot_loss_curve(history, path):
    """Loss components and total against iteration, log-scaled."""
    it = np.array([h["iteration"] for h in history])
    fig, ax = plt.subplots(figsize=(4.5, 3))
    for key, style in (("total", "-"), ("mse", "--"), ("central", ":")):
        vals = np.array([h[key] for h in history], dtype=float)
        if np.any(vals > 0):
            ax.plot(it, np.maximum(vals, 1e-12), style, label=key, lw=1)
    perc = np.array([h["perceptual"] * h["lambda_perceptual"] for h in history], dtype=float)
    if np.any(perc > 0):
        ax.plot(it, perc, "-.", label="weighted perceptual", lw=1)
    ax.set_yscale("log")
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    ax.legend(loc="upper right")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_comparison(pred, truth, path, title=None):
    """Prediction, ground truth and absolute error side by side."""
    fig, axes = plt.subplots(1, 3, figsize=(6, 2.3))
    err = np.abs(np.asarray(pred) - np.asarray(truth)).mean(-1)
    for ax, img, name in zip(axes, (pred, truth, err), ("rendered", "ground truth", "|error|")):
        if img.ndim == 2:
            ax.imshow(img, cmap="magma", vmin=0, vmax=max(float(img.max()), 1e-6))
        else:
            ax.imshow(np.clip(img, 0, 1), interpolation="nearest")
        ax.set_title(name)
        ax.axis("off")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_metrics_by_views(metrics, path):
    """Mean PSNR and SSIM against the number of reference views."""
    rows = metrics["results"]
    n = [r["n_refs"] for r in rows]
    fig, ax1 = plt.subplots(figsize=(3.5, 2.6))
    ax1.plot(n, [r["psnr"] for r in rows], "o-", color="C0")
    ax1.set_xlabel("reference views")
    ax1.set_ylabel("PSNR (dB)", color="C0")
    ax1.set_xticks(n)
    ax2 = ax1.twinx()
    ax2.plot(n, [r["ssim"] for r in rows], "s--", color="C1")
    ax2.set_ylabel("SSIM", color="C1")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_ablation(table, path):
    """Per-variant mean PSNR with per-seed values overlaid."""
    rows = table["rows"]
    names = [r["variant"] for r in rows]
    fig, ax = plt.subplots(figsize=(max(3.0, 0.7 * len(rows) + 1), 2.8))
    x = np.arange(len(rows))
    ax.bar(x, [r["psnr"] for r in rows], color="0.75", edgecolor="k", lw=0.5)
    for i, r in enumerate(rows):
        ps = [s["psnr"] for s in r["per_seed"]]
        ax.plot(np.full(len(ps), i), ps, "k.", ms=3)
    lo = min(min(s["psnr"] for s in r["per_seed"]) for r in rows)
    hi = max(max(s["psnr"] for s in r["per_seed"]) for r in rows)
    pad = max(0.5, 0.1 * (hi - lo))
    ax.set_ylim(lo - pad, hi + pad)
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=35, ha="right")
    ax.set_ylabel("held-out PSNR (dB)")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
