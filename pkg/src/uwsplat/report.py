"""Figure rendering for training logs, evaluation tables and ablations.

Every report path writes a PNG figure next to the CSV it summarizes, so a
run directory is self-describing without extra tooling.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def plot_training(rows, out_path) -> None:
    """Loss curves and PSNR from (iter, basic, ab, wat, edge, ms, total, psnr) rows."""
    rows = list(rows)
    if not rows:
        return
    it = [r[0] for r in rows]
    fig, (ax_loss, ax_psnr) = plt.subplots(1, 2, figsize=(10, 4))
    for idx, name in ((1, "basic"), (2, "ab"), (3, "wat"), (4, "edge"),
                      (5, "ms"), (6, "total")):
        ax_loss.plot(it, [r[idx] for r in rows], label=name)
    ax_loss.set_xlabel("iteration")
    ax_loss.set_ylabel("loss")
    ax_loss.legend(fontsize=8)
    ax_psnr.plot(it, [r[7] for r in rows], color="tab:green")
    ax_psnr.set_xlabel("iteration")
    ax_psnr.set_ylabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_metrics(rows, out_path) -> None:
    """Per-image PSNR/SSIM bars from (name, psnr, ssim) rows."""
    rows = list(rows)
    if not rows:
        return
    names = [str(r[0]) for r in rows]
    x = range(len(names))
    fig, (ax_p, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    ax_p.bar(x, [r[1] for r in rows], color="tab:blue")
    ax_p.set_xticks(list(x), names, rotation=45, fontsize=7)
    ax_p.set_ylabel("PSNR (dB)")
    ax_s.bar(x, [r[2] for r in rows], color="tab:orange")
    ax_s.set_xticks(list(x), names, rotation=45, fontsize=7)
    ax_s.set_ylabel("SSIM")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def plot_ablation(rows, out_path) -> None:
    """Ordered variant table from (variant, psnr) rows, best at the top."""
    rows = sorted(rows, key=lambda r: -r[1])
    names = [str(r[0]) for r in rows]
    vals = [r[1] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 0.6 * len(rows) + 1.5))
    ax.barh(range(len(rows))[::-1], vals, color="tab:purple")
    ax.set_yticks(range(len(rows))[::-1], names, fontsize=8)
    ax.set_xlabel("PSNR (dB)")
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)


def ensure_dir(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p
