"""Figures written next to the command-line reports (Agg backend, files only)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .pyramid import closed_form_l, layer_cap, predict_cost, select_layers  # noqa: E402


def plot_cost_model(N, w, s, n, path):
    """Predicted time ``T_l`` against the layer count."""
    cap = layer_cap(N, w, s)
    ls = np.arange(1, max(cap, closed_form_l(N, w, s, n)) + 2)
    T = [predict_cost(N, w, s, n, int(l)) for l in ls]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(ls, T, "o-", color="tab:blue")
    ax.axvline(select_layers(N, w, s, n), color="tab:green", ls="--", label="chosen l")
    ax.axvspan(cap + 0.5, ls[-1] + 0.5, color="0.9", label="beyond cap")
    ax.set_xlabel("layers l")
    ax.set_ylabel("predicted cost T_l")
    ax.set_title(f"N={N}, w={w}, s={s}, n={n}")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_run(trajectories, reports, path, ground_truth=None):
    """Top view of trajectories plus per-pass BA cost."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    if ground_truth is not None:
        g = np.array([p.translation for p in ground_truth])
        ax0.plot(g[:, 0], g[:, 1], "k-", lw=2, alpha=0.4, label="ground truth")
    for name, poses in trajectories.items():
        t = np.array([p.translation for p in poses])
        ax0.plot(t[:, 0], t[:, 1], lw=1, label=name)
    ax0.set_aspect("equal")
    ax0.set_xlabel("x [m]")
    ax0.set_ylabel("y [m]")
    ax0.legend(frameon=False, fontsize=8)
    if reports:
        k = [r.pass_index for r in reports]
        ax1.semilogy(k, [max(abs(r.cost_ba), 1e-300) for r in reports], "o-", label="top BA cost")
        pg = [r.cost_pg for r in reports]
        if np.all(np.isfinite(pg)):
            ax1.semilogy(k, [max(abs(c), 1e-300) for c in pg], "s--", label="pose graph cost")
        ax1.set_xlabel("pass")
        ax1.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_bench(rows, path):
    """Wall time and translation ATE against frame count, one line per mode."""
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(10, 4))
    modes = sorted({r["mode"] for r in rows})
    for mode in modes:
        sel = sorted((r for r in rows if r["mode"] == mode), key=lambda r: r["frames"])
        N = [r["frames"] for r in sel]
        ax0.plot(N, [r["wall_s"] for r in sel], "o-", label=mode)
        ax1.plot(N, [r["trans_rmse_m"] for r in sel], "o-", label=mode)
    ax0.set_xlabel("frames")
    ax0.set_ylabel("wall time [s]")
    ax1.set_xlabel("frames")
    ax1.set_ylabel("translation ATE [m]")
    ax0.legend(frameon=False, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
