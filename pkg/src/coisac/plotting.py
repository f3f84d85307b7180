"""PNG figures written next to the CSV outputs of a sweep."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

LABELS = {
    "single_bs": "single BS",
    "param_fusion": "parameter-level fusion",
    "hgamp": "hierarchical MP",
    "signal_ml": "signal-level ML",
}
MARKERS = {"single_bs": "v", "param_fusion": "s", "hgamp": "o", "signal_ml": "^"}


def plot_rmse(summary, out_dir) -> list:
    """rmse_position.png and rmse_velocity.png, log-scale RMSE against SNR."""
    out = Path(out_dir)
    paths = []
    methods = []
    for r in summary.rows:
        if r.method not in methods:
            methods.append(r.method)
    for attr, ci, ylabel, name in (("pos_rmse_m", "ci_pos", "position RMSE (m)", "rmse_position.png"),
                                   ("vel_rmse_mps", "ci_vel", "velocity RMSE (m/s)", "rmse_velocity.png")):
        fig, ax = plt.subplots(figsize=(5.5, 4))
        for m in methods:
            rows = [r for r in summary.rows if r.method == m and getattr(r, attr) is not None]
            if not rows:
                continue
            ax.errorbar([r.snr_db for r in rows], [getattr(r, attr) for r in rows],
                        yerr=[getattr(r, ci) for r in rows], marker=MARKERS.get(m, "."),
                        capsize=3, label=LABELS.get(m, m))
        ax.set_yscale("log")
        ax.set_xlabel("SNR (dB)")
        ax.set_ylabel(ylabel)
        ax.grid(True, which="both", alpha=0.3)
        ax.legend(fontsize=8)
        fig.tight_layout()
        p = out / name
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths


def plot_overhead(table, path) -> Path:
    """Side-by-side bars of mean flops and mean uplinked scalars (log scale)."""
    fig, axes = plt.subplots(1, 2, figsize=(8, 3.5))
    names = [LABELS.get(r["method"], r["method"]) for r in table]
    axes[0].bar(names, [max(r["mean_flops"], 1.0) for r in table])
    axes[0].set_ylabel("flops per trial")
    axes[1].bar(names, [max(r["mean_scalars_uplinked"], 1.0) for r in table])
    axes[1].set_ylabel("uplinked scalars per trial")
    for ax in axes:
        ax.set_yscale("log")
        ax.tick_params(axis="x", labelrotation=30, labelsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_scatter(rows, path) -> Path:
    """Per-BS and fused position estimates around the truth."""
    fig, ax = plt.subplots(figsize=(5, 5))
    for r in rows:
        if r["kind"] == "truth":
            ax.plot(r["x_m"], r["y_m"], "k*", ms=14, label="truth")
        elif r["kind"] == "bs_estimate":
            ax.plot(r["x_m"], r["y_m"], "x", ms=8, label=f"BS {r['bs']}")
        else:
            ax.plot(r["x_m"], r["y_m"], MARKERS.get(r["method"], "o"), mfc="none", ms=9,
                    label=LABELS.get(r["method"], r["method"]))
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
