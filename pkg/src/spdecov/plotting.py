"""Static SVG charts for study results."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def rate_chart(rows, path, guides=(0.5,), title=None):
    """Log-log RMSE against delta, one series per smoothness, with reference slopes."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    by_nu: dict = {}
    for r in rows:
        by_nu.setdefault(r["nu"], []).append(r)
    all_d = np.array([r["delta"] for r in rows])
    all_e = np.array([r["rmse"] for r in rows])
    for nu, rs in sorted(by_nu.items()):
        rs = sorted(rs, key=lambda r: r["delta"])
        d = np.array([r["delta"] for r in rs])
        e = np.array([r["rmse"] for r in rs])
        se = np.array([r["stderr"] for r in rs])
        ax.errorbar(d, e, yerr=se, marker="o", capsize=2, label=f"nu={nu:g}")
    # guides anchored at the largest delta and the geometric mean of the errors there
    d_ref = np.array([all_d.min(), all_d.max()])
    anchor = np.exp(np.mean(np.log(all_e[all_d == all_d.max()])))
    for s in guides:
        ax.plot(d_ref, anchor * (d_ref / d_ref[1]) ** s, "k--", lw=0.8, alpha=0.6)
        ax.annotate(f"slope {s:g}", (d_ref[0], anchor * (d_ref[0] / d_ref[1]) ** s), fontsize=8)
    ax.set_xscale("log", base=2)
    ax.set_yscale("log", base=2)
    ax.set_xlabel("delta")
    ax.set_ylabel("RMSE")
    if title:
        ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    return path


def rejection_heatmap(rows, path, title=None):
    """Truth-by-null matrix of rejection rates."""
    from .experiments import rejection_matrix

    truths, nulls, m = rejection_matrix(rows)
    fig, ax = plt.subplots(figsize=(1.0 + 0.6 * len(nulls), 1.0 + 0.5 * len(truths)))
    im = ax.imshow(m, vmin=0.0, vmax=1.0, cmap="viridis")
    ax.set_xticks(range(len(nulls)), nulls, rotation=60, ha="right", fontsize=7)
    ax.set_yticks(range(len(truths)), truths, fontsize=7)
    for i in range(len(truths)):
        for j in range(len(nulls)):
            if np.isfinite(m[i, j]):
                ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center", fontsize=6,
                        color="white" if m[i, j] < 0.5 else "black")
    ax.set_xlabel("null")
    ax.set_ylabel("truth")
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.savefig(path, format="svg", bbox_inches="tight")
    plt.close(fig)
    return path
