"""PNG figures that accompany the CSV output (matplotlib, Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import TwoSlopeNorm  # noqa: E402

__all__ = ["STYLE", "plot_sweep", "plot_kappa", "plot_coupling"]

STYLE = {
    "figure.figsize": (5.0, 3.6),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "lines.linewidth": 1.4,
    "legend.frameon": False,
    "svg.hashsalt": "lpcontract",
}

# PNG metadata would otherwise carry the matplotlib version string
_META = {"Software": None}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.savefig(path, metadata=_META, bbox_inches="tight")
    plt.close(fig)
    return path


def plot_sweep(sweep, path, color_range=(-4.0, 4.0)) -> Path:
    lo, hi = color_range
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        V = np.clip(sweep.values, lo, hi)
        norm = TwoSlopeNorm(vcenter=0.0, vmin=lo, vmax=hi) if lo < 0 < hi else None
        mesh = ax.pcolormesh(sweep.theta2, sweep.p, V, cmap="RdBu_r", norm=norm, shading="nearest")
        fig.colorbar(mesh, ax=ax, label=r"$\mathcal{J}(p\eta)/p$")
        ax.set_xlabel(r"$\theta^2$")
        ax.set_ylabel(r"$p$")
        return _save(fig, path)


def plot_kappa(times, curves: dict, path) -> Path:
    """``curves`` maps p to (values, standard errors) aligned with ``times``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        for p, (vals, ses) in sorted(curves.items()):
            ax.errorbar(times, vals, yerr=ses, marker="o", ms=3, capsize=2, label=f"p = {p:g}")
        ax.set_yscale("log")
        ax.set_xlabel("t")
        ax.set_ylabel(r"$\hat\kappa_p(t)$")
        ax.legend()
        return _save(fig, path)


def plot_coupling(trace, path, rate_line: tuple[float, float] | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        t = trace.times
        cost = trace.mean_cost
        ax.plot(t, trace.mean_f_R, label=r"$E f(R_t)$")
        ax.plot(t, trace.mean_g_S, label=r"$E g(S_t)$")
        ax.plot(t, trace.mean_omega, label=r"$E\,\omega$", ls="--")
        ax.fill_between(t, cost - 3 * trace.se_cost, cost + 3 * trace.se_cost, alpha=0.2, lw=0)
        if rate_line is not None:
            a, b = rate_line
            ax.plot(t, np.exp(a - b * t), color="k", lw=0.8, label="fitted decay")
        ax.set_xlabel("t")
        ax.legend()
        return _save(fig, path)
