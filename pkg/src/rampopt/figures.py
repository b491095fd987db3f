"""Plot rendering for run reports: control schedules and responses next
to the CSVs, iteration progress for optimization runs. Headless backend,
files only."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)
import numpy as np  # noqa: E402

__all__ = ["controls_figure", "iterations_figure"]


def controls_figure(record, path) -> str:
    """Controls and responses over time for one forward run (2x2 grid)."""
    s = record.schedule
    times = np.concatenate([[0.0], s.times])
    t_e = np.concatenate([[np.nan], s.t_e])
    omega = np.concatenate([[0.0], s.omega])

    fig, axes = plt.subplots(2, 2, figsize=(9.5, 6.5), sharex=True)
    (ax_te, ax_om), (ax_sig, ax_temp) = axes
    ax_te.step(times, t_e, where="post", color="tab:red")
    ax_te.set_ylabel(r"$T_e$ [$^\circ$C]")
    ax_te.set_title("gas temperature")
    ax_om.step(times, omega, where="post", color="tab:blue")
    ax_om.set_ylabel(r"$\omega$ [Hz]")
    ax_om.set_title("rotation speed")
    ax_sig.plot(times, record.step_max_sigma, "o-", color="tab:purple",
                markersize=3)
    ax_sig.set_ylabel(r"max $\sigma_v$ [MPa]")
    ax_sig.set_title("peak von Mises stress")
    ax_temp.plot(times, record.step_max_temp, "o-", color="tab:orange",
                 markersize=3)
    ax_temp.set_ylabel(r"max $T$ [$^\circ$C]")
    ax_temp.set_title("peak material temperature")
    for ax in (ax_sig, ax_temp):
        ax.set_xlabel("time [s]")
    for ax in axes.ravel():
        ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)


def iterations_figure(history, path) -> str:
    """Objective and constraint violation across optimizer iterations."""
    iters = [rec.iteration for rec in history]
    J = [1000.0 * rec.f for rec in history]
    viol = [max(rec.max_violation, 1e-16) for rec in history]

    fig, ax = plt.subplots(figsize=(7.5, 4.5))
    ax.plot(iters, J, "o-", color="tab:purple", markersize=3,
            label=r"$J$ [MPa]")
    ax.set_xlabel("iteration")
    ax.set_ylabel(r"$J$ [MPa]")
    ax.grid(alpha=0.3)
    twin = ax.twinx()
    twin.semilogy(iters, viol, "s--", color="tab:gray", markersize=3,
                  label="max violation")
    twin.set_ylabel("max constraint violation [-]")
    lines, labels = ax.get_legend_handles_labels()
    lines2, labels2 = twin.get_legend_handles_labels()
    ax.legend(lines + lines2, labels + labels2, loc="upper right")
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return str(path)
