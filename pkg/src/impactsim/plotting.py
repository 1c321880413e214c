"""Static figures for campaign and metrics reports (files only, no display)."""

from __future__ import annotations

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def position_error_bars(pos: dict, path):
    ids = pos["shot_id"]
    x = np.arange(len(ids))
    fig, ax = plt.subplots(figsize=(max(6, 0.4 * len(ids)), 3.5))
    ax.bar(x - 0.2, pos["top_cm"], 0.4, label="top layer")
    ax.bar(x + 0.2, pos["bottom_cm"], 0.4, label="bottom layer")
    if len(ids) <= 40:
        ax.set_xticks(x, [str(i) for i in ids], rotation=90 if len(ids) > 20 else 0)
    ax.set_xlabel("shot")
    ax.set_ylabel("position error (cm)")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def amplitude_vs_size(amp: dict, path):
    fig, ax = plt.subplots(figsize=(5, 4))
    d = np.asarray(amp["diameter_um"], float)
    a = np.asarray(amp["amplitude_v"], float)
    mats = np.asarray(amp["material"])
    for m in sorted(set(amp["material"])):
        sel = mats == m
        ax.scatter(d[sel], a[sel], s=14, label=m)
    reg = amp.get("regression")
    if reg:
        ax.plot(reg["line_x"], reg["line_y"], "k--",
                label=f"fit slope {reg['slope']:.2f}, R$^2$ {reg['r_squared']:.2f}")
    ax.set_xscale("log")
    ax.set_yscale("log")
    ax.set_xlabel("particle diameter (um)")
    ax.set_ylabel("peak amplitude (V)")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def spectrum_plot(sp, path, title=None):
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.plot(sp.freqs / 1e3, sp.power_dbfs, lw=0.7)
    ax.set_xlabel("frequency (kHz)")
    ax.set_ylabel("power (dBFS)")
    ax.set_ylim(max(-160, np.nanmin(sp.power_dbfs[1:]) - 5), 5)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def campaign_figures(plot_data: dict, out_dir) -> list[str]:
    paths = []
    pos = plot_data["position_error"]
    if pos["shot_id"]:
        p = os.path.join(out_dir, "position_error.png")
        position_error_bars(pos, p)
        paths.append(p)
    amp = plot_data["amplitude_vs_size"]
    if amp["diameter_um"]:
        p = os.path.join(out_dir, "amplitude_vs_size.png")
        amplitude_vs_size(amp, p)
        paths.append(p)
    return paths
