"""Figures written by the command line tools.

Everything here draws onto a fresh figure with the non-interactive Agg
backend and saves it to disk, so it works on headless machines.
"""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_particles(path, particles, color="speed", extents=None, title=None):
    """Scatter plot of particle positions (first two axes) colored by a field.

    ``color`` is ``"speed"``, ``"eps"`` (equivalent plastic strain) or
    ``"pressure"``.
    """
    x = np.asarray(particles.x, dtype=float)
    if color == "speed":
        c = np.linalg.norm(particles.v, axis=1)
        label = "speed [m/s]"
    elif color == "eps":
        c = np.asarray(particles.eps, dtype=float)
        label = "equivalent plastic strain [-]"
    elif color == "pressure":
        c = -np.trace(particles.sigma, axis1=1, axis2=2) / 3.0
        label = "pressure [Pa]"
    else:
        raise ValueError(f"unknown color field '{color}'")
    width = 8.0
    if extents is not None:
        height = max(2.0, min(8.0, width * extents[1] / extents[0] + 1.0))
    else:
        height = 4.0
    fig, ax = plt.subplots(figsize=(width, height))
    sc = ax.scatter(x[:, 0], x[:, 1], c=c, s=2, cmap="viridis", linewidths=0)
    fig.colorbar(sc, ax=ax, label=label)
    if extents is not None:
        ax.set_xlim(0, extents[0])
        ax.set_ylim(0, extents[1])
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_series(path, t, series, xlabel="t [s]", ylabel="", logy=False):
    """Line plot of several named series sharing one abscissa."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for name, y in series.items():
        ax.plot(t, y, label=name)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if len(series) > 1:
        ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_inversion(path, loss_history, param_history, labels=None, truth=None):
    """Loss (log scale) and parameter trajectories against epoch."""
    loss = np.asarray(loss_history, dtype=float)
    P = np.atleast_2d(np.asarray(param_history, dtype=float))
    fig, (a0, a1) = plt.subplots(1, 2, figsize=(10, 4))
    a0.semilogy(np.arange(len(loss)), np.maximum(loss, 1e-300))
    a0.set_xlabel("epoch")
    a0.set_ylabel("loss")
    a0.grid(alpha=0.3)
    if P.shape[1] <= 10:
        labels = labels or [f"p{i}" for i in range(P.shape[1])]
        for i in range(P.shape[1]):
            line, = a1.plot(np.arange(len(P)), P[:, i], label=labels[i])
            if truth is not None and np.size(truth) == P.shape[1]:
                a1.axhline(np.ravel(truth)[i], color=line.get_color(), ls="--", lw=0.8)
        a1.set_ylabel("parameter value")
        a1.legend(fontsize=8)
    else:
        a1.plot(np.arange(len(P)), np.linalg.norm(P, axis=1))
        a1.set_ylabel("parameter norm")
    a1.set_xlabel("epoch")
    a1.grid(alpha=0.3)
    return _save(fig, path)


def plot_front(path, t, numerical, analytical, labels=("MPM", "shallow water")):
    """Front position against time, numerical and analytical.

    ``numerical`` is one array or a mapping from a run name to an array.
    """
    fig, ax = plt.subplots(figsize=(6, 4))
    runs = numerical if isinstance(numerical, dict) else {labels[0]: numerical}
    for name, x in runs.items():
        ax.plot(t, x, "o-", ms=3, label=name)
    ax.plot(t, analytical, "k--", label=labels[1])
    ax.set_xlabel("t [s]")
    ax.set_ylabel("front position [m]")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def plot_profile(path, y, profiles):
    """Initial-velocity profiles v_x(y); ``profiles`` maps a name to values on ``y``."""
    fig, ax = plt.subplots(figsize=(4, 5))
    for name, v in profiles.items():
        ax.plot(v, y, label=name)
    ax.set_xlabel("v_x [m/s]")
    ax.set_ylabel("y [m]")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


__all__ = ["plot_particles", "plot_series", "plot_inversion", "plot_front", "plot_profile"]
