"""Figure rendering for the reporting commands.

All figures are written straight to files with the non-interactive Agg
backend; nothing here opens a window.
"""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def plot_element_bands(path, xs: np.ndarray, mean: np.ndarray,
                       lower: np.ndarray | None, upper: np.ndarray | None,
                       truth: np.ndarray | None = None,
                       elements=None, title: str | None = None):
    """Grid of per-element covariance curves with credible bands.

    mean (and the optional bands/truth) are (n, p, p); elements is a list of
    (i, j) index pairs (0-based).  Defaults to the first few diagonal and
    off-diagonal entries.
    """
    n, p, _ = mean.shape
    x = np.asarray(xs, float).reshape(n, -1)[:, 0]
    order = np.argsort(x)
    if elements is None:
        elements = [(i, i) for i in range(min(p, 3))]
        if p > 1:
            elements += [(0, j) for j in range(1, min(p, 4))]
    ncol = min(3, len(elements))
    nrow = int(np.ceil(len(elements) / ncol))
    fig, axes = plt.subplots(nrow, ncol, figsize=(4 * ncol, 3 * nrow),
                             squeeze=False)
    for ax in axes.ravel()[len(elements):]:
        ax.set_visible(False)
    for ax, (i, j) in zip(axes.ravel(), elements):
        ax.plot(x[order], mean[order, i, j], color="C0", label="posterior mean")
        if lower is not None and upper is not None:
            ax.fill_between(x[order], lower[order, i, j], upper[order, i, j],
                            color="C0", alpha=0.25, label="95% HPD")
        if truth is not None:
            ax.plot(x[order], truth[order, i, j], color="k", ls="--",
                    label="truth")
        ax.set_title(f"$\\Sigma_{{{i + 1},{j + 1}}}(x)$")
        ax.set_xlabel("x")
    handles, labels = axes.ravel()[0].get_legend_handles_labels()
    if handles:
        fig.legend(handles, labels, loc="lower right")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_error_curves(path, xs: np.ndarray, errors: dict[str, np.ndarray],
                      title: str | None = None):
    """Per-grid-point error curves for several models on one axis."""
    fig, ax = plt.subplots(figsize=(7, 4))
    x = np.asarray(xs, float).reshape(len(next(iter(errors.values()))), -1)[:, 0]
    order = np.argsort(x)
    for name, err in errors.items():
        ax.plot(x[order], np.asarray(err)[order], label=name)
    ax.set_xlabel("x")
    ax.set_ylabel("Frobenius error")
    ax.legend()
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_traces(path, traces: dict[str, np.ndarray],
                title: str | None = None):
    """Stacked trace plots of scalar (or few-column) chain summaries."""
    names = list(traces)
    fig, axes = plt.subplots(len(names), 1, figsize=(7, 2.2 * len(names)),
                             squeeze=False)
    for ax, name in zip(axes[:, 0], names):
        arr = np.atleast_2d(np.asarray(traces[name], float).T).T
        for c in range(min(arr.shape[1], 8)):
            ax.plot(arr[:, c], lw=0.8)
        ax.set_ylabel(name)
    axes[-1, 0].set_xlabel("kept draw")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
