"""Loss landscapes over a 2-D feature plane and normalized-feature scatters.

Both produce plain CSV tables meant for an external plotter.
"""

import csv

import numpy as np

from camri.errors import UnsupportedDimensionError
from camri.losses import HeadContext, loss_eval
from camri.network import forward
from camri.numerics import normalize_rows

DEFAULT_RANGE = (-3.0, 3.0)
DEFAULT_RESOLUTION = 200


def default_weight_layout():
    """Three unit columns at 0, 120 and 240 degrees (ground truth is column 0)."""
    angles = 2 * np.pi * np.arange(3) / 3
    return np.vstack([np.cos(angles), np.sin(angles)])


def parse_weight_layout(text):
    """``"x0,y0;x1,y1;..."`` -> (2, K) matrix, one column per ``;``-separated pair."""
    cols = [[float(v) for v in part.split(",")] for part in text.split(";") if part.strip()]
    W = np.array(cols, dtype=np.float64).T
    if W.shape[0] != 2:
        raise UnsupportedDimensionError(f"weight layout must be 2-D, got {W.shape[0]}-D columns")
    return W


def contour_grid(cfg, W, b=None, label=0, lo=DEFAULT_RANGE[0], hi=DEFAULT_RANGE[1], resolution=DEFAULT_RESOLUTION):
    """Per-sample loss at every point of a ``resolution`` x ``resolution`` grid of z.

    Returns ``(points, values)`` with points ordered y-major. Angular losses are
    undefined at z = 0; those points get NaN.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.shape[0] != 2:
        raise UnsupportedDimensionError(f"contours need a 2-D feature space, got D={W.shape[0]}")
    axis = np.linspace(lo, hi, resolution)
    yy, xx = np.meshgrid(axis, axis, indexing="ij")
    points = np.column_stack([xx.ravel(), yy.ravel()])
    values = np.full(len(points), np.nan)
    valid = np.ones(len(points), dtype=bool)
    if cfg.angular:
        valid = np.linalg.norm(points, axis=1) > 0
    b = np.zeros(W.shape[1]) if b is None else b
    labels = np.full(int(valid.sum()), label)
    out = loss_eval(cfg, HeadContext(points[valid], W, b, labels))
    values[valid] = out.per_sample
    return points, values


def write_contour_csv(path, points, values):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["x", "y", "loss"])
        for (x, y), v in zip(points, values):
            writer.writerow([repr(float(x)), repr(float(y)), repr(float(v))])


def scatter_table(model, X, labels):
    """Unit-normalized 2-D features of every sample and unit weight columns."""
    if model.config.feature_dim != 2:
        raise UnsupportedDimensionError(f"scatter needs feature_dim 2, model has {model.config.feature_dim}")
    z, _ = forward(model, X)
    keep = np.linalg.norm(z, axis=1) > 0
    zn, _ = normalize_rows(z[keep], axis=1)
    wn, _ = normalize_rows(model.head_W, axis=0)
    return np.asarray(labels)[keep], zn, wn


def write_scatter_csv(path, labels, zn, wn):
    """Rows ``z,label,z1,z2`` per sample then ``W,k,w1,w2`` per weight column."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "label", "z1_norm", "z2_norm"])
        for label, (a, c) in zip(labels, zn):
            writer.writerow(["z", int(label), repr(float(a)), repr(float(c))])
        for k, (a, c) in enumerate(wn.T):
            writer.writerow(["W", k, repr(float(a)), repr(float(c))])
