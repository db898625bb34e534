"""Deformed-grid rasterisation, summary statistics and report figures.

Everything here draws through matplotlib's object API on an Agg canvas, so
no global pyplot state is touched and renders are deterministic.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.collections import LineCollection
from matplotlib.figure import Figure

from .errors import DimensionError
from .fields import GridSpec, Image, Transformation, curl2d, curl3d, jacobian_det

_DPI = 100


def _canvas(width_px: int, height_px: int):
    fig = Figure(figsize=(width_px / _DPI, height_px / _DPI), dpi=_DPI)
    return fig, FigureCanvasAgg(fig)


def render_grid(T: Transformation, stride: int = 4, scale: int = 4,
                linewidth: float = 1.0) -> Image:
    """Rasterise every ``stride``-th grid line of ``T`` as black on white.

    The output image has ``scale`` pixels per grid spacing along each axis;
    lines are anti-aliased by coverage.
    """
    if T.grid.dim != 2:
        raise DimensionError("render_grid draws 2D maps; render 3D maps slice by slice")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    grid = T.grid
    x, y = T.coords
    lx, ly = grid.lengths
    width, height = grid.nx * scale, grid.ny * scale
    fig, canvas = _canvas(width, height)
    ax = fig.add_axes((0, 0, 1, 1))
    ax.set_axis_off()
    rows = list(range(0, grid.ny, stride))
    cols = list(range(0, grid.nx, stride))
    if rows[-1] != grid.ny - 1:
        rows.append(grid.ny - 1)
    if cols[-1] != grid.nx - 1:
        cols.append(grid.nx - 1)
    segments = [np.column_stack([x[r], y[r]]) for r in rows]
    segments += [np.column_stack([x[:, c], y[:, c]]) for c in cols]
    ax.add_collection(LineCollection(segments, colors="black", linewidths=linewidth,
                                     antialiaseds=True))
    # half a cell of margin keeps the outer lines fully inside the raster
    pad = 0.5 * grid.spacing
    ax.set_xlim(-pad, lx + pad)
    ax.set_ylim(ly + pad, -pad)
    canvas.draw()
    rgba = np.asarray(canvas.buffer_rgba(), dtype=float)[..., :3] / 255.0
    gray = rgba.mean(axis=2)
    return Image(GridSpec.from_shape(gray.shape), gray)


def stats_report(T: Transformation) -> dict:
    """Min/max/mean of J and curl (curl norm in 3D) plus the largest displacement."""
    jac = jacobian_det(T).values
    out = {"dim": T.grid.dim, "shape": list(T.grid.shape), "spacing": T.grid.spacing,
           "J": {"min": float(jac.min()), "max": float(jac.max()), "mean": float(jac.mean())}}
    if T.grid.dim == 2:
        curl = curl2d(T).values
        out["curl"] = {"min": float(curl.min()), "max": float(curl.max()),
                       "mean": float(curl.mean())}
    else:
        norm = curl3d(T).norm()
        out["curl_norm"] = {"min": float(norm.min()), "max": float(norm.max()),
                            "mean": float(norm.mean())}
    out["max_displacement"] = T.max_displacement()
    out["boundary_is_identity"] = T.boundary_is_identity()
    return out


def write_json(path, payload: dict):
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _save(fig, path):
    FigureCanvasAgg(fig)
    fig.savefig(path, dpi=_DPI, metadata={"Software": None})
    return str(path)


def figure_grids(path, maps: dict, stride: int = 4):
    """Side-by-side deformed grids, one panel per named 2D map."""
    fig = Figure(figsize=(3.2 * len(maps), 3.4), dpi=_DPI)
    for k, (name, T) in enumerate(maps.items()):
        ax = fig.add_subplot(1, len(maps), k + 1)
        ax.imshow(render_grid(T, stride, scale=3).values, cmap="gray", vmin=0, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def figure_images(path, images: dict):
    fig = Figure(figsize=(3.0 * len(images), 3.2), dpi=_DPI)
    for k, (name, img) in enumerate(images.items()):
        ax = fig.add_subplot(1, len(images), k + 1)
        ax.imshow(img.values, cmap="gray", vmin=0, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def figure_fields(path, T: Transformation, title: str = ""):
    """Jacobian and curl maps of a 2D map with their colour bars."""
    fig = Figure(figsize=(7.0, 3.2), dpi=_DPI)
    for k, (name, vals) in enumerate((("J", jacobian_det(T).values),
                                      ("curl", curl2d(T).values))):
        ax = fig.add_subplot(1, 2, k + 1)
        im = ax.imshow(vals, cmap="viridis")
        fig.colorbar(im, ax=ax, fraction=0.046)
        ax.set_title(f"{title} {name}".strip(), fontsize=9)
        ax.set_axis_off()
    fig.tight_layout()
    return _save(fig, path)


def figure_trace(path, traces: dict, ylabel: str, logy: bool = True):
    fig = Figure(figsize=(4.8, 3.4), dpi=_DPI)
    ax = fig.add_subplot(1, 1, 1)
    for name, tr in traces.items():
        ax.plot(np.arange(len(tr)), tr, label=name, lw=1.2)
    if logy:
        ax.set_yscale("log")
    ax.set_xlabel("accepted step")
    ax.set_ylabel(ylabel)
    if len(traces) > 1:
        ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def figure_bars(path, groups: dict, labels, ylabel: str):
    """Grouped bars, e.g. error ratios per initial image for several passes."""
    fig = Figure(figsize=(5.2, 3.4), dpi=_DPI)
    ax = fig.add_subplot(1, 1, 1)
    n = len(groups)
    width = 0.8 / max(n, 1)
    pos = np.arange(len(labels))
    for k, (name, vals) in enumerate(groups.items()):
        ax.bar(pos + (k - (n - 1) / 2) * width, vals, width, label=name)
    ax.set_xticks(pos, labels)
    ax.set_ylabel(ylabel)
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)
