"""File formats: MFLD fields, 8-bit PGM images and slice-stack volumes.

MFLD layout::

    MFLD <dim> <ncomponents> <nx> <ny> [<nz>] <spacing>
    # optional comment lines
    <values>

Values are written component-major, then row-major with x fastest, with 17
significant digits so doubles round-trip exactly.  A transformation stores
its mapped coordinates ``T(x)``; a scalar field stores its values.
"""
from __future__ import annotations

import os
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .errors import DimensionError, FormatError, GridMismatch
from .fields import GridSpec, Image, ScalarField, Transformation

DIRECTION_NOTE = ("direction: resample(moving, T) samples the moving image at T(x); "
                  "T maps fixed/template coordinates into the moving image")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _write_mfld(path, grid: GridSpec, comps: np.ndarray, comments=()):
    lines = ["MFLD " + " ".join(str(t) for t in [grid.dim, comps.shape[0],
                                                   *grid.header_tokens(), _fmt(grid.spacing)])]
    lines += ["# " + c for c in comments]
    for comp in comps:
        for row in comp.reshape(-1, grid.nx):
            lines.append(" ".join(_fmt(v) for v in row))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _read_mfld(path):
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or not text[0].startswith("MFLD"):
        raise FormatError(f"{path}: not an MFLD file")
    head = text[0].split()
    try:
        dim, ncomp = int(head[1]), int(head[2])
        if dim not in (2, 3) or len(head) != 4 + dim:
            raise FormatError(f"{path}: malformed header {text[0]!r}")
        counts = [int(t) for t in head[3:3 + dim]]
        spacing = float(head[3 + dim])
    except (IndexError, ValueError) as exc:
        raise FormatError(f"{path}: malformed header {text[0]!r}") from exc
    comments = [ln[1:].strip() for ln in text[1:] if ln.startswith("#")]
    body = " ".join(ln for ln in text[1:] if not ln.startswith("#"))
    grid = GridSpec(counts[0], counts[1], counts[2] if dim == 3 else 1, spacing)
    vals = np.array(body.split(), dtype=float)
    if vals.size != ncomp * grid.size:
        raise FormatError(f"{path}: expected {ncomp * grid.size} values, found {vals.size}")
    return grid, vals.reshape(ncomp, *grid.shape), comments


def write_transformation(path, T: Transformation, comments=()):
    _write_mfld(path, T.grid, T.coords, [DIRECTION_NOTE, *comments])


def read_transformation(path) -> Transformation:
    grid, comps, _ = _read_mfld(path)
    if comps.shape[0] != grid.dim:
        raise FormatError(f"{path}: {comps.shape[0]} components for a {grid.dim}D grid")
    return Transformation.from_coordinates(grid, comps)


def write_scalar(path, field: ScalarField, comments=()):
    _write_mfld(path, field.grid, field.values[None], comments)


def read_scalar(path) -> ScalarField:
    grid, comps, _ = _read_mfld(path)
    if comps.shape[0] != 1:
        raise FormatError(f"{path}: expected one component, found {comps.shape[0]}")
    return ScalarField(grid, comps[0])


def read_mfld_comments(path) -> list:
    return _read_mfld(path)[2]


def write_pgm(path, image: Image, plain: bool = False):
    """8-bit PGM; intensities in [0, 1] are rescaled to 0..255."""
    if image.grid.dim != 2:
        raise DimensionError("PGM holds a single 2D slice")
    data = np.rint(image.values * 255.0).astype(np.uint8)
    if plain:
        ny, nx = data.shape
        rows = "\n".join(" ".join(str(v) for v in row) for row in data)
        Path(path).write_text(f"P2\n{nx} {ny}\n255\n{rows}\n", encoding="ascii")
    else:
        PILImage.fromarray(data, mode="L").save(path, format="PPM")


def read_pgm(path, spacing: float = 1.0) -> Image:
    """Read a P2/P5 PGM and normalise by its maxval to [0, 1]."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic not in (b"P2", b"P5"):
        raise FormatError(f"{path}: not a P2/P5 PGM")
    try:
        with PILImage.open(path) as im:
            data = np.asarray(im, dtype=float)
            maxval = 255.0 if im.mode == "L" else float(2 ** 16 - 1)
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return Image(GridSpec.from_shape(data.shape, spacing), data / maxval)


def _resolve(base: Path, entry: str) -> Path:
    p = Path(entry)
    return p if p.is_absolute() else base / p


def read_path_list(manifest) -> list:
    """Non-empty, non-comment lines of a manifest, resolved next to it."""
    manifest = Path(manifest)
    entries = [ln.strip() for ln in manifest.read_text(encoding="utf-8").splitlines()]
    paths = [_resolve(manifest.parent, e) for e in entries if e and not e.startswith("#")]
    if not paths:
        raise FormatError(f"{manifest}: manifest lists no files")
    return paths


def write_path_list(manifest, paths):
    manifest = Path(manifest)
    rel = [os.path.relpath(p, manifest.parent) for p in paths]
    manifest.write_text("\n".join(rel) + "\n", encoding="utf-8")


def read_volume(manifest, spacing: float = 1.0) -> Image:
    """Stack the PGM slices listed (in z order) in ``manifest``."""
    slices = [read_pgm(p, spacing) for p in read_path_list(manifest)]
    shapes = {s.values.shape for s in slices}
    if len(shapes) != 1:
        raise GridMismatch(f"{manifest}: slices differ in size {sorted(shapes)}")
    vol = np.stack([s.values for s in slices])
    return Image(GridSpec.from_shape(vol.shape, spacing), vol)


def write_volume(manifest, volume: Image, stem: str = "slice"):
    if volume.grid.dim != 3:
        raise DimensionError("volume writer needs a 3D image")
    manifest = Path(manifest)
    paths = []
    for k, sl in enumerate(volume.values):
        p = manifest.parent / f"{stem}_{k:03d}.pgm"
        write_pgm(p, Image(GridSpec.from_shape(sl.shape, volume.grid.spacing), sl))
        paths.append(p)
    write_path_list(manifest, paths)
    return paths


def read_image(path, spacing: float = 1.0) -> Image:
    """A PGM image, or a volume when ``path`` is a slice manifest."""
    with open(path, "rb") as fh:
        magic = fh.read(2)
    if magic in (b"P2", b"P5"):
        return read_pgm(path, spacing)
    return read_volume(path, spacing)
