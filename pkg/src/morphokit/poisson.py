"""Dirichlet Poisson solves for the constraint ``Lap w = F``.

The default path diagonalises the 5-point (7-point in 3D) Laplacian with a
type-I discrete sine transform.  Red-black SOR is kept as an independent
cross-check and for callers that want an iterative solver.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft

from .errors import ConvergenceFailure, GridMismatch
from .fields import GridSpec, ScalarField, Transformation

_WORKERS = 1


def set_threads(k: int) -> None:
    """Cap the worker count handed to the FFT backend."""
    global _WORKERS
    _WORKERS = max(1, int(k))


@dataclass(frozen=True)
class PoissonOptions:
    method: str = "direct-spectral"
    tol: float = 1e-10
    max_iter: int = 20000

    def __post_init__(self):
        if self.method not in ("direct-spectral", "iterative"):
            raise ValueError(f"unknown Poisson method {self.method!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")


def laplacian(values: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Discrete Laplacian at interior nodes; boundary entries are zero."""
    out = np.zeros(grid.shape)
    inner = grid.interior()
    acc = -2.0 * grid.dim * values[inner]
    for ax in range(grid.dim):
        lo = tuple(slice(0, -2) if a == ax else slice(1, -1) for a in range(grid.dim))
        hi = tuple(slice(2, None) if a == ax else slice(1, -1) for a in range(grid.dim))
        acc = acc + values[lo] + values[hi]
    out[inner] = acc / grid.spacing ** 2
    return out


_EIG_CACHE: dict = {}


def _eigenvalues(grid: GridSpec) -> np.ndarray:
    key = (grid.shape, grid.spacing)
    if key not in _EIG_CACHE:
        parts = []
        for ax, n in enumerate(grid.shape):
            k = np.arange(1, n - 1)
            lam = (2.0 * np.cos(np.pi * k / (n - 1)) - 2.0) / grid.spacing ** 2
            shape = [1] * grid.dim
            shape[ax] = n - 2
            parts.append(lam.reshape(shape))
        eig = sum(parts)
        eig.setflags(write=False)
        _EIG_CACHE[key] = eig
    return _EIG_CACHE[key]


def solve_zero(rhs: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Spectral solve of ``Lap w = rhs`` with ``w = 0`` on the boundary.

    ``rhs`` is a full-grid array; only its interior entries are used.
    """
    inner = rhs[grid.interior()]
    coef = scipy.fft.dstn(inner, type=1, workers=_WORKERS)
    coef /= _eigenvalues(grid)
    out = np.zeros(grid.shape)
    out[grid.interior()] = scipy.fft.idstn(coef, type=1, workers=_WORKERS)
    return out


def _sor(rhs: np.ndarray, grid: GridSpec, start: np.ndarray, opts: PoissonOptions):
    """Red-black SOR on the interior; boundary values of ``start`` are kept."""
    w = start.copy()
    h2 = grid.spacing ** 2
    n_max = max(grid.shape)
    omega = 2.0 / (1.0 + np.sin(np.pi / (n_max - 1)))
    parity = np.indices(grid.shape).sum(axis=0) % 2
    masks = [(parity == c) & ~grid.boundary_mask() for c in (0, 1)]
    scale = max(np.linalg.norm(rhs[grid.interior()]), 1e-300)
    res = np.inf
    for it in range(1, opts.max_iter + 1):
        for mask in masks:
            r = laplacian(w, grid) - rhs
            w[mask] += omega * r[mask] * h2 / (2.0 * grid.dim)
        if it % 10 == 0:
            res = np.linalg.norm((laplacian(w, grid) - rhs)[grid.interior()]) / scale
            if res <= opts.tol:
                return w
    raise ConvergenceFailure(
        f"SOR did not reach tol={opts.tol} in {opts.max_iter} sweeps", residual=res)


def _lift(boundary, grid: GridSpec) -> np.ndarray:
    """Boundary data on the boundary nodes, zero inside."""
    lift = np.zeros(grid.shape)
    if boundary is not None:
        vals = boundary.values if isinstance(boundary, ScalarField) else np.asarray(boundary)
        if vals.shape != grid.shape:
            raise GridMismatch("boundary data does not match the grid")
        mask = grid.boundary_mask()
        lift[mask] = vals[mask]
    return lift


def solve_dirichlet(F: ScalarField, boundary=None,
                    opts: PoissonOptions = PoissonOptions()) -> ScalarField:
    """Solve ``Lap w = F`` inside with ``w = boundary`` on the edge nodes.

    ``boundary`` may be a ScalarField (or array) whose boundary entries carry
    the Dirichlet data; interior entries are ignored.  ``None`` means zero.
    """
    grid = F.grid
    lift = _lift(boundary, grid)
    rhs = np.where(grid.boundary_mask(), 0.0, F.values) - laplacian(lift, grid)
    if opts.method == "direct-spectral":
        w = lift + solve_zero(rhs, grid)
    else:
        w = lift + _sor(rhs, grid, np.zeros(grid.shape), opts)
    return ScalarField(grid, w)


def residual(w: ScalarField, F: ScalarField) -> float:
    """Relative interior residual ``|Lap w - F| / |F|`` (absolute if F is 0)."""
    grid = w.grid
    r = (laplacian(w.values, grid) - F.values)[grid.interior()]
    scale = np.linalg.norm(F.values[grid.interior()])
    return float(np.linalg.norm(r) / scale) if scale > 0 else float(np.linalg.norm(r))


def solve_vector(F, boundary: Transformation | None = None,
                 opts: PoissonOptions = PoissonOptions()) -> Transformation:
    """Componentwise solve producing a transformation.

    ``F`` is a VectorField-like object with ``components`` (or a raw array of
    shape ``(d, *shape)``) holding the Laplacian of the displacement.  The
    boundary trace comes from ``boundary`` (identity when omitted), so the
    identity map itself never enters the solve.
    """
    if isinstance(F, np.ndarray):
        raise TypeError("pass a VectorField; use solve_zero for raw arrays")
    grid = F.grid
    comps = F.components
    out = []
    for a in range(grid.dim):
        bnd = None if boundary is None else boundary.displacement[a]
        if opts.method == "direct-spectral" and bnd is None:
            out.append(solve_zero(comps[a], grid))
        else:
            out.append(solve_dirichlet(ScalarField(grid, comps[a]), bnd, opts).values)
    return Transformation(grid, np.stack(out))
