"""Optimal-control non-rigid registration driven by SSD.

Each outer iteration computes a small displacement ``v = Lap^-1 F`` from the
control ``F`` and composes it on the right: ``phi <- phi o (x + v)``.  The
control is moved against ``Lap^-1 grad_v SSD`` (the gradient with respect to
``F``), so the displacement update is the doubly smoothed field
``-Lap^-2 grad_v SSD``.  There is no regularisation term; smoothness comes
from the constraint alone.

Convention: ``phi`` maps fixed-image coordinates into the moving image, so
``resample(I_moving, phi)`` approximates ``I_fixed``.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .fields import (GridSpec, Image, Transformation, VectorField, check_congruent,
                     interpolate, jacobian_matrix, partial, _det)
from .poisson import solve_zero

log = logging.getLogger(__name__)


@dataclass
class RegistrationOptions:
    outer_max: int = 300
    inner_steps: int = 1
    step: float = 0.5           # peak displacement of the first trial update, in units of h
    ssd_tol: float = 1e-4
    jmin_guard: float = 0.1
    multires_levels: int = 1
    growth: float = 1.25
    max_step: float = 2.0
    max_halvings: int = 20
    patience: int = 5
    gradient: str = "exact"
    smoothing: int = 2

    def __post_init__(self):
        for name in ("outer_max", "inner_steps", "multires_levels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.smoothing not in (1, 2):
            raise ValueError("smoothing must be 1 or 2 Poisson solves")
        if not self.step > 0 or not self.ssd_tol > 0:
            raise ValueError("step and ssd_tol must be positive")


@dataclass
class RegistrationResult:
    phi: Transformation
    ssd_trace: list = field(default_factory=list)
    min_J: float = 1.0
    termination: str = "converged"
    steps_taken: int = 0
    note: str = ""

    def to_dict(self) -> dict:
        return {"ssd_trace": list(self.ssd_trace), "min_J": self.min_J,
                "termination": self.termination, "steps_taken": self.steps_taken,
                "note": self.note}


def _central_gradient(values, grid):
    return np.stack([partial(values, grid, b) for b in range(grid.dim)])


def _ssd_and_grad(moving, fixed, grid, points, with_gradient=True, method="exact"):
    if with_gradient and method == "exact":
        warped, dwarp = interpolate(moving, grid, points, with_gradient=True)
    elif with_gradient:
        warped = interpolate(moving, grid, points)
        dwarp = np.stack([interpolate(c, grid, points) for c in _central_gradient(moving, grid)])
    else:
        warped, dwarp = interpolate(moving, grid, points), None
    res = warped - fixed
    value = float(np.sum(res * res) * grid.cell_volume)
    if not with_gradient:
        return value, None
    grad = 2.0 * grid.cell_volume * res * dwarp
    grad[:, grid.boundary_mask()] = 0.0
    return value, grad


def ssd_gradient(I_moving: Image, I_fixed: Image, phi: Transformation) -> VectorField:
    """Gradient of ``ssd(resample(I_moving, phi), I_fixed)`` w.r.t. the nodes of phi.

    This is ``2 (I_moving(phi) - I_fixed) grad I_moving(phi) h^d`` with the
    exact derivative of the multilinear interpolant, so it matches finite
    differences of the discrete objective.  Boundary entries are zero.
    """
    grid = check_congruent(I_moving, I_fixed, phi)
    _, grad = _ssd_and_grad(I_moving.values, I_fixed.values, grid, phi.coords)
    return VectorField(grid, grad)


def _min_interior_j(grid, disp):
    T = Transformation(grid, disp)
    return float(np.min(_det(jacobian_matrix(T))[grid.interior()]))


def _smooth(grad, grid, solves):
    """Descent direction ``(-Lap)^-k grad``, positive definite for k = 1, 2."""
    sign = -1.0 if solves == 1 else 1.0
    out = []
    for c in grad:
        for _ in range(solves):
            c = solve_zero(c, grid)
        out.append(sign * c)
    return np.stack(out)


def _compose_small(grid, base_disp, ident, v):
    """Displacement of ``phi o (x + v)`` given phi's displacement."""
    pts = ident + v
    return v + np.stack([interpolate(c, grid, pts) for c in base_disp])


def _chain_to_v(grid, base_disp, ident, v, grad_phi):
    """Pull a gradient w.r.t. the composite map back to the small displacement."""
    jac = jacobian_matrix(Transformation(grid, base_disp))
    if np.any(v):
        pts = ident + v
        jac = np.array([[interpolate(jac[a, b], grid, pts) for b in range(grid.dim)]
                        for a in range(grid.dim)])
    gv = np.einsum("ab...,a...->b...", jac, grad_phi)
    gv[:, grid.boundary_mask()] = 0.0
    return gv


def _register_level(moving, fixed, grid, opts, disp0):
    ident = grid.coordinates()
    disp = np.zeros((grid.dim, *grid.shape)) if disp0 is None else disp0
    current, _ = _ssd_and_grad(moving, fixed, grid, ident + disp, with_gradient=False)
    trace = [current]
    result = RegistrationResult(Transformation(grid, disp), ssd_trace=trace,
                                min_J=_min_interior_j(grid, disp))
    if current == 0.0:
        return result
    step = opts.step
    quiet = 0
    result.termination = "outer_max"
    for _ in range(opts.outer_max):
        v = np.zeros_like(disp)
        cand_disp, cand_ssd, cand_j = None, current, None
        stalled = False
        for _ in range(opts.inner_steps):
            pts = ident + _compose_small(grid, disp, ident, v) if np.any(v) else ident + disp
            _, g_phi = _ssd_and_grad(moving, fixed, grid, pts, method=opts.gradient)
            g_v = _chain_to_v(grid, disp, ident, v, g_phi)
            direction = _smooth(g_v, grid, opts.smoothing)
            peak = float(np.max(np.abs(direction)))
            if peak == 0.0:
                stalled = True
                break
            direction /= peak
            for _ in range(opts.max_halvings + 1):
                v_try = v - step * grid.spacing * direction
                d_try = _compose_small(grid, disp, ident, v_try)
                s_try, _ = _ssd_and_grad(moving, fixed, grid, ident + d_try, with_gradient=False)
                if s_try < cand_ssd:
                    j_try = _min_interior_j(grid, d_try)
                    if j_try > opts.jmin_guard:
                        break
                step *= 0.5
            else:
                stalled = True
                break
            v, cand_disp, cand_ssd, cand_j = v_try, d_try, s_try, j_try
            step = min(step * opts.growth, opts.max_step)
        if cand_disp is None:
            result.termination = "converged" if peak == 0.0 else "step_exhausted"
            break
        rel = (current - cand_ssd) / current
        disp, current = cand_disp, cand_ssd
        trace.append(current)
        result.min_J = cand_j
        result.steps_taken += 1
        quiet = quiet + 1 if rel < opts.ssd_tol else 0
        if current == 0.0 or quiet >= opts.patience:
            result.termination = "converged"
            break
        if stalled:
            result.termination = "step_exhausted"
            break
    result.phi = Transformation(grid, disp, diffeomorphic=True)
    return result


def _coarse_grid(grid: GridSpec) -> GridSpec:
    counts = [max(3, n // 2 + 1) for n in grid.counts]
    spacing = grid.lengths[0] / (counts[0] - 1)
    if grid.dim == 2:
        return GridSpec(counts[0], counts[1], spacing=spacing)
    return GridSpec(counts[0], counts[1], counts[2], spacing=spacing)


def _restrict(values, fine: GridSpec, coarse: GridSpec):
    smooth = ndimage.gaussian_filter(values, sigma=0.5 * coarse.spacing / fine.spacing,
                                     mode="nearest")
    return interpolate(smooth, fine, coarse.coordinates())


def _prolong(disp, coarse: GridSpec, fine: GridSpec):
    pts = fine.coordinates()
    out = np.stack([interpolate(c, coarse, pts) for c in disp])
    out[:, fine.boundary_mask()] = 0.0
    return out


def _congruent_scale(grid: GridSpec) -> bool:
    lengths = grid.lengths
    return all(abs(length - lengths[0]) < 1e-9 * lengths[0] for length in lengths)


def register(I_moving: Image, I_fixed: Image,
             opts: RegistrationOptions = RegistrationOptions()) -> RegistrationResult:
    """Find phi with ``resample(I_moving, phi) ~ I_fixed``.

    Steps are accepted only if SSD decreases and the interior minimum
    Jacobian stays above ``opts.jmin_guard``; rejected steps are halved.
    With ``multires_levels > 1`` coarser problems are solved first and their
    displacement is interpolated up as the starting map.
    """
    grid = check_congruent(I_moving, I_fixed)
    moving, fixed = I_moving.values, I_fixed.values
    if np.ptp(moving) == 0.0 and np.ptp(fixed) == 0.0:
        res = RegistrationResult(Transformation.identity(grid),
                                 ssd_trace=[float(np.sum((moving - fixed) ** 2) * grid.cell_volume)],
                                 note="constant images: nothing to align")
        return res
    pyramid = [(grid, moving, fixed)]
    levels = opts.multires_levels if _congruent_scale(grid) else 1
    for _ in range(levels - 1):
        g, m, f = pyramid[-1]
        if min(g.counts) < 9:
            break
        cg = _coarse_grid(g)
        pyramid.append((cg, _restrict(m, g, cg), _restrict(f, g, cg)))
    disp = None
    prev = None
    for g, m, f in reversed(pyramid):
        if prev is not None:
            disp = _prolong(disp, prev, g)
        result = _register_level(m, f, g, opts, disp)
        disp = result.phi.displacement
        prev = g
    if len(pyramid) > 1:
        # lead with the unregistered SSD so trace[0] means the same at any depth
        start = float(np.sum((moving - fixed) ** 2) * grid.cell_volume)
        if start > result.ssd_trace[0]:
            result.ssd_trace.insert(0, start)
        result.note = f"multiresolution with {len(pyramid)} levels"
    log.debug("register: %d steps, SSD %.4g -> %.4g (%s)", result.steps_taken,
              result.ssd_trace[0], result.ssd_trace[-1], result.termination)
    return result
