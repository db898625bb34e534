"""Construct 2D transformations with prescribed Jacobian determinant and curl.

The unknown is the control ``F = Lap u`` of the displacement ``u = T - x``
(Dirichlet, identity on the boundary).  The objective

    E(T) = h^2 * sum over interior nodes of (J(T) - f0)^2 + (curl T - g0)^2

is minimised by gradient descent on ``F``.  Because the discrete Dirichlet
Laplacian is symmetric, the gradient with respect to ``F`` is
``Lap^-1 (dE/dT)``, so every step costs two sine-transform solves.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DimensionError, EmptyInput, NonPositiveTarget
from .fields import (GridSpec, ScalarField, Transformation, VectorField, check_congruent,
                     curl2d, jacobian_det)
from .poisson import laplacian, solve_zero

log = logging.getLogger(__name__)


def normalize_f0(f0_raw: ScalarField) -> ScalarField:
    """Scale a positive target Jacobian so its node mean is exactly 1."""
    vals = f0_raw.values
    if not np.all(vals > 0):
        raise NonPositiveTarget(f"target Jacobian has min {np.min(vals):.6g} <= 0")
    return ScalarField(f0_raw.grid, vals / np.mean(vals))


# central differences on the interior nodes and their adjoints

def _inner_diff(values, axis, h):
    n = values.ndim
    lo = tuple(slice(0, -2) if a == axis else slice(1, -1) for a in range(n))
    hi = tuple(slice(2, None) if a == axis else slice(1, -1) for a in range(n))
    return (values[hi] - values[lo]) / (2.0 * h)


def _inner_diff_adjoint(q, axis, h, shape):
    """Adjoint of ``_inner_diff``: ``q`` lives on the interior nodes."""
    out = np.zeros(shape)
    n = len(shape)
    lo = tuple(slice(0, -2) if a == axis else slice(1, -1) for a in range(n))
    hi = tuple(slice(2, None) if a == axis else slice(1, -1) for a in range(n))
    out[hi] += q / (2.0 * h)
    out[lo] -= q / (2.0 * h)
    return out


def _interior_terms(u, grid: GridSpec):
    """Interior displacement derivatives ``(T1_x, T1_y, T2_x, T2_y)``."""
    h = grid.spacing
    ax_x, ax_y = grid.axis(0), grid.axis(1)
    a = 1.0 + _inner_diff(u[0], ax_x, h)
    b = _inner_diff(u[0], ax_y, h)
    c = _inner_diff(u[1], ax_x, h)
    d = 1.0 + _inner_diff(u[1], ax_y, h)
    return a, b, c, d


def _objective_parts(u, f0_in, g0_in, grid: GridSpec):
    a, b, c, d = _interior_terms(u, grid)
    jac = a * d - b * c
    curl = c - b
    return jac, curl, (a, b, c, d)


def _energy(u, f0_in, g0_in, grid):
    jac, curl, _ = _objective_parts(u, f0_in, g0_in, grid)
    rj, rc = jac - f0_in, curl - g0_in
    return float(np.sum(rj * rj + rc * rc) * grid.cell_volume), float(np.min(jac))


def objective(T: Transformation, f0: ScalarField, g0: ScalarField) -> float:
    """``h^2 * sum_interior (J - f0)^2 + (curl - g0)^2``."""
    grid = check_congruent(T, f0, g0)
    if grid.dim != 2:
        raise DimensionError("the variational principle is 2D")
    return _energy(T.displacement, f0.interior_values(), g0.interior_values(), grid)[0]


def _gradient(u, f0_in, g0_in, grid):
    h = grid.spacing
    ax_x, ax_y = grid.axis(0), grid.axis(1)
    jac, curl, (a, b, c, d) = _objective_parts(u, f0_in, g0_in, grid)
    rj = 2.0 * grid.cell_volume * (jac - f0_in)
    rc = 2.0 * grid.cell_volume * (curl - g0_in)
    shape = grid.shape
    g1 = (_inner_diff_adjoint(rj * d, ax_x, h, shape)
          + _inner_diff_adjoint(-rj * c - rc, ax_y, h, shape))
    g2 = (_inner_diff_adjoint(-rj * b + rc, ax_x, h, shape)
          + _inner_diff_adjoint(rj * a, ax_y, h, shape))
    grad = np.stack([g1, g2])
    grad[:, grid.boundary_mask()] = 0.0
    return grad


def gradient_wrt_T(T: Transformation, f0: ScalarField, g0: ScalarField) -> VectorField:
    """Exact gradient of :func:`objective` with respect to the nodal values of T.

    Boundary nodes are held fixed, so their entries are zero.
    """
    grid = check_congruent(T, f0, g0)
    if grid.dim != 2:
        raise DimensionError("the variational principle is 2D")
    return VectorField(grid, _gradient(T.displacement, f0.interior_values(),
                                       g0.interior_values(), grid))


@dataclass
class VarConProblem:
    f0: ScalarField
    g0: ScalarField
    T_init: Transformation | None = None

    def __post_init__(self):
        items = [self.f0, self.g0] + ([self.T_init] if self.T_init is not None else [])
        grid = check_congruent(*items)
        if grid.dim != 2:
            raise DimensionError("the variational principle is 2D")
        if not np.all(self.f0.values > 0):
            raise NonPositiveTarget("target Jacobian must be positive everywhere")
        if self.T_init is not None and not self.T_init.boundary_is_identity():
            raise ValueError("initial transformation must be the identity on the boundary")

    @property
    def grid(self) -> GridSpec:
        return self.f0.grid


@dataclass
class DescentOptions:
    step: float | None = None       # None: pick so the first trial moves nodes by 0.5 h
    max_steps: int = 10000
    obj_tol: float = 1e-8
    obj_atol: float = 1e-24       # below this the targets are met to rounding
    jmin_guard: float = 0.05
    growth: float = 1.25
    max_halvings: int = 20
    patience: int = 5

    def __post_init__(self):
        if self.step is not None and not self.step > 0:
            raise ValueError("step must be positive")
        if self.jmin_guard < 0:
            raise ValueError("jmin_guard must be non-negative")


@dataclass
class SolverReport:
    objective_trace: list = field(default_factory=list)
    steps_taken: int = 0
    min_J: float = 1.0
    max_J: float = 1.0
    final_residuals: tuple = (0.0, 0.0)
    termination: str = "converged"

    def to_dict(self) -> dict:
        out = asdict(self)
        out["final_residuals"] = list(self.final_residuals)
        return out


def _finish(grid, u, f0, g0, report):
    T = Transformation(grid, u, diffeomorphic=True)
    jac = jacobian_det(T).interior_values()
    curl = curl2d(T).interior_values()
    report.min_J = float(np.min(jac))
    report.max_J = float(np.max(jac))
    vol = grid.cell_volume
    report.final_residuals = (float(np.sum((jac - f0.interior_values()) ** 2) * vol),
                              float(np.sum((curl - g0.interior_values()) ** 2) * vol))
    return T, report


def solve(problem: VarConProblem, opts: DescentOptions = DescentOptions(), callback=None):
    """Descend on the control ``F`` until the Jacobian/curl targets are met.

    A trial step is accepted when the objective decreases and the interior
    minimum Jacobian stays above the guard; otherwise the step is halved.  A
    starting map that is already below the guard only has to stay above its
    own starting minimum until it first clears the guard.

    ``callback(step_index, T)`` is invoked after each accepted step.
    Returns ``(T, SolverReport)``.
    """
    grid = problem.grid
    f0_in, g0_in = problem.f0.interior_values(), problem.g0.interior_values()
    if problem.T_init is None:
        u = np.zeros((2, *grid.shape))
    else:
        # round-trip through the control so T is exactly Lap^-1 F
        F = np.stack([laplacian(c, grid) for c in problem.T_init.displacement])
        u = np.stack([solve_zero(c, grid) for c in F])

    energy, min_j = _energy(u, f0_in, g0_in, grid)
    report = SolverReport(objective_trace=[energy])
    floor = min(opts.jmin_guard, min_j)
    if energy <= opts.obj_atol:
        return _finish(grid, u, problem.f0, problem.g0, report)

    step = opts.step
    quiet = 0
    report.termination = "max_steps"
    for k in range(opts.max_steps):
        grad = _gradient(u, f0_in, g0_in, grid)
        grad_f = np.stack([solve_zero(c, grid) for c in grad])
        # dE along F = -grad_f moves u by -Lap^-1 grad_f
        du = np.stack([solve_zero(c, grid) for c in grad_f])
        scale = float(np.max(np.abs(du)))
        if scale == 0.0:
            report.termination = "converged"
            break
        if step is None:
            step = 0.5 * grid.spacing / scale
        for _ in range(opts.max_halvings + 1):
            trial = u - step * du
            e_try, j_try = _energy(trial, f0_in, g0_in, grid)
            if e_try < energy and j_try > floor:
                break
            step *= 0.5
        else:
            report.termination = "guard_halt"
            break
        rel = (energy - e_try) / energy
        u, energy = trial, e_try
        if j_try > opts.jmin_guard:
            floor = opts.jmin_guard
        report.objective_trace.append(energy)
        report.steps_taken += 1
        if callback is not None:
            callback(report.steps_taken, Transformation(grid, u))
        step *= opts.growth
        quiet = quiet + 1 if rel < opts.obj_tol else 0
        if energy <= opts.obj_atol or quiet >= opts.patience:
            report.termination = "converged"
            break
    log.debug("varcon: %d steps, E=%.3e, %s", report.steps_taken, energy, report.termination)
    return _finish(grid, u, problem.f0, problem.g0, report)


def _ordered_mean(stack: np.ndarray) -> np.ndarray:
    """Node-wise sum of a stack, independent of the order of the stack."""
    return np.sum(np.sort(stack, axis=0), axis=0)


def average_targets(Ts, weights=None):
    """Weighted mean Jacobian (normalised) and mean curl of ``Ts``."""
    Ts = list(Ts)
    if not Ts:
        raise EmptyInput("need at least one transformation to average")
    grid = check_congruent(*Ts)
    n = len(Ts)
    if weights is None:
        w = np.full(n, 1.0 / n)
    else:
        w = np.asarray(weights, dtype=float)
        if w.shape != (n,) or np.any(w <= 0) or abs(np.sum(w) - 1.0) > 1e-12:
            raise ValueError("weights must be positive, one per input, summing to 1")
    jac = np.stack([w[i] * jacobian_det(T).values for i, T in enumerate(Ts)])
    curl = np.stack([w[i] * curl2d(T).values for i, T in enumerate(Ts)])
    f0 = normalize_f0(ScalarField(grid, _ordered_mean(jac)))
    g0 = ScalarField(grid, _ordered_mean(curl))
    return f0, g0


def average_transformations(Ts, weights=None, opts: DescentOptions = DescentOptions()):
    """Average by solving for the mean Jacobian and mean curl of the inputs."""
    f0, g0 = average_targets(Ts, weights)
    return solve(VarConProblem(f0, g0), opts)

