"""Uniform-grid fields and the differential/resampling operators on them.

Arrays follow the image convention: a 2D field has shape ``(ny, nx)`` and a 3D
field ``(nz, ny, nx)``, so x is the fastest-varying (last) axis.  Vector
quantities carry a leading component axis ordered ``(x, y[, z])``.

A :class:`Transformation` is stored as its displacement ``u = T(x) - x``.
Derivatives of the identity are exact, so keeping ``u`` instead of ``T``
avoids cancellation when differentiating near-identity maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, GridMismatch


def _frozen(values, dtype=float):
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Node counts and spacing of a uniform grid starting at the origin."""

    nx: int
    ny: int
    nz: int = 1
    spacing: float = 1.0

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError("grid needs at least 3 nodes per axis")
        if self.nz != 1 and self.nz < 3:
            raise ValueError("3D grid needs nz >= 3")
        if not self.spacing > 0:
            raise ValueError("spacing must be positive")

    @classmethod
    def from_shape(cls, shape, spacing=1.0):
        if len(shape) == 2:
            return cls(nx=shape[1], ny=shape[0], spacing=spacing)
        if len(shape) == 3:
            return cls(nx=shape[2], ny=shape[1], nz=shape[0], spacing=spacing)
        raise DimensionError(f"unsupported array rank {len(shape)}")

    @property
    def dim(self) -> int:
        return 3 if self.nz > 1 else 2

    @property
    def shape(self) -> tuple:
        if self.dim == 2:
            return (self.ny, self.nx)
        return (self.nz, self.ny, self.nx)

    @property
    def counts(self) -> tuple:
        """Node counts ordered like vector components: ``(nx, ny[, nz])``."""
        return self.shape[::-1]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def cell_volume(self) -> float:
        return self.spacing ** self.dim

    @property
    def lengths(self) -> tuple:
        return tuple((n - 1) * self.spacing for n in self.counts)

    def axis(self, component: int) -> int:
        """Array axis along which coordinate ``component`` varies."""
        return self.dim - 1 - component

    def coordinates(self) -> np.ndarray:
        """Identity map as an array of shape ``(dim, *shape)``."""
        axes = [np.arange(n) * self.spacing for n in self.shape]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack(mesh[::-1])

    def interior(self) -> tuple:
        return (slice(1, -1),) * self.dim

    def boundary_mask(self) -> np.ndarray:
        mask = np.ones(self.shape, dtype=bool)
        mask[self.interior()] = False
        return mask

    def header_tokens(self) -> list:
        tokens = [self.nx, self.ny]
        if self.dim == 3:
            tokens.append(self.nz)
        return tokens


def check_congruent(*items):
    grids = {item.grid for item in items}
    if len(grids) != 1:
        raise GridMismatch("inputs live on different grids: "
                           + ", ".join(str(g) for g in grids))
    return grids.pop()


@dataclass(frozen=True, eq=False)
class ScalarField:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(self.values)
        if vals.shape != self.grid.shape:
            raise GridMismatch(f"values of shape {vals.shape} do not fit {self.grid}")
        object.__setattr__(self, "values", vals)

    def interior_values(self) -> np.ndarray:
        return self.values[self.grid.interior()]


@dataclass(frozen=True, eq=False)
class VectorField:
    grid: GridSpec
    components: np.ndarray

    def __post_init__(self):
        comps = _frozen(self.components)
        if comps.shape != (self.grid.dim, *self.grid.shape):
            raise GridMismatch(f"components of shape {comps.shape} do not fit {self.grid}")
        object.__setattr__(self, "components", comps)

    def norm(self) -> np.ndarray:
        return np.sqrt(np.sum(self.components ** 2, axis=0))


@dataclass(frozen=True, eq=False)
class Transformation:
    """A map ``T(x) = x + u(x)`` sampled at the grid nodes.

    ``diffeomorphic`` is set only by producers that checked the min-J guard.
    """

    grid: GridSpec
    displacement: np.ndarray
    diffeomorphic: bool = field(default=False)

    def __post_init__(self):
        disp = _frozen(self.displacement)
        if disp.shape != (self.grid.dim, *self.grid.shape):
            raise GridMismatch(f"displacement of shape {disp.shape} does not fit {self.grid}")
        object.__setattr__(self, "displacement", disp)

    @classmethod
    def identity(cls, grid: GridSpec) -> "Transformation":
        return cls(grid, np.zeros((grid.dim, *grid.shape)), diffeomorphic=True)

    @classmethod
    def from_coordinates(cls, grid: GridSpec, coords, diffeomorphic=False):
        return cls(grid, np.asarray(coords, dtype=float) - grid.coordinates(), diffeomorphic)

    @property
    def coords(self) -> np.ndarray:
        return self.grid.coordinates() + self.displacement

    def max_displacement(self) -> float:
        return float(np.max(np.sqrt(np.sum(self.displacement ** 2, axis=0))))

    def boundary_is_identity(self) -> bool:
        mask = self.grid.boundary_mask()
        return bool(np.all(self.displacement[:, mask] == 0.0))

    def with_flag(self, diffeomorphic: bool) -> "Transformation":
        return Transformation(self.grid, self.displacement, diffeomorphic)


@dataclass(frozen=True, eq=False)
class Image:
    grid: GridSpec
    values: np.ndarray

    def __post_init__(self):
        vals = _frozen(np.clip(self.values, 0.0, 1.0))
        if vals.shape != self.grid.shape:
            raise GridMismatch(f"intensities of shape {vals.shape} do not fit {self.grid}")
        object.__setattr__(self, "values", vals)


def max_node_distance(a: Transformation, b: Transformation) -> float:
    """Largest Euclidean distance between ``a(x)`` and ``b(x)`` over all nodes."""
    check_congruent(a, b)
    diff = a.displacement - b.displacement
    return float(np.max(np.sqrt(np.sum(diff ** 2, axis=0))))


# ---------------------------------------------------------------------------
# differential operators

def partial(values: np.ndarray, grid: GridSpec, component: int) -> np.ndarray:
    """Derivative along coordinate ``component``.

    Second-order central differences inside, second-order one-sided
    differences on the boundary nodes.
    """
    return np.gradient(values, grid.spacing, axis=grid.axis(component), edge_order=2)


def displacement_gradient(T: Transformation) -> np.ndarray:
    """``grad[a, b] = d u_a / d x_b`` with shape ``(d, d, *shape)``."""
    d = T.grid.dim
    return np.array([[partial(T.displacement[a], T.grid, b) for b in range(d)]
                     for a in range(d)])


def jacobian_matrix(T: Transformation) -> np.ndarray:
    jac = displacement_gradient(T)
    for a in range(T.grid.dim):
        jac[a, a] += 1.0
    return jac


def _det(m: np.ndarray) -> np.ndarray:
    if m.shape[0] == 2:
        return m[0, 0] * m[1, 1] - m[0, 1] * m[1, 0]
    return (m[0, 0] * (m[1, 1] * m[2, 2] - m[1, 2] * m[2, 1])
            - m[0, 1] * (m[1, 0] * m[2, 2] - m[1, 2] * m[2, 0])
            + m[0, 2] * (m[1, 0] * m[2, 1] - m[1, 1] * m[2, 0]))


def jacobian_det(T: Transformation) -> ScalarField:
    return ScalarField(T.grid, _det(jacobian_matrix(T)))


def curl2d(T: Transformation) -> ScalarField:
    """Scalar curl ``dT2/dx - dT1/dy``; the identity contributes nothing."""
    if T.grid.dim != 2:
        raise DimensionError("curl2d needs a 2D transformation")
    u = T.displacement
    return ScalarField(T.grid, partial(u[1], T.grid, 0) - partial(u[0], T.grid, 1))


def curl3d(T: Transformation) -> VectorField:
    if T.grid.dim != 3:
        raise DimensionError("curl3d needs a 3D transformation")
    u, g = T.displacement, T.grid
    comps = np.stack([
        partial(u[2], g, 1) - partial(u[1], g, 2),
        partial(u[0], g, 2) - partial(u[2], g, 0),
        partial(u[1], g, 0) - partial(u[0], g, 1),
    ])
    return VectorField(g, comps)


def divergence(T: Transformation) -> ScalarField:
    g = T.grid
    div = sum(partial(T.displacement[a], g, a) for a in range(g.dim))
    return ScalarField(g, div + g.dim)


# ---------------------------------------------------------------------------
# interpolation

def _corner_weights(points: np.ndarray, grid: GridSpec):
    """Cell indices, fractional offsets and in-range masks for multilinear lookup.

    Queries outside the domain are clamped onto its boundary.
    """
    idx, frac, inside = [], [], []
    for b, n in enumerate(grid.counts):
        p = points[b] / grid.spacing
        inside.append((p >= 0.0) & (p <= n - 1))
        p = np.clip(p, 0.0, n - 1)
        i0 = np.clip(np.floor(p).astype(np.intp), 0, n - 2)
        idx.append(i0)
        frac.append(p - i0)
    return idx, frac, inside


def interpolate(values: np.ndarray, grid: GridSpec, points: np.ndarray,
                with_gradient: bool = False):
    """Multilinear interpolation of nodal ``values`` at physical ``points``.

    ``points`` has shape ``(dim, ...)``.  With ``with_gradient`` the exact
    derivative of the interpolant with respect to the query point is returned
    as well; it is zero along any axis where the query was clamped.
    """
    d = grid.dim
    idx, frac, inside = _corner_weights(points, grid)
    out = np.zeros(points.shape[1:])
    grad = np.zeros(points.shape) if with_gradient else None
    samples = {}
    for corner in range(2 ** d):
        bits = [(corner >> b) & 1 for b in range(d)]
        # array index order is reversed relative to component order
        samples[corner] = values[tuple(idx[b] + bits[b] for b in reversed(range(d)))]
        w = [frac[b] if bits[b] else 1.0 - frac[b] for b in range(d)]
        out += samples[corner] * np.prod(w, axis=0)
    if with_gradient:
        # differences along each cell edge, so a constant field gives exactly 0
        for corner in range(2 ** d):
            for b in range(d):
                if (corner >> b) & 1:
                    continue
                w = [1.0] + [frac[c] if (corner >> c) & 1 else 1.0 - frac[c]
                             for c in range(d) if c != b]
                diff = samples[corner | (1 << b)] - samples[corner]
                grad[b] += diff * np.prod(np.broadcast_arrays(*w), axis=0)
        for b in range(d):
            grad[b] = np.where(inside[b], grad[b] / grid.spacing, 0.0)
        return out, grad
    return out


def resample(image: Image, T: Transformation) -> Image:
    """``I o T``: the output at node x is ``I(T(x))``."""
    grid = check_congruent(image, T)
    return Image(grid, interpolate(image.values, grid, T.coords))


def compose(T2: Transformation, T1: Transformation) -> Transformation:
    """``(T2 o T1)(x) = T2(T1(x))``."""
    grid = check_congruent(T2, T1)
    pts = T1.coords
    u2 = np.stack([interpolate(T2.displacement[a], grid, pts) for a in range(grid.dim)])
    return Transformation(grid, T1.displacement + u2)


def invert(T: Transformation, iterations: int = 50, tol: float = 1e-10) -> Transformation:
    """Inverse map by the fixed point ``v(x) = -u(x + v(x))``.

    Converges for maps whose displacement is a contraction (Lipschitz
    constant of ``u`` below 1), which covers every near-identity map the
    template pipelines produce.
    """
    grid = T.grid
    ident = grid.coordinates()
    v = -np.array(T.displacement)
    for _ in range(iterations):
        pts = ident + v
        nxt = -np.stack([interpolate(c, grid, pts) for c in T.displacement])
        step = float(np.max(np.abs(nxt - v)))
        v = nxt
        if step <= tol * grid.spacing:
            break
    v[:, grid.boundary_mask()] = 0.0
    return Transformation(grid, v)


def ssd(a: Image, b: Image) -> float:
    """Riemann-sum SSD, ``sum (a - b)^2 * h^d``."""
    grid = check_congruent(a, b)
    diff = a.values - b.values
    return float(np.sum(diff * diff) * grid.cell_volume)


def smooth_interior(values: np.ndarray, passes: int) -> np.ndarray:
    """Repeated (2d+1)-point averaging with the boundary held at zero."""
    out = np.array(values, dtype=float)
    inner = (slice(1, -1),) * out.ndim
    out[~_interior_mask(out.shape)] = 0.0
    for _ in range(passes):
        acc = out[inner].copy()
        for ax in range(out.ndim):
            lo = tuple(slice(0, -2) if a == ax else slice(1, -1) for a in range(out.ndim))
            hi = tuple(slice(2, None) if a == ax else slice(1, -1) for a in range(out.ndim))
            acc += out[lo] + out[hi]
        out[inner] = acc / (2 * out.ndim + 1)
    return out


def _interior_mask(shape) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    mask[(slice(1, -1),) * len(shape)] = True
    return mask


def add_noise(T: Transformation, amplitude: float, seed: int,
              passes: int = 2) -> Transformation:
    """Add smoothed, seeded random displacement to the interior nodes.

    White noise is smoothed by ``passes`` sweeps of the averaging stencil and
    rescaled so its largest component magnitude equals ``amplitude``.
    """
    if amplitude < 0:
        raise ValueError("amplitude must be non-negative")
    if amplitude == 0:
        return T
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(T.displacement.shape)
    noise = np.stack([smooth_interior(c, passes) for c in noise])
    noise *= amplitude / np.max(np.abs(noise))
    return Transformation(T.grid, T.displacement + noise)
