"""Deterministic generators for deformations, test images and volumes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, GridMismatch, SpecOutOfRange
from .fields import GridSpec, Image, Transformation, interpolate, jacobian_det, partial

# Twist (radians) whose discrete Jacobian stays inside [0.996, 1.003] on a
# 128x128 unit grid with the default support fraction; 0.60 already leaves
# the band.  See tests/test_synth.py::test_default_pair_band.
DEFAULT_MAX_ANGLE = 0.58
DEFAULT_RADIUS_FRACTION = 0.9


def smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


@dataclass(frozen=True)
class RotationalSpec:
    """Tapered local rotation: angle ``max_angle * (1 - smoothstep(r / radius))``."""

    center: tuple | None = None
    max_angle: float = DEFAULT_MAX_ANGLE
    radius: float | None = None

    def resolve(self, grid: GridSpec) -> tuple:
        lx, ly = grid.lengths[:2]
        center = self.center if self.center is not None else (lx / 2, ly / 2)
        if self.radius is None:
            radius = DEFAULT_RADIUS_FRACTION * min(lx, ly) / 2
        else:
            radius = self.radius
        if radius <= 0:
            raise SpecOutOfRange("radius must be positive")
        cx, cy = center
        if (cx - radius < 0 or cy - radius < 0
                or cx + radius > lx or cy + radius > ly):
            raise SpecOutOfRange("rotation support must stay inside the domain")
        return (float(cx), float(cy)), float(radius)


def twist_displacement(grid: GridSpec, center, radius, angle) -> np.ndarray:
    """Displacement of a rotation by ``angle * (1 - smoothstep(r/radius))``."""
    x, y = grid.coordinates()
    dx, dy = x - center[0], y - center[1]
    theta = angle * (1.0 - smoothstep(np.hypot(dx, dy) / radius))
    c, s = np.cos(theta), np.sin(theta)
    return np.stack([(c - 1.0) * dx - s * dy, s * dx + (c - 1.0) * dy])


def _radial_potential(r, radius, angle, order=32):
    """``psi(r) = int_0^r (cos(theta(rho)) - 1) rho drho`` by Gauss-Legendre.

    Beyond the support the integrand vanishes, so the upper limit is capped
    at ``radius`` and the integrand stays analytic on the quadrature interval.
    """
    nodes, weights = np.polynomial.legendre.leggauss(order)
    top = np.minimum(r, radius)[..., None]
    rho = 0.5 * top * (nodes + 1.0)
    theta = angle * (1.0 - smoothstep(rho / radius))
    return 0.5 * top[..., 0] * np.sum(weights * (np.cos(theta) - 1.0) * rho, axis=-1)


def twist_pair_displacements(grid: GridSpec, center, radius, angle):
    """Displacements ``(G + B, G - B)`` of two counter-rotating twists.

    ``B`` is the tangential part ``sin(theta) * (-dy, dx)`` and ``G`` the
    discrete gradient of the radial potential whose continuous gradient is
    the radial part ``(cos(theta) - 1) * (dx, dy)``.  The sum of the two
    displacements is a discrete gradient, so their discrete curls cancel.
    """
    x, y = grid.coordinates()
    dx, dy = x - center[0], y - center[1]
    r = np.hypot(dx, dy)
    theta = angle * (1.0 - smoothstep(r / radius))
    psi = _radial_potential(r, radius, angle)
    G = np.stack([partial(psi, grid, 0), partial(psi, grid, 1)])
    B = np.sin(theta) * np.stack([-dy, dx])
    plus, minus = G + B, G - B
    mask = grid.boundary_mask()
    plus[:, mask] = 0.0
    minus[:, mask] = 0.0
    return plus, minus


def make_rotational_pair(grid: GridSpec, spec: RotationalSpec = RotationalSpec()):
    """Two counter-rotating tapered twists ``(D1, D2)``.

    Each is a rotation by ``+/- angle(r)`` up to discretisation error; the
    split into a shared curl-free part and an antisymmetric rotational part
    makes ``curl(D1) + curl(D2)`` vanish to rounding.
    """
    if grid.dim != 2:
        raise DimensionError("rotational pairs are 2D")
    center, radius = spec.resolve(grid)
    if abs(spec.max_angle) >= np.pi:
        raise SpecOutOfRange("max_angle must be below pi")
    if spec.max_angle == 0:
        ident = Transformation.identity(grid)
        return ident, ident
    plus, minus = twist_pair_displacements(grid, center, radius, spec.max_angle)
    d1, d2 = Transformation(grid, plus), Transformation(grid, minus)
    for d in (d1, d2):
        if np.min(jacobian_det(d).values) <= 0:
            raise SpecOutOfRange("requested twist folds the grid")
    return d1.with_flag(True), d2.with_flag(True)


def _bump(grid: GridSpec, center, width) -> np.ndarray:
    """Smooth compactly supported bump, ``(1 - s^2)^3`` for ``s < 1``."""
    x, y = grid.coordinates()
    s2 = ((x - center[0]) ** 2 + (y - center[1]) ** 2) / width ** 2
    return np.where(s2 < 1.0, (1.0 - np.minimum(s2, 1.0)) ** 3, 0.0)


def _seeded_shear(grid: GridSpec, rng, amplitude) -> np.ndarray:
    """Sum of three seeded bumps, scaled to the requested peak magnitude."""
    lx, ly = grid.lengths
    field = np.zeros(grid.shape)
    for _ in range(3):
        width = rng.uniform(0.3, 0.45) * min(lx, ly)
        cx = rng.uniform(width, lx - width) if lx > 2 * width else lx / 2
        cy = rng.uniform(width, ly - width) if ly > 2 * width else ly / 2
        field += rng.choice([-1.0, 1.0]) * rng.uniform(0.6, 1.0) * _bump(grid, (cx, cy), width)
    field[grid.boundary_mask()] = 0.0
    return field * (amplitude / np.max(np.abs(field)))


FAMILY_AMPLITUDES = (0.06, 0.08, 0.1)
_MAX_SHEAR_SLOPE = 0.45


def make_family6(grid: GridSpec, seed: int = 0, amplitudes=FAMILY_AMPLITUDES):
    """Six deformations whose mean Jacobian is 1 and mean curl 0.

    Members come in pairs ``x + u`` and ``x - u`` where ``u = e * s(x)`` has a
    fixed direction ``e``: along x, along y, and along a seeded oblique
    direction.  The displacement gradient ``e (grad s)^T`` is rank one under
    any stencil, so ``J = 1 + div u`` exactly and each pair's Jacobians
    average to 1 up to rounding.  Curls cancel within a pair because the
    discrete curl is linear in ``u``.  ``amplitudes`` are peak displacements
    as a fraction of the shorter side length.
    """
    if grid.dim != 2:
        raise DimensionError("family6 is 2D")
    rng = np.random.default_rng(seed)
    side = min(grid.lengths)
    shears = [_seeded_shear(grid, rng, amp * side) for amp in amplitudes]
    oblique = rng.uniform(0.15, 0.35) * np.pi * rng.choice([-1.0, 1.0])
    directions = [(1.0, 0.0), (0.0, 1.0), (np.cos(oblique), np.sin(oblique))]
    plus, minus = [], []
    for (ex, ey), shear in zip(directions, shears):
        # J = 1 +/- e.grad(s); cap the slope so both members keep J >= 0.55
        slope = np.max(np.abs(ex * partial(shear, grid, 0) + ey * partial(shear, grid, 1)))
        if slope > _MAX_SHEAR_SLOPE:
            shear = shear * (_MAX_SHEAR_SLOPE / slope)
        u = np.stack([ex * shear, ey * shear])
        plus.append(Transformation(grid, u).with_flag(True))
        minus.append(Transformation(grid, -u).with_flag(True))
    return plus + minus


_BLOB_COUNT = 60


def _blob_sum(grid: GridSpec, seed: int, x, y) -> np.ndarray:
    """Seeded sum of signed Gaussians whose centres spill past the edges."""
    lx, ly = grid.lengths
    side = min(lx, ly)
    rng = np.random.default_rng(seed)
    vals = np.zeros(np.shape(x))
    for _ in range(_BLOB_COUNT):
        bx, by = rng.uniform(-0.05, 1.05) * lx, rng.uniform(-0.05, 1.05) * ly
        w = rng.uniform(0.04, 0.1) * side
        vals += rng.uniform(-1.0, 1.0) * np.exp(-((x - bx) ** 2 + (y - by) ** 2) / (2 * w * w))
    return vals


def make_test_image(grid: GridSpec, kind: str = "blobs", seed: int = 0,
                    warp: Transformation | None = None) -> Image:
    """Smooth textured image in [0, 1] standing in for anatomical data.

    With ``warp`` the analytic pattern is evaluated at the mapped node
    positions, giving ``image o warp`` without interpolation blur.
    """
    if grid.dim != 2:
        raise DimensionError("test images are 2D; use make_twisted_volume for 3D")
    if warp is not None and warp.grid != grid:
        raise GridMismatch("warp lives on a different grid")
    x, y = grid.coordinates() if warp is None else warp.coords
    lx, ly = grid.lengths
    cx, cy = lx / 2, ly / 2
    side = min(lx, ly)
    if kind == "rings":
        r = np.hypot(x - cx, y - cy) / side
        vals = 0.5 + 0.4 * np.cos(2 * np.pi * 5.0 * r) * np.exp(-(r / 0.45) ** 2)
    elif kind == "checker":
        k = 2 * np.pi * 4.0 / side
        vals = 0.5 + 0.4 * np.sin(k * x) * np.sin(k * y)
    elif kind == "blobs":
        # scale by the unwarped peak so warped copies share one intensity map
        x0, y0 = grid.coordinates()
        peak = np.max(np.abs(_blob_sum(grid, seed, x0, y0)))
        # texture covers the whole domain so registration sees every shift
        vals = 0.5 + 0.35 * _blob_sum(grid, seed, x, y) / peak
    else:
        raise ValueError(f"unknown image kind {kind!r}")
    return Image(grid, np.clip(vals, 0.0, 1.0))


def _teapot_slice(grid: GridSpec, turn: float, points=None) -> np.ndarray:
    """Turntable view of an asymmetric object (body, spout, handle, lid).

    ``turn`` is the object's angle about the vertical image axis.  Spout and
    handle swing across the body as ``cos(turn)`` and fade when behind it,
    and the body's surface stripes travel with the turn, so consecutive
    views are not in-plane rotations of one another.  Evaluated at the grid
    nodes, or at ``points`` (shape ``(2, ny, nx)``).
    """
    x, y = grid.coordinates() if points is None else points
    lx, ly = grid.lengths
    px = (x - lx / 2) / lx
    py = (y - ly / 2) / ly

    def blob(ax, ay, rx, ry):
        return 1.0 - smoothstep(((px - ax) / rx) ** 2 + ((py - ay) / ry) ** 2)

    c, s = np.cos(turn), np.sin(turn)
    body = blob(0.0, 0.02, 0.24, 0.2)
    stripes = 0.6 + 0.2 * np.cos(3.0 * (0.5 * np.pi * px / 0.24 + turn)) * np.cos(2 * np.pi * 1.5 * py)
    spout = blob(0.32 * c, -0.04, 0.06 + 0.06 * abs(c), 0.07)
    handle = blob(-0.3 * c, 0.04, 0.05 + 0.04 * abs(c), 0.12)
    lid = blob(0.0, -0.19, 0.1, 0.06)
    obj = (body * stripes + 0.5 * (0.6 + 0.4 * s) * spout
           + 0.35 * (0.6 - 0.4 * s) * handle + 0.45 * lid)
    # fixed backdrop: the camera, not the object, defines it, so it does not turn
    qx, qy = x / lx, y / ly
    backdrop = 0.15 + 0.08 * np.sin(2 * np.pi * 2.0 * qx + 0.5) * np.sin(2 * np.pi * 2.0 * qy + 1.0)
    return np.clip(backdrop + 0.75 * obj, 0.0, 1.0)


def twisted_volume_angles(n: int, twist_max: float) -> np.ndarray:
    """Per-slice twist angles, zero on the first and last slice."""
    return twist_max * np.sin(np.pi * np.arange(n) / (n - 1))


def make_twisted_volume(n: int = 24, twist_max: float = 0.7):
    """Rotating-object volume ``I0``, its twisted copy ``It`` and slice maps.

    Slice ``i`` of ``I0`` shows the object turned by ``360 * i / n`` degrees
    on a turntable.
    The ground-truth slice map ``T_i`` is a tapered twist; ``It`` is built so
    that ``It o T_i = I0`` slice by slice, i.e. registering ``It`` onto ``I0``
    should recover ``T_i``.  A twist whose angle depends only on the radius
    is inverted exactly by the opposite twist, so ``It`` is the analytic
    object evaluated there rather than an interpolated copy.  The twist
    support stays inside the slice so the volume boundary is untouched.
    """
    if n < 16:
        raise ValueError("twisted volume needs n >= 16")
    g2 = GridSpec(n, n)
    g3 = GridSpec(n, n, n)
    side = min(g2.lengths)
    center = (side / 2, side / 2)
    radius = 0.42 * side
    I0 = np.empty(g3.shape)
    It = np.empty(g3.shape)
    maps = []
    for i, angle in enumerate(twisted_volume_angles(n, twist_max)):
        turn = 2 * np.pi * i / n
        I0[i] = _teapot_slice(g2, turn)
        fwd = Transformation(g2, twist_displacement(g2, center, radius, angle)).with_flag(True)
        inv = Transformation(g2, twist_displacement(g2, center, radius, -angle))
        maps.append(fwd)
        It[i] = I0[i] if angle == 0 else _teapot_slice(g2, turn, inv.coords)
    return Image(g3, I0), Image(g3, It), maps
