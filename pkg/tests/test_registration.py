import numpy as np
import pytest

from morphokit.errors import GridMismatch
from morphokit.fields import (GridSpec, Image, Transformation, compose, jacobian_det,
                              max_node_distance, resample, ssd)
from morphokit.registration import RegistrationOptions, register, ssd_gradient
from morphokit.synth import make_rotational_pair, make_test_image

from conftest import smooth_displacement


@pytest.fixture(scope="module")
def pair64():
    g = GridSpec(64, 64)
    d1, _ = make_rotational_pair(g)
    fixed = make_test_image(g, "blobs", 1)
    return fixed, resample(fixed, d1)


def _smooth_image(grid, r):
    pts = grid.coordinates()
    out = np.zeros(grid.shape)
    for _ in range(6):
        c = [r.uniform(0.2, 0.8) * L for L in grid.lengths]
        w = r.uniform(0.15, 0.3) * min(grid.lengths)
        out += r.uniform(-1, 1) * np.exp(-sum((p - ci) ** 2 for p, ci in zip(pts, c)) / w ** 2)
    return Image(grid, 0.5 + 0.4 * out / np.max(np.abs(out)))


def test_ssd_gradient_matches_finite_differences(rng):
    for _ in range(12):
        g = GridSpec(9, 9, spacing=rng.uniform(0.5, 1.5))
        moving = Image(g, rng.uniform(0, 1, g.shape))
        fixed = Image(g, rng.uniform(0, 1, g.shape))
        u = rng.uniform(-0.4, 0.4, (2, *g.shape)) * g.spacing
        u[:, g.boundary_mask()] = 0.0
        phi = Transformation(g, u)
        grad = ssd_gradient(moving, fixed, phi).components
        assert np.all(grad[:, g.boundary_mask()] == 0.0)
        d = rng.normal(size=grad.shape)
        d[:, g.boundary_mask()] = 0.0
        exact = float(np.sum(grad * d))
        best = np.inf
        for eps in (1e-5, 1e-6, 1e-7):
            fd = (ssd(resample(moving, Transformation(g, u + eps * d)), fixed)
                  - ssd(resample(moving, Transformation(g, u - eps * d)), fixed)) / (2 * eps)
            best = min(best, abs(fd - exact) / abs(exact))
        assert best <= 1e-5, best


def test_ssd_gradient_trivial_cases(rng):
    g = GridSpec(12, 10)
    img = Image(g, rng.uniform(0, 1, g.shape))
    assert np.all(ssd_gradient(img, img, Transformation.identity(g)).components == 0.0)
    const = Image(g, np.full(g.shape, 0.3))
    phi = smooth_displacement(g, 1.0, seed=2)
    assert np.all(ssd_gradient(const, img, phi).components == 0.0)
    with pytest.raises(GridMismatch):
        ssd_gradient(img, Image(GridSpec(10, 12), np.zeros((12, 10))), phi)


def test_self_registration_is_fixed_point(pair64):
    fixed, _ = pair64
    res = register(fixed, fixed)
    assert res.steps_taken == 0
    assert max_node_distance(res.phi, Transformation.identity(fixed.grid)) == 0.0


def test_constant_images_return_identity_with_note():
    g = GridSpec(16, 16)
    res = register(Image(g, np.full(g.shape, 0.2)), Image(g, np.full(g.shape, 0.7)))
    assert res.steps_taken == 0 and "constant" in res.note
    assert res.phi.boundary_is_identity()


def test_2d_pair_registration(pair64):
    fixed, moving = pair64
    opts = RegistrationOptions()
    res = register(moving, fixed, opts)
    trace = np.asarray(res.ssd_trace)
    assert trace[-1] <= 0.1 * trace[0]
    assert np.all(np.diff(trace) < 0)
    assert res.min_J > opts.jmin_guard
    assert jacobian_det(res.phi).interior_values().min() == pytest.approx(res.min_J)
    assert res.phi.boundary_is_identity() and res.phi.diffeomorphic
    assert ssd(resample(moving, res.phi), fixed) == pytest.approx(trace[-1], rel=1e-12)


def test_inverse_consistency_regression(pair64):
    fixed, moving = pair64
    fwd, back = register(moving, fixed), register(fixed, moving)
    ident = Transformation.identity(fixed.grid)
    # measured 0.23 h; the bound is the empirical regression ceiling
    assert max_node_distance(compose(fwd.phi, back.phi), ident) <= 1.5


def test_multiresolution(pair64):
    fixed, moving = pair64
    res = register(moving, fixed, RegistrationOptions(multires_levels=3))
    assert res.ssd_trace[0] == pytest.approx(ssd(moving, fixed))
    assert res.ssd_trace[-1] <= 0.1 * res.ssd_trace[0]
    assert np.all(np.diff(res.ssd_trace) < 0)
    assert "multiresolution" in res.note


def test_single_solve_smoothing_also_descends(pair64):
    fixed, moving = pair64
    res = register(moving, fixed, RegistrationOptions(smoothing=1, outer_max=60))
    assert res.ssd_trace[-1] < 0.5 * res.ssd_trace[0]


def test_options_validation():
    with pytest.raises(ValueError):
        RegistrationOptions(smoothing=3)
    with pytest.raises(ValueError):
        RegistrationOptions(step=0.0)


def test_3d_registration_reduces_ssd(rng):
    g = GridSpec(12, 12, 12)
    fixed = _smooth_image(g, rng)
    moving = resample(fixed, smooth_displacement(g, 1.0, seed=4))
    res = register(moving, fixed, RegistrationOptions(outer_max=80))
    assert res.ssd_trace[-1] <= 0.2 * res.ssd_trace[0]
    assert res.min_J > 0.1 and res.phi.boundary_is_identity()
