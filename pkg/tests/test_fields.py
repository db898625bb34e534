import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphokit.errors import DimensionError, GridMismatch
from morphokit.fields import (GridSpec, Image, ScalarField, Transformation, add_noise, compose,
                              curl2d, curl3d, divergence, interpolate, invert, jacobian_det,
                              max_node_distance, resample, ssd)
from morphokit.synth import make_rotational_pair, make_test_image

from conftest import smooth_displacement


def affine(grid, A, t=None):
    x = grid.coordinates()
    t = np.zeros(grid.dim) if t is None else np.asarray(t)
    coords = np.einsum("ab,b...->a...", np.asarray(A), x) + t.reshape(-1, *[1] * grid.dim)
    return Transformation.from_coordinates(grid, coords)


# ---------------------------------------------------------------- grid / types

def test_grid_validation():
    with pytest.raises(ValueError):
        GridSpec(2, 5)
    with pytest.raises(ValueError):
        GridSpec(5, 5, 2)
    with pytest.raises(ValueError):
        GridSpec(5, 5, spacing=0.0)
    g = GridSpec(5, 4, 3)
    assert g.dim == 3 and g.shape == (3, 4, 5) and g.size == 60


def test_fields_are_immutable():
    g = GridSpec(5, 5)
    T = Transformation.identity(g)
    with pytest.raises(ValueError):
        T.displacement[0, 2, 2] = 1.0


def test_shape_mismatch_rejected():
    with pytest.raises(GridMismatch):
        ScalarField(GridSpec(5, 5), np.zeros((4, 5)))


def test_image_values_clipped():
    img = Image(GridSpec(3, 3), np.full((3, 3), 1.7))
    assert img.values.max() == 1.0


# ---------------------------------------------------------------- operators

@pytest.mark.parametrize("grid", [GridSpec(9, 7), GridSpec(6, 5, 4, spacing=0.5)])
def test_identity_axioms(grid):
    T = Transformation.identity(grid)
    assert np.all(jacobian_det(T).values == 1.0)
    assert np.all(divergence(T).values == grid.dim)
    if grid.dim == 2:
        assert np.all(curl2d(T).values == 0.0)
    else:
        assert np.all(curl3d(T).components == 0.0)


def test_hand_computed_linear_map():
    g = GridSpec(8, 8)
    T = affine(g, [[1.1, 0.2], [-0.1, 0.9]])
    np.testing.assert_allclose(jacobian_det(T).values, 1.01, atol=1e-13)
    np.testing.assert_allclose(curl2d(T).values, -0.3, atol=1e-13)
    np.testing.assert_allclose(divergence(T).values, 2.0, atol=1e-13)


def test_affine_exactness_random_maps(rng):
    for k in range(20):
        dim = 2 if k % 2 == 0 else 3
        grid = GridSpec(7, 6, 5 if dim == 3 else 1, spacing=rng.uniform(0.5, 2.0))
        A = np.eye(dim) + rng.uniform(-0.3, 0.3, (dim, dim))
        T = affine(grid, A, rng.uniform(-1, 1, dim))
        np.testing.assert_allclose(jacobian_det(T).values, np.linalg.det(A), rtol=0, atol=1e-12)
        np.testing.assert_allclose(divergence(T).values, np.trace(A), atol=1e-12)
        if dim == 2:
            np.testing.assert_allclose(curl2d(T).values, A[1, 0] - A[0, 1], atol=1e-12)
        else:
            expect = [A[2, 1] - A[1, 2], A[0, 2] - A[2, 0], A[1, 0] - A[0, 1]]
            got = curl3d(T).components.reshape(3, -1)
            np.testing.assert_allclose(got, np.repeat(np.array(expect)[:, None], got.shape[1], 1),
                                       atol=1e-12)


def test_curl_dimension_errors():
    with pytest.raises(DimensionError):
        curl2d(Transformation.identity(GridSpec(4, 4, 4)))
    with pytest.raises(DimensionError):
        curl3d(Transformation.identity(GridSpec(4, 4)))


def test_rigid_rotation_curl3d_and_divergence():
    g = GridSpec(9, 9, 5)
    x, y, _ = g.coordinates()
    w = 0.01
    T = Transformation(g, np.stack([-w * y, w * x, np.zeros_like(x)]))
    c = curl3d(T).components
    np.testing.assert_allclose(c[2], 2 * w, atol=1e-14)
    np.testing.assert_allclose(c[:2], 0.0, atol=1e-14)
    g2 = GridSpec(9, 9)
    x, y = g2.coordinates()
    np.testing.assert_allclose(divergence(Transformation(g2, np.stack([-w * y, w * x]))).values,
                               2.0, atol=1e-14)


def _gradient_field_curl_error(n, dim):
    """Max curl of u = grad psi with psi = 0.01 prod sin(pi x / L), L = 1."""
    grid = GridSpec(n, n, n if dim == 3 else 1, spacing=1.0 / (n - 1))
    pts = grid.coordinates()
    s = [np.sin(np.pi * p) for p in pts]
    c = [np.pi * np.cos(np.pi * p) for p in pts]
    comps = []
    for a in range(dim):
        term = 0.01 * c[a]
        for b in range(dim):
            if b != a:
                term = term * s[b]
        comps.append(term)
    T = Transformation(grid, np.stack(comps))
    if dim == 2:
        return np.max(np.abs(curl2d(T).values)), grid.spacing
    return np.max(curl3d(T).norm()), grid.spacing


@pytest.mark.parametrize("dim,sizes", [(2, (17, 33, 65, 129)), (3, (9, 17, 33))])
def test_curl_of_gradient_field_converges_second_order(dim, sizes):
    errs, hs = zip(*[_gradient_field_curl_error(n, dim) for n in sizes])
    slope = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert 1.8 <= slope <= 2.2, slope


# ---------------------------------------------------------------- interpolation

def _brute_bilinear(values, h, px, py):
    ny, nx = values.shape
    qx = min(max(px / h, 0.0), nx - 1)
    qy = min(max(py / h, 0.0), ny - 1)
    i = min(int(np.floor(qx)), nx - 2)
    j = min(int(np.floor(qy)), ny - 2)
    fx, fy = qx - i, qy - j
    return ((1 - fx) * (1 - fy) * values[j, i] + fx * (1 - fy) * values[j, i + 1]
            + (1 - fx) * fy * values[j + 1, i] + fx * fy * values[j + 1, i + 1])


def test_resample_and_ssd_match_brute_force(rng):
    g = GridSpec(13, 11, spacing=0.7)
    img = Image(g, rng.uniform(0, 1, g.shape))
    T = Transformation(g, rng.uniform(-1.5, 1.5, (2, *g.shape)))
    out = resample(img, T).values
    X = T.coords
    ref = np.empty(g.shape)
    for j in range(g.ny):
        for i in range(g.nx):
            ref[j, i] = _brute_bilinear(img.values, g.spacing, X[0, j, i], X[1, j, i])
    np.testing.assert_allclose(out, np.clip(ref, 0, 1), rtol=1e-12, atol=0)

    other = Image(g, rng.uniform(0, 1, g.shape))
    total = 0.0
    for j in range(g.ny):
        for i in range(g.nx):
            total += (img.values[j, i] - other.values[j, i]) ** 2
    assert ssd(img, other) == pytest.approx(total * g.spacing ** 2, rel=1e-12)


def test_trilinear_exact_on_affine_values(rng):
    g = GridSpec(6, 5, 4)
    x, y, z = g.coordinates()
    vals = 0.3 + 0.1 * x - 0.2 * y + 0.05 * z
    pts = rng.uniform(0, 1, (3, 50)) * np.array(g.lengths)[:, None]
    np.testing.assert_allclose(interpolate(vals, g, pts),
                               0.3 + 0.1 * pts[0] - 0.2 * pts[1] + 0.05 * pts[2], atol=1e-13)


def test_interpolation_gradient_matches_finite_differences(rng):
    g = GridSpec(8, 7)
    vals = rng.uniform(0, 1, g.shape)
    pts = rng.uniform(0.3, 5.7, (2, 30)) + 0.013
    _, grad = interpolate(vals, g, pts, with_gradient=True)
    eps = 1e-6
    for b in range(2):
        d = np.zeros((2, 1))
        d[b] = eps
        fd = (interpolate(vals, g, pts + d) - interpolate(vals, g, pts - d)) / (2 * eps)
        np.testing.assert_allclose(grad[b], fd, atol=1e-7)


def test_resample_identity_bitwise(rng):
    g = GridSpec(10, 9)
    img = Image(g, rng.uniform(0, 1, g.shape))
    assert np.array_equal(resample(img, Transformation.identity(g)).values, img.values)


def test_out_of_domain_samples_clamp():
    g = GridSpec(5, 5)
    img = Image(g, np.tile(np.linspace(0, 1, 5), (5, 1)))
    T = Transformation(g, np.stack([np.full(g.shape, 10.0), np.zeros(g.shape)]))
    assert np.all(resample(img, T).values == 1.0)


def test_grid_mismatch():
    with pytest.raises(GridMismatch):
        resample(Image(GridSpec(5, 5), np.zeros((5, 5))), Transformation.identity(GridSpec(6, 5)))
    with pytest.raises(GridMismatch):
        compose(Transformation.identity(GridSpec(5, 5)), Transformation.identity(GridSpec(5, 6)))
    with pytest.raises(GridMismatch):
        ssd(Image(GridSpec(5, 5), np.zeros((5, 5))), Image(GridSpec(4, 5), np.zeros((5, 4))))


@settings(max_examples=30, deadline=None)
@given(c=st.floats(0, 1), seed=st.integers(0, 10_000), amp=st.floats(0, 3))
def test_constant_image_invariant_under_any_map(c, seed, amp):
    g = GridSpec(7, 6)
    r = np.random.default_rng(seed)
    T = Transformation(g, r.uniform(-amp, amp, (2, *g.shape)))
    out = resample(Image(g, np.full(g.shape, c)), T).values
    np.testing.assert_allclose(out, c, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_ssd_metric_properties(seed):
    r = np.random.default_rng(seed)
    g = GridSpec(6, 6, spacing=r.uniform(0.2, 2))
    a, b = Image(g, r.uniform(0, 1, g.shape)), Image(g, r.uniform(0, 1, g.shape))
    assert ssd(a, b) == ssd(b, a) >= 0
    assert ssd(a, a) == 0.0


def test_ssd_hand_value():
    g = GridSpec(4, 4)
    assert ssd(Image(g, np.ones((4, 4))), Image(g, np.zeros((4, 4)))) == 16.0


def test_checker_under_rotational_map_regression():
    g = GridSpec(128, 128)
    d1, _ = make_rotational_pair(g)
    img = make_test_image(g, "checker")
    assert ssd(resample(img, d1), img) == pytest.approx(350.8245912635223, rel=1e-9)


# ---------------------------------------------------------------- composition

def test_compose_identity_both_sides():
    g = GridSpec(16, 16)
    T = smooth_displacement(g, 1.5, seed=3)
    I = Transformation.identity(g)
    assert max_node_distance(compose(I, T), T) == 0.0
    assert max_node_distance(compose(T, I), T) < 1e-14


def test_jacobian_multiplicative_under_composition():
    g = GridSpec(64, 64)
    T1 = smooth_displacement(g, 2.0, seed=1)
    T2 = smooth_displacement(g, 2.0, seed=2)
    lhs = jacobian_det(compose(T2, T1)).values
    rhs = interpolate(jacobian_det(T2).values, g, T1.coords) * jacobian_det(T1).values
    rel = np.linalg.norm(lhs - rhs) / np.linalg.norm(rhs)
    assert rel <= 0.02, rel


def test_small_displacements_add_under_composition():
    g = GridSpec(64, 64)
    T1 = smooth_displacement(g, 0.5, seed=4)
    T2 = smooth_displacement(g, 0.5, seed=5)
    added = Transformation(g, T1.displacement + T2.displacement)
    assert max_node_distance(compose(T2, T1), added) <= 0.1


def test_invert_roundtrip():
    g = GridSpec(48, 48)
    T = smooth_displacement(g, 3.0, seed=6)
    Ti = invert(T)
    ident = Transformation.identity(g)
    assert Ti.boundary_is_identity()
    assert max_node_distance(compose(T, Ti), ident) < 1e-6
    assert max_node_distance(compose(Ti, T), ident) < 0.05


# ---------------------------------------------------------------- noise

def test_add_noise_contract():
    g = GridSpec(64, 64)
    d1, _ = make_rotational_pair(g)
    assert add_noise(d1, 0.0, 7) is d1
    a, b = add_noise(d1, 0.5, 7), add_noise(d1, 0.5, 7)
    assert np.array_equal(a.displacement, b.displacement)
    assert a.boundary_is_identity()
    assert not np.array_equal(a.displacement, add_noise(d1, 0.5, 8).displacement)
    np.testing.assert_allclose(np.max(np.abs(a.displacement - d1.displacement)), 0.5)
    assert float(jacobian_det(a).values.min()) == pytest.approx(0.5218145088054685, rel=1e-9)
    with pytest.raises(ValueError):
        add_noise(d1, -1.0, 0)
