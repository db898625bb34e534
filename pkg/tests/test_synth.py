import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from morphokit.errors import DimensionError, SpecOutOfRange
from morphokit.fields import (GridSpec, Image, Transformation, curl2d, jacobian_det, partial,
                              resample, ssd)
from morphokit.synth import (DEFAULT_MAX_ANGLE, RotationalSpec, make_family6,
                             make_rotational_pair, make_test_image, make_twisted_volume)

G128 = GridSpec(128, 128)


def test_default_pair_band():
    d1, d2 = make_rotational_pair(G128)
    for d in (d1, d2):
        j = jacobian_det(d).values
        assert 0.996 <= j.min() and j.max() <= 1.003
        assert d.boundary_is_identity() and d.diffeomorphic
    # the default sits just under the band edge
    wider, _ = make_rotational_pair(G128, RotationalSpec(max_angle=DEFAULT_MAX_ANGLE + 0.02))
    assert jacobian_det(wider).values.max() > 1.003


def test_pair_curls_cancel():
    d1, d2 = make_rotational_pair(G128)
    total = curl2d(d1).values + curl2d(d2).values
    assert np.max(np.abs(total)) <= 1e-12
    assert np.max(np.abs(curl2d(d1).values)) > 0.1


def test_pair_zero_angle_is_identity():
    d1, d2 = make_rotational_pair(GridSpec(32, 32), RotationalSpec(max_angle=0.0))
    assert np.all(d1.displacement == 0) and np.all(d2.displacement == 0)


def test_pair_rejects_bad_specs():
    g = GridSpec(32, 32)
    with pytest.raises(SpecOutOfRange):
        make_rotational_pair(g, RotationalSpec(radius=-1.0))
    with pytest.raises(SpecOutOfRange):
        make_rotational_pair(g, RotationalSpec(center=(5.0, 5.0), radius=10.0))
    with pytest.raises(SpecOutOfRange):
        make_rotational_pair(g, RotationalSpec(max_angle=4.0))
    with pytest.raises(DimensionError):
        make_rotational_pair(GridSpec(8, 8, 8))


def test_pair_turns_nodes_near_the_centre():
    d1, _ = make_rotational_pair(G128)
    r = np.array([0.0, 6.5])             # node (63, 70) relative to the centre 63.5
    u = d1.displacement[:, 70, 63]
    turned = np.arctan2(r[1] + u[1], r[0] - 0.5 + u[0]) - np.arctan2(r[1], r[0] - 0.5)
    assert turned > 0.5


@pytest.mark.parametrize("seed", [0, 1, 2, 3])
@pytest.mark.parametrize("n", [64, 128])
def test_family6_contract(seed, n):
    g = GridSpec(n, n)
    fam = make_family6(g, seed)
    assert len(fam) == 6
    mean_j = np.mean([jacobian_det(T).values for T in fam], axis=0)
    mean_c = np.mean([curl2d(T).values for T in fam], axis=0)
    assert np.max(np.abs(mean_j - 1.0)) <= 5e-5
    assert np.max(np.abs(mean_c)) <= 1e-12
    for T in fam:
        assert T.boundary_is_identity() and T.diffeomorphic
        assert jacobian_det(T).values.min() > 0.5
        assert T.max_displacement() >= 2.0 * g.spacing


def test_family6_deterministic_and_seeded():
    g = GridSpec(32, 32)
    a, b, c = make_family6(g, 5), make_family6(g, 5), make_family6(g, 6)
    assert all(np.array_equal(x.displacement, y.displacement) for x, y in zip(a, b))
    assert not np.array_equal(a[0].displacement, c[0].displacement)


@pytest.mark.parametrize("kind", ["rings", "blobs", "checker"])
def test_test_images(kind):
    g = GridSpec(64, 64)
    a, b = make_test_image(g, kind, 3), make_test_image(g, kind, 3)
    assert np.array_equal(a.values, b.values)
    assert 0.0 <= a.values.min() and a.values.max() <= 1.0
    grad = np.hypot(partial(a.values, g, 0), partial(a.values, g, 1))
    assert np.mean(grad > 1e-3) >= 0.6


def test_rings_radially_symmetric():
    g = GridSpec(65, 65)
    img = make_test_image(g, "rings").values
    assert np.allclose(img, img.T, atol=1e-14)
    assert np.allclose(img, img[::-1], atol=1e-14)
    assert np.allclose(img, img[:, ::-1], atol=1e-14)


def test_blob_seeds_differ_and_unknown_kind():
    g = GridSpec(32, 32)
    assert ssd(make_test_image(g, "blobs", 0), make_test_image(g, "blobs", 1)) > 0
    with pytest.raises(ValueError):
        make_test_image(g, "stripes")
    with pytest.raises(DimensionError):
        make_test_image(GridSpec(8, 8, 8))


def test_warped_image_matches_resampling():
    g = GridSpec(64, 64)
    D = make_family6(g, 0)[0]
    analytic = make_test_image(g, "blobs", 1, warp=D)
    resampled = resample(make_test_image(g, "blobs", 1), D)
    assert ssd(analytic, resampled) < 0.01 * ssd(analytic, make_test_image(g, "blobs", 1))


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2 ** 31))
def test_generators_deterministic_for_any_seed(seed):
    g = GridSpec(16, 16)
    assert np.array_equal(make_test_image(g, "blobs", seed).values,
                          make_test_image(g, "blobs", seed).values)


def test_twisted_volume_contract():
    I0, It, maps = make_twisted_volume(16, 0.7)
    assert I0.grid.shape == (16, 16, 16) and len(maps) == 16
    for T in maps:
        assert jacobian_det(T).values.min() > 0 and T.boundary_is_identity()
    assert ssd(I0, It) > 0
    # the object is not rotationally symmetric: opposite views differ
    a, b = I0.values[2], I0.values[10]
    assert np.sum((a - b) ** 2) > 0.1
    same0, same_t, _ = make_twisted_volume(16, 0.0)
    assert np.array_equal(same0.values, same_t.values)
    with pytest.raises(ValueError):
        make_twisted_volume(8)


def test_twisted_slices_are_consistent_with_their_maps():
    I0, It, maps = make_twisted_volume(24, 0.7)
    g2 = GridSpec(24, 24)
    k = 12
    back = resample(Image(g2, It.values[k]), maps[k]).values
    before = np.sum((It.values[k] - I0.values[k]) ** 2)
    assert np.sum((back - I0.values[k]) ** 2) < 0.2 * before
