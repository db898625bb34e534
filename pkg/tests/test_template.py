import numpy as np
import pytest

from morphokit import template as template_mod
from morphokit.errors import (ConvergenceFailure, EmptyInput, GridMismatch, MorphoError,
                              SingularJacobianSum)
from morphokit.fields import (GridSpec, Image, ScalarField, Transformation, curl2d,
                              jacobian_det, max_node_distance, ssd)
from morphokit.registration import RegistrationOptions
from morphokit.synth import make_family6, make_test_image
from morphokit.template import (Cohort, TemplateOptions, build_fast, build_general,
                                correction_field_targets, dispersion, template_pass)
from morphokit.varcon import _ordered_mean

from conftest import smooth_displacement


def small_opts(outer=100, workers=1):
    opts = TemplateOptions(workers=workers)
    opts.registration = RegistrationOptions(outer_max=outer, ssd_tol=1e-3)
    return opts


@pytest.fixture(scope="module")
def cohort32():
    g = GridSpec(32, 32)
    gt = make_test_image(g, "blobs", 1)
    images = [make_test_image(g, "blobs", 1, warp=D) for D in make_family6(g, 0)]
    return gt, Cohort(images)


# ---------------------------------------------------------------- cohort

def test_cohort_validation():
    g = GridSpec(8, 8)
    img = Image(g, np.zeros(g.shape))
    with pytest.raises(EmptyInput):
        Cohort([img])
    with pytest.raises(GridMismatch):
        Cohort([img, Image(GridSpec(9, 8), np.zeros((8, 9)))])
    with pytest.raises(ValueError):
        Cohort([img, img], ["a"])
    assert Cohort([img, img]).labels == ["I1", "I2"]


# ---------------------------------------------------------------- correction targets

def test_correction_targets_identity():
    g = GridSpec(10, 10)
    f0, g0 = correction_field_targets([Transformation.identity(g)] * 4)
    assert np.all(f0.values == 1.0) and np.all(g0.values == 0.0)


def test_correction_targets_single_affine_map():
    g = GridSpec(10, 10)
    c = 0.3
    A = np.array([[2.0, -c / 2], [c / 2, 1.0 + c * c / 8]])
    A[1, 1] = (2.0 + A[0, 1] * A[1, 0]) / A[0, 0]      # det = 2
    x = g.coordinates()
    T = Transformation.from_coordinates(g, np.einsum("ab,b...->a...", A, x))
    f0, g0 = correction_field_targets([T], normalize=False)
    np.testing.assert_allclose(f0.values, 0.5, atol=1e-14)
    np.testing.assert_allclose(g0.values, -c, atol=1e-14)


def test_correction_jacobian_is_reciprocal_of_mean(rng):
    g = GridSpec(24, 24)
    phis = [smooth_displacement(g, 1.5, seed=s) for s in range(6)]
    f0, _ = correction_field_targets(phis, normalize=False)
    jac = np.stack([jacobian_det(p).values for p in phis])
    mean = _ordered_mean(jac) / len(phis)
    assert np.max(np.abs(f0.values - 1.0 / mean)) <= 1e-15
    assert np.max(np.abs(f0.values - 1.0 / jac.mean(axis=0))) <= 1e-15


def test_correction_targets_reject_folded_sum():
    g = GridSpec(10, 10)
    x, y = g.coordinates()
    fold = Transformation(g, np.stack([-3.0 * x, np.zeros_like(x)]))
    with pytest.raises(SingularJacobianSum):
        correction_field_targets([fold, Transformation.identity(g)])
    with pytest.raises(EmptyInput):
        correction_field_targets([])


def test_correction_targets_order_free():
    g = GridSpec(16, 16)
    phis = [smooth_displacement(g, 1.0, seed=s) for s in range(5)]
    a = correction_field_targets(phis)
    b = correction_field_targets(phis[::-1])
    assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1].values, b[1].values)


# ---------------------------------------------------------------- pipelines

def test_identical_cohort_is_a_fixed_point():
    g = GridSpec(24, 24)
    img = make_test_image(g, "blobs", 2)
    cohort = Cohort([img] * 3)
    ident = Transformation.identity(g)
    out, avg, phis = template_pass(cohort, img)
    assert np.max(np.abs(out.values - img.values)) <= 1e-6
    assert max_node_distance(avg, ident) <= 0.1
    assert all(max_node_distance(p, ident) <= 0.1 for p in phis)
    for build in (lambda: build_general(cohort, 1, 1), lambda: build_fast(cohort, 1)):
        result, report = build()
        assert np.max(np.abs(result.values - img.values)) <= 1e-6
        assert report.final_ssd_to_reference is None


def test_one_pass_reduces_bias(cohort32):
    gt, cohort = cohort32
    out, _, phis = template_pass(cohort, cohort.images[3], small_opts().registration)
    assert ssd(out, gt) < ssd(cohort.images[3], gt)
    assert len(phis) == len(cohort)


def test_general_and_fast_reports(cohort32):
    gt, cohort = cohort32
    opts = small_opts()
    img, rep = build_general(cohort, 1, 2, gt, opts)
    assert rep.mode == "general" and len(rep.passes) == 2
    base = ssd(cohort.images[1], gt)
    assert rep.initial_ssd_to_reference == pytest.approx(base)
    for p in rep.passes:
        assert len(p.registrations) == len(p.registered_ssd) == len(cohort)
        assert p.error_ratio == pytest.approx(p.template_ssd_to_reference / base)
        assert p.error_ratio < 1.0
    assert rep.final_ssd_to_reference == pytest.approx(ssd(img, gt))
    d = rep.to_dict()
    regs = d["passes"][0]["registrations"]
    assert all("ssd_trace" in r and "min_J" in r for r in regs)

    fimg, frep = build_fast(cohort, 1, gt, opts)
    assert frep.mode == "fast" and [p.label for p in frep.passes] == ["pass 1", "correction"]
    assert frep.passes[1].averaging["inverse_roundtrip_error"] < 1e-6
    assert frep.final_ssd_to_reference <= frep.passes[0].template_ssd_to_reference * 1.5
    assert frep.final_ssd_to_reference <= 2.0 * rep.final_ssd_to_reference


def test_worker_count_does_not_change_the_template(cohort32):
    gt, cohort = cohort32
    a, _ = build_general(cohort, 0, 1, gt, small_opts(outer=30, workers=1))
    b, _ = build_general(cohort, 0, 1, gt, small_opts(outer=30, workers=3))
    assert np.array_equal(a.values, b.values)


def test_argument_errors(cohort32):
    _, cohort = cohort32
    with pytest.raises(IndexError):
        build_general(cohort, 6)
    with pytest.raises(ValueError):
        build_general(cohort, 0, passes=0)


def test_registration_failures_name_the_image(cohort32, monkeypatch):
    _, cohort = cohort32
    real = template_mod.register

    def flaky(moving, fixed, opts):
        if fixed is cohort.images[2]:
            raise ConvergenceFailure("no progress", residual=1.0)
        return real(moving, fixed, opts)

    monkeypatch.setattr(template_mod, "register", flaky)
    with pytest.raises(MorphoError, match=r"image 2 \(I3\)"):
        template_pass(cohort, cohort.images[0], small_opts(outer=5).registration)


def test_dispersion_uses_sample_std():
    d = dispersion([1.0, 2.0, 3.0])
    assert d["mean"] == 2.0 and d["std"] == 1.0
