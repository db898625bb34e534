"""Unbiased template construction from a cohort of congruent 2D images.

Two pipelines share one building block, the *pass*: register the current
template to every cohort image, average the resulting maps through their
Jacobian determinants and curls, and warp the template by the average.

* ``build_general`` repeats passes.
* ``build_fast`` runs one pass, then one more registration fan-out whose
  maps give the Jacobian and curl of a correction map directly.

Direction convention (shared by every map here): ``phi_j`` maps template
coordinates into image ``j``, so ``resample(template, phi_j)`` approximates
``I_j``.  Under this convention the correction targets
``J = N / sum_j J(phi_j)`` and ``curl = -mean_j curl(phi_j)`` describe the map
``H`` with ``resample(unbiased, H) ~ temporary``; the corrected template is
therefore the temporary one warped by ``H^-1``.

Templates are always resampled from the initial image through the composed
maps, so interpolation blur is paid once rather than once per pass.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError, EmptyInput, MorphoError, SingularJacobianSum
from .fields import (Image, ScalarField, Transformation, check_congruent, compose, curl2d,
                     invert, jacobian_det, max_node_distance, resample, ssd)
from .registration import RegistrationOptions, RegistrationResult, register
from .varcon import (DescentOptions, VarConProblem, _ordered_mean,
                     average_transformations, normalize_f0, solve)

log = logging.getLogger(__name__)


@dataclass
class Cohort:
    images: list
    labels: list | None = None

    def __post_init__(self):
        self.images = list(self.images)
        if len(self.images) < 2:
            raise EmptyInput("a cohort needs at least two images")
        grid = check_congruent(*self.images)
        if grid.dim != 2:
            raise DimensionError("template construction is 2D")
        if self.labels is None:
            self.labels = [f"I{j + 1}" for j in range(len(self.images))]
        elif len(self.labels) != len(self.images):
            raise ValueError("one label per image is required")

    def __len__(self):
        return len(self.images)

    @property
    def grid(self):
        return self.images[0].grid


@dataclass
class TemplateOptions:
    registration: RegistrationOptions = field(
        default_factory=lambda: RegistrationOptions(outer_max=300, ssd_tol=1e-3))
    averaging: DescentOptions = field(
        default_factory=lambda: DescentOptions(max_steps=2000, obj_tol=1e-6))
    workers: int = 1


@dataclass
class PassRecord:
    """Diagnostics of one registration fan-out (and its averaging, if any)."""

    label: str
    registrations: list
    registered_ssd: list
    averaging: dict | None = None
    template_ssd_to_reference: float | None = None
    error_ratio: float | None = None

    def to_dict(self) -> dict:
        vals = np.asarray(self.registered_ssd)
        return {
            "label": self.label,
            "registered_ssd": list(map(float, vals)),
            "registered_ssd_mean": float(vals.mean()),
            "registered_ssd_std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0,
            "registrations": [r.to_dict() for r in self.registrations],
            "averaging": self.averaging,
            "template_ssd_to_reference": self.template_ssd_to_reference,
            "error_ratio": self.error_ratio,
        }


@dataclass
class TemplateRunReport:
    mode: str
    init_index: int
    labels: list
    initial_ssd_to_reference: float | None = None
    passes: list = field(default_factory=list)

    @property
    def final_ssd_to_reference(self):
        return self.passes[-1].template_ssd_to_reference if self.passes else None

    def to_dict(self) -> dict:
        return {"mode": self.mode, "init_index": self.init_index,
                "labels": list(self.labels),
                "initial_ssd_to_reference": self.initial_ssd_to_reference,
                "final_ssd_to_reference": self.final_ssd_to_reference,
                "passes": [p.to_dict() for p in self.passes]}


def _annotate(exc: MorphoError, j: int, label: str) -> MorphoError:
    exc.args = (f"image {j} ({label}): {exc.args[0] if exc.args else ''}",) + exc.args[1:]
    return exc


def _fan_out(cohort: Cohort, current: Image, reg_opts, workers: int) -> list:
    """Register ``current`` onto every cohort image; results in cohort order."""

    def one(j):
        try:
            return register(current, cohort.images[j], reg_opts)
        except MorphoError as exc:
            raise _annotate(exc, j, cohort.labels[j])

    idx = range(len(cohort))
    if workers <= 1:
        return [one(j) for j in idx]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(one, idx))


def _registered_ssd(current, cohort, results):
    return [ssd(resample(current, r.phi), img) for r, img in zip(results, cohort.images)]


def _average(results, vc_opts):
    avg, report = average_transformations([r.phi for r in results], opts=vc_opts)
    return avg, report


def template_pass(cohort: Cohort, current: Image,
                  reg_opts: RegistrationOptions = TemplateOptions().registration,
                  vc_opts: DescentOptions = TemplateOptions().averaging, workers: int = 1):
    """One register-average-resample pass.

    Returns ``(resample(current, avg), avg, [phi_j])``.
    """
    check_congruent(current, *cohort.images)
    results = _fan_out(cohort, current, reg_opts, workers)
    avg, _ = _average(results, vc_opts)
    return resample(current, avg), avg, [r.phi for r in results]


@dataclass
class _State:
    """Template as the initial image warped by an accumulated map."""

    initial: Image
    warp: Transformation

    @property
    def image(self) -> Image:
        return resample(self.initial, self.warp)


def _score(rec: PassRecord, image: Image, reference, base):
    if reference is not None:
        rec.template_ssd_to_reference = ssd(image, reference)
        rec.error_ratio = rec.template_ssd_to_reference / base if base > 0 else 0.0


def _general_pass(cohort, state: _State, opts: TemplateOptions, label: str):
    current = state.image
    results = _fan_out(cohort, current, opts.registration, opts.workers)
    avg, report = _average(results, opts.averaging)
    rec = PassRecord(label, results, _registered_ssd(current, cohort, results), report.to_dict())
    return _State(state.initial, compose(state.warp, avg)), rec


def _start(cohort: Cohort, init_index: int, reference):
    if not 0 <= init_index < len(cohort):
        raise IndexError(f"init_index {init_index} outside cohort of {len(cohort)}")
    if reference is not None:
        check_congruent(reference, *cohort.images)
    initial = cohort.images[init_index]
    base = ssd(initial, reference) if reference is not None else None
    return _State(initial, Transformation.identity(cohort.grid)), base


def build_general(cohort: Cohort, init_index: int, passes: int = 2,
                  reference: Image | None = None, opts: TemplateOptions = TemplateOptions()):
    """Iterated template passes starting from ``cohort.images[init_index]``.

    Returns ``(template, TemplateRunReport)``.  With a reference image each
    pass also records the template's SSD to it and the error ratio
    ``SSD(template, ref) / SSD(initial, ref)``.
    """
    image, report, _ = general_with_first_pass(cohort, init_index, passes, reference, opts)
    return image, report


def correction_field_targets(phis, normalize: bool = True):
    """Jacobian and curl targets ``N / sum J(phi_j)`` and ``-mean curl(phi_j)``.

    The Jacobian target is rescaled to unit mean unless ``normalize`` is
    false.  Sums use a node-wise sorted order, so the result does not depend
    on the order of ``phis``.
    """
    phis = list(phis)
    if not phis:
        raise EmptyInput("need at least one registration map")
    grid = check_congruent(*phis)
    n = len(phis)
    jac_sum = _ordered_mean(np.stack([jacobian_det(p).values for p in phis]))
    if np.any(jac_sum <= 0):
        raise SingularJacobianSum(
            f"sum of Jacobians reaches {np.min(jac_sum):.6g} <= 0 at "
            f"{int(np.sum(jac_sum <= 0))} nodes")
    f0 = ScalarField(grid, n / jac_sum)
    g0 = ScalarField(grid, -_ordered_mean(np.stack([curl2d(p).values for p in phis])) / n)
    return (normalize_f0(f0) if normalize else f0), g0


def build_fast(cohort: Cohort, init_index: int, reference: Image | None = None,
               opts: TemplateOptions = TemplateOptions(), first_pass=None):
    """One template pass followed by a single correction map.

    ``first_pass`` may carry the pass-1 pair returned by
    :func:`general_with_first_pass` for the same init, so pass 1 is not
    recomputed.
    """
    state, base = _start(cohort, init_index, reference)
    report = TemplateRunReport("fast", init_index, list(cohort.labels), base)
    if first_pass is None:
        state, rec = _general_pass(cohort, state, opts, "pass 1")
        _score(rec, state.image, reference, base)
    else:
        state, rec = first_pass
    report.passes.append(rec)

    temp = state.image
    results = _fan_out(cohort, temp, opts.registration, opts.workers)
    f0, g0 = correction_field_targets([r.phi for r in results])
    H, vc = solve(VarConProblem(f0, g0), opts.averaging)
    H_inv = invert(H)
    state = _State(state.initial, compose(state.warp, H_inv))
    averaging = vc.to_dict()
    averaging["inverse_roundtrip_error"] = max_node_distance(
        compose(H, H_inv), Transformation.identity(cohort.grid))
    corr = PassRecord("correction", results, _registered_ssd(temp, cohort, results), averaging)
    _score(corr, state.image, reference, base)
    report.passes.append(corr)
    return state.image, report


def general_with_first_pass(cohort: Cohort, init_index: int, passes: int = 2,
                            reference: Image | None = None,
                            opts: TemplateOptions = TemplateOptions()):
    """``build_general`` that also returns pass 1 for reuse by ``build_fast``."""
    if passes < 1:
        raise ValueError("passes must be >= 1")
    state, base = _start(cohort, init_index, reference)
    report = TemplateRunReport("general", init_index, list(cohort.labels), base)
    first = None
    for k in range(passes):
        state, rec = _general_pass(cohort, state, opts, f"pass {k + 1}")
        _score(rec, state.image, reference, base)
        report.passes.append(rec)
        log.info("general init %d %s: ssd_to_ref=%s", init_index, rec.label,
                 rec.template_ssd_to_reference)
        if first is None:
            first = (state, rec)
    return state.image, report, first


def verify_against_reference(template: Image, reference: Image,
                             reg_opts: RegistrationOptions = TemplateOptions().registration):
    """Register ``template`` onto ``reference``; an unbiased template gives ~Id."""
    result: RegistrationResult = register(template, reference, reg_opts)
    jac = jacobian_det(result.phi).values
    curl = curl2d(result.phi).values
    return result, {"min_J": float(jac.min()), "max_J": float(jac.max()),
                    "min_curl": float(curl.min()), "max_curl": float(curl.max()),
                    "max_displacement": result.phi.max_displacement()}


def dispersion(values) -> dict:
    """Sample mean and standard deviation (``ddof=1``) of per-init SSDs."""
    vals = np.asarray(values, dtype=float)
    return {"values": list(map(float, vals)), "mean": float(vals.mean()),
            "std": float(vals.std(ddof=1)) if vals.size > 1 else 0.0}
