"""End-to-end replica scenarios shared by ``morphokit repro`` and the tests.

Each ``run_*`` function returns a JSON-ready result dict plus the large
objects (maps, images) a caller may want to save or plot.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .fields import (GridSpec, Image, Transformation, add_noise, curl2d, jacobian_det,
                     max_node_distance, resample, ssd)
from .registration import RegistrationOptions, register
from .synth import (RotationalSpec, make_family6, make_rotational_pair, make_test_image,
                    make_twisted_volume)
from .template import (Cohort, TemplateOptions, build_fast, dispersion, general_with_first_pass,
                       verify_against_reference)
from .varcon import DescentOptions, VarConProblem, average_transformations, solve

NOISE_AMPLITUDE = 0.5
NOISE_SEED = 7


@dataclass
class ScenarioOutput:
    result: dict
    maps: dict = field(default_factory=dict)
    images: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)


def _band(values) -> dict:
    return {"min": float(np.min(values)), "max": float(np.max(values))}


def run_example1(n: int = 128) -> ScenarioOutput:
    """Counter-rotating pair: equal Jacobians, opposite curls, different images."""
    t0 = time.perf_counter()
    grid = GridSpec(n, n)
    d1, d2 = make_rotational_pair(grid, RotationalSpec())
    img = make_test_image(grid, "checker")
    w1, w2 = resample(img, d1), resample(img, d2)
    curl_sum = curl2d(d1).values + curl2d(d2).values
    result = {
        "grid": n,
        "J_D1": _band(jacobian_det(d1).values),
        "J_D2": _band(jacobian_det(d2).values),
        "curl_D1": _band(curl2d(d1).values),
        "curl_D2": _band(curl2d(d2).values),
        "max_abs_curl_sum": float(np.max(np.abs(curl_sum))),
        "ssd_D1_vs_D2_images": ssd(w1, w2),
        "ssd_D1_image_vs_original": ssd(w1, img),
        "seconds": time.perf_counter() - t0,
    }
    return ScenarioOutput(result, {"D1": d1, "D2": d2},
                          {"I0": img, "I0 o D1": w1, "I0 o D2": w2})


def run_example2(n: int = 64, noise: float = 0.0, seed: int = NOISE_SEED,
                 opts: DescentOptions = DescentOptions()) -> ScenarioOutput:
    """Deform D1 (optionally noisy) into D2 from D2's Jacobian and curl alone."""
    t0 = time.perf_counter()
    grid = GridSpec(n, n)
    d1, d2 = make_rotational_pair(grid, RotationalSpec())
    start = add_noise(d1, noise, seed) if noise > 0 else d1
    problem = VarConProblem(jacobian_det(d2), curl2d(d2), start)
    min_j_seen = [float(jacobian_det(start).interior_values().min())]
    T, report = solve(problem, opts, callback=lambda k, T: min_j_seen.append(
        float(jacobian_det(T).interior_values().min())))
    trace = np.asarray(report.objective_trace)
    result = {
        "grid": n, "noise_amplitude": noise, "noise_seed": seed if noise > 0 else None,
        "start_min_J": min_j_seen[0],
        "start_distance_to_D2": max_node_distance(start, d2),
        "final_max_node_error": max_node_distance(T, d2),
        "objective_start": float(trace[0]), "objective_final": float(trace[-1]),
        "strictly_decreasing": bool(np.all(np.diff(trace) < 0)),
        "min_J_over_accepted_steps": float(min(min_j_seen[1:] or min_j_seen)),
        "solver": {k: v for k, v in report.to_dict().items() if k != "objective_trace"},
        "seconds": time.perf_counter() - t0,
    }
    return ScenarioOutput(result, {"start": start, "D2": d2, "result": T},
                          traces={"objective": report.objective_trace})


def run_averaging(n: int = 64, seed: int = 0) -> ScenarioOutput:
    grid = GridSpec(n, n)
    d1, d2 = make_rotational_pair(grid, RotationalSpec())
    fam = make_family6(grid, seed)
    avg_pair, rep_pair = average_transformations([d1, d2])
    avg_fam, rep_fam = average_transformations(fam)
    mean_j = np.mean([jacobian_det(T).values for T in fam], axis=0)
    mean_c = np.mean([curl2d(T).values for T in fam], axis=0)
    result = {
        "pair_average_distance_to_identity": avg_pair.max_displacement(),
        "family_average_distance_to_identity": avg_fam.max_displacement(),
        "family_mean_J": _band(mean_j), "family_max_abs_mean_curl": float(np.abs(mean_c).max()),
        "pair_solver": rep_pair.termination, "family_solver": rep_fam.termination,
    }
    return ScenarioOutput(result, {"avg(D1,D2)": avg_pair, "avg(family)": avg_fam})


def template_cohort(n: int = 64, seed: int = 0, image_seed: int = 1):
    """Ground truth and six cohort images ``GT o D_i`` sampled without interpolation."""
    grid = GridSpec(n, n)
    gt = make_test_image(grid, "blobs", image_seed)
    fam = make_family6(grid, seed)
    images = [make_test_image(grid, "blobs", image_seed, warp=D) for D in fam]
    return gt, Cohort(images, [f"I{j + 1}" for j in range(len(images))]), fam


def run_templates(n: int = 64, inits=None, fast: bool = True, verify: bool = True,
                  opts: TemplateOptions = TemplateOptions()) -> ScenarioOutput:
    """General (two passes) and, optionally, fast templates for each init."""
    t0 = time.perf_counter()
    gt, cohort, _ = template_cohort(n)
    inits = list(range(len(cohort))) if inits is None else list(inits)
    base = [ssd(img, gt) for img in cohort.images]
    rows, images = [], {"GT": gt}
    for i in inits:
        g_img, g_rep, first = general_with_first_pass(cohort, i, 2, gt, opts)
        row = {"init": i, "label": cohort.labels[i], "base_ssd": base[i],
               "pass1_ssd": g_rep.passes[0].template_ssd_to_reference,
               "pass1_ratio": g_rep.passes[0].error_ratio,
               "general_ssd": g_rep.passes[1].template_ssd_to_reference,
               "general_ratio": g_rep.passes[1].error_ratio,
               "general_report": g_rep.to_dict()}
        images[f"general {cohort.labels[i]}"] = g_img
        if verify:
            _, row["general_verification"] = verify_against_reference(g_img, gt, opts.registration)
        if fast:
            f_img, f_rep = build_fast(cohort, i, gt, opts, first_pass=first)
            row.update(fast_ssd=f_rep.passes[-1].template_ssd_to_reference,
                       fast_ratio=f_rep.passes[-1].error_ratio, fast_report=f_rep.to_dict())
            images[f"fast {cohort.labels[i]}"] = f_img
            if verify:
                _, row["fast_verification"] = verify_against_reference(f_img, gt,
                                                                       opts.registration)
        rows.append(row)
    summary = {"base_ssd": base,
               "pass1": dispersion([r["pass1_ssd"] for r in rows]),
               "general": dispersion([r["general_ssd"] for r in rows])}
    if fast:
        summary["fast"] = dispersion([r["fast_ssd"] for r in rows])
    result = {"grid": n, "inits": inits, "summary": summary, "per_init": rows,
              "seconds": time.perf_counter() - t0}
    return ScenarioOutput(result, images=images)


def twisted_slice_errors(phi: Transformation, maps) -> list:
    """Per-slice max node distance between a 3D map and the in-plane truths."""
    errs = []
    for k, T in enumerate(maps):
        d = phi.displacement[:, k]
        dx = d[0] - T.displacement[0]
        dy = d[1] - T.displacement[1]
        errs.append(float(np.max(np.sqrt(dx * dx + dy * dy + d[2] * d[2]))))
    return errs


EXAMPLE5_OPTIONS = RegistrationOptions(outer_max=600, ssd_tol=1e-5)


def run_example5(n: int = 24, twist_max: float = 0.7,
                 opts: RegistrationOptions = EXAMPLE5_OPTIONS) -> ScenarioOutput:
    """Register the twisted volume back onto the original in 3D."""
    t0 = time.perf_counter()
    I0, It, maps = make_twisted_volume(n, twist_max)
    res = register(It, I0, opts)
    errs = twisted_slice_errors(res.phi, maps)
    truth = [T.max_displacement() for T in maps]
    result = {
        "grid": n, "twist_max": twist_max,
        "ssd_initial": res.ssd_trace[0], "ssd_final": res.ssd_trace[-1],
        "ssd_reduction": res.ssd_trace[0] / res.ssd_trace[-1],
        "per_slice_max_error": errs, "per_slice_true_max_displacement": truth,
        "max_slice_error": max(errs), "min_J": res.min_J,
        "registration": {k: v for k, v in res.to_dict().items() if k != "ssd_trace"},
        "seconds": time.perf_counter() - t0,
    }
    mid = n // 2
    images = {"I0 mid slice": Image(GridSpec(n, n), I0.values[mid]),
              "It mid slice": Image(GridSpec(n, n), It.values[mid]),
              "It o phi mid slice": Image(GridSpec(n, n), resample(It, res.phi).values[mid])}
    recovered = Transformation(GridSpec(n, n), res.phi.displacement[:2, mid])
    return ScenarioOutput(result, {"truth mid slice": maps[mid], "recovered mid slice": recovered},
                          images,
                          {"SSD": res.ssd_trace})
