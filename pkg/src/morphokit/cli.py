"""``morphokit`` command line.

Exit codes: 0 success, 1 domain error (message on stderr), 2 usage error.
Every command writes a run manifest (JSON) next to its primary output.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from . import io, poisson, render, scenarios
from .errors import MorphoError
from .fields import GridSpec, ScalarField, Transformation, add_noise, resample
from .registration import RegistrationOptions, register
from .synth import (DEFAULT_MAX_ANGLE, RotationalSpec, make_family6, make_rotational_pair,
                    make_test_image, make_twisted_volume)
from .template import Cohort, TemplateOptions, build_fast, build_general
from .varcon import DescentOptions, VarConProblem, average_transformations, solve

log = logging.getLogger("morphokit")

REPRO_NAMES = ("example1", "example2", "example2-noisy", "example3", "example4", "example5")


def _version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "0+unknown"


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise SystemExit("usage error: --threads must be >= 1")
        return args.threads
    env = os.environ.get("MORPHOKIT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise SystemExit(f"usage error: MORPHOKIT_THREADS={env!r} is not an integer")
    return 1


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonable(value):
    if isinstance(value, Path):
        return str(value)
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


class Run:
    """Collects inputs/outputs of one command and writes its manifest."""

    def __init__(self, args, argv):
        self.args = args
        self.argv = list(argv)
        self.inputs: list = []
        self.outputs: list = []
        self.seeds: dict = {}
        self.scenario_seconds = None
        self.start = time.perf_counter()

    def output(self, path):
        self.outputs.append(Path(path))
        return path

    def write_manifest(self, path):
        options = {k: _jsonable(v) for k, v in vars(self.args).items() if k != "func"}
        manifest = {
            "command": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "options": options,
            "threads": self.args.resolved_threads,
            "inputs": [{"path": str(p), "sha256": _sha256(p)} for p in self.inputs],
            "outputs": [{"path": str(p), "sha256": _sha256(p)}
                        for p in self.outputs if Path(p).is_file()],
            "seeds": self.seeds,
            "version": _version(),
            "wall_seconds": time.perf_counter() - self.start,
        }
        if self.scenario_seconds is not None:
            manifest["scenario_seconds"] = self.scenario_seconds
        render.write_json(path, manifest)


def _manifest_path(primary) -> Path:
    primary = Path(primary)
    return primary.with_name(primary.name + ".manifest.json")


# ---------------------------------------------------------------- synth

def cmd_synth(args, run: Run):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    grid = GridSpec(args.n, args.n)
    if args.kind == "pair":
        spec = RotationalSpec(max_angle=args.angle)
        d1, d2 = make_rotational_pair(grid, spec)
        io.write_transformation(run.output(out / "D1.mfld"), d1)
        io.write_transformation(run.output(out / "D2.mfld"), d2)
        if args.noise > 0:
            run.seeds["noise"] = args.seed
            noisy = add_noise(d1, args.noise, args.seed)
            io.write_transformation(run.output(out / "D1_noisy.mfld"), noisy,
                                    [f"noise amplitude {args.noise} seed {args.seed}"])
    elif args.kind == "family6":
        run.seeds["family"] = args.seed
        for k, D in enumerate(make_family6(grid, args.seed)):
            io.write_transformation(run.output(out / f"D{k + 1}.mfld"), D)
    elif args.kind == "image":
        run.seeds["image"] = args.seed
        warp = None
        if args.warp:
            run.inputs.append(Path(args.warp))
            warp = io.read_transformation(args.warp)
            grid = warp.grid
        img = make_test_image(grid, args.image_kind, args.seed, warp=warp)
        io.write_pgm(run.output(out / f"{args.image_kind}.pgm"), img)
    elif args.kind == "twisted-volume":
        I0, It, maps = make_twisted_volume(args.n, args.twist)
        for name, vol in (("I0", I0), ("It", It)):
            paths = io.write_volume(out / f"{name}.txt", vol, stem=name)
            run.outputs.extend(paths)
            run.output(out / f"{name}.txt")
        for k, T in enumerate(maps):
            io.write_transformation(run.output(out / f"T_{k:03d}.mfld"), T)
    run.write_manifest(out / "manifest.json")
    print(json.dumps({"outputs": [str(p) for p in run.outputs]}, indent=2))


# ---------------------------------------------------------- construct etc.

def _descent(args) -> DescentOptions:
    return DescentOptions(max_steps=args.max_steps, obj_tol=args.obj_tol,
                          jmin_guard=args.jmin_guard)


def cmd_construct(args, run: Run):
    run.inputs += [Path(args.f0), Path(args.g0)]
    f0, g0 = io.read_scalar(args.f0), io.read_scalar(args.g0)
    init = None
    if args.init:
        run.inputs.append(Path(args.init))
        init = io.read_transformation(args.init)
    T, report = solve(VarConProblem(f0, g0, init), _descent(args))
    io.write_transformation(run.output(args.out), T, [f"termination {report.termination}"])
    payload = {"solver": report.to_dict(), "stats": render.stats_report(T)}
    _finish_report(args, run, payload)


def cmd_average(args, run: Run):
    run.inputs += [Path(p) for p in args.inputs]
    Ts = [io.read_transformation(p) for p in args.inputs]
    T, report = average_transformations(Ts, args.weights, _descent(args))
    io.write_transformation(run.output(args.out), T)
    payload = {"solver": report.to_dict(), "stats": render.stats_report(T)}
    _finish_report(args, run, payload)


def _finish_report(args, run: Run, payload: dict):
    if args.report:
        render.write_json(run.output(args.report), payload)
    run.write_manifest(_manifest_path(args.out))
    print(json.dumps({k: v for k, v in payload.items() if k != "solver"}, indent=2))


def cmd_register(args, run: Run):
    run.inputs += [Path(args.moving), Path(args.fixed)]
    moving, fixed = io.read_image(args.moving), io.read_image(args.fixed)
    opts = RegistrationOptions(outer_max=args.outer, step=args.step,
                               multires_levels=args.levels, ssd_tol=args.ssd_tol)
    res = register(moving, fixed, opts)
    io.write_transformation(run.output(args.out_phi), res.phi,
                            [f"registration termination {res.termination}"])
    payload = {"registration": res.to_dict(), "stats": render.stats_report(res.phi)}
    if args.report:
        render.write_json(run.output(args.report), payload)
    if args.out_image and moving.grid.dim == 2:
        io.write_pgm(run.output(args.out_image), resample(moving, res.phi))
    run.write_manifest(_manifest_path(args.out_phi))
    print(json.dumps({"ssd_initial": res.ssd_trace[0], "ssd_final": res.ssd_trace[-1],
                      "steps": res.steps_taken, "termination": res.termination}, indent=2))


def cmd_template(args, run: Run):
    paths = io.read_path_list(args.cohort)
    run.inputs += [Path(args.cohort), *paths]
    cohort = Cohort([io.read_pgm(p) for p in paths], [Path(p).stem for p in paths])
    reference = None
    if args.reference:
        run.inputs.append(Path(args.reference))
        reference = io.read_pgm(args.reference)
    opts = TemplateOptions(workers=args.resolved_threads)
    opts.registration.outer_max = args.outer
    if args.mode == "general":
        img, report = build_general(cohort, args.init, args.passes, reference, opts)
    else:
        img, report = build_fast(cohort, args.init, reference, opts)
    io.write_pgm(run.output(args.out), img)
    if args.report:
        render.write_json(run.output(args.report), report.to_dict())
    run.write_manifest(_manifest_path(args.out))
    print(json.dumps({"mode": report.mode, "init": report.init_index,
                      "final_ssd_to_reference": report.final_ssd_to_reference}, indent=2))


def cmd_render(args, run: Run):
    run.inputs.append(Path(args.inp))
    T = io.read_transformation(args.inp)
    img = render.render_grid(T, args.stride, args.scale)
    if str(args.out).lower().endswith(".png"):
        render.figure_images(run.output(args.out), {Path(args.inp).stem: img})
    else:
        io.write_pgm(run.output(args.out), img)
    run.write_manifest(_manifest_path(args.out))


def cmd_stats(args, run: Run):
    run.inputs.append(Path(args.inp))
    stats = render.stats_report(io.read_transformation(args.inp))
    if args.out:
        render.write_json(run.output(args.out), stats)
        run.write_manifest(_manifest_path(args.out))
    print(json.dumps(stats, indent=2, sort_keys=True))


# ---------------------------------------------------------------- repro

def _save_outputs(out: Path, run: Run, sc: scenarios.ScenarioOutput, tag: str):
    if sc.maps:
        run.output(render.figure_grids(out / f"{tag}_grids.png", sc.maps))
    if sc.images:
        run.output(render.figure_images(out / f"{tag}_images.png", sc.images))
    if sc.traces:
        run.output(render.figure_trace(out / f"{tag}_trace.png", sc.traces,
                                       "objective" if tag.startswith("example2") else "SSD"))


def _template_figures(out: Path, run: Run, result: dict, tag: str, modes):
    labels = [r["label"] for r in result["per_init"]]
    groups = {"pass 1": [r["pass1_ratio"] for r in result["per_init"]]}
    for mode in modes:
        groups[mode] = [r[f"{mode}_ratio"] for r in result["per_init"]]
    run.output(render.figure_bars(out / f"{tag}_error_ratios.png", groups, labels,
                                  "SSD(template, GT) / SSD(I_i, GT)"))


def cmd_repro(args, run: Run):
    out = Path(args.out_dir or f"repro_{args.name}")
    out.mkdir(parents=True, exist_ok=True)
    name = args.name
    if name == "example1":
        sc = scenarios.run_example1(args.n or 128)
    elif name in ("example2", "example2-noisy"):
        noise = args.noise if name == "example2-noisy" else 0.0
        sc = scenarios.run_example2(args.n or 64, noise=noise, seed=args.seed)
        if noise:
            run.seeds["noise"] = args.seed
        io.write_transformation(run.output(out / "result.mfld"), sc.maps["result"])
        run.output(render.figure_fields(out / f"{name}_fields.png", sc.maps["result"], "result"))
    elif name in ("example3", "example4"):
        fast = name == "example4"
        opts = TemplateOptions(workers=args.resolved_threads)
        sc = scenarios.run_templates(args.n or 64, fast=fast, opts=opts)
        modes = ["general", "fast"] if fast else ["general"]
        _template_figures(out, run, sc.result, name, modes)
        for mode in modes:
            panel = {"GT": sc.images["GT"]}
            panel.update({k: v for k, v in sc.images.items() if k.startswith(mode)})
            run.output(render.figure_images(out / f"{name}_{mode}_templates.png", panel))
        sc.images = {}
    elif name == "example5":
        sc = scenarios.run_example5(args.n or 24)
    else:  # argparse restricts choices; kept for completeness
        raise MorphoError(f"unknown scenario {name!r}")
    _save_outputs(out, run, sc, name)
    # wall time goes to the manifest only, so report.json is reproducible bitwise
    run.scenario_seconds = sc.result.pop("seconds", None)
    render.write_json(run.output(out / "report.json"), {"scenario": name, **sc.result})
    run.write_manifest(out / "manifest.json")
    print(json.dumps(_headline(name, sc.result), indent=2))


def _headline(name: str, result: dict) -> dict:
    keys = {"example1": ("J_D1", "J_D2", "max_abs_curl_sum", "ssd_D1_vs_D2_images"),
            "example2": ("final_max_node_error", "strictly_decreasing",
                         "min_J_over_accepted_steps"),
            "example5": ("ssd_reduction", "max_slice_error", "min_J")}
    if name.startswith("example2"):
        name = "example2"
    if name in keys:
        return {k: result[k] for k in keys[name]}
    return {mode: {"mean": d["mean"], "std": d["std"]}
            for mode, d in result["summary"].items() if mode != "base_ssd"}


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphokit", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (default: $MORPHOKIT_THREADS or 1); outputs do not depend on it")
    p.add_argument("-v", "--verbose", action="store_true")
    # accepted after the subcommand too; SUPPRESS keeps the top-level value
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    s = sub.add_parser("synth", help="generate deformations, images and volumes")
    s.add_argument("kind", choices=["pair", "family6", "image", "twisted-volume"])
    s.add_argument("--n", type=int, default=64, help="grid nodes per axis")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--angle", type=float, default=DEFAULT_MAX_ANGLE)
    s.add_argument("--noise", type=float, default=0.0, help="pair: also write a noisy D1")
    s.add_argument("--image-kind", choices=["blobs", "rings", "checker"], default="blobs")
    s.add_argument("--warp", help="image: sample the pattern through this MFLD map")
    s.add_argument("--twist", type=float, default=0.7)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)

    def descent_flags(q):
        q.add_argument("--max-steps", type=int, default=10000)
        q.add_argument("--obj-tol", type=float, default=1e-8)
        q.add_argument("--jmin-guard", type=float, default=0.05)
        q.add_argument("--out", required=True)
        q.add_argument("--report")

    c = sub.add_parser("construct", help="build a map from Jacobian and curl targets")
    c.add_argument("--f0", required=True)
    c.add_argument("--g0", required=True)
    c.add_argument("--init")
    descent_flags(c)
    c.set_defaults(func=cmd_construct)

    a = sub.add_parser("average", help="average maps through their Jacobians and curls")
    a.add_argument("inputs", nargs="+")
    a.add_argument("--weights", type=float, nargs="+")
    descent_flags(a)
    a.set_defaults(func=cmd_average)

    r = sub.add_parser("register", help="SSD registration of PGM images or slice manifests")
    r.add_argument("--moving", required=True)
    r.add_argument("--fixed", required=True)
    r.add_argument("--out-phi", required=True)
    r.add_argument("--out-image")
    r.add_argument("--report")
    r.add_argument("--levels", type=int, default=1)
    r.add_argument("--outer", type=int, default=300)
    r.add_argument("--step", type=float, default=0.5)
    r.add_argument("--ssd-tol", type=float, default=1e-4)
    r.set_defaults(func=cmd_register)

    t = sub.add_parser("template", help="unbiased template from a cohort manifest")
    t.add_argument("--cohort", required=True)
    t.add_argument("--mode", choices=["general", "fast"], default="general")
    t.add_argument("--init", type=int, default=0)
    t.add_argument("--passes", type=int, default=2)
    t.add_argument("--outer", type=int, default=300)
    t.add_argument("--reference")
    t.add_argument("--out", required=True)
    t.add_argument("--report")
    t.set_defaults(func=cmd_template)

    g = sub.add_parser("render", help="draw a 2D map as a deformed grid")
    g.add_argument("--in", dest="inp", required=True)
    g.add_argument("--stride", type=int, default=4)
    g.add_argument("--scale", type=int, default=4)
    g.add_argument("--out", required=True, help=".pgm raster or .png figure")
    g.set_defaults(func=cmd_render)

    st = sub.add_parser("stats", help="Jacobian/curl/displacement summary of a map")
    st.add_argument("--in", dest="inp", required=True)
    st.add_argument("--out")
    st.set_defaults(func=cmd_stats)

    rp = sub.add_parser("repro", help="run a replica scenario end to end")
    rp.add_argument("name", choices=REPRO_NAMES)
    rp.add_argument("--out-dir")
    rp.add_argument("--n", type=int, help="grid size override")
    rp.add_argument("--noise", type=float, default=scenarios.NOISE_AMPLITUDE)
    rp.add_argument("--seed", type=int, default=scenarios.NOISE_SEED)
    rp.set_defaults(func=cmd_repro)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        args.resolved_threads = _threads(args)
    except SystemExit as exc:
        if isinstance(exc.code, str):
            print(exc.code, file=sys.stderr)
            return 2
        return exc.code if isinstance(exc.code, int) else 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    poisson.set_threads(args.resolved_threads)
    run = Run(args, argv)
    try:
        args.func(args, run)
    except (MorphoError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
