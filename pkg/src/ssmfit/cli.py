"""Command-line interface covering the full pipeline.

Exit codes: 0 success, 1 usage or file error, 2 numerical failure. All
diagnostics go to standard error; data goes to the paths named in flags.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from typing import Optional

import numpy as np

from . import io as ssmio
from .baselines import IcpConfig, icp_fit
from .errors import FormatError, SsmFitError
from .evaluation import (
    SurfacePointSampler,
    benchmark_convergence,
    dice,
    surface_distance,
    vertex_rmse,
    voxelize,
)
from .fitting import FitConfig, fit
from .geometry import (
    SparsePointSet,
    add_gaussian_noise,
    sample_surface_points,
    slice_contour,
)
from .model import ShapeModel, build_pdm, deform
from .synthetic import ellipsoid_pdm, multi_ellipsoid_pdm, rectangle_pdm

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _build_parser() -> _Parser:
    parser = _Parser(prog="ssmfit", description=__doc__)
    sub = parser.add_subparsers(
        dest="command", metavar="command", parser_class=_Parser
    )

    p = sub.add_parser("build-model",
                       help="PCA model from a directory of corresponded OFF meshes")
    p.add_argument("--shapes", required=True, help="directory of OFF meshes in correspondence")
    p.add_argument("--modes", required=True, type=int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("synth-model", help="synthetic shape model")
    p.add_argument("--kind", required=True,
                   choices=["rectangle2d", "ellipsoid", "multi-ellipsoid"])
    p.add_argument("--n", type=int, default=None,
                   help="vertex count (ring count for rectangle2d; defaults 1000 / 12)")
    p.add_argument("--modes", type=int, default=None,
                   help="mode count (default 8; rectangle2d is fixed at 2)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="sample points from a model surface")
    p.add_argument("--model", required=True)
    p.add_argument("--count", required=True, type=int)
    p.add_argument("--noise", type=float, default=None, help="spherical noise std dev")
    p.add_argument("--contours", type=int, default=None, help="number of planar contours")
    p.add_argument("--arc", type=float, default=1.0, help="contour arc fraction")
    p.add_argument("--inplane-noise", type=float, default=None,
                   help="in-plane translation noise std dev per contour")
    p.add_argument("--alpha", default=None,
                   help="result/alpha JSON; sample the deformed instance instead of the mean")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="probabilistic surface fit")
    p.add_argument("--model", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--variant", required=True,
                   choices=["iso", "aniso", "anisoc", "gem", "ecm"])
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("icp", help="ICP baseline fit")
    p.add_argument("--model", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--variant", required=True, choices=["icp", "aicp"])
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="accuracy metrics for a fit")
    p.add_argument("--model", required=True)
    p.add_argument("--alpha-from", required=True, help="fit result JSON")
    p.add_argument("--truth", required=True, help="OFF mesh or result/alpha JSON")
    p.add_argument("--metrics", default="dsc,surface,rmse")
    p.add_argument("--out", required=True)

    p = sub.add_parser("benchmark", help="convergence benchmark")
    p.add_argument("--model", required=True)
    p.add_argument("--methods", required=True,
                   help="comma list, e.g. aniso,anisoc,gem,ecm,icp,aicp")
    p.add_argument("--runs", required=True, type=int)
    p.add_argument("--p", required=True, type=int, help="points per run")
    p.add_argument("--eta", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    p.add_argument("--out", required=True)

    return parser


def _load_alpha(path: str, model: ShapeModel) -> np.ndarray:
    doc = ssmio._parse_json(path)
    if "alpha" not in doc:
        raise FormatError(f"{path}: no 'alpha' field")
    alpha = np.asarray(doc["alpha"], dtype=float)
    if alpha.shape != (model.num_modes,):
        raise FormatError(
            f"{path}: alpha has {alpha.size} entries, model has {model.num_modes} modes"
        )
    return alpha


def _cmd_build_model(args) -> int:
    names = sorted(
        f for f in os.listdir(args.shapes) if f.lower().endswith(".off")
    )
    if len(names) < 2:
        raise _UsageError(f"{args.shapes}: need at least two OFF meshes")
    shapes, triangles = [], None
    for name in names:
        pos, tris = ssmio.load_off(os.path.join(args.shapes, name))
        if triangles is None:
            triangles = tris
        elif not np.array_equal(triangles, tris):
            raise FormatError(f"{name}: triangle list differs; meshes are not in correspondence")
        shapes.append(pos)
    from .geometry import MeshTopology

    topo = MeshTopology(triangles=triangles, num_vertices=shapes[0].shape[0])
    model = build_pdm(shapes, args.modes, topo)
    ssmio.save_model(model, args.out)
    _log(f"built model: N={model.num_vertices} M={model.num_modes} from K={len(shapes)} shapes")
    return 0


def _cmd_synth_model(args) -> int:
    if args.kind == "rectangle2d":
        if args.modes not in (None, 2):
            raise _UsageError("rectangle2d always has 2 modes")
        model = rectangle_pdm(ring_count=args.n if args.n is not None else 12)
    elif args.kind == "ellipsoid":
        model = ellipsoid_pdm(args.n or 1000, args.modes or 8, seed=args.seed)
    else:
        model = multi_ellipsoid_pdm(args.n or 1000, args.modes or 8, seed=args.seed)
    ssmio.save_model(model, args.out)
    _log(f"synthesised {args.kind}: N={model.num_vertices} M={model.num_modes}")
    return 0


def _cmd_sample(args) -> int:
    model = ssmio.load_model(args.model)
    rng = np.random.default_rng(args.seed)
    alpha = (
        _load_alpha(args.alpha, model) if args.alpha else np.zeros(model.num_modes)
    )
    positions = deform(model, alpha)
    if args.contours is not None:
        if args.noise is not None:
            raise _UsageError("--noise applies to random points; use --inplane-noise with --contours")
        per = [args.count // args.contours] * args.contours
        for k in range(args.count % args.contours):
            per[k] += 1
        chunks = []
        for n_pts in per:
            if n_pts == 0:
                continue
            axis = int(rng.integers(0, 3))
            contour = slice_contour(
                positions, model.topology, axis, rng, args.arc, n_pts
            )
            if args.inplane_noise:
                from .geometry import contour_inplane_noise

                contour = contour_inplane_noise(contour, args.inplane_noise, rng)
            labels = None
            if model.vertex_labels is not None:
                d = ((contour.points[:, None, :] - positions[None, :, :]) ** 2).sum(2)
                labels = model.vertex_labels[np.argmin(d, axis=1)]
            chunks.append(SparsePointSet(points=contour.points, labels=labels))
        pts = SparsePointSet(
            points=np.vstack([c.points for c in chunks]),
            labels=(
                np.concatenate([c.labels for c in chunks])
                if model.vertex_labels is not None
                else None
            ),
        )
    else:
        pts = sample_surface_points(
            positions, model.topology, args.count, rng, vertex_labels=model.vertex_labels
        )
        if args.noise:
            pts = add_gaussian_noise(pts, args.noise, rng)
    ssmio.save_points(pts, args.out)
    _log(f"sampled {len(pts)} points -> {args.out}")
    return 0


def _cmd_fit(args) -> int:
    model = ssmio.load_model(args.model)
    points = ssmio.load_points(args.points)
    config = FitConfig(variant=args.variant, eta=args.eta)
    result = fit(model, points, config)
    ssmio.save_result(result, args.out)
    _log(
        f"{config.variant} eta={config.eta}: {result.iterations} iterations, "
        f"converged={result.converged}, fallbacks={result.fallback_count}"
    )
    return 0


def _cmd_icp(args) -> int:
    model = ssmio.load_model(args.model)
    points = ssmio.load_points(args.points)
    config = IcpConfig(variant=args.variant, eta=args.eta)
    result = icp_fit(model, points, config)
    ssmio.save_result(result, args.out)
    _log(
        f"{config.variant}: {result.iterations} iterations, converged={result.converged}"
    )
    return 0


def _cmd_evaluate(args) -> int:
    model = ssmio.load_model(args.model)
    fitted_alpha = _load_alpha(args.alpha_from, model)
    fitted = deform(model, fitted_alpha)
    if args.truth.lower().endswith(".off"):
        truth_pos, truth_tris = ssmio.load_off(args.truth)
        from .geometry import MeshTopology

        truth_topo = MeshTopology(triangles=truth_tris, num_vertices=truth_pos.shape[0])
    else:
        truth_pos = deform(model, _load_alpha(args.truth, model))
        truth_topo = model.topology

    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(wanted) - {"dsc", "surface", "rmse"}
    if unknown:
        raise _UsageError(f"unknown metrics: {sorted(unknown)}")
    report = {}
    if "dsc" in wanted:
        lo = np.minimum(fitted.min(axis=0), truth_pos.min(axis=0))
        hi = np.maximum(fitted.max(axis=0), truth_pos.max(axis=0))
        spacing = float(np.linalg.norm(hi - lo)) / 128.0
        ga = voxelize(fitted, model.topology, spacing, bounds=(lo, hi))
        gb = voxelize(truth_pos, truth_topo, spacing, bounds=(lo, hi))
        report["dsc"] = dice(ga, gb)
    if "surface" in wanted:
        avg, mx = surface_distance(fitted, model.topology, truth_pos, truth_topo)
        report["surface_avg"] = avg
        report["surface_max"] = mx
    if "rmse" in wanted:
        if truth_pos.shape != fitted.shape:
            raise _UsageError("rmse needs a corresponded truth with the same vertex count")
        report["vertex_rmse"] = vertex_rmse(fitted, truth_pos)
    with open(args.out, "w") as fh:
        json.dump(report, fh)
        fh.write("\n")
    _log(f"metrics: {report}")
    return 0


def _cmd_benchmark(args) -> int:
    model = ssmio.load_model(args.model)
    methods = []
    for name in (m.strip() for m in args.methods.split(",")):
        if not name:
            continue
        if name in ("icp", "aicp"):
            methods.append((name, IcpConfig(variant=name, eta=args.eta if name == "aicp" else 1.0)))
        else:
            methods.append((name, FitConfig(variant=name, eta=args.eta)))
    if len(methods) < 2:
        raise _UsageError("benchmark needs at least two methods")
    threads = int(os.environ.get("SSMFIT_THREADS", args.threads))
    records, notes = benchmark_convergence(
        model,
        SurfacePointSampler(args.p),
        methods,
        runs=args.runs,
        seed=args.seed,
        threads=threads,
    )
    ssmio.save_benchmark(records, args.out)
    for note in notes:
        _log(note)
    _log(f"benchmark: {len(records)} records from {args.runs} runs -> {args.out}")
    return 0


_COMMANDS = {
    "build-model": _cmd_build_model,
    "synth-model": _cmd_synth_model,
    "sample": _cmd_sample,
    "fit": _cmd_fit,
    "icp": _cmd_icp,
    "evaluate": _cmd_evaluate,
    "benchmark": _cmd_benchmark,
}


def main(argv: Optional[list] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise _UsageError("no subcommand given (see --help)")
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        _log(f"usage error: {exc}")
        return 1
    except FormatError as exc:
        _log(f"file error: {exc}")
        return 1
    except (FileNotFoundError, NotADirectoryError, PermissionError) as exc:
        _log(f"file error: {exc}")
        return 1
    except ValueError as exc:
        _log(f"usage error: {exc}")
        return 1
    except SsmFitError as exc:
        _log(f"numerical failure: {exc}")
        return 2


if __name__ == "__main__":
    sys.exit(main())
