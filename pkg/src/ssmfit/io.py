"""File formats: model JSON, point-set CSV, result JSON, ASCII OFF meshes.

All floats are written in shortest round-trip decimal form, so save/load
round trips are bit exact for finite doubles. Format reference:

* Model (JSON): ``{"format_version": "1", "n_vertices": N, "n_modes": M,
  "mean": [3N floats], "modes": [3N*M floats, column-major],
  "eigenvalues": [M floats], "triangles": [[i, j, k], ...],
  "vertex_labels": [N ints] (optional), "units": "mm"}``. Shape vectors
  stack all x coordinates, then all y, then all z (rows of vertex ``i`` are
  ``i``, ``N+i``, ``2N+i``).
* Point set (CSV): header ``x,y,z`` or ``x,y,z,label``, one point per row,
  comma delimiter, dot decimal separator.
* Fit result (JSON): ``{"variant", "eta", "alpha", "sigma2", "iterations",
  "converged", "fallback_count", "q_trace", "wall_times"}``; ICP results
  carry ``residual_trace`` in place of ``q_trace``.
* Mesh (ASCII OFF): ``OFF`` header, ``nv nf 0`` counts, vertex rows, then
  ``3 i j k`` face rows.
* Benchmark (CSV): header ``method,run,iteration,elapsed_s,q,q_normalized``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .baselines import IcpConfig
from .errors import FormatError
from .evaluation import BenchmarkRecord
from .fitting import FitConfig, FitResult
from .geometry import MeshTopology, SparsePointSet
from .model import ShapeModel

__all__ = [
    "FORMAT_VERSION",
    "RunManifest",
    "load_model",
    "save_model",
    "load_points",
    "save_points",
    "load_result",
    "save_result",
    "load_off",
    "save_off",
    "save_benchmark",
    "load_manifest",
    "save_manifest",
]

FORMAT_VERSION = "1"


def _parse_json(path: str) -> dict:
    with open(path, "rb") as fh:
        raw = fh.read()
    try:
        doc = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: JSON parse error at byte offset {exc.pos}: {exc.msg}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: expected a JSON object at the top level")
    return doc


def _check_version(doc: dict, path: str) -> None:
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(
            f"{path}: unsupported format_version {version!r} (expected {FORMAT_VERSION!r})"
        )


def save_model(model: ShapeModel, path: str) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "n_vertices": model.num_vertices,
        "n_modes": model.num_modes,
        "units": model.units,
        "mean": model.mean.tolist(),
        "modes": model.modes.ravel(order="F").tolist(),
        "eigenvalues": model.eigenvalues.tolist(),
        "triangles": model.topology.triangles.tolist(),
    }
    if model.vertex_labels is not None:
        doc["vertex_labels"] = model.vertex_labels.tolist()
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_model(path: str) -> ShapeModel:
    doc = _parse_json(path)
    _check_version(doc, path)
    try:
        n = int(doc["n_vertices"])
        m = int(doc["n_modes"])
        mean = np.asarray(doc["mean"], dtype=float)
        modes_flat = np.asarray(doc["modes"], dtype=float)
        eigenvalues = np.asarray(doc["eigenvalues"], dtype=float)
        triangles = np.asarray(doc["triangles"], dtype=int)
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed field: {exc}") from exc
    if mean.shape != (3 * n,):
        raise FormatError(f"{path}: mean has {mean.size} entries, expected {3 * n}")
    if modes_flat.size != 3 * n * m:
        raise FormatError(
            f"{path}: modes have {modes_flat.size} entries, expected {3 * n * m}"
        )
    if eigenvalues.shape != (m,):
        raise FormatError(f"{path}: eigenvalues have {eigenvalues.size} entries, expected {m}")
    modes = modes_flat.reshape((3 * n, m), order="F")
    if triangles.ndim != 2 or triangles.shape[1] != 3:
        raise FormatError(f"{path}: triangles must be index triples")
    if triangles.min(initial=0) < 0 or triangles.max(initial=0) >= n:
        raise FormatError(f"{path}: triangle index out of range [0, {n})")
    labels = doc.get("vertex_labels")
    if labels is not None:
        labels = np.asarray(labels, dtype=int)
        if labels.shape != (n,):
            raise FormatError(f"{path}: vertex_labels must have {n} entries")
    try:
        topology = MeshTopology(triangles=triangles, num_vertices=n)
        return ShapeModel(
            mean=mean,
            modes=modes,
            eigenvalues=eigenvalues,
            topology=topology,
            vertex_labels=labels,
            units=str(doc.get("units", "mm")),
        )
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def save_points(points: SparsePointSet, path: str) -> None:
    labelled = points.labels is not None
    with open(path, "w") as fh:
        fh.write("x,y,z,label\n" if labelled else "x,y,z\n")
        for j in range(len(points)):
            x, y, z = (float(c) for c in points.points[j])
            row = f"{x!r},{y!r},{z!r}"
            if labelled:
                row += f",{int(points.labels[j])}"
            fh.write(row + "\n")


def load_points(path: str) -> SparsePointSet:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise FormatError(f"{path}: empty point file")
    header = [c.strip().lower() for c in lines[0].split(",")]
    if header == ["x", "y", "z"]:
        labelled = False
    elif header == ["x", "y", "z", "label"]:
        labelled = True
    else:
        raise FormatError(f"{path}: header must be x,y,z or x,y,z,label, got {lines[0]!r}")
    if len(lines) == 1:
        raise FormatError(f"{path}: no data rows (P = 0)")
    pts, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        cells = line.split(",")
        if len(cells) != len(header):
            raise FormatError(
                f"{path}:{lineno}: expected {len(header)} columns, got {len(cells)} "
                "(mixed labelled/unlabelled rows?)"
            )
        try:
            pts.append([float(cells[0]), float(cells[1]), float(cells[2])])
            if labelled:
                labels.append(int(cells[3]))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed row: {exc}") from exc
    return SparsePointSet(
        points=np.asarray(pts), labels=np.asarray(labels) if labelled else None
    )


def save_result(result: FitResult, path: str) -> None:
    doc = {
        "format_version": FORMAT_VERSION,
        "variant": result.variant,
        "eta": float(result.eta),
        "alpha": np.asarray(result.alpha, dtype=float).tolist(),
        "sigma2": None if result.sigma2 is None else float(result.sigma2),
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "fallback_count": int(result.fallback_count),
        "wall_times": [float(t) for t in (result.wall_times or [])],
    }
    if result.residual_trace is not None:
        doc["residual_trace"] = [float(q) for q in result.residual_trace]
    else:
        doc["q_trace"] = [float(q) for q in (result.q_trace or [])]
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_result(path: str) -> FitResult:
    doc = _parse_json(path)
    _check_version(doc, path)
    try:
        return FitResult(
            variant=str(doc["variant"]),
            eta=float(doc["eta"]),
            alpha=np.asarray(doc["alpha"], dtype=float),
            sigma2=None if doc.get("sigma2") is None else float(doc["sigma2"]),
            iterations=int(doc["iterations"]),
            converged=bool(doc["converged"]),
            fallback_count=int(doc.get("fallback_count", 0)),
            q_trace=doc.get("q_trace"),
            wall_times=doc.get("wall_times"),
            residual_trace=doc.get("residual_trace"),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed result file: {exc}") from exc


def save_off(positions: np.ndarray, triangles: np.ndarray, path: str) -> None:
    positions = np.asarray(positions, dtype=float)
    triangles = np.asarray(triangles, dtype=int)
    with open(path, "w") as fh:
        fh.write("OFF\n")
        fh.write(f"{len(positions)} {len(triangles)} 0\n")
        for p in positions:
            fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r}\n")
        for t in triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_off(path: str):
    """Read an ASCII OFF mesh; returns (positions (N, 3), triangles (T, 3))."""
    with open(path) as fh:
        tokens = []
        for line in fh:
            hash_at = line.find("#")
            if hash_at >= 0:
                line = line[:hash_at]
            tokens.extend(line.split())
    if not tokens or tokens[0] != "OFF":
        raise FormatError(f"{path}: missing OFF header")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        cursor = 4  # skip edge count
        coords = [float(t) for t in tokens[cursor : cursor + 3 * nv]]
        if len(coords) != 3 * nv:
            raise ValueError("truncated vertex block")
        cursor += 3 * nv
        faces = []
        for _ in range(nf):
            k = int(tokens[cursor])
            if k != 3:
                raise ValueError(f"only triangle faces supported, got {k}-gon")
            faces.append([int(t) for t in tokens[cursor + 1 : cursor + 4]])
            if len(faces[-1]) != 3:
                raise ValueError("truncated face block")
            cursor += 4
    except (ValueError, IndexError) as exc:
        raise FormatError(f"{path}: malformed OFF file: {exc}") from exc
    return np.asarray(coords).reshape(nv, 3), np.asarray(faces, dtype=int)


def save_benchmark(records: Sequence[BenchmarkRecord], path: str) -> None:
    with open(path, "w") as fh:
        fh.write("method,run,iteration,elapsed_s,q,q_normalized\n")
        for r in records:
            fh.write(
                f"{r.method},{r.run},{r.iteration},{r.elapsed_s!r},{r.q!r},{r.q_normalized!r}\n"
            )


@dataclass
class RunManifest:
    """Paths plus solver configuration for one fitting run."""

    model_path: str
    points_path: str
    output_path: str
    config: Union[FitConfig, IcpConfig]
    format_version: str = FORMAT_VERSION


def save_manifest(manifest: RunManifest, path: str) -> None:
    cfg = manifest.config
    if isinstance(cfg, IcpConfig):
        payload = {
            "kind": "icp",
            "variant": cfg.variant,
            "eta": cfg.eta,
            "max_iters": cfg.max_iters,
            "tol": cfg.tol,
            "seed": cfg.seed,
        }
    else:
        payload = {
            "kind": "fit",
            "variant": cfg.variant,
            "eta": cfg.eta,
            "max_outer_iters": cfg.max_outer_iters,
            "outer_tol": cfg.outer_tol,
            "qn_max_iters": cfg.qn_max_iters,
            "qn_grad_tol": cfg.qn_grad_tol,
            "sigma2_floor": cfg.sigma2_floor,
            "seed": cfg.seed,
        }
    doc = {
        "format_version": manifest.format_version,
        "model": manifest.model_path,
        "points": manifest.points_path,
        "output": manifest.output_path,
        "config": payload,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def load_manifest(path: str) -> RunManifest:
    doc = _parse_json(path)
    _check_version(doc, path)
    try:
        payload = dict(doc["config"])
        kind = payload.pop("kind")
        model_path = str(doc["model"])
        points_path = str(doc["points"])
        output_path = str(doc["output"])
    except KeyError as exc:
        raise FormatError(f"{path}: missing field {exc}") from exc
    for ref in (model_path, points_path):
        if not os.path.exists(ref):
            raise FormatError(f"{path}: referenced file does not exist: {ref}")
    try:
        config = IcpConfig(**payload) if kind == "icp" else FitConfig(**payload)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid config payload: {exc}") from exc
    return RunManifest(
        model_path=model_path,
        points_path=points_path,
        output_path=output_path,
        config=config,
    )
