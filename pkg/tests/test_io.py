import json

import numpy as np
import pytest

from conftest import hull_mesh, random_model
from ssmfit import io as ssmio
from ssmfit.baselines import IcpConfig
from ssmfit.errors import FormatError
from ssmfit.evaluation import BenchmarkRecord
from ssmfit.fitting import FitConfig, FitResult
from ssmfit.geometry import SparsePointSet


class TestModelRoundTrip:
    def test_bit_exact(self, rng, tmp_path):
        model = random_model(25, 4, rng)
        path = tmp_path / "model.json"
        ssmio.save_model(model, path)
        loaded = ssmio.load_model(path)
        assert np.array_equal(loaded.mean, model.mean)
        assert np.array_equal(loaded.modes, model.modes)
        assert np.array_equal(loaded.eigenvalues, model.eigenvalues)
        assert np.array_equal(loaded.topology.triangles, model.topology.triangles)
        assert np.array_equal(
            loaded.topology.normal_neighbors, model.topology.normal_neighbors
        )
        assert loaded.vertex_labels is None

    def test_labels_roundtrip(self, rng, tmp_path):
        labels = np.arange(25) % 3
        model = random_model(25, 3, rng, labels=labels)
        path = tmp_path / "model.json"
        ssmio.save_model(model, path)
        assert np.array_equal(ssmio.load_model(path).vertex_labels, labels)

    def test_wrong_mode_rows_rejected(self, rng, tmp_path):
        model = random_model(10, 2, rng)
        path = tmp_path / "model.json"
        ssmio.save_model(model, path)
        doc = json.loads(path.read_text())
        doc["modes"] = doc["modes"][:-3]
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError):
            ssmio.load_model(path)

    def test_triangle_out_of_range_rejected(self, rng, tmp_path):
        model = random_model(10, 2, rng)
        path = tmp_path / "model.json"
        ssmio.save_model(model, path)
        doc = json.loads(path.read_text())
        doc["triangles"][0] = [0, 1, 10]
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError):
            ssmio.load_model(path)

    def test_version_mismatch(self, rng, tmp_path):
        model = random_model(10, 2, rng)
        path = tmp_path / "model.json"
        ssmio.save_model(model, path)
        doc = json.loads(path.read_text())
        doc["format_version"] = "99"
        path.write_text(json.dumps(doc))
        with pytest.raises(FormatError, match="format_version"):
            ssmio.load_model(path)

    def test_truncated_file_reports_offset(self, rng, tmp_path):
        model = random_model(10, 2, rng)
        path = tmp_path / "model.json"
        ssmio.save_model(model, path)
        raw = path.read_bytes()
        for cut in (len(raw) // 3, len(raw) // 2, len(raw) - 2):
            path.write_bytes(raw[:cut])
            with pytest.raises(FormatError, match="byte offset"):
                ssmio.load_model(path)


class TestPointsRoundTrip:
    def test_unlabelled(self, rng, tmp_path):
        pts = SparsePointSet(points=rng.standard_normal((12, 3)))
        path = tmp_path / "pts.csv"
        ssmio.save_points(pts, path)
        loaded = ssmio.load_points(path)
        assert np.array_equal(loaded.points, pts.points)
        assert loaded.labels is None

    def test_labelled(self, rng, tmp_path):
        pts = SparsePointSet(
            points=rng.standard_normal((8, 3)), labels=np.array([0, 1] * 4)
        )
        path = tmp_path / "pts.csv"
        ssmio.save_points(pts, path)
        loaded = ssmio.load_points(path)
        assert np.array_equal(loaded.points, pts.points)
        assert np.array_equal(loaded.labels, pts.labels)

    def test_empty_file_rejected(self, tmp_path):
        path = tmp_path / "pts.csv"
        path.write_text("x,y,z\n")
        with pytest.raises(FormatError, match="P = 0"):
            ssmio.load_points(path)
        path.write_text("")
        with pytest.raises(FormatError):
            ssmio.load_points(path)

    def test_mixed_rows_rejected(self, tmp_path):
        path = tmp_path / "pts.csv"
        path.write_text("x,y,z\n1,2,3\n1,2,3,0\n")
        with pytest.raises(FormatError, match="columns"):
            ssmio.load_points(path)

    def test_malformed_row_reports_line(self, tmp_path):
        path = tmp_path / "pts.csv"
        path.write_text("x,y,z\n1,2,spam\n")
        with pytest.raises(FormatError, match=":2"):
            ssmio.load_points(path)


class TestResultRoundTrip:
    def test_fit_result(self, tmp_path):
        res = FitResult(
            variant="ANISOc",
            eta=8.0,
            alpha=np.array([0.1, -0.2]),
            sigma2=0.034,
            iterations=17,
            converged=True,
            fallback_count=3,
            q_trace=[-10.0, -5.0, -4.5],
            wall_times=[0.01, 0.02, 0.005],
        )
        path = tmp_path / "result.json"
        ssmio.save_result(res, path)
        loaded = ssmio.load_result(path)
        assert loaded.variant == "ANISOc"
        assert np.array_equal(loaded.alpha, res.alpha)
        assert loaded.sigma2 == res.sigma2
        assert loaded.q_trace == res.q_trace
        assert loaded.fallback_count == 3
        doc = json.loads(path.read_text())
        assert set(doc) == {
            "format_version", "variant", "eta", "alpha", "sigma2", "iterations",
            "converged", "fallback_count", "q_trace", "wall_times",
        }

    def test_icp_result_uses_residual_trace(self, tmp_path):
        res = FitResult(
            variant="ICP",
            eta=1.0,
            alpha=np.array([0.5]),
            sigma2=None,
            iterations=4,
            converged=True,
            residual_trace=[3.0, 1.0, 0.5, 0.49],
            wall_times=[0.1] * 4,
        )
        path = tmp_path / "icp.json"
        ssmio.save_result(res, path)
        doc = json.loads(path.read_text())
        assert "residual_trace" in doc and "q_trace" not in doc
        loaded = ssmio.load_result(path)
        assert loaded.residual_trace == res.residual_trace
        assert loaded.sigma2 is None


class TestOff:
    def test_roundtrip(self, rng, tmp_path):
        pts, tris = hull_mesh(30, rng)
        path = tmp_path / "mesh.off"
        ssmio.save_off(pts, tris, path)
        pos, faces = ssmio.load_off(path)
        assert np.array_equal(pos, pts)
        assert np.array_equal(faces, tris)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "mesh.off"
        path.write_text("PLY\n")
        with pytest.raises(FormatError, match="OFF"):
            ssmio.load_off(path)

    def test_truncated(self, rng, tmp_path):
        pts, tris = hull_mesh(20, rng)
        path = tmp_path / "mesh.off"
        ssmio.save_off(pts, tris, path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[: len(lines) // 2 - 1]))
        with pytest.raises(FormatError):
            ssmio.load_off(path)


class TestBenchmarkCsv:
    def test_columns(self, tmp_path):
        recs = [BenchmarkRecord("aniso", 0, 0, 0.01, -5.0, 0.0),
                BenchmarkRecord("aniso", 0, 1, 0.02, -1.0, 1.0)]
        path = tmp_path / "bench.csv"
        ssmio.save_benchmark(recs, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "method,run,iteration,elapsed_s,q,q_normalized"
        assert lines[1].startswith("aniso,0,0,")


class TestManifest:
    def test_roundtrip(self, rng, tmp_path):
        model = random_model(10, 2, rng)
        model_path = tmp_path / "m.json"
        ssmio.save_model(model, model_path)
        pts_path = tmp_path / "p.csv"
        ssmio.save_points(SparsePointSet(points=rng.standard_normal((3, 3))), pts_path)
        manifest = ssmio.RunManifest(
            model_path=str(model_path),
            points_path=str(pts_path),
            output_path=str(tmp_path / "out.json"),
            config=FitConfig(variant="GEM", eta=2.0),
        )
        path = tmp_path / "run.json"
        ssmio.save_manifest(manifest, path)
        loaded = ssmio.load_manifest(path)
        assert loaded.config.variant == "GEM"
        assert loaded.config.eta == 2.0

    def test_icp_config_roundtrip(self, rng, tmp_path):
        model = random_model(10, 2, rng)
        model_path = tmp_path / "m.json"
        ssmio.save_model(model, model_path)
        pts_path = tmp_path / "p.csv"
        ssmio.save_points(SparsePointSet(points=rng.standard_normal((3, 3))), pts_path)
        manifest = ssmio.RunManifest(
            model_path=str(model_path),
            points_path=str(pts_path),
            output_path="out.json",
            config=IcpConfig(variant="AICP", eta=4.0),
        )
        path = tmp_path / "run.json"
        ssmio.save_manifest(manifest, path)
        loaded = ssmio.load_manifest(path)
        assert isinstance(loaded.config, IcpConfig)
        assert loaded.config.eta == 4.0

    def test_missing_reference_rejected(self, tmp_path):
        manifest_doc = {
            "format_version": "1",
            "model": str(tmp_path / "nope.json"),
            "points": str(tmp_path / "nope.csv"),
            "output": "o.json",
            "config": {"kind": "fit", "variant": "ISO"},
        }
        path = tmp_path / "run.json"
        path.write_text(json.dumps(manifest_doc))
        with pytest.raises(FormatError, match="does not exist"):
            ssmio.load_manifest(path)
