from __future__ import annotations

import hashlib
import json

import numpy as np
import pytest

from bk_thermo_provider.engine.artifacts import ArtifactStore, dumps, manifest_name, sha256
from bk_thermo_provider.engine.config import RunConfig
from bk_thermo_provider.engine.exceptions import MissingArtifactError
from bk_thermo_provider.engine.map_model import JuliaCloud
from bk_thermo_provider.engine.measures import AtomicMeasure, Provenance
from bk_thermo_provider.engine.verify import Verdict
from bk_thermo_provider.engine.xfer import GridFunction


@pytest.fixture
def store(tmp_path) -> ArtifactStore:
    return ArtifactStore(tmp_path / "run")


class TestArtifactStore:
    def test_table_header_and_precision(self, store):
        rows = np.asarray([[0.1, 1 / 3, np.pi], [1e-300, -2.5, 7.0]])
        path = store.write_table("table.csv", ("a", "b", "c"), rows, {"note": "x", "z": 1 + 2j})
        lines = path.read_text().splitlines()
        assert lines[0] == '# {"note": "x", "z": [1.0, 2.0]}'
        assert lines[1] == "# a,b,c"
        meta, columns, loaded = store.read_table("table.csv")
        assert meta == {"note": "x", "z": [1.0, 2.0]}
        assert columns == ["a", "b", "c"]
        np.testing.assert_array_equal(loaded, rows)

    def test_single_row_table(self, store):
        store.write_table("one.csv", ("n", "per_n"), [[1, -3.4]])
        _, _, rows = store.read_table("one.csv")
        assert rows.shape == (1, 2)

    def test_cloud(self, store, doubling_cloud):
        store.write_cloud(doubling_cloud)
        cloud = store.read_cloud()
        np.testing.assert_array_equal(cloud.points, doubling_cloud.points)
        np.testing.assert_array_equal(cloud.depths, doubling_cloud.depths)
        assert cloud.seed == doubling_cloud.seed
        assert cloud.pairwise_resolution == doubling_cloud.pairwise_resolution

    def test_density_must_match_cloud(self, store, doubling_cloud):
        h = GridFunction.constant(doubling_cloud, 1.5)
        h.diagnostics["residual"] = 0.0
        store.write_density(h)
        loaded = store.read_density(doubling_cloud)
        np.testing.assert_array_equal(loaded.values, h.values)
        assert loaded.diagnostics == {"residual": 0.0}
        with pytest.raises(MissingArtifactError):
            store.read_density(JuliaCloud.from_points([1.0, -1.0]))

    def test_measure(self, store):
        mu = AtomicMeasure(points=[1.0, 2.0 + 1j], weights=[0.25, 0.75], provenance=Provenance.GIBBS, metadata={"pressure": -3.45})
        store.write_measure(mu, "gibbs.csv")
        loaded = store.read_measure("gibbs.csv")
        assert loaded.provenance is Provenance.GIBBS
        assert loaded.pressure == -3.45
        np.testing.assert_array_equal(loaded.points, mu.points)
        np.testing.assert_array_equal(loaded.weights, mu.weights)

    def test_require(self, store):
        with pytest.raises(MissingArtifactError) as err:
            store.require("conformal.csv")
        assert err.value.path == str(store.path("conformal.csv"))

    def test_manifest(self, store):
        config = RunConfig.from_dict(None).to_dict()
        store.write_json("pressure.json", {"value": -3.45})
        path = store.write_manifest("pressure", config, ["pressure.json", "pressure.csv"], "success", 1.5, argv=["pressure"])
        assert path.name == manifest_name("pressure") == "pressure.manifest.json"
        manifest = store.read_json(path.name)
        assert manifest["status"] == "success"
        assert manifest["rng_seed"] == 7
        assert manifest["argv"] == ["pressure"]
        assert set(manifest["versions"]) == {"bk_thermo_provider", "joblib", "numpy", "python", "scipy"}
        expected = hashlib.sha256(store.path("pressure.json").read_bytes()).hexdigest()
        assert manifest["outputs"] == {"pressure.json": expected}
        assert sha256(store.path("pressure.json")) == expected
        assert "error" not in manifest


class TestDumps:
    def test_numpy_and_enums(self):
        data = {"b": np.float64(0.5), "a": np.arange(2), "c": Verdict.PASS, "d": np.bool_(True), "e": 1j}
        assert json.loads(dumps(data)) == {"a": [0, 1], "b": 0.5, "c": "PASS", "d": True, "e": [0.0, 1.0]}
        assert dumps({"b": 1, "a": 2}).index('"a"') < dumps({"b": 1, "a": 2}).index('"b"')
        assert dumps({}).endswith("\n")

    def test_unserializable(self):
        with pytest.raises(TypeError):
            dumps({"x": object()})
