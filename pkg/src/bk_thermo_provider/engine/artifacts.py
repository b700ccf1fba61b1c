from __future__ import annotations

import hashlib
import io
import json
import platform
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

import joblib
import numpy as np
import scipy

from bk_thermo_provider.engine.exceptions import MissingArtifactError
from bk_thermo_provider.engine.map_model import JuliaCloud
from bk_thermo_provider.engine.measures import AtomicMeasure, Provenance
from bk_thermo_provider.engine.xfer import GridFunction

FLOAT_FORMAT = "%.17g"

CLOUD_COLUMNS = ("re", "im", "depth")
DENSITY_COLUMNS = ("re", "im", "value")
MEASURE_COLUMNS = ("re", "im", "weight")
CURVE_COLUMNS = ("t", "P", "error_bar")
PRESSURE_COLUMNS = ("n", "per_n")


def _to_builtin(obj: Any) -> Any:
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    if isinstance(obj, np.ndarray):
        if np.iscomplexobj(obj):
            return np.stack([obj.real, obj.imag], axis=-1).tolist()
        return obj.tolist()
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.complexfloating):
        return [float(obj.real), float(obj.imag)]
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"Object of type {type(obj).__name__} is not JSON serializable")


def dumps(data: Any) -> str:
    return json.dumps(data, sort_keys=True, indent=2, default=_to_builtin) + "\n"


def sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as handle:
        for block in iter(lambda: handle.read(1 << 16), b""):
            digest.update(block)
    return digest.hexdigest()


def versions() -> dict[str, str]:
    from bk_thermo_provider import get_provider_info

    return {
        "bk_thermo_provider": get_provider_info()["versions"][0],
        "joblib": joblib.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "scipy": scipy.__version__,
    }


class ArtifactStore:
    """
    Flat directory of run artifacts.

    Tables are comma separated with %.17g floats. The first comment line carries a
    JSON header with the metadata needed to read the table back, the second names
    the columns.
    """

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)

    def path(self, name: str) -> Path:
        return self.directory / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def require(self, name: str) -> Path:
        path = self.path(name)
        if not path.exists():
            raise MissingArtifactError(str(path))
        return path

    def _prepare(self, name: str) -> Path:
        path = self.path(name)
        path.parent.mkdir(parents=True, exist_ok=True)
        return path

    # JSON

    def write_json(self, name: str, data: Any) -> Path:
        path = self._prepare(name)
        path.write_text(dumps(data))
        return path

    def read_json(self, name: str) -> Any:
        return json.loads(self.require(name).read_text())

    # Tables

    def write_table(self, name: str, columns: Sequence[str], rows: np.ndarray, meta: dict | None = None) -> Path:
        path = self._prepare(name)
        rows = np.asarray(rows, dtype=float).reshape(-1, len(columns))
        header = json.dumps(meta or {}, sort_keys=True, default=_to_builtin) + "\n" + ",".join(columns)
        buffer = io.StringIO()
        np.savetxt(buffer, rows, fmt=FLOAT_FORMAT, delimiter=",", header=header, comments="# ")
        path.write_text(buffer.getvalue())
        return path

    def read_table(self, name: str) -> tuple[dict, list[str], np.ndarray]:
        path = self.require(name)
        with open(path) as handle:
            meta = json.loads(handle.readline()[2:])
            columns = handle.readline()[2:].strip().split(",")
        rows = np.loadtxt(path, delimiter=",", comments="#", ndmin=2)
        return meta, columns, rows.reshape(-1, len(columns))

    # Domain objects

    def write_cloud(self, cloud: JuliaCloud, name: str = "cloud.csv") -> Path:
        rows = np.column_stack([cloud.points.real, cloud.points.imag, cloud.depths])
        meta = {"seed": cloud.seed, "resolution": cloud.pairwise_resolution, "min_modulus": cloud.min_modulus}
        if cloud.parents is not None:
            meta["parents"] = cloud.parents
        return self.write_table(name, CLOUD_COLUMNS, rows, meta)

    def read_cloud(self, name: str = "cloud.csv") -> JuliaCloud:
        meta, _, rows = self.read_table(name)
        parents = meta.get("parents")
        return JuliaCloud(
            points=rows[:, 0] + 1j * rows[:, 1],
            depths=rows[:, 2].astype(int),
            seed=complex(*meta["seed"]),
            parents=None if parents is None else np.asarray(parents, dtype=int),
        )

    def write_density(self, h: GridFunction, name: str = "density.csv") -> Path:
        points = h.cloud.points
        rows = np.column_stack([points.real, points.imag, h.values])
        return self.write_table(name, DENSITY_COLUMNS, rows, {"diagnostics": h.diagnostics, "error_estimate": h.error_estimate})

    def read_density(self, cloud: JuliaCloud, name: str = "density.csv") -> GridFunction:
        meta, _, rows = self.read_table(name)
        points = rows[:, 0] + 1j * rows[:, 1]
        if points.size != cloud.size or not np.allclose(points, cloud.points, rtol=0, atol=1e-12):
            raise MissingArtifactError(f"{self.path(name)} (does not match {self.path('cloud.csv')})")
        return GridFunction(
            cloud=cloud,
            values=rows[:, 2],
            nonnegative=True,
            error_estimate=meta.get("error_estimate", 0.0),
            diagnostics=meta.get("diagnostics", {}),
        )

    def write_measure(self, mu: AtomicMeasure, name: str) -> Path:
        rows = np.column_stack([mu.points.real, mu.points.imag, mu.weights])
        return self.write_table(name, MEASURE_COLUMNS, rows, {"provenance": mu.provenance, "metadata": mu.metadata})

    def read_measure(self, name: str) -> AtomicMeasure:
        meta, _, rows = self.read_table(name)
        return AtomicMeasure(
            points=rows[:, 0] + 1j * rows[:, 1],
            weights=rows[:, 2],
            provenance=Provenance(meta["provenance"]),
            metadata=meta.get("metadata", {}),
        )

    def digests(self, names: Sequence[str]) -> dict[str, str]:
        return {name: sha256(self.path(name)) for name in sorted(names) if self.exists(name)}

    def write_manifest(
        self,
        stage: str,
        config: dict,
        outputs: Sequence[str],
        status: str,
        wall_time: float,
        argv: Sequence[str] | None = None,
        threads: int = 1,
        error: dict | None = None,
    ) -> Path:
        manifest = {
            "stage": stage,
            "status": status,
            "config": config,
            "rng_seed": config["sampling"]["rng_seed"],
            "threads": threads,
            "argv": list(argv or []),
            "versions": versions(),
            "wall_time_seconds": wall_time,
            "outputs": self.digests(outputs),
        }
        if error is not None:
            manifest["error"] = error
        return self.write_json(manifest_name(stage), manifest)


def manifest_name(stage: str) -> str:
    return f"{stage}.manifest.json"
