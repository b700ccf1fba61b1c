from __future__ import annotations

import time
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from airflow.utils.log.logging_mixin import LoggingMixin
from bk_thermo_provider.engine.artifacts import CURVE_COLUMNS, PRESSURE_COLUMNS, ArtifactStore
from bk_thermo_provider.engine.config import RunConfig
from bk_thermo_provider.engine.exceptions import (
    ConfigError,
    ConvergenceFailure,
    CrossConstructionFailure,
    MissingArtifactError,
    TightnessFailure,
    TreeBudgetExceeded,
    TruncationFailure,
)
from bk_thermo_provider.engine.map_model import BKMapDescriptor, JuliaCloud, JuliaSampler
from bk_thermo_provider.engine.measures import MeasureBuilder, default_test_functions
from bk_thermo_provider.engine.pressure import PressureEstimator
from bk_thermo_provider.engine.verify import LemmaVerifier
from bk_thermo_provider.engine.xfer import TransferOperator

STAGES = ("sample-julia", "pressure", "pressure-curve", "density", "conformal", "gibbs", "verify", "dimension")

INPUT_FAILURES = (ConfigError, MissingArtifactError)
NUMERICAL_FAILURES = (ConvergenceFailure, TruncationFailure, TreeBudgetExceeded, CrossConstructionFailure, TightnessFailure)

GIBBS_P_OFFSET = 0.1


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, INPUT_FAILURES):
        return 2
    if isinstance(exc, NUMERICAL_FAILURES):
        return 3
    return 1


def error_record(exc: BaseException) -> dict[str, Any]:
    record: dict[str, Any] = {"type": type(exc).__name__, "message": str(exc), "exit_code": exit_code(exc)}
    if isinstance(exc, ConfigError):
        record["fields"] = exc.errors
    if isinstance(exc, MissingArtifactError):
        record["path"] = exc.path
    return record


def diagnostics_record(exc: BaseException) -> dict[str, Any]:
    if isinstance(exc, ConvergenceFailure):
        return {"per_n": exc.per_n, "diagnostics": exc.diagnostics}
    if isinstance(exc, TruncationFailure):
        return {"tail_bound": exc.tail_bound, "K_max": exc.K_max, "w": exc.w}
    if isinstance(exc, TreeBudgetExceeded):
        return {"achieved_depth": exc.achieved_depth, "node_count": exc.node_count}
    if isinstance(exc, CrossConstructionFailure):
        return {"integrals": exc.integrals}
    if isinstance(exc, TightnessFailure):
        return {"tails": exc.tails}
    return {}


@dataclass
class StageResult:
    stage: str
    outputs: list[str]
    summary: dict = field(default_factory=dict)
    manifest: str | None = None


class ThermoPipeline(LoggingMixin):
    """
    Runs one stage of the batch workflow and writes its artifacts.

    Stages compose through files in the output directory: later stages read
    cloud.csv, pressure.json, conformal.csv and density.csv when present.
    """

    def __init__(
        self,
        config: RunConfig,
        output_dir: str | Path | None = None,
        n_jobs: int = 1,
        argv: Sequence[str] | None = None,
    ):
        super().__init__()
        self.config = config
        self.store = ArtifactStore(output_dir or config.output.directory)
        self.n_jobs = n_jobs
        self.argv = list(argv or [])

    @cached_property
    def base_model(self) -> BKMapDescriptor:
        return self.config.build_model()

    @cached_property
    def params(self):
        return self.config.potential_params()

    @cached_property
    def truncation(self):
        return self.config.truncation_policy()

    @cached_property
    def basepoint(self) -> complex:
        return JuliaSampler(self.base_model).polish_seed(self.config.seed_hint)

    def model_for(self, cloud: JuliaCloud) -> BKMapDescriptor:
        if self.config.sampling.calibrate_delta:
            return self.base_model.calibrated(cloud)
        return self.base_model

    def operator(self, model: BKMapDescriptor | None = None) -> TransferOperator:
        return TransferOperator(model or self.base_model, self.params, self.truncation, n_jobs=self.n_jobs)

    def estimator(self) -> PressureEstimator:
        return PressureEstimator(
            self.base_model, self.truncation, n_jobs=self.n_jobs, extrapolation=self.config.truncation.extrapolation
        )

    @cached_property
    def stages(self) -> dict[str, Callable[[], StageResult]]:
        return {
            "sample-julia": self.sample_julia,
            "pressure": self.pressure,
            "pressure-curve": self.pressure_curve,
            "density": self.density,
            "conformal": self.conformal,
            "gibbs": self.gibbs,
            "verify": self.verify,
            "dimension": self.dimension,
        }

    def run(self, stage: str) -> StageResult:
        if stage not in self.stages:
            raise ConfigError({"stage": f"unknown stage {stage}, expected one of {list(STAGES)}"})
        self.log.info("Running stage %s into %s", stage, self.store.directory)
        started = time.perf_counter()
        try:
            result = self.stages[stage]()
        except Exception as exc:
            self.log.error("Stage %s failed: %s", stage, exc)
            self.write_failure(stage, exc, time.perf_counter() - started)
            raise
        manifest = self.store.write_manifest(
            stage,
            self.config.to_dict(),
            result.outputs,
            status="success",
            wall_time=time.perf_counter() - started,
            argv=self.argv,
            threads=self.n_jobs,
        )
        result.manifest = str(manifest)
        self.log.info("Stage %s wrote %s", stage, result.outputs)
        return result

    def write_failure(self, stage: str, exc: BaseException, wall_time: float) -> None:
        record = error_record(exc)
        outputs = ["error.json"]
        self.store.write_json("error.json", {"stage": stage, **record})
        if record["exit_code"] == 3:
            self.store.write_json("diagnostics.json", {"stage": stage, **diagnostics_record(exc)})
            outputs.append("diagnostics.json")
        self.store.write_manifest(
            stage,
            self.config.to_dict(),
            outputs,
            status="failed",
            wall_time=wall_time,
            argv=self.argv,
            threads=self.n_jobs,
            error=record,
        )

    # Shared inputs.

    def load_cloud(self) -> JuliaCloud:
        if self.store.exists("cloud.csv"):
            return self.store.read_cloud()
        self.log.info("No cloud.csv in %s, sampling a new cloud", self.store.directory)
        return self._sample()

    def pressure_estimate(self) -> float:
        if self.store.exists("pressure.json"):
            return float(self.store.read_json("pressure.json")["value"])
        return self.estimator().estimate(self.params, self.basepoint, self.config.truncation.n_max).value

    def _sample(self) -> JuliaCloud:
        sampling = self.config.sampling
        return JuliaSampler(self.base_model).sample(
            self.config.seed_hint, sampling.depth, sampling.budget, sampling.rng_seed, spread=sampling.spread
        )

    # Stages.

    def sample_julia(self) -> StageResult:
        cloud = self._sample()
        self.store.write_cloud(cloud)
        summary = {
            "size": cloud.size,
            "seed": cloud.seed,
            "min_modulus": cloud.min_modulus,
            "resolution": cloud.pairwise_resolution,
            "delta": self.model_for(cloud).delta,
        }
        self.store.write_json("cloud.json", summary)
        return StageResult("sample-julia", ["cloud.csv", "cloud.json"], summary)

    def pressure(self) -> StageResult:
        estimate = self.estimator().estimate(self.params, self.basepoint, self.config.truncation.n_max)
        self.store.write_table("pressure.csv", PRESSURE_COLUMNS, np.asarray(estimate.per_n), {"t": estimate.t, "tau": estimate.tau})
        self.store.write_json("pressure.json", estimate.to_dict())
        return StageResult("pressure", ["pressure.csv", "pressure.json"], {"value": estimate.value, "error_bar": estimate.error_bar})

    def pressure_curve(self) -> StageResult:
        cloud = self.store.read_cloud() if self.store.exists("cloud.csv") else None
        curve = self.estimator().pressure_curve(
            self.params.tau, self.config.curve.t_grid, self.basepoint, self.config.truncation.n_max, cloud=cloud
        )
        rows = np.asarray([(sample.t, sample.value, sample.error_bar) for sample in curve.samples]).reshape(-1, 3)
        self.store.write_table("curve.csv", CURVE_COLUMNS, rows, {"tau": curve.tau})
        summary = {
            "tau": curve.tau,
            "decreasing": curve.is_strictly_decreasing(),
            "rejected": curve.rejected,
            "samples": [sample.to_dict() for sample in curve.samples],
        }
        self.store.write_json("curve.json", summary)
        return StageResult("pressure-curve", ["curve.csv", "curve.json"], {"decreasing": summary["decreasing"], "rejected": curve.rejected})

    def density(self) -> StageResult:
        cloud = self.load_cloud()
        operator = self.operator(self.model_for(cloud))
        P_cloud = operator.cloud_pressure(cloud)
        h = operator.cesaro_density(cloud, P_cloud, self.config.density.n_terms, band_radius=self.config.density.band_radius)
        h.diagnostics["P_cloud"] = P_cloud
        if self.store.exists("pressure.json"):
            h.diagnostics["P_tree"] = self.pressure_estimate()
        self.store.write_density(h)
        self.store.write_json("density.json", h.diagnostics)
        return StageResult("density", ["density.csv", "density.json"], {"residual": h.diagnostics["residual"], "P_cloud": P_cloud})

    def measure_builder(self, P_hat: float, model: BKMapDescriptor | None = None) -> MeasureBuilder:
        measures = self.config.measures
        return MeasureBuilder(
            self.operator(model),
            P_hat,
            test_functions=default_test_functions(measures.disk_radius),
            eps_fractions=measures.eps_fractions,
            max_halvings=measures.max_halvings,
            agreement_tol=measures.agreement_tol,
        )

    def conformal(self) -> StageResult:
        P_hat = self.pressure_estimate()
        builder = self.measure_builder(P_hat)
        n_max = self.config.truncation.n_max
        mt = builder.conformal_estimate(self.basepoint, n_max, self.config.measures.strategy)
        eigen_residual = builder.eigen_residual(mt)
        quasi = builder.quasi_invariance_check(mt, radii=self.config.measures.quasi_radii)
        tightness = builder.tightness_check(self.basepoint, n_max)
        summary = {
            "pressure": P_hat,
            "strategy": self.config.measures.strategy,
            "atoms": mt.size,
            "integrals": builder.test_integrals(mt),
            "eigen_residual": eigen_residual,
            "cross_check": mt.metadata.get("cross_check"),
            "quasi_invariance": {"c_R": quasi.c_R, "skipped_boxes": quasi.skipped_boxes, "decaying": quasi.decaying},
            "tightness": tightness.to_dict(),
            "escaping_mass": builder.escaping_mass(mt, self.config.measures.disk_radius, 5),
        }
        self.log.info("Conformal measure on %s atoms, eigen residual %s", mt.size, eigen_residual)
        self.store.write_measure(mt, "conformal.csv")
        self.store.write_json("conformal.json", summary)
        return StageResult("conformal", ["conformal.csv", "conformal.json"], {"eigen_residual": eigen_residual, "atoms": mt.size})

    def gibbs(self) -> StageResult:
        for name in ("conformal.csv", "density.csv", "cloud.csv"):
            self.store.require(name)
        cloud = self.store.read_cloud()
        mt = self.store.read_measure("conformal.csv")
        h = self.store.read_density(cloud)
        P_hat = mt.pressure if mt.pressure is not None else self.pressure_estimate()
        builder = self.measure_builder(P_hat, self.model_for(cloud))
        mu = builder.gibbs_from_density(mt, h)
        n_range = self.config.measures.gibbs_n_range
        samples = builder.heaviest_atoms(mu, self.config.measures.gibbs_samples)
        ratios = builder.gibbs_ratio(mu, samples, n_range)
        offset = builder.gibbs_ratio(mu, samples, n_range, P=P_hat + GIBBS_P_OFFSET)
        resolved = [ratio.ratio for ratio in ratios if ratio.resolved]
        summary = {
            "pressure": P_hat,
            "ratios": [{"z": r.z, "n": r.n, "ratio": r.ratio, "disk_radius": r.disk_radius} for r in ratios],
            "offset_ratios": [{"z": r.z, "n": r.n, "ratio": r.ratio} for r in offset],
            "max_min_ratio": max(resolved) / min(resolved) if resolved else None,
            "invariance_residual": {
                "gibbs": builder.invariance_residual(mu),
                "conformal": builder.invariance_residual(mt),
            },
            "density_bands": mu.metadata.get("density_bands"),
        }
        self.store.write_measure(mu, "gibbs.csv")
        self.store.write_json("gibbs.json", summary)
        return StageResult("gibbs", ["gibbs.csv", "gibbs.json"], {"max_min_ratio": summary["max_min_ratio"]})

    def verify(self) -> StageResult:
        cloud = self.load_cloud()
        verifier = LemmaVerifier(
            self.model_for(cloud), self.params, self.truncation, rng_seed=self.config.sampling.rng_seed, n_jobs=self.n_jobs
        )
        reports = verifier.run_all(cloud, n_max=self.config.verify.n_max, t_values=self.config.curve.t_grid)
        outputs = []
        for report in reports:
            name = f"verify/{report.lemma_id}.json"
            self.store.write_json(name, report.to_dict())
            outputs.append(name)
        verdicts = {report.lemma_id: report.verdict.value for report in reports}
        self.store.write_json("verify/summary.json", verdicts)
        outputs.append("verify/summary.json")
        return StageResult("verify", outputs, verdicts)

    def dimension(self) -> StageResult:
        zero = self.estimator().find_pressure_zero(
            self.params.tau,
            tuple(self.config.dimension.bracket),
            self.config.dimension.tol,
            self.basepoint,
            self.config.truncation.n_max,
        )
        self.store.write_json("dimension.json", zero.to_dict())
        return StageResult("dimension", ["dimension.json"], {"t_star": zero.t_star, "bracketed": zero.bracketed})
