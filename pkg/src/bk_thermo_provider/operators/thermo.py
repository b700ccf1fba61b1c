from __future__ import annotations

import json
from functools import cached_property
from typing import TYPE_CHECKING, Any, Sequence

from airflow.configuration import conf
from airflow.models import BaseOperator
from bk_thermo_provider.engine.artifacts import dumps
from bk_thermo_provider.engine.exceptions import ConfigError
from bk_thermo_provider.engine.pipeline import STAGES
from bk_thermo_provider.hooks.thermo import BKThermoHook

if TYPE_CHECKING:
    from airflow.utils.context import Context


class BKThermoStageOperator(BaseOperator):
    """
    Runs one stage of the thermodynamic formalism pipeline.

    Artifact paths are pushed to XCom under ``outputs``, the run manifest under
    ``manifest``. The stage summary is returned.
    """

    ui_color = "#8E7CC3"
    template_fields: Sequence[str] = ("config", "overrides", "output_dir")
    template_fields_renderers = {"config": "json"}

    stage_name: str | None = None

    def __init__(
        self,
        stage: str | None = None,
        bk_thermo_conn_id: str = "bk_thermo_default",
        config: dict[str, Any] | str | None = None,
        overrides: Sequence[str] | None = None,
        output_dir: str | None = None,
        threads: int = conf.getint("bk_thermo", "threads", fallback=1),
        **kwargs,
    ):
        self.stage = stage or self.stage_name
        if self.stage not in STAGES:
            raise ConfigError({"stage": f"unknown stage {self.stage}, expected one of {list(STAGES)}"})
        self.bk_thermo_conn_id = bk_thermo_conn_id
        self.config = config
        self.overrides = overrides
        self.output_dir = output_dir
        self.threads = threads
        super().__init__(**kwargs)

    @cached_property
    def hook(self) -> BKThermoHook:
        return BKThermoHook(
            bk_thermo_conn_id=self.bk_thermo_conn_id,
            config=self.config,
            overrides=self.overrides,
            threads=self.threads,
        )

    def execute(self, context: Context) -> Any:
        result = self.hook.run_stage(self.stage, output_dir=self.output_dir)
        directory = self.hook.output_dir(self.output_dir)
        context["task_instance"].xcom_push(key="outputs", value=[str(directory / name) for name in result.outputs])
        context["task_instance"].xcom_push(key="manifest", value=result.manifest)
        self.log.info("Stage %s has completed successfully", self.stage)
        return json.loads(dumps(result.summary))


class BKThermoSampleJuliaOperator(BKThermoStageOperator):
    """Samples the Julia cloud into cloud.csv."""

    stage_name = "sample-julia"


class BKThermoPressureOperator(BKThermoStageOperator):
    stage_name = "pressure"


class BKThermoPressureCurveOperator(BKThermoStageOperator):
    stage_name = "pressure-curve"


class BKThermoDensityOperator(BKThermoStageOperator):
    """Cesaro fixed point of the normalized operator on the sampled cloud."""

    stage_name = "density"


class BKThermoConformalOperator(BKThermoStageOperator):
    stage_name = "conformal"


class BKThermoGibbsOperator(BKThermoStageOperator):
    """Needs the conformal and density artifacts of the same output directory."""

    stage_name = "gibbs"


class BKThermoVerifyOperator(BKThermoStageOperator):
    stage_name = "verify"


class BKThermoDimensionOperator(BKThermoStageOperator):
    stage_name = "dimension"
