from __future__ import annotations

from functools import cached_property
from typing import TYPE_CHECKING

from airflow.sensors.base import BaseSensorOperator, PokeReturnValue
from bk_thermo_provider.engine.exceptions import BKThermoException
from bk_thermo_provider.hooks.thermo import BKThermoHook, RunStatus

if TYPE_CHECKING:
    from airflow.utils.context import Context


class ThermoArtifactSensor(BaseSensorOperator):
    """Waits until a stage manifest reports success and its artifacts are intact."""

    template_fields = ("stage", "output_dir")

    def __init__(
        self,
        stage: str,
        output_dir: str | None = None,
        bk_thermo_conn_id: str = "bk_thermo_default",
        **kwargs,
    ):
        self.stage = stage
        self.output_dir = output_dir
        self.bk_thermo_conn_id = bk_thermo_conn_id
        super().__init__(**kwargs)

    @cached_property
    def hook(self) -> BKThermoHook:
        return BKThermoHook(bk_thermo_conn_id=self.bk_thermo_conn_id)

    def poke(self, context: Context) -> bool | PokeReturnValue:
        status = self.hook.get_run_status(self.stage, self.output_dir)

        if status in RunStatus.FAILED_STATES.value:
            manifest = self.hook.read_manifest(self.stage, self.output_dir) or {}
            err_message = manifest.get("error", {}).get("message", f"Stage {self.stage} failed")
            self.log.error("Stage %s has failed: %s", self.stage, err_message)
            raise BKThermoException(err_message)

        if status in RunStatus.SUCCESS_STATES.value:
            if not self.hook.outputs_intact(self.stage, self.output_dir):
                return False
            self.log.info("Stage %s has succeeded", self.stage)
            return True

        self.log.info("Stage %s has not completed. Current state is %s", self.stage, status)
        return False
