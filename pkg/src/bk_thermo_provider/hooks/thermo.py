from __future__ import annotations

import json
from enum import Enum
from functools import cached_property
from json import JSONDecodeError
from pathlib import Path
from typing import Any, Sequence, Set

from airflow.exceptions import AirflowNotFoundException
from airflow.hooks.base import BaseHook
from bk_thermo_provider.engine.artifacts import ArtifactStore, manifest_name, sha256
from bk_thermo_provider.engine.config import RunConfig
from bk_thermo_provider.engine.exceptions import ConfigError
from bk_thermo_provider.engine.pipeline import StageResult, ThermoPipeline


def _jsonify(obj: Any) -> dict:
    """Return a dict from a JSON string or a dict."""
    if not obj:
        return {}

    if isinstance(obj, str):
        try:
            return json.loads(obj)
        except JSONDecodeError:
            raise ConfigError({"config": f"Invalid json string provided - {obj}"})
    elif isinstance(obj, dict):
        return obj
    else:
        return {}


def _merge(base: dict, updates: dict) -> dict:
    merged = {section: dict(values) if isinstance(values, dict) else values for section, values in base.items()}
    for section, values in updates.items():
        if isinstance(values, dict) and isinstance(merged.get(section), dict):
            merged[section].update(values)
        else:
            merged[section] = values
    return merged


class RunStatus(Enum):
    PENDING = "pending"
    SUCCESS = "success"
    FAILED = "failed"

    TERMINAL_STATES = (SUCCESS, FAILED)
    NON_TERMINAL_STATES = (PENDING,)
    SUCCESS_STATES = (SUCCESS,)
    FAILED_STATES = (FAILED,)

    @classmethod
    def validate(cls, states: str | Sequence[str] | set[str]):
        if isinstance(states, (Sequence, Set)) and not isinstance(states, str):
            for state in states:
                cls(state)
        else:
            cls(states)

    @classmethod
    def is_terminal(cls, state: str) -> bool:
        """Check if the input status is that of a terminal type."""
        cls.validate(states=state)

        return state in cls.TERMINAL_STATES.value


class BKThermoHook(BaseHook):
    """
    Resolves a run configuration and executes pipeline stages.

    The connection extra may hold the configuration inline (``config``, a dict or a
    JSON string), a path to a JSON file (``config_path``), an ``output_dir`` and a
    ``threads`` worker cap. Task-level config is merged over the connection's.
    """

    conn_attr_name = "bk_thermo_conn_id"
    default_conn_name = "bk_thermo_default"
    conn_type = "bk_thermo"
    hook_name = "BK Thermo"

    def __init__(
        self,
        bk_thermo_conn_id: str = default_conn_name,
        config: dict | str | None = None,
        overrides: Sequence[str] | None = None,
        threads: int | None = None,
        *args,
        **kwargs,
    ) -> None:
        super().__init__(*args, **kwargs)
        self.bk_thermo_conn_id = bk_thermo_conn_id
        self.config = config
        self.overrides = list(overrides or [])
        self.threads = threads

    @cached_property
    def extra(self) -> dict:
        try:
            conn = self.get_connection(self.bk_thermo_conn_id)
        except AirflowNotFoundException:
            self.log.warning("Connection %s not found, using default configuration", self.bk_thermo_conn_id)
            return {}
        return conn.extra_dejson if conn.extra else {}

    @cached_property
    def run_config(self) -> RunConfig:
        extra = self.extra
        if extra.get("config_path"):
            base = RunConfig.from_file(extra["config_path"]).to_dict()
        else:
            base = _jsonify(extra.get("config"))
        data = _merge(base, _jsonify(self.config))
        if extra.get("output_dir"):
            data = _merge(data, {"output": {"directory": extra["output_dir"]}})
        config = RunConfig.from_dict(data).apply_overrides(self.overrides)
        self.log.info("Resolved run configuration %s", json.dumps(config.to_dict(), sort_keys=True))
        return config

    @property
    def n_jobs(self) -> int:
        if self.threads is not None:
            return int(self.threads)
        return int(self.extra.get("threads", 1))

    def output_dir(self, output_dir: str | None = None) -> Path:
        return Path(output_dir or self.run_config.output.directory)

    def get_conn(self, output_dir: str | None = None) -> ThermoPipeline:
        return ThermoPipeline(self.run_config, output_dir=self.output_dir(output_dir), n_jobs=self.n_jobs)

    def run_stage(self, stage: str, output_dir: str | None = None) -> StageResult:
        pipeline = self.get_conn(output_dir)
        self.log.info("Going to run stage %s in %s", stage, pipeline.store.directory)
        return pipeline.run(stage)

    def read_manifest(self, stage: str, output_dir: str | None = None) -> dict | None:
        store = ArtifactStore(self.output_dir(output_dir))
        if not store.exists(manifest_name(stage)):
            return None
        return store.read_json(manifest_name(stage))

    def get_run_status(self, stage: str, output_dir: str | None = None) -> str:
        manifest = self.read_manifest(stage, output_dir)
        status = RunStatus.PENDING.value if manifest is None else manifest["status"]
        self.log.info("Current status of stage %s: %s", stage, RunStatus(status).name)
        return status

    def outputs_intact(self, stage: str, output_dir: str | None = None) -> bool:
        """Whether every output recorded in the stage manifest still has its recorded digest."""
        manifest = self.read_manifest(stage, output_dir)
        if manifest is None:
            return False
        store = ArtifactStore(self.output_dir(output_dir))
        for name, digest in manifest.get("outputs", {}).items():
            if not store.exists(name) or sha256(store.path(name)) != digest:
                self.log.warning("Artifact %s of stage %s is missing or changed", name, stage)
                return False
        return True
