from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from json import JSONDecodeError
from pathlib import Path
from typing import Any, Sequence

from airflow.configuration import conf
from bk_thermo_provider.engine.exceptions import ConfigError
from bk_thermo_provider.engine.map_model import BKMapDescriptor, TangentMap
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy

MODELS = {"tangent": TangentMap}


def default_output_dir() -> str:
    return conf.get("bk_thermo", "output_dir", fallback="bk_thermo_output")


@dataclass
class ModelSection:
    name: str = "tangent"
    lam: float = 0.5
    overrides: dict = field(default_factory=dict)


@dataclass
class PotentialSection:
    tau: float = 1.5
    t: float = 3.0


@dataclass
class TruncationSection:
    K: int = 60
    K_max: int = 400
    tail_tol: float = 1e-8
    n_max: int = 10
    node_budget: int = 5_000_000
    extrapolation: str = "ratio-aitken"


@dataclass
class SamplingSection:
    seed_hint: float = 4.6
    seed_hint_imag: float = 0.0
    depth: int = 3
    budget: int = 1500
    spread: int = 6
    rng_seed: int = 7
    calibrate_delta: bool = True


@dataclass
class MeasuresSection:
    strategy: str = "adjoint_power"
    eps_fractions: list = field(default_factory=lambda: [0.2, 0.1, 0.05])
    max_halvings: int = 8
    agreement_tol: float = 0.02
    disk_radius: float = 10.0
    gibbs_n_range: list = field(default_factory=lambda: [2, 3, 4, 5, 6])
    gibbs_samples: int = 6
    quasi_radii: list = field(default_factory=lambda: [5.0, 10.0, 20.0])


@dataclass
class DensitySection:
    n_terms: int = 32
    band_radius: float = 10.0


@dataclass
class VerifySection:
    n_max: int = 8


@dataclass
class CurveSection:
    t_grid: list = field(default_factory=lambda: [2.5, 3.0, 3.5, 4.0])


@dataclass
class DimensionSection:
    bracket: list = field(default_factory=lambda: [2.1, 6.0])
    tol: float = 1e-3


@dataclass
class OutputSection:
    directory: str = field(default_factory=default_output_dir)
    formats: list = field(default_factory=lambda: ["csv", "json"])


SECTIONS = {
    "model": ModelSection,
    "potential": PotentialSection,
    "truncation": TruncationSection,
    "sampling": SamplingSection,
    "measures": MeasuresSection,
    "density": DensitySection,
    "verify": VerifySection,
    "curve": CurveSection,
    "dimension": DimensionSection,
    "output": OutputSection,
}


def _type_error(value: Any, expected: type) -> str | None:
    if expected is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif expected is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, expected)
    return None if ok else f"expected {expected.__name__}, got {type(value).__name__} {value!r}"


@dataclass
class RunConfig:
    """Resolved configuration of a run, one dataclass per section."""

    model: ModelSection = field(default_factory=ModelSection)
    potential: PotentialSection = field(default_factory=PotentialSection)
    truncation: TruncationSection = field(default_factory=TruncationSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    measures: MeasuresSection = field(default_factory=MeasuresSection)
    density: DensitySection = field(default_factory=DensitySection)
    verify: VerifySection = field(default_factory=VerifySection)
    curve: CurveSection = field(default_factory=CurveSection)
    dimension: DimensionSection = field(default_factory=DimensionSection)
    output: OutputSection = field(default_factory=OutputSection)

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "RunConfig":
        data = data or {}
        errors: dict[str, str] = {}
        sections = {}
        for name in data:
            if name not in SECTIONS:
                errors[name] = "unknown section"
        for name, section_cls in SECTIONS.items():
            raw = data.get(name, {})
            if not isinstance(raw, dict):
                errors[name] = "section must be a mapping"
                continue
            known = {f.name: f for f in fields(section_cls)}
            values = {}
            for key, value in raw.items():
                if key not in known:
                    errors[f"{name}.{key}"] = "unknown key"
                    continue
                default = getattr(section_cls(), key)
                problem = _type_error(value, type(default))
                if problem:
                    errors[f"{name}.{key}"] = problem
                    continue
                values[key] = float(value) if isinstance(default, float) else value
            sections[name] = section_cls(**values)
        if errors:
            raise ConfigError(errors)
        config = cls(**sections)
        config.validate()
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError({"config": f"file not found - {path}"})
        try:
            data = json.loads(path.read_text())
        except JSONDecodeError as err:
            raise ConfigError({"config": f"invalid json in {path} - {err}"})
        if "config" in data and "status" in data:
            data = data["config"]
        return cls.from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    def apply_overrides(self, overrides: Sequence[str] | None) -> "RunConfig":
        """Apply section.key=value flags, values decoded as json when possible."""
        data = self.to_dict()
        errors = {}
        for override in overrides or []:
            path, sep, raw = override.partition("=")
            section, dot, key = path.strip().partition(".")
            if not sep or not dot or not key:
                errors[override] = "expected section.key=value"
                continue
            try:
                value = json.loads(raw)
            except JSONDecodeError:
                value = raw
            data.setdefault(section, {})[key] = value
        if errors:
            raise ConfigError(errors)
        return RunConfig.from_dict(data)

    def validate(self) -> None:
        errors = {}
        if self.model.name not in MODELS:
            errors["model.name"] = f"unknown model, expected one of {sorted(MODELS)}"
        else:
            try:
                model = self.build_model()
            except (TypeError, ValueError) as err:
                errors["model.overrides"] = str(err)
            else:
                if not self.potential_params().is_admissible(model.M, model.rho):
                    errors["potential"] = (
                        f"(tau={self.potential.tau}, t={self.potential.t}) is inadmissible for M={model.M}, rho={model.rho}"
                    )
        try:
            self.truncation_policy()
        except ValueError as err:
            errors["truncation"] = str(err)
        if self.truncation.n_max < 1:
            errors["truncation.n_max"] = "must be >= 1"
        if self.truncation.extrapolation not in ("ratio-aitken", "aitken", "none"):
            errors["truncation.extrapolation"] = "expected ratio-aitken, aitken or none"
        if self.sampling.budget < 1:
            errors["sampling.budget"] = "must be >= 1"
        if self.sampling.depth < 0:
            errors["sampling.depth"] = "must be >= 0"
        if self.measures.strategy not in ("adjoint_power", "nu_s_limit"):
            errors["measures.strategy"] = "expected adjoint_power or nu_s_limit"
        if self.measures.gibbs_samples < 1:
            errors["measures.gibbs_samples"] = "must be >= 1"
        if self.density.n_terms < 1:
            errors["density.n_terms"] = "must be >= 1"
        if len(self.dimension.bracket) != 2:
            errors["dimension.bracket"] = "expected two endpoints"
        if not self.dimension.tol > 0:
            errors["dimension.tol"] = "must be positive"
        unknown_formats = set(self.output.formats) - {"csv", "json"}
        if unknown_formats:
            errors["output.formats"] = f"unsupported formats {sorted(unknown_formats)}"
        if errors:
            raise ConfigError(errors)

    def build_model(self) -> BKMapDescriptor:
        return MODELS[self.model.name].from_parameter(self.model.lam, **self.model.overrides)

    def potential_params(self) -> PotentialParams:
        return PotentialParams(tau=self.potential.tau, t=self.potential.t)

    def truncation_policy(self) -> TruncationPolicy:
        return TruncationPolicy(
            K=self.truncation.K,
            K_max=self.truncation.K_max,
            tail_tol=self.truncation.tail_tol,
            node_budget=self.truncation.node_budget,
        )

    @property
    def seed_hint(self) -> complex:
        return complex(self.sampling.seed_hint, self.sampling.seed_hint_imag)
