from bk_thermo_provider.engine.config import RunConfig
from bk_thermo_provider.engine.exceptions import BKThermoException
from bk_thermo_provider.engine.map_model import BKMapDescriptor, JuliaCloud, TangentMap, sample_julia
from bk_thermo_provider.engine.measures import AtomicMeasure, MeasureBuilder
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy
from bk_thermo_provider.engine.pipeline import STAGES, ThermoPipeline
from bk_thermo_provider.engine.pressure import PressureEstimator
from bk_thermo_provider.engine.verify import LemmaVerifier
from bk_thermo_provider.engine.xfer import GridFunction, TransferOperator

__all__ = [
    "STAGES",
    "AtomicMeasure",
    "BKMapDescriptor",
    "BKThermoException",
    "GridFunction",
    "JuliaCloud",
    "LemmaVerifier",
    "MeasureBuilder",
    "PotentialParams",
    "PressureEstimator",
    "RunConfig",
    "TangentMap",
    "ThermoPipeline",
    "TransferOperator",
    "TruncationPolicy",
    "sample_julia",
]
