from __future__ import annotations

from typing import Any


class BKThermoException(Exception):
    """Base exception for BK-class thermodynamic formalism computations."""


class ConfigError(BKThermoException):
    """Invalid run configuration. Carries every offending field at once."""

    def __init__(self, errors: dict[str, str]):
        self.errors = dict(errors)
        details = "; ".join(f"{field}: {message}" for field, message in sorted(self.errors.items()))
        super().__init__(f"Invalid configuration - {details}")


class MissingArtifactError(BKThermoException):
    """A stage input produced by an earlier stage is missing."""

    def __init__(self, path: str):
        self.path = path
        super().__init__(f"Required artifact not found - {path}")


class PreconditionError(BKThermoException):
    """An operation was called outside its precondition."""


class InadmissibleParameters(PreconditionError):
    """Potential parameters outside 1 < tau < 1 + 1/M and t > rho / (tau - 1)."""

    def __init__(self, tau: float, t: float, M: int, rho: float):
        self.tau = tau
        self.t = t
        self.M = M
        self.rho = rho
        super().__init__(
            f"Inadmissible parameters tau={tau}, t={t} for M={M}, rho={rho}. "
            f"Require 1 < tau < {1 + 1 / M} and t > {rho / (tau - 1) if tau > 1 else float('inf')}"
        )


class DomainError(BKThermoException):
    """Metric derivative requested at z = 0 or at a zero of f."""


class PoleProximityError(BKThermoException):
    def __init__(self, z: complex, pole: complex, distance: float):
        self.z = z
        self.pole = pole
        self.distance = distance
        super().__init__(f"Point {z} is within {distance:.3g} of pole {pole}")


class OmittedValueError(BKThermoException):
    def __init__(self, w: complex, omitted: complex):
        self.w = w
        self.omitted = omitted
        super().__init__(f"Query point {w} is at the omitted value {omitted}, no inverse branch exists")


class BranchUndefinedError(BKThermoException):
    def __init__(self, depth: int, w: complex, cause: Exception | None = None):
        self.depth = depth
        self.w = w
        self.cause = cause
        super().__init__(f"Inverse branch undefined at depth {depth} for point {w}")


class OrbitEscapeError(BKThermoException):
    def __init__(self, depth: int, z: complex):
        self.depth = depth
        self.z = z
        super().__init__(f"Forward orbit hit a pole or zero at depth {depth} (point {z})")


class TruncationFailure(BKThermoException):
    """Tail tolerance unreachable within K_max."""

    def __init__(self, tail_bound: float, K_max: int, w: complex | None = None):
        self.tail_bound = tail_bound
        self.K_max = K_max
        self.w = w
        super().__init__(f"Certified tail {tail_bound:.3e} at K_max={K_max} exceeds tolerance (w={w})")


class TreeBudgetExceeded(BKThermoException):
    def __init__(self, achieved_depth: int, node_count: int):
        self.achieved_depth = achieved_depth
        self.node_count = node_count
        super().__init__(f"Preimage tree exceeded node budget after depth {achieved_depth} ({node_count} nodes)")


class ResolutionError(BKThermoException):
    """Cloud resolution too coarse for nearest-neighbour interpolation."""

    def __init__(self, resolution: float, delta: float):
        self.resolution = resolution
        self.delta = delta
        super().__init__(f"Cloud resolution {resolution:.3g} is coarser than delta {delta:.3g}")


class SeedPolishError(BKThermoException):
    """Root polishing of the seed did not converge to a repelling fixed point."""


class SamplingError(BKThermoException):
    """Sampled Julia cloud violates the model's |z| >= T_floor guarantee."""


class ConvergenceFailure(BKThermoException):
    """Numerical iteration did not converge. Carries the raw diagnostics."""

    def __init__(self, message: str, per_n: list | None = None, diagnostics: dict[str, Any] | None = None):
        self.per_n = list(per_n or [])
        self.diagnostics = dict(diagnostics or {})
        super().__init__(message)


class CrossConstructionFailure(BKThermoException):
    """The two conformal measure constructions disagree."""

    def __init__(self, message: str, first: Any, second: Any, integrals: dict[str, Any] | None = None):
        self.first = first
        self.second = second
        self.integrals = dict(integrals or {})
        super().__init__(message)


class EmptyTestSetError(BKThermoException):
    """No test functions given for a residual check."""


class NonPositiveDensityError(BKThermoException):
    def __init__(self, point: complex, value: float):
        self.point = point
        self.value = value
        super().__init__(f"Density is not positive at atom {point} (value {value})")


class TightnessFailure(BKThermoException):
    """Tail masses of nu_s decay slower than the power law R^-r_t."""

    def __init__(self, message: str, tails: dict[str, Any] | None = None):
        self.tails = dict(tails or {})
        super().__init__(message)
