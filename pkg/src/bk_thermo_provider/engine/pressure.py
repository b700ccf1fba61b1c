from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Any, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy.optimize import bisect

from airflow.utils.log.logging_mixin import LoggingMixin
from bk_thermo_provider.engine.exceptions import ConvergenceFailure, InadmissibleParameters
from bk_thermo_provider.engine.map_model import BKMapDescriptor, JuliaCloud
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy
from bk_thermo_provider.engine.xfer import PreimageTree, TransferOperator

EXTRAPOLATIONS = ("ratio-aitken", "aitken", "none")


def aitken(sequence: Sequence[float]) -> tuple[float, float]:
    """Aitken delta-squared limit of the last three terms and the size of the correction."""
    if len(sequence) < 3:
        return float(sequence[-1]), 0.0
    x0, x1, x2 = sequence[-3:]
    denominator = x2 - 2 * x1 + x0
    if abs(denominator) <= 1e-14 * max(1.0, abs(x2)):
        return float(x2), 0.0
    limit = x2 - (x2 - x1) ** 2 / denominator
    # an accelerated value further than the last step is not trusted
    if abs(limit - x2) > abs(x2 - x1) * 10:
        return float(x2), 0.0
    return float(limit), float(abs(limit - x2))


@dataclass
class PressureEstimate:
    t: float
    tau: float
    value: float
    per_n: list[tuple[int, float]]
    basepoint: complex
    error_bar: float
    extrapolation: str
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        data = asdict(self)
        data["basepoint"] = [self.basepoint.real, self.basepoint.imag]
        data["per_n"] = [[n, value] for n, value in self.per_n]
        return data


@dataclass
class PressureCurve:
    tau: float
    samples: list[PressureEstimate]
    rejected: list[tuple[float, str]] = field(default_factory=list)

    @property
    def t_values(self) -> np.ndarray:
        return np.asarray([sample.t for sample in self.samples])

    @property
    def values(self) -> np.ndarray:
        return np.asarray([sample.value for sample in self.samples])

    def is_strictly_decreasing(self) -> bool:
        return bool(np.all(np.diff(self.values) < 0))


@dataclass
class PressureZero:
    """Outcome of the pressure-zero search. t_star is None when no root was bracketed."""

    t_star: float | None
    value: float | None
    bracketed: bool
    admissible: bool
    hd_band: float
    reason: str = ""
    experimental: bool = True
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


class PressureEstimator(LoggingMixin):
    """Estimates P_t as the growth rate of L_t^n 1 along a single preimage tree."""

    def __init__(
        self,
        model: BKMapDescriptor,
        truncation: TruncationPolicy | None = None,
        n_jobs: int = 1,
        extrapolation: str = "ratio-aitken",
    ):
        super().__init__()
        if extrapolation not in EXTRAPOLATIONS:
            raise ValueError(f"Unknown extrapolation {extrapolation}, expected one of {EXTRAPOLATIONS}")
        self.model = model
        self.truncation = truncation or TruncationPolicy()
        self.n_jobs = n_jobs
        self.extrapolation = extrapolation

    def operator(self, params: PotentialParams, potential_shift: float = 0.0) -> TransferOperator:
        return TransferOperator(self.model, params, self.truncation, n_jobs=self.n_jobs, potential_shift=potential_shift)

    def default_second_basepoint(self, w0: complex) -> complex:
        for k in self.model.branch_indices(1):
            candidate = self.model.pullback_orbit(w0, [k])[0]
            if abs(candidate - w0) > self.model.preimage_tol * max(1.0, abs(w0)):
                return candidate
        raise ValueError(f"No distinct preimage of {w0} available as second basepoint")

    def _from_tree(self, params: PotentialParams, tree: PreimageTree, n_max: int) -> PressureEstimate:
        logs = [float(np.log(tree.level_value(n))) for n in range(1, n_max + 1)]
        per_n = [(n, logs[n - 1] / n) for n in range(1, n_max + 1)]
        averages = [value for _, value in per_n]
        ratios = [logs[0]] + [logs[n] - logs[n - 1] for n in range(1, n_max)]

        if self.extrapolation == "ratio-aitken":
            value, correction = aitken(ratios)
        elif self.extrapolation == "aitken":
            value, correction = aitken(averages)
        else:
            value, correction = averages[-1], 0.0

        truncation_term = float(np.log1p(tree.certificate(n_max) / tree.level_value(n_max)))
        error_bar = max(
            abs(averages[-1] - value),
            abs(ratios[-1] - value) + correction,
            truncation_term,
        )
        increments = np.abs(np.diff(averages))
        tolerance = 1e-9 + truncation_term
        start = max(0, len(increments) // 2 - 1)
        tail = increments[start:]
        if np.any(tail[1:] > tail[:-1] + tolerance):
            self.log.error("Pressure increments do not shrink: %s", increments.tolist())
            raise ConvergenceFailure(
                f"Pressure estimate at t={params.t} did not converge (increments {increments.tolist()})",
                per_n=per_n,
                diagnostics={"ratios": ratios},
            )
        return PressureEstimate(
            t=params.t,
            tau=params.tau,
            value=float(value),
            per_n=per_n,
            basepoint=tree.root,
            error_bar=float(error_bar),
            extrapolation=self.extrapolation,
            diagnostics={
                "ratios": ratios,
                "tail_certificate": tree.certificate(n_max),
                "tree": tree.summary(),
            },
        )

    def estimate(
        self,
        params: PotentialParams,
        w0: complex,
        n_max: int,
        second_basepoint: complex | None = None,
        verify_basepoint: bool = True,
        potential_shift: float = 0.0,
    ) -> PressureEstimate:
        if n_max < 1:
            raise ValueError(f"n_max must be >= 1, got {n_max}")
        operator = self.operator(params, potential_shift)
        _, tree = operator.power_one(w0, n_max)
        estimate = self._from_tree(params, tree, n_max)
        self.log.info("Pressure at t=%s from %s: %s +- %s", params.t, w0, estimate.value, estimate.error_bar)

        if verify_basepoint:
            w1 = self.default_second_basepoint(w0) if second_basepoint is None else complex(second_basepoint)
            _, other_tree = operator.power_one(w1, n_max)
            other = self._from_tree(params, other_tree, n_max)
            gap = abs(other.value - estimate.value)
            estimate.diagnostics["second_basepoint"] = {
                "basepoint": [w1.real, w1.imag],
                "value": other.value,
                "error_bar": other.error_bar,
                "gap": gap,
            }
            if gap > estimate.error_bar + other.error_bar:
                self.log.error("Basepoints %s and %s disagree on the pressure by %s", w0, w1, gap)
                raise ConvergenceFailure(
                    f"Pressure depends on the basepoint: {estimate.value} vs {other.value}",
                    per_n=estimate.per_n,
                    diagnostics={"second_per_n": other.per_n},
                )
        return estimate

    def pressure_curve(
        self,
        tau: float,
        t_grid: Sequence[float],
        w0: complex,
        n_max: int,
        cloud: JuliaCloud | None = None,
    ) -> PressureCurve:
        admissible, rejected = [], []
        for t in sorted(set(float(t) for t in t_grid)):
            params = PotentialParams(tau=tau, t=t)
            if params.is_admissible(self.model.M, self.model.rho):
                admissible.append(params)
            else:
                self.log.warning("Skipping inadmissible t=%s for tau=%s", t, tau)
                rejected.append((t, str(InadmissibleParameters(tau, t, self.model.M, self.model.rho))))

        samples = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self.estimate)(params, w0, n_max, verify_basepoint=False) for params in admissible
        )
        curve = PressureCurve(tau=tau, samples=list(samples), rejected=rejected)

        if cloud is not None and len(curve.samples) > 1:
            first_params = PotentialParams(tau=tau, t=curve.samples[0].t)
            min_metric = min(self.model.metric_deriv(z, first_params) for z in cloud.points)
            if min_metric > 1 and not curve.is_strictly_decreasing():
                raise ConvergenceFailure(
                    f"Pressure curve is not decreasing although min metric derivative is {min_metric}",
                    per_n=[(s.t, s.value) for s in curve.samples],
                )
        return curve

    def find_pressure_zero(
        self,
        tau: float,
        t_bracket: tuple[float, float],
        tol: float,
        w0: complex,
        n_max: int,
        max_refinements: int = 6,
    ) -> PressureZero:
        M, rho = self.model.M, self.model.rho
        band = 2 * M * rho / (2 + M * rho)
        low, high = sorted(float(t) for t in t_bracket)
        for t in (low, high):
            if not PotentialParams(tau=tau, t=t).is_admissible(M, rho):
                return PressureZero(None, None, bracketed=False, admissible=False, hd_band=band, reason=f"bracket endpoint t={t} is inadmissible")

        def pressure(t: float) -> float:
            return self.estimate(PotentialParams(tau=tau, t=t), w0, n_max, verify_basepoint=False).value

        p_low, p_high = pressure(low), pressure(high)
        if np.sign(p_low) == np.sign(p_high):
            self.log.warning("No sign change of the pressure on [%s, %s]: %s, %s", low, high, p_low, p_high)
            return PressureZero(
                None,
                None,
                bracketed=False,
                admissible=True,
                hd_band=band,
                reason="no sign change",
                diagnostics={"endpoint_values": [p_low, p_high]},
            )

        slope = abs(p_high - p_low) / (high - low)
        xtol = tol / (2 * slope)
        t_star, value = None, None
        for _ in range(max_refinements):
            t_star = bisect(pressure, low, high, xtol=xtol)
            value = pressure(t_star)
            if abs(value) < tol:
                break
            xtol /= 4
        admissible = PotentialParams(tau=tau, t=t_star).is_admissible(M, rho)
        self.log.info("Pressure zero at t=%s (P=%s), dimension band %s", t_star, value, band)
        return PressureZero(
            t_star=float(t_star),
            value=float(value),
            bracketed=True,
            admissible=admissible,
            hd_band=band,
            reason="" if abs(value) < tol else "tolerance not reached",
            diagnostics={"endpoint_values": [p_low, p_high], "xtol": xtol},
        )


def estimate_pressure(
    model: BKMapDescriptor,
    params: PotentialParams,
    w0: complex,
    n_max: int,
    truncation: TruncationPolicy | None = None,
    n_jobs: int = 1,
) -> PressureEstimate:
    return PressureEstimator(model, truncation, n_jobs=n_jobs).estimate(params, w0, n_max)
