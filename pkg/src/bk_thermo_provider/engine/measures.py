from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import eigs
from scipy.stats import linregress

from airflow.utils.log.logging_mixin import LoggingMixin
from bk_thermo_provider.engine.exceptions import (
    CrossConstructionFailure,
    EmptyTestSetError,
    NonPositiveDensityError,
    OrbitEscapeError,
    PoleProximityError,
    PreconditionError,
    TightnessFailure,
)
from bk_thermo_provider.engine.map_model import INFINITY, JuliaCloud
from bk_thermo_provider.engine.xfer import GridFunction, PreimageTree, TransferOperator


class Provenance(Enum):
    NU_S = "nu_s"
    ADJOINT_POWER = "adjoint_power"
    GIBBS = "gibbs"
    CLOUD_EIGENVECTOR = "cloud_eigenvector"


class Strategy(Enum):
    NU_S_LIMIT = "nu_s_limit"
    ADJOINT_POWER = "adjoint_power"


@dataclass
class AtomicMeasure:
    """Finite weighted sum of point masses."""

    points: np.ndarray
    weights: np.ndarray
    provenance: Provenance
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex)
        self.weights = np.asarray(self.weights, dtype=float)
        if self.points.shape != self.weights.shape:
            raise ValueError("points and weights must have the same shape")
        if (self.weights < 0).any():
            raise ValueError("Atomic weights must be nonnegative")
        keys = np.round(self.points.real, 12) + 1j * np.round(self.points.imag, 12)
        unique, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
        if unique.size != keys.size:
            self.weights = np.bincount(inverse.ravel(), weights=self.weights, minlength=unique.size)
            self.points = self.points[first]

    @property
    def size(self) -> int:
        return int(self.points.size)

    @property
    def total_mass(self) -> float:
        return float(np.sum(self.weights))

    @property
    def pressure(self) -> float | None:
        return self.metadata.get("pressure")

    def normalized(self) -> "AtomicMeasure":
        return replace(self, weights=self.weights / self.total_mass, metadata={**self.metadata, "normalized": True})

    def integrate(self, fn: Callable[[np.ndarray], np.ndarray]) -> float:
        return float(np.sum(self.weights * np.asarray(fn(self.points), dtype=float)))

    def mass_in_disk(self, center: complex, radius: float) -> float:
        return float(np.sum(self.weights[np.abs(self.points - center) <= radius]))

    def tail_mass(self, R: float) -> float:
        return float(np.sum(self.weights[np.abs(self.points) > R])) / self.total_mass


@dataclass(frozen=True)
class TestFunction:
    __test__ = False

    name: str
    fn: Callable[[np.ndarray], np.ndarray]

    def __call__(self, points):
        return self.fn(points)

    def sup(self, *point_sets) -> float:
        values = [np.abs(np.asarray(self.fn(points), dtype=float)) for points in point_sets if len(points)]
        return float(max(value.max() for value in values)) if values else 0.0


def default_test_functions(disk_radius: float = 10.0) -> list[TestFunction]:
    return [
        TestFunction("one", lambda w: np.ones(np.shape(w))),
        TestFunction("abs", lambda w: np.abs(w)),
        TestFunction("real", lambda w: np.real(w)),
        TestFunction("exp_neg_abs", lambda w: np.exp(-np.abs(w))),
        TestFunction("disk_indicator", lambda w: (np.abs(w) <= disk_radius).astype(float)),
    ]


@dataclass
class GibbsRatio:
    z: complex
    n: int
    ratio: float | None
    disk_radius: float

    @property
    def resolved(self) -> bool:
        return self.ratio is not None


@dataclass
class QuasiInvarianceReport:
    c_R: list[tuple[float, float]]
    skipped_boxes: int
    decaying: bool


@dataclass
class TightnessReport:
    """Tail masses nu_s(|w| > R) over a family of s against the bound c_t R^-r_t."""

    r_t: float
    c_t: float
    slope_tol: float
    tails: dict[float, list[tuple[float, float]]]
    slopes: dict[float, float | None]

    @property
    def holds(self) -> bool:
        return all(slope is None or slope <= -self.r_t + self.slope_tol for slope in self.slopes.values())

    def to_dict(self) -> dict[str, Any]:
        return {
            "r_t": self.r_t,
            "c_t": self.c_t,
            "slope_tol": self.slope_tol,
            "tails": {str(s): tails for s, tails in self.tails.items()},
            "slopes": {str(s): slope for s, slope in self.slopes.items()},
            "holds": self.holds,
        }


def relative_difference(a: float, b: float, floor: float) -> float:
    """|a - b| against the larger of |a| and |b|, with floor standing in for integrals near zero."""
    return abs(a - b) / max(abs(a), abs(b), floor)


def tail_mass(mu: AtomicMeasure, R: float) -> float:
    if not R > 0:
        raise ValueError(f"R must be positive, got {R}")
    return mu.tail_mass(R)


class MeasureBuilder(LoggingMixin):
    """
    Atomic approximations of the conformal measure m_t and the Gibbs state mu_t.

    All constructions share the transfer operator and the pressure estimate P_hat.
    """

    def __init__(
        self,
        operator: TransferOperator,
        P_hat: float,
        test_functions: Sequence[TestFunction] | None = None,
        eps_fractions: Sequence[float] = (0.2, 0.1, 0.05),
        max_halvings: int = 8,
        stability_tol: float = 1e-2,
        agreement_tol: float = 0.02,
        integral_floor: float = 1e-2,
        tail_closure: bool = True,
    ):
        super().__init__()
        self.operator = operator
        self.model = operator.model
        self.params = operator.params
        self.P_hat = P_hat
        self.test_functions = list(default_test_functions() if test_functions is None else test_functions)
        self.eps_fractions = tuple(eps_fractions)
        self.max_halvings = max_halvings
        self.stability_tol = stability_tol
        self.agreement_tol = agreement_tol
        self.integral_floor = integral_floor
        self.tail_closure = tail_closure
        self._trees: dict[tuple[complex, int], PreimageTree] = {}

    def _tests(self, test_functions) -> list[TestFunction]:
        tests = self.test_functions if test_functions is None else list(test_functions)
        if not tests:
            raise EmptyTestSetError("At least one test function is required")
        return tests

    def test_integrals(self, mu: AtomicMeasure, test_functions=None) -> dict[str, float]:
        normalized = mu.normalized()
        return {test.name: normalized.integrate(test) for test in self._tests(test_functions)}

    # Constructions.

    def _tree(self, w0: complex, n: int) -> PreimageTree:
        key = (complex(w0), n)
        if key not in self._trees:
            self._trees[key] = self.operator.power_one(w0, n)[1]
        return self._trees[key]

    def adjoint_delta(self, w0: complex, n: int) -> AtomicMeasure:
        """(L_t^n)* delta_w0 on the leaves of the depth-n preimage tree."""
        tree = self._tree(w0, n)
        value = tree.value
        leaves = tree.leaves
        return AtomicMeasure(
            points=leaves.points,
            weights=np.exp(leaves.log_weights),
            provenance=Provenance.ADJOINT_POWER,
            metadata={
                "w0": [complex(w0).real, complex(w0).imag],
                "n": n,
                "mass": value,
                "tail_certificate": tree.tail_certificate,
                "frozen_mass": leaves.frozen_mass,
                "relative_error": (tree.tail_certificate + leaves.frozen_mass) / value if value > 0 else float("inf"),
                "pressure": self.P_hat,
            },
        )

    def nu_s(self, w0: complex, s: float, n_max: int, series_tol: float = 1e-3) -> AtomicMeasure:
        """Probability mixture of (L_t^n)* delta_w0 with weights e^-ns, n = 1..n_max."""
        if s <= self.P_hat:
            raise PreconditionError(f"s={s} must exceed the pressure estimate {self.P_hat}")
        tree = self._tree(w0, n_max)
        q = float(np.exp(self.P_hat - s))
        points, weights = [], []
        for n in range(1, n_max + 1):
            level = tree.levels[n]
            level_weights = np.exp(level.log_weights - n * s)
            if n == n_max and self.tail_closure:
                level_weights = level_weights / (1 - q)
            points.append(level.points)
            weights.append(level_weights)
        weights_all = np.concatenate(weights)
        total = float(weights_all.sum())
        last_term = float(np.exp(-n_max * s) * tree.level_value(n_max))
        frozen_fraction = max(tree.levels[n].frozen_mass / tree.level_value(n) for n in range(1, n_max + 1))
        remainder = last_term * q / (1 - q)
        tail_fraction = remainder / (total if self.tail_closure else total + remainder)
        metadata = {
            "w0": [complex(w0).real, complex(w0).imag],
            "s": s,
            "n_max": n_max,
            "series_sum": total,
            "series_tail_fraction": tail_fraction,
            "tail_closure": self.tail_closure,
            "tail_certificate": tree.tail_certificate,
            "relative_error": (0.0 if self.tail_closure else tail_fraction) + tree.tail_certificate / tree.level_value(n_max) + frozen_fraction,
            "pressure": self.P_hat,
        }
        if tail_fraction > series_tol and not self.tail_closure:
            self.log.warning("nu_s series tail fraction %s above %s", tail_fraction, series_tol)
            metadata["series_tail_warning"] = True
        measure = AtomicMeasure(np.concatenate(points), weights_all, Provenance.NU_S, metadata)
        return measure.normalized()

    def _nu_s_limit(self, w0: complex, n_max: int) -> AtomicMeasure:
        scale = 1 + abs(self.P_hat)
        schedule = [fraction * scale for fraction in self.eps_fractions]
        previous, measure, change = None, None, float("inf")
        history = []
        k = 0
        while True:
            eps = schedule[k] if k < len(schedule) else schedule[-1] / 2 ** (k - len(schedule) + 1)
            measure = self.nu_s(w0, self.P_hat + eps, n_max)
            integrals = self.test_integrals(measure)
            if previous is not None:
                change = max(
                    relative_difference(integrals[test.name], previous[test.name], self.integral_floor)
                    for test in self.test_functions
                )
            history.append({"eps": eps, "change": change})
            previous = integrals
            k += 1
            if k >= len(schedule) and change < self.stability_tol:
                break
            if k >= len(schedule) + self.max_halvings:
                self.log.warning("nu_s limit not stable after %s steps: %s", k, history)
                break
        measure.metadata["schedule"] = history
        measure.metadata["stable"] = change < self.stability_tol
        return measure

    def _build(self, w0: complex, n_max: int, strategy: Strategy) -> AtomicMeasure:
        if strategy is Strategy.NU_S_LIMIT:
            return self._nu_s_limit(w0, n_max)
        return self.adjoint_delta(w0, n_max).normalized()

    def conformal_estimate(self, w0: complex, n_max: int, strategy: Strategy | str = Strategy.ADJOINT_POWER, cross_check: bool = True) -> AtomicMeasure:
        strategy = Strategy(strategy)
        measure = self._build(w0, n_max, strategy)
        if not cross_check:
            return measure
        other_strategy = Strategy.NU_S_LIMIT if strategy is Strategy.ADJOINT_POWER else Strategy.ADJOINT_POWER
        other = self._build(w0, n_max, other_strategy)
        first, second = self.test_integrals(measure), self.test_integrals(other)
        tolerance = self.agreement_tol + measure.metadata.get("relative_error", 0.0) + other.metadata.get("relative_error", 0.0)
        differences = {}
        for test in self.test_functions:
            differences[test.name] = relative_difference(first[test.name], second[test.name], self.integral_floor)
        measure.metadata["cross_check"] = {
            "other_strategy": other_strategy.value,
            "integrals": first,
            "other_integrals": second,
            "differences": differences,
            "tolerance": tolerance,
        }
        worst = max(differences.values())
        if worst > tolerance:
            self.log.error("Conformal constructions disagree: %s", differences)
            raise CrossConstructionFailure(
                f"Conformal measure constructions differ by {worst} (tolerance {tolerance})",
                measure,
                other,
                {"first": first, "second": second, "differences": differences},
            )
        self.log.info("Conformal constructions agree within %s (max difference %s)", tolerance, worst)
        return measure

    def tightness_check(
        self,
        w0: complex,
        n_max: int,
        s_offsets: Sequence[float] = (0.05, 0.1, 0.2),
        radii: Sequence[float] = (5.0, 10.0, 20.0, 40.0),
        slope_tol: float = 0.1,
    ) -> TightnessReport:
        """
        Check that nu_s(|w| > R) <= c_t R^-r_t uniformly for s = P_hat + offset.

        Each member's log-log tail slope must not exceed -r_t + slope_tol. c_t is the
        smallest constant covering every sampled tail. Members whose tails vanish beyond
        all but one radius carry no slope and pass.

        :raises TightnessFailure: some member decays slower than R^-r_t
        """
        r_t = self.params.tail_exponent(self.model.rho)
        tails, slopes = {}, {}
        c_t = 0.0
        for offset in s_offsets:
            s = self.P_hat + offset
            measure = self.nu_s(w0, s, n_max)
            member = [(float(R), measure.tail_mass(R)) for R in radii]
            positive = [(R, mass) for R, mass in member if mass > 0]
            slope = None
            if len(positive) >= 2:
                slope = float(linregress(np.log([R for R, _ in positive]), np.log([m for _, m in positive])).slope)
            tails[s], slopes[s] = member, slope
            c_t = max([c_t] + [mass * R**r_t for R, mass in member])
        report = TightnessReport(r_t=r_t, c_t=c_t, slope_tol=slope_tol, tails=tails, slopes=slopes)
        if not report.holds:
            self.log.error("nu_s tails decay slower than R^-%s: %s", r_t, slopes)
            raise TightnessFailure(f"nu_s tail slopes {slopes} exceed -{r_t} + {slope_tol}", report.to_dict())
        self.log.info("nu_s tails bounded by %s R^-%s, slopes %s", c_t, r_t, slopes)
        return report

    def cloud_eigenmeasure(self, cloud: JuliaCloud) -> AtomicMeasure:
        """Perron left eigenvector of the cloud transfer matrix."""
        matrix = self.operator.transfer_matrix(cloud).matrix
        if cloud.size <= 2:
            values, vectors = np.linalg.eig(matrix.toarray().T)
        else:
            values, vectors = eigs(sparse.csr_matrix(matrix.T), k=1, which="LM", v0=np.full(cloud.size, 1.0 / cloud.size))
        index = int(np.argmax(np.abs(values)))
        vector = np.abs(np.real(vectors[:, index]))
        return AtomicMeasure(
            points=cloud.points,
            weights=vector / vector.sum(),
            provenance=Provenance.CLOUD_EIGENVECTOR,
            metadata={"pressure": float(np.log(np.abs(values[index])))},
        )

    # Checks.

    def eigen_residual(
        self,
        mu: AtomicMeasure,
        test_functions=None,
        P: float | None = None,
        cloud: JuliaCloud | None = None,
    ) -> float:
        """max over test functions of |int L_t phi dmu - e^P int phi dmu| / (e^P sup |phi|)."""
        tests = self._tests(test_functions)
        P = self.P_hat if P is None else P
        mu = mu.normalized()
        worst = 0.0
        for test in tests:
            if cloud is not None:
                matrix = self.operator.transfer_matrix(cloud).matrix
                phi = np.asarray(test(cloud.points), dtype=float)
                transferred = (matrix @ phi)[cloud.nearest(mu.points)]
                sup = float(np.abs(phi).max())
            else:
                transferred, _ = self.operator.evaluate(mu.points, test.fn)
                sup = test.sup(mu.points)
            if sup == 0:
                continue
            lhs = float(np.sum(mu.weights * transferred))
            rhs = np.exp(P) * mu.integrate(test)
            worst = max(worst, abs(lhs - rhs) / (np.exp(P) * sup))
        return worst

    def gibbs_from_density(self, mt: AtomicMeasure, h: GridFunction, band_radii: Sequence[float] = (5.0, 10.0, 20.0)) -> AtomicMeasure:
        density = h.at(mt.points)
        bad = np.flatnonzero(density <= 0)
        if bad.size:
            raise NonPositiveDensityError(complex(mt.points[bad[0]]), float(density[bad[0]]))
        weights = mt.weights * density
        moduli = np.abs(mt.points)
        gap = self.params.exponent_gap(self.model.M) * self.params.t
        bands = {}
        for R in band_radii:
            inside = moduli <= R
            if inside.any():
                bands[str(R)] = [float(density[inside].min()), float(density[inside].max())]
        metadata = {
            **mt.metadata,
            "density_bands": bands,
            "density_envelope_c_t": float(np.max(density * moduli**gap)),
            "density_residual": h.diagnostics.get("residual"),
        }
        return AtomicMeasure(mt.points, weights / weights.sum(), Provenance.GIBBS, metadata)

    def _images(self, points: np.ndarray) -> np.ndarray:
        images = np.empty(points.shape, dtype=complex)
        for i, z in enumerate(points):
            image = self.model.eval(z)
            if image is INFINITY:
                pole, distance = self.model.nearest_pole(z)
                raise PoleProximityError(complex(z), pole, distance)
            images[i] = image
        return images

    def invariance_residual(self, mu: AtomicMeasure, test_functions=None) -> float:
        """max over test functions of |int phi o f dmu - int phi dmu| / sup |phi|."""
        tests = self._tests(test_functions)
        mu = mu.normalized()
        images = self._images(mu.points)
        worst = 0.0
        for test in tests:
            sup = test.sup(mu.points, images)
            if sup == 0:
                continue
            pushed = float(np.sum(mu.weights * np.asarray(test(images), dtype=float)))
            worst = max(worst, abs(pushed - mu.integrate(test)) / sup)
        return worst

    def _pull_back(self, points: np.ndarray, word: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Apply inverse branches word[0], word[1], ... and accumulate log weights."""
        log_weights = np.zeros(points.shape)
        current = points
        for k in word:
            previous = current
            current = self.model.branch_at(previous, np.full(previous.shape, k))
            log_weights = log_weights + self.model.log_branch_weights(current, previous, self.params)
        return current, log_weights

    def gibbs_ratio(
        self,
        mu: AtomicMeasure,
        z_samples: Sequence[complex],
        n_range: Sequence[int],
        P: float | None = None,
        R_t: float = 50.0,
    ) -> list[GibbsRatio]:
        """
        mu(D(z, delta/4 |(f^n)'(z)|^-1)) / exp(S_n Phi_t(z) - nP).

        The disk mass is the total weight of the atoms of mu inside the disk. Disks without
        atoms stay unresolved, so samples should be mu-typical points such as heavy atoms.
        """
        n_range = list(n_range)
        if not n_range:
            return []
        P = self.P_hat if P is None else P
        mu = mu.normalized()
        n_top = max(n_range)
        delta = self.model.delta
        ratios = []
        for z in z_samples:
            z = complex(z)
            try:
                orbit = self.model.forward_orbit(z, n_top)
            except OrbitEscapeError:
                self.log.info("Skipping %s, its orbit meets a pole", z)
                continue
            if max(abs(point) for point in orbit) > R_t:
                self.log.info("Skipping %s, its orbit leaves D(0, %s)", z, R_t)
                continue
            for n in n_range:
                log_derivative, _ = self.model.orbit_log_derivative(z, n)
                radius = delta / 4 * float(np.exp(-log_derivative))
                mass = mu.mass_in_disk(z, radius)
                if mass <= 0:
                    ratios.append(GibbsRatio(z, n, None, radius))
                    continue
                reference = float(np.exp(self.model.ergodic_sum(z, n, self.params) - n * P))
                ratios.append(GibbsRatio(z, n, mass / reference, radius))
        unresolved = sum(1 for ratio in ratios if not ratio.resolved)
        if unresolved:
            self.log.warning("%s Gibbs disks contain no atoms", unresolved)
        return ratios

    @staticmethod
    def heaviest_atoms(mu: AtomicMeasure, count: int) -> list[complex]:
        """The count heaviest atoms of mu, heaviest first, ties broken by position."""
        order = np.lexsort((mu.points.imag, mu.points.real, -mu.weights))
        return [complex(point) for point in mu.points[order[:count]]]

    def quasi_invariance_check(self, mu: AtomicMeasure, radii: Sequence[float] = (5.0, 10.0, 20.0), box_width: float = 1.0) -> QuasiInvarianceReport:
        """Empirical c_R = max over boxes B beyond R of m(f^-1(B)) / m(B)."""
        mu = mu.normalized()
        transferred, _ = self.operator.evaluate(mu.points)
        pulled = np.exp(-self.P_hat) * mu.weights * transferred
        skipped = 0
        results = []
        for R in radii:
            outside = np.abs(mu.points) > R
            if not outside.any():
                results.append((float(R), 0.0))
                continue
            cells = np.floor(mu.points[outside].real / box_width) + 1j * np.floor(mu.points[outside].imag / box_width)
            _, box_index = np.unique(cells, return_inverse=True)
            box_index = box_index.ravel()
            box_mass = np.bincount(box_index, weights=mu.weights[outside])
            box_pulled = np.bincount(box_index, weights=pulled[outside])
            positive = box_mass > 0
            skipped += int((~positive).sum())
            c_R = float((box_pulled[positive] / box_mass[positive]).max()) if positive.any() else 0.0
            results.append((float(R), c_R))
        if skipped:
            self.log.info("Skipped %s boxes with zero mass", skipped)
        values = [c for _, c in results]
        decaying = all(later <= earlier for earlier, later in zip(values, values[1:]))
        return QuasiInvarianceReport(c_R=results, skipped_boxes=skipped, decaying=decaying)

    def escaping_mass(self, mu: AtomicMeasure, R: float, n_max: int) -> list[tuple[int, float]]:
        """Mass of atoms whose orbit stays outside D(0, R) for the first n steps, n = 0..n_max."""
        mu = mu.normalized()
        current = mu.points.copy()
        alive = np.abs(current) > R
        masses = [(0, float(mu.weights[alive].sum()))]
        for n in range(1, n_max + 1):
            with np.errstate(all="ignore"):
                current = self.model._evaluate(current)
            finite = np.isfinite(current)
            alive &= ~finite | (np.abs(np.where(finite, current, 0)) > R)
            masses.append((n, float(mu.weights[alive].sum())))
        return masses

    def conformality_check(self, mu: AtomicMeasure, center: complex, radius: float, word: Sequence[int]) -> dict[str, Any]:
        """Atomic mass of f_z^-n(B) against e^-nP int_B exp(S_n Phi_t(f_z^-n w)) dm(w) for B = D(center, radius)."""
        mu = mu.normalized()
        n = len(word)
        in_box = np.abs(mu.points - center) <= radius
        _, log_weights = self._pull_back(mu.points[in_box], list(word))
        weighted = float(np.exp(-n * self.P_hat) * np.sum(mu.weights[in_box] * np.exp(log_weights)))

        images = mu.points.copy()
        matches = np.ones(mu.size, dtype=bool)
        for step in range(n):
            expected = word[n - 1 - step]
            with np.errstate(all="ignore"):
                next_images = self.model._evaluate(images)
            finite = np.isfinite(next_images)
            candidates = np.flatnonzero(matches & finite)
            indices = np.asarray([self.model.branch_index_of(images[i]) for i in candidates], dtype=np.int64)
            matches[:] = False
            matches[candidates[indices == expected]] = True
            images = np.where(finite, next_images, 0)
        atomic = float(mu.weights[matches & (np.abs(images - center) <= radius)].sum())
        scale = max(atomic, weighted, 1e-300)
        return {"atomic": atomic, "weighted": weighted, "relative_error": abs(atomic - weighted) / scale}
