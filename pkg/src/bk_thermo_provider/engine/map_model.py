from __future__ import annotations

import dataclasses
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Sequence

import numpy as np
from scipy.optimize import brentq, newton
from scipy.spatial import cKDTree
from scipy.spatial.distance import cdist
from scipy.special import zeta

from airflow.utils.log.logging_mixin import LoggingMixin
from bk_thermo_provider.engine.exceptions import (
    BranchUndefinedError,
    DomainError,
    OmittedValueError,
    OrbitEscapeError,
    PoleProximityError,
    SamplingError,
    SeedPolishError,
    TruncationFailure,
)
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy

# multiples of eps times |z f'(z)| accepted as rounding error in preimage residuals
ROUNDING_SLACK = 16.0


class _Infinity:
    """The point at infinity of the Riemann sphere."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "INFINITY"

    def __reduce__(self):
        return (_Infinity, ())


INFINITY = _Infinity()


def is_infinity(value: Any) -> bool:
    return value is INFINITY


@dataclass(frozen=True)
class PreimageBranch:
    branch_index: int
    z: complex
    fprime: complex
    metric_weight: float


@dataclass
class BKMapDescriptor(ABC):
    """
    A BK-class meromorphic map with indexed inverse branches.

    Subclasses supply the closed-form pieces (evaluation, branches, poles, branch tails).
    Everything that only combines those pieces lives here and is shared by all models.
    """

    name: str
    params: dict
    M: int
    rho: float
    R0: float
    T_floor: float
    delta: float
    sing_radius: float
    preimage_tol: float = 1e-10
    pole_guard: float = 1e-8

    def __post_init__(self):
        errors = []
        if self.M < 1:
            errors.append(f"M must be >= 1, got {self.M}")
        if not 0 <= self.rho < np.inf:
            errors.append(f"rho must be finite and >= 0, got {self.rho}")
        if not self.R0 > 1:
            errors.append(f"R0 must be > 1, got {self.R0}")
        if not self.T_floor > 0:
            errors.append(f"T_floor must be > 0, got {self.T_floor}")
        if not self.delta > 0:
            errors.append(f"delta must be > 0, got {self.delta}")
        if errors:
            raise ValueError("Invalid map descriptor - " + "; ".join(errors))

    # Closed-form pieces, all vectorized over numpy arrays.

    @abstractmethod
    def _evaluate(self, z: np.ndarray) -> np.ndarray: ...

    @abstractmethod
    def _derivative(self, z: np.ndarray) -> np.ndarray: ...

    def derivative_from_value(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        """f'(z) for points with f(z) = w. Models with an identity in terms of w override this."""
        return self._derivative(z)

    @abstractmethod
    def branch_indices(self, K: int) -> list[int]:
        """Branch indices with |k| <= K ordered by |k| then sign."""

    def has_branch(self, k: int) -> bool:
        return True

    @abstractmethod
    def branch_at(self, w: np.ndarray, k: np.ndarray) -> np.ndarray:
        """Elementwise inverse branch k evaluated at w."""

    @abstractmethod
    def branch_index_of(self, z: complex) -> int:
        """Index k with branch_at(f(z), k) == z."""

    @abstractmethod
    def pole_locations(self, R: float) -> list[tuple[complex, int]]: ...

    @abstractmethod
    def nearest_pole(self, z: complex) -> tuple[complex, float]: ...

    @property
    @abstractmethod
    def omitted_values(self) -> tuple[complex, ...]: ...

    @property
    @abstractmethod
    def singular_values(self) -> tuple[complex, ...]: ...

    @abstractmethod
    def modulus_tail(self, w: np.ndarray, u: float, K: np.ndarray | int) -> np.ndarray:
        """Upper bound of sum over |k| > K of |z_k|^-u for the preimages z_k of w."""

    @abstractmethod
    def weight_tail(self, w: np.ndarray, K: np.ndarray | int, p: PotentialParams) -> np.ndarray:
        """Upper bound of the metric weights of all branches with |k| > K."""

    @abstractmethod
    def relevant_branch_limit(self, w: np.ndarray, budget: np.ndarray | float, p: PotentialParams) -> np.ndarray:
        """Smallest K such that every branch with |k| > K weighs less than budget."""

    @abstractmethod
    def norm_bound(self, p: PotentialParams) -> float:
        """Upper bound of L_t 1 over the Julia set."""

    def real_bracket(self, x: float) -> tuple[float, float] | None:
        """Pole-free real interval around x, used as the seed polishing fallback."""
        return None

    # Pointwise map calculus.

    def eval(self, z: complex) -> complex | _Infinity:
        z = complex(z)
        _, distance = self.nearest_pole(z)
        if distance < self.pole_guard:
            return INFINITY
        with np.errstate(all="ignore"):
            value = complex(self._evaluate(np.asarray(z)))
        if not np.isfinite(value):
            return INFINITY
        return value

    def deriv(self, z: complex) -> complex:
        z = complex(z)
        pole, distance = self.nearest_pole(z)
        if distance < self.pole_guard:
            raise PoleProximityError(z, pole, distance)
        with np.errstate(all="ignore"):
            value = complex(self._derivative(np.asarray(z)))
        if not np.isfinite(value):
            raise PoleProximityError(z, pole, distance)
        return value

    def _image(self, z: complex) -> complex:
        fz = self.eval(z)
        if fz is INFINITY:
            pole, distance = self.nearest_pole(z)
            raise PoleProximityError(z, pole, distance)
        return fz

    def metric_deriv(self, z: complex, p: PotentialParams) -> float:
        """|f'(z)|_tau = |f'(z)| |z|^tau / |f(z)|^tau."""
        z = complex(z)
        if z == 0:
            raise DomainError("Metric derivative is undefined at z = 0")
        fz = self._image(z)
        if fz == 0:
            raise DomainError(f"Metric derivative is undefined where f(z) = 0 (z={z})")
        return abs(self.deriv(z)) * abs(z) ** p.tau / abs(fz) ** p.tau

    def metric_norm_exact(self, z: complex, p: PotentialParams) -> float:
        """Derivative in the metric |dz| / (1 + |z|^tau) before simplification."""
        z = complex(z)
        fz = self._image(z)
        return abs(self.deriv(z)) * (1 + abs(z) ** p.tau) / (1 + abs(fz) ** p.tau)

    def metric_distortion_constant(self, p: PotentialParams) -> float:
        """K_{T,tau} = 1 + T^-tau bounding the exact norm against the simplified one."""
        return 1.0 + self.T_floor ** (-p.tau)

    def potential(self, z: complex, p: PotentialParams) -> float:
        return -p.t * float(np.log(self.metric_deriv(z, p)))

    def log_branch_weights(self, z: np.ndarray, w: np.ndarray, p: PotentialParams) -> np.ndarray:
        """log of |f'(z)|_tau^-t for branch points z over w, -inf where the weight vanishes."""
        z = np.asarray(z, dtype=complex)
        w = np.asarray(w, dtype=complex)
        fp = self.derivative_from_value(z, w)
        with np.errstate(divide="ignore", invalid="ignore"):
            log_w = -p.t * (np.log(np.abs(fp)) + p.tau * np.log(np.abs(z)) - p.tau * np.log(np.abs(w)))
        return np.where(np.isnan(log_w), -np.inf, log_w)

    def check_query(self, w: complex) -> None:
        for value in self.omitted_values:
            if abs(w - value) <= self.pole_guard * max(1.0, abs(value)):
                raise OmittedValueError(w, value)

    # Preimage enumeration.

    def preimage_allowance(self, z: np.ndarray, w: np.ndarray) -> np.ndarray:
        """
        Largest accepted residual |f(z) - w| for computed preimages z of w.

        preimage_tol relative to w, plus the rounding floor of evaluating f at z,
        which grows with |z f'(z)| and not with |z| alone.
        """
        with np.errstate(all="ignore"):
            conditioning = np.abs(z) * np.abs(self.derivative_from_value(z, w))
        rounding = ROUNDING_SLACK * np.finfo(float).eps * np.nan_to_num(conditioning, nan=0.0, posinf=0.0)
        return self.preimage_tol * np.maximum(1.0, np.abs(w)) + rounding

    def _head_sum(self, w: complex, K: int, p: PotentialParams) -> float:
        ks = np.asarray(self.branch_indices(K))
        zs = self.branch_at(np.full(ks.shape, w, dtype=complex), ks)
        return float(np.sum(np.exp(self.log_branch_weights(zs, np.full(ks.shape, w), p))))

    def _tail_ok(self, w: complex, K: int, p: PotentialParams, tail_tol: float) -> bool:
        tail = float(self.weight_tail(np.asarray([w]), K, p)[0])
        return tail <= tail_tol * self._head_sum(w, K, p)

    def required_branch_range(self, w: complex, trunc: TruncationPolicy, p: PotentialParams) -> int:
        """Smallest K >= trunc.K whose certified branch tail is below tail_tol times the head sum."""
        if self._tail_ok(w, trunc.K, p, trunc.tail_tol):
            return trunc.K
        low, high = trunc.K, trunc.K
        while True:
            high = min(max(2 * high, 1), trunc.K_max)
            if self._tail_ok(w, high, p, trunc.tail_tol):
                break
            if high == trunc.K_max:
                tail = float(self.weight_tail(np.asarray([w]), trunc.K_max, p)[0])
                raise TruncationFailure(tail, trunc.K_max, w)
            low = high
        while high - low > 1:
            mid = (low + high) // 2
            if self._tail_ok(w, mid, p, trunc.tail_tol):
                high = mid
            else:
                low = mid
        return high

    def branch_range_for_radius(self, w: complex, R: float, K_cap: int) -> int:
        """Smallest K <= K_cap whose branches with |k| = K both land outside D(0, R)."""
        w = complex(w)

        def outside(K: int) -> bool:
            ks = np.asarray([k for k in {K, -K} if self.has_branch(k)], dtype=np.int64)
            if ks.size == 0:
                return True
            return bool((np.abs(self.branch_at(np.full(ks.shape, w), ks)) > R).all())

        low, high = 0, 1
        while not outside(high):
            if high >= K_cap:
                return K_cap
            low, high = high, min(2 * high, K_cap)
        while high - low > 1:
            mid = (low + high) // 2
            if outside(mid):
                high = mid
            else:
                low = mid
        return high

    def preimages(self, w: complex, trunc: TruncationPolicy, p: PotentialParams) -> list[PreimageBranch]:
        w = complex(w)
        if not np.isfinite(w):
            raise DomainError(f"Query point must be finite, got {w}")
        self.check_query(w)
        K = self.required_branch_range(w, trunc, p)
        ks = np.asarray(self.branch_indices(K))
        ws = np.full(ks.shape, w, dtype=complex)
        zs = self.branch_at(ws, ks)
        with np.errstate(all="ignore"):
            residual = np.abs(self._evaluate(zs) - w)
        allowed = self.preimage_allowance(zs, ws)
        bad = ~(residual <= allowed)
        if bad.any():
            raise BranchUndefinedError(depth=1, w=w)
        weights = np.exp(self.log_branch_weights(zs, ws, p))
        fprimes = self.derivative_from_value(zs, ws)
        order = np.argsort(np.abs(zs), kind="stable")
        return [
            PreimageBranch(
                branch_index=int(ks[i]),
                z=complex(zs[i]),
                fprime=complex(fprimes[i]),
                metric_weight=float(weights[i]),
            )
            for i in order
        ]

    # Orbits.

    def pullback_orbit(self, w: complex, word: Sequence[int], p: PotentialParams | None = None) -> list[complex]:
        orbit = []
        current = complex(w)
        for depth, k in enumerate(word, start=1):
            if not self.has_branch(int(k)):
                raise BranchUndefinedError(depth=depth, w=current)
            try:
                self.check_query(current)
            except OmittedValueError as err:
                raise BranchUndefinedError(depth=depth, w=current, cause=err) from err
            with np.errstate(all="ignore"):
                z = complex(self.branch_at(np.asarray([current]), np.asarray([int(k)]))[0])
            if not np.isfinite(z):
                raise BranchUndefinedError(depth=depth, w=current)
            orbit.append(z)
            current = z
        return orbit

    def forward_orbit(self, z: complex, n: int) -> list[complex]:
        """[z, f(z), ..., f^n(z)]."""
        orbit = [complex(z)]
        for depth in range(1, n + 1):
            image = self.eval(orbit[-1])
            if image is INFINITY:
                raise OrbitEscapeError(depth, orbit[-1])
            orbit.append(image)
        return orbit

    def ergodic_sum(self, z: complex, n: int, p: PotentialParams) -> float:
        total = 0.0
        current = complex(z)
        for depth in range(n):
            try:
                total += self.potential(current, p)
                current = self._image(current)
            except (DomainError, PoleProximityError) as err:
                raise OrbitEscapeError(depth, current) from err
        return total

    def orbit_log_derivative(self, z: complex, n: int) -> tuple[float, complex]:
        """(log |(f^n)'(z)|, f^n(z)) by the chain rule."""
        log_derivative = 0.0
        current = complex(z)
        for depth in range(n):
            try:
                log_derivative += float(np.log(abs(self.deriv(current))))
                current = self._image(current)
            except PoleProximityError as err:
                raise OrbitEscapeError(depth, current) from err
        return log_derivative, current

    def ergodic_sum_telescoped(self, z: complex, n: int, p: PotentialParams) -> float:
        """-t log(|(f^n)'(z)| |z|^tau / |f^n(z)|^tau)."""
        log_derivative, image = self.orbit_log_derivative(z, n)
        if z == 0 or image == 0:
            raise OrbitEscapeError(n, image)
        return -p.t * (log_derivative + p.tau * np.log(abs(z)) - p.tau * np.log(abs(image)))

    def poles(self, R: float) -> list[tuple[complex, int]]:
        if not R > 0:
            raise ValueError(f"Radius must be positive, got {R}")
        return self.pole_locations(R)

    # Calibration against a sampled cloud.

    def post_singular_orbit(self, steps: int = 64) -> np.ndarray:
        points = []
        for value in self.singular_values:
            current: Any = complex(value)
            for _ in range(steps + 1):
                if current is INFINITY:
                    break
                points.append(current)
                current = self.eval(current)
        return np.asarray(points, dtype=complex)

    def estimate_delta(self, cloud: "JuliaCloud", steps: int = 64) -> float:
        orbit = self.post_singular_orbit(steps)
        if orbit.size == 0:
            return self.delta
        distances = cdist(_as_plane(cloud.points), _as_plane(orbit))
        return float(distances.min()) / 4.0

    def calibrated(self, cloud: "JuliaCloud") -> "BKMapDescriptor":
        return dataclasses.replace(self, delta=self.estimate_delta(cloud))


@dataclass
class TangentMap(BKMapDescriptor):
    """f(z) = lambda tan z, with lambda stored in params["lambda"]."""

    @classmethod
    def from_parameter(cls, lam: float = 0.5, **overrides) -> "TangentMap":
        x0 = cls.positive_fixed_point(lam)
        T_floor = x0 * (1 - 1e-6) if x0 is not None else 1e-3
        values = {
            "name": "tangent",
            "params": {"lambda": lam},
            "M": 1,
            "rho": 1.0,
            "R0": max(2.0, 4.0 * lam),
            "T_floor": T_floor,
            # post-singular orbit of +-lambda i tends to 0 along the imaginary axis
            "delta": T_floor / 4.0,
            "sing_radius": lam,
        }
        values.update(overrides)
        return cls(**values)

    @staticmethod
    def positive_fixed_point(lam: float) -> float | None:
        """Root of lambda tan x = x on (0, pi/2), the smallest positive Julia point when lambda < 1."""
        if not 0 < lam < 1:
            return None
        return brentq(lambda x: lam * np.tan(x) - x, 1e-9, np.pi / 2 - 1e-12, xtol=1e-15)

    @property
    def lam(self) -> float:
        return float(self.params["lambda"])

    def _evaluate(self, z):
        return self.lam * np.tan(z)

    def _derivative(self, z):
        tan = np.tan(z)
        return self.lam * (1 + tan * tan)

    def derivative_from_value(self, z, w):
        w = np.asarray(w, dtype=complex)
        return self.lam + w * w / self.lam

    def branch_indices(self, K: int) -> list[int]:
        indices = [0]
        for k in range(1, int(K) + 1):
            indices.extend((k, -k))
        return indices

    def branch_at(self, w, k):
        return np.arctan(np.asarray(w, dtype=complex) / self.lam) + np.asarray(k) * np.pi

    def branch_index_of(self, z: complex) -> int:
        w = self._image(z)
        principal = complex(np.arctan(w / self.lam))
        return int(np.rint((complex(z) - principal).real / np.pi))

    def pole_locations(self, R: float) -> list[tuple[complex, int]]:
        k_max = int(np.floor(R / np.pi + 0.5)) + 1
        poles = [complex(np.pi / 2 + k * np.pi) for k in range(-k_max - 1, k_max + 1)]
        poles = [pole for pole in poles if abs(pole) <= R]
        return [(pole, 1) for pole in sorted(poles, key=lambda a: (abs(a), a.real))]

    def nearest_pole(self, z: complex) -> tuple[complex, float]:
        z = complex(z)
        k = np.rint((z.real - np.pi / 2) / np.pi)
        pole = complex(np.pi / 2 + k * np.pi)
        return pole, abs(z - pole)

    @property
    def omitted_values(self) -> tuple[complex, ...]:
        return (complex(0, self.lam), complex(0, -self.lam))

    @property
    def singular_values(self) -> tuple[complex, ...]:
        return self.omitted_values

    def modulus_tail(self, w, u, K):
        # |z_k| >= (|k| - 1/2) pi for every branch
        K = np.asarray(K, dtype=float)
        shape = np.broadcast(np.asarray(w), K).shape
        if u <= 1:
            return np.full(shape, np.inf)
        return np.broadcast_to(2 * np.pi ** (-u) * zeta(u, K + 0.5), shape).astype(float)

    def _weight_prefactor(self, w, p: PotentialParams) -> np.ndarray:
        """A(w) with weight_k = A(w) |z_k|^(-tau t)."""
        w = np.asarray(w, dtype=complex)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.abs(self.lam + w * w / self.lam) ** (-p.t) * np.abs(w) ** (p.tau * p.t)

    def weight_tail(self, w, K, p):
        return self._weight_prefactor(w, p) * self.modulus_tail(w, p.tau * p.t, K)

    def relevant_branch_limit(self, w, budget, p):
        prefactor = self._weight_prefactor(w, p)
        budget = np.asarray(budget, dtype=float)
        with np.errstate(divide="ignore", invalid="ignore"):
            radius = (prefactor / budget) ** (1.0 / (p.tau * p.t)) / np.pi
        limit = np.floor(0.5 + np.nan_to_num(radius, nan=0.0, posinf=1e12))
        return np.minimum(limit, 1e12).astype(np.int64)

    def norm_bound(self, p: PotentialParams) -> float:
        # Julia set is real with |x| >= T_floor; x^tau / (lambda + x^2 / lambda) peaks at x_peak
        s = p.tau * p.t
        x_peak = self.lam * np.sqrt(p.tau / (2 - p.tau)) if p.tau < 2 else np.inf
        x = max(self.T_floor, x_peak)
        prefactor = float(self._weight_prefactor(np.asarray(x), p))
        a_T = np.arctan(self.T_floor / self.lam)
        return prefactor * np.pi ** (-s) * float(zeta(s, a_T / np.pi) + zeta(s, 0.5))

    def real_bracket(self, x: float) -> tuple[float, float]:
        k = np.floor((x - np.pi / 2) / np.pi)
        left = np.pi / 2 + k * np.pi
        return float(left + 1e-9), float(left + np.pi - 1e-9)


def _as_plane(points: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=complex)
    return np.column_stack([points.real, points.imag])


@dataclass
class JuliaCloud:
    """Finite backward-orbit sample of the Julia set."""

    points: np.ndarray
    depths: np.ndarray
    seed: complex
    parents: np.ndarray | None = None
    min_modulus: float = field(init=False)
    pairwise_resolution: float = field(init=False)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex)
        self.depths = np.asarray(self.depths, dtype=int)
        if self.points.size == 0:
            raise ValueError("A Julia cloud needs at least one point")
        if self.depths.shape != self.points.shape:
            raise ValueError("depths must match points")
        self.min_modulus = float(np.abs(self.points).min())
        if self.points.size == 1:
            self.pairwise_resolution = float("inf")
        else:
            distances, _ = self.tree.query(_as_plane(self.points), k=2)
            self.pairwise_resolution = float(distances[:, 1].max())

    @classmethod
    def from_points(cls, points, depths=None, seed: complex | None = None) -> "JuliaCloud":
        points = np.asarray(points, dtype=complex)
        if depths is None:
            depths = np.zeros(points.shape, dtype=int)
        return cls(points=points, depths=depths, seed=complex(points[0] if seed is None else seed))

    @property
    def size(self) -> int:
        return int(self.points.size)

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(_as_plane(self.points))

    def nearest(self, points) -> np.ndarray:
        """Index of the nearest cloud point for each query point."""
        _, index = self.tree.query(_as_plane(np.atleast_1d(points)))
        return np.asarray(index, dtype=np.int64)

    def neighbour_pairs(self, radius: float) -> np.ndarray:
        return self.tree.query_pairs(radius, output_type="ndarray")


class JuliaSampler(LoggingMixin):
    """Backward-orbit sampler rooted at a repelling fixed point."""

    def __init__(self, model: BKMapDescriptor, max_iterations: int = 100):
        super().__init__()
        self.model = model
        self.max_iterations = max_iterations

    def _is_fixed(self, root) -> bool:
        image = self.model.eval(root)
        return image is not INFINITY and abs(image - root) <= 1e-9 * max(1.0, abs(root))

    def polish_seed(self, seed_hint: complex) -> complex:
        model = self.model
        hint = complex(seed_hint)
        x0 = hint.real if hint.imag == 0 else hint

        def residual(z):
            return model._evaluate(z) - z

        def slope(z):
            return model._derivative(z) - 1

        root = None
        try:
            candidate = newton(residual, x0, fprime=slope, tol=1e-14, maxiter=self.max_iterations)
            if self._is_fixed(candidate) and abs(candidate - hint) < np.pi / 2:
                root = candidate
        except (RuntimeError, OverflowError, ZeroDivisionError) as err:
            self.log.info("Newton polishing from %s failed (%s), trying bracketed search", hint, err)

        if root is None and hint.imag == 0:
            bracket = model.real_bracket(hint.real)
            if bracket is not None:
                try:
                    root = brentq(residual, *bracket, xtol=1e-15, maxiter=self.max_iterations)
                except (ValueError, RuntimeError) as err:
                    self.log.error("Bracketed polishing on %s failed: %s", bracket, err)

        if root is None or not self._is_fixed(root):
            raise SeedPolishError(f"Could not polish seed hint {seed_hint} to a fixed point")
        root = complex(root)
        multiplier = abs(model.deriv(root))
        if multiplier <= 1:
            raise SeedPolishError(f"Fixed point {root} is not repelling (|f'| = {multiplier})")
        self.log.info("Polished seed %s to fixed point %s with multiplier %s", seed_hint, root, multiplier)
        return root

    def sample(
        self,
        seed_hint: complex,
        depth: int,
        budget: int,
        rng_seed: int,
        spread: int = 6,
    ) -> JuliaCloud:
        if budget < 1:
            raise ValueError(f"budget must be >= 1, got {budget}")
        model = self.model
        rng = np.random.default_rng(rng_seed)
        seed = self.polish_seed(seed_hint)
        points = [seed]
        depths = [0]
        parents = [-1]
        seen = {_point_key(seed)}
        frontier = np.asarray([0])
        ks = np.asarray(model.branch_indices(spread))

        for level in range(1, depth + 1):
            remaining = budget - len(points)
            if remaining <= 0 or frontier.size == 0:
                break
            roots = np.asarray(points, dtype=complex)[frontier]
            for root in roots:
                model.check_query(root)
            ws = np.repeat(roots, ks.size)
            zs = model.branch_at(ws, np.tile(ks, roots.size))
            parent_index = np.repeat(frontier, ks.size)
            keep = []
            for i, z in enumerate(zs):
                key = _point_key(z)
                if np.isfinite(z) and key not in seen:
                    seen.add(key)
                    keep.append(i)
            if len(keep) > remaining:
                chosen = np.sort(rng.choice(len(keep), size=remaining, replace=False))
                keep = [keep[i] for i in chosen]
            start = len(points)
            for i in keep:
                z = complex(zs[i])
                points.append(complex(z.real, 0.0) if abs(z.imag) < 1e-15 else z)
                depths.append(level)
                parents.append(int(parent_index[i]))
            frontier = np.arange(start, len(points))
            self.log.info("Julia sampling level %s added %s points", level, len(keep))

        cloud = JuliaCloud(points=np.asarray(points), depths=np.asarray(depths), seed=seed, parents=np.asarray(parents))
        if cloud.min_modulus < model.T_floor:
            raise SamplingError(
                f"Sampled point with modulus {cloud.min_modulus} below T_floor {model.T_floor}"
            )
        self.log.info(
            "Sampled %s Julia points, min modulus %s, resolution %s",
            cloud.size,
            cloud.min_modulus,
            cloud.pairwise_resolution,
        )
        return cloud


def _point_key(z: complex) -> tuple[float, float]:
    z = complex(z)
    return round(z.real, 9) + 0.0, round(z.imag, 9) + 0.0


def sample_julia(model: BKMapDescriptor, seed_hint: complex, depth: int, budget: int, rng_seed: int, spread: int = 6) -> JuliaCloud:
    return JuliaSampler(model).sample(seed_hint, depth, budget, rng_seed, spread=spread)
