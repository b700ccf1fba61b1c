from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Any, Callable, Sequence

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.sparse.linalg import eigs

from airflow.utils.log.logging_mixin import LoggingMixin
from bk_thermo_provider.engine.exceptions import (
    BranchUndefinedError,
    OmittedValueError,
    PreconditionError,
    ResolutionError,
    TreeBudgetExceeded,
)
from bk_thermo_provider.engine.map_model import BKMapDescriptor, JuliaCloud
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy

CHUNK_SIZE = 20_000


@dataclass
class GridFunction:
    """A real function sampled on the points of a Julia cloud."""

    cloud: JuliaCloud
    values: np.ndarray
    nonnegative: bool = False
    error_estimate: float = 0.0
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.cloud.size,):
            raise ValueError(f"Expected {self.cloud.size} values, got shape {self.values.shape}")
        if self.nonnegative and (self.values < 0).any():
            raise ValueError("Values flagged nonnegative contain negative entries")

    @cached_property
    def sup_norm(self) -> float:
        return float(np.abs(self.values).max())

    @classmethod
    def constant(cls, cloud: JuliaCloud, value: float = 1.0) -> "GridFunction":
        return cls(cloud=cloud, values=np.full(cloud.size, float(value)), nonnegative=value >= 0)

    @classmethod
    def from_callable(cls, cloud: JuliaCloud, fn: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        values = np.asarray(fn(cloud.points), dtype=float)
        return cls(cloud=cloud, values=values, nonnegative=bool((values >= 0).all()))

    def at(self, points) -> np.ndarray:
        """Nearest-cloud-point evaluation."""
        return self.values[self.cloud.nearest(points)]

    def lipschitz_constant(self, radius: float) -> float:
        pairs = self.cloud.neighbour_pairs(radius)
        if len(pairs) == 0:
            return 0.0
        points = self.cloud.points
        gaps = np.abs(points[pairs[:, 0]] - points[pairs[:, 1]])
        jumps = np.abs(self.values[pairs[:, 0]] - self.values[pairs[:, 1]])
        mask = gaps > 0
        return float((jumps[mask] / gaps[mask]).max()) if mask.any() else 0.0


@dataclass
class TreeLevel:
    points: np.ndarray
    log_weights: np.ndarray
    parents: np.ndarray
    branches: np.ndarray
    # children under the relative threshold, counted in the mass but never expanded
    frozen_mass: float = 0.0

    @property
    def size(self) -> int:
        return int(self.points.size)

    @property
    def mass(self) -> float:
        return float(np.sum(np.exp(self.log_weights))) + self.frozen_mass


@dataclass
class PreimageTree:
    """Truncated tree of iterated preimages of a root point with cumulative weights exp(S_k Phi_t)."""

    root: complex
    levels: list[TreeLevel]
    level_omissions: list[float]
    norm_bound: float

    @property
    def depth(self) -> int:
        return len(self.levels) - 1

    def certificate(self, level: int) -> float:
        """Bound of the mass missing from the given level because of truncation at earlier levels."""
        return float(
            sum(omitted * self.norm_bound ** (level - j) for j, omitted in enumerate(self.level_omissions[:level], start=1))
        )

    @property
    def tail_certificate(self) -> float:
        return self.certificate(self.depth)

    def level_value(self, level: int) -> float:
        return self.levels[level].mass

    @property
    def value(self) -> float:
        return self.level_value(self.depth)

    @property
    def leaves(self) -> TreeLevel:
        return self.levels[-1]

    @property
    def node_count(self) -> int:
        return sum(level.size for level in self.levels)

    def word(self, index: int, level: int | None = None) -> list[int]:
        """Branch word from the root down to the node at (level, index)."""
        level = self.depth if level is None else level
        word = []
        while level > 0:
            node = self.levels[level]
            word.append(int(node.branches[index]))
            index = int(node.parents[index])
            level -= 1
        return word[::-1]

    def summary(self) -> dict[str, Any]:
        return {
            "root": [self.root.real, self.root.imag],
            "depth": self.depth,
            "node_counts": [level.size for level in self.levels],
            "value": self.value,
            "level_values": [self.level_value(j) for j in range(self.depth + 1)],
            "tail_certificate": self.tail_certificate,
        }


@dataclass
class TransferMatrix:
    """Cloud discretization of L_t: row i holds the branch weights over cloud point i."""

    matrix: sparse.csr_matrix
    row_tails: np.ndarray
    row_displacements: np.ndarray
    branch_ranges: np.ndarray


@dataclass(frozen=True)
class TailConstants:
    c: float
    borel_sum: float
    borel_tail: float
    alpha: float


class TransferOperator(LoggingMixin):
    """The geometric-potential transfer operator of a BK-class map."""

    def __init__(
        self,
        model: BKMapDescriptor,
        params: PotentialParams,
        truncation: TruncationPolicy | None = None,
        n_jobs: int = 1,
        potential_shift: float = 0.0,
    ):
        super().__init__()
        self.model = model
        self.params = params.validate(model.M, model.rho)
        self.truncation = truncation or TruncationPolicy()
        self.n_jobs = n_jobs
        self.potential_shift = potential_shift
        self._matrices: dict[int, tuple[JuliaCloud, TransferMatrix]] = {}

    @cached_property
    def norm_bound(self) -> float:
        return self.model.norm_bound(self.params) * np.exp(-self.potential_shift)

    def shifted(self, potential_shift: float) -> "TransferOperator":
        return TransferOperator(self.model, self.params, self.truncation, self.n_jobs, potential_shift)

    def with_truncation(self, truncation: TruncationPolicy) -> "TransferOperator":
        return TransferOperator(self.model, self.params, truncation, self.n_jobs, self.potential_shift)

    # Cloud path.

    def _matrix_rows(self, cloud: JuliaCloud, rows: np.ndarray):
        cols, data, tails, displacements, ranges = [], [], [], [], []
        counts = []
        for i in rows:
            w = complex(cloud.points[i])
            branches = self.model.preimages(w, self.truncation, self.params)
            zs = np.asarray([branch.z for branch in branches])
            weights = np.asarray([branch.metric_weight for branch in branches]) * np.exp(-self.potential_shift)
            nearest = cloud.nearest(zs)
            K_eff = max(abs(branch.branch_index) for branch in branches)
            cols.append(nearest)
            data.append(weights)
            counts.append(len(branches))
            tails.append(float(self.model.weight_tail(np.asarray([w]), K_eff, self.params)[0]) * np.exp(-self.potential_shift))
            displacements.append(float(np.sum(weights * np.abs(zs - cloud.points[nearest]))))
            ranges.append(K_eff)
        return counts, cols, data, tails, displacements, ranges

    def transfer_matrix(self, cloud: JuliaCloud) -> TransferMatrix:
        cached = self._matrices.get(id(cloud))
        if cached is not None and cached[0] is cloud:
            return cached[1]
        chunks = np.array_split(np.arange(cloud.size), max(1, int(np.ceil(cloud.size / 256))))
        results = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self._matrix_rows)(cloud, rows) for rows in chunks
        )
        counts, cols, data = [], [], []
        tails, displacements, ranges = [], [], []
        for part in results:
            counts.extend(part[0])
            cols.extend(part[1])
            data.extend(part[2])
            tails.extend(part[3])
            displacements.extend(part[4])
            ranges.extend(part[5])
        row_index = np.repeat(np.arange(cloud.size), counts)
        matrix = sparse.csr_matrix(
            (np.concatenate(data), (row_index, np.concatenate(cols))), shape=(cloud.size, cloud.size)
        )
        matrix.sum_duplicates()
        result = TransferMatrix(
            matrix=matrix,
            row_tails=np.asarray(tails),
            row_displacements=np.asarray(displacements),
            branch_ranges=np.asarray(ranges),
        )
        self._matrices[id(cloud)] = (cloud, result)
        self.log.info("Built transfer matrix on %s cloud points with %s entries", cloud.size, matrix.nnz)
        return result

    def _check_resolution(self, cloud: JuliaCloud) -> None:
        if cloud.pairwise_resolution > self.model.delta:
            raise ResolutionError(cloud.pairwise_resolution, self.model.delta)

    def apply(self, phi: GridFunction) -> GridFunction:
        """L_t phi on the cloud, off-cloud preimages read at their nearest cloud point."""
        cloud = phi.cloud
        self._check_resolution(cloud)
        tm = self.transfer_matrix(cloud)
        values = tm.matrix @ phi.values
        lipschitz = phi.lipschitz_constant(self.model.delta)
        errors = tm.row_tails * phi.sup_norm + lipschitz * tm.row_displacements
        return GridFunction(
            cloud=cloud,
            values=values,
            nonnegative=phi.nonnegative,
            error_estimate=float(errors.max()) + phi.error_estimate * float(np.abs(tm.matrix).sum(axis=1).max()),
            diagnostics={"max_row_tail": float(tm.row_tails.max()), "lipschitz": lipschitz},
        )

    def _evaluate_rows(self, points: np.ndarray, ks: np.ndarray, fn: Callable | None) -> np.ndarray:
        ws = np.repeat(points[:, None], ks.size, axis=1)
        zs = self.model.branch_at(ws, np.broadcast_to(ks, ws.shape))
        weights = np.exp(self.model.log_branch_weights(zs, ws, self.params) - self.potential_shift)
        if fn is None:
            return weights.sum(axis=1)
        return (weights * np.asarray(fn(zs), dtype=float)).sum(axis=1)

    def evaluate(self, points, fn: Callable[[np.ndarray], np.ndarray] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """
        (L_t fn)(w) at arbitrary points using branches |k| <= K.

        :param points: query points, no interpolation is involved
        :param fn: vectorized real function, the constant 1 when omitted
        :return: values and the certified branch tails (to be scaled by sup |fn|)
        """
        points = np.atleast_1d(np.asarray(points, dtype=complex))
        for point in points:
            self.model.check_query(point)
        ks = np.asarray(self.model.branch_indices(self.truncation.K), dtype=np.int64)
        rows = max(1, CHUNK_SIZE // max(1, ks.size))
        chunks = [points[start : start + rows] for start in range(0, points.size, rows)]
        parts = Parallel(n_jobs=self.n_jobs, prefer="threads")(
            delayed(self._evaluate_rows)(chunk, ks, fn) for chunk in chunks
        )
        values = np.concatenate(parts) if parts else np.zeros(0)
        tails = self.model.weight_tail(points, self.truncation.K, self.params) * np.exp(-self.potential_shift)
        return values, np.nan_to_num(tails, nan=0.0)

    def cloud_pressure(self, cloud: JuliaCloud) -> float:
        """log of the Perron eigenvalue of the cloud transfer matrix."""
        matrix = self.transfer_matrix(cloud).matrix
        if cloud.size <= 2:
            eigenvalues = np.linalg.eigvals(matrix.toarray())
        else:
            start = np.full(cloud.size, 1.0 / cloud.size)
            eigenvalues = eigs(matrix.astype(float), k=1, which="LM", v0=start, return_eigenvectors=False)
        return float(np.log(np.abs(eigenvalues).max()))

    # Tree path.

    def _grow(self, parent: TreeLevel, level: int, rows: np.ndarray):
        model = self.model
        params = self.params
        trunc = self.truncation
        shift = self.potential_shift
        ws = parent.points[rows]
        log_w = parent.log_weights[rows]
        for value in model.omitted_values:
            hit = np.abs(ws - value) <= model.pole_guard * max(1.0, abs(value))
            if hit.any():
                raise BranchUndefinedError(depth=level, w=complex(ws[hit][0]), cause=OmittedValueError(complex(ws[hit][0]), value))

        # Every expanded node enumerates |k| <= K. Nodes whose branch tail beyond K
        # still outweighs the relative threshold extend towards K_max.
        threshold = trunc.tail_tol * self.norm_bound**level
        with np.errstate(over="ignore", divide="ignore"):
            budget = threshold / np.exp(log_w - shift)
        k_rel = model.relevant_branch_limit(ws, budget, params)
        k_cut = np.full(rows.size, trunc.K, dtype=np.int64)
        for i in np.flatnonzero(k_rel > trunc.K):
            k_cut[i] = max(trunc.K, min(k_rel[i], model.required_branch_range(complex(ws[i]), trunc, params)))

        with np.errstate(under="ignore"):
            omitted = float(np.sum(np.exp(log_w - shift) * model.weight_tail(ws, k_cut, params)))

        index_cache: dict[int, np.ndarray] = {}
        for k in np.unique(k_cut):
            index_cache[int(k)] = np.asarray(model.branch_indices(int(k)), dtype=np.int64)
        counts = np.asarray([index_cache[int(k)].size for k in k_cut], dtype=np.int64)
        local_parents = np.repeat(np.arange(rows.size), counts)
        branches = np.concatenate([index_cache[int(k)] for k in k_cut]) if rows.size else np.zeros(0, dtype=np.int64)
        parent_points = ws[local_parents]
        zs = model.branch_at(parent_points, branches)
        with np.errstate(all="ignore"):
            residual = np.abs(model._evaluate(zs) - parent_points)
        allowed = model.preimage_allowance(zs, parent_points)
        if not (residual <= allowed).all():
            raise BranchUndefinedError(depth=level, w=complex(parent_points[~(residual <= allowed)][0]))
        child_log_w = log_w[local_parents] + model.log_branch_weights(zs, parent_points, params) - shift
        finite = np.isfinite(child_log_w)
        with np.errstate(divide="ignore"):
            keep = finite & (child_log_w >= np.log(threshold))
        with np.errstate(under="ignore"):
            frozen = float(np.sum(np.exp(child_log_w[finite & ~keep])))
        return zs[keep], child_log_w[keep], rows[local_parents[keep]], branches[keep], omitted, frozen

    def power_one(self, w: complex, n: int) -> tuple[float, PreimageTree]:
        """L_t^n 1(w) summed exactly over the truncated tree of n-fold preimages."""
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        w = complex(w)
        self.model.check_query(w)
        root = TreeLevel(
            points=np.asarray([w]),
            log_weights=np.zeros(1),
            parents=np.asarray([-1]),
            branches=np.asarray([0]),
        )
        levels = [root]
        omissions = []
        node_count = 1
        rows_per_chunk = max(1, CHUNK_SIZE // (2 * self.truncation.K + 1))
        for level in range(1, n + 1):
            parent = levels[-1]
            chunks = [
                np.arange(start, min(start + rows_per_chunk, parent.size))
                for start in range(0, parent.size, rows_per_chunk)
            ] or [np.arange(0)]
            parts = Parallel(n_jobs=self.n_jobs, prefer="threads")(
                delayed(self._grow)(parent, level, rows) for rows in chunks
            )
            new_level = TreeLevel(
                points=np.concatenate([part[0] for part in parts]),
                log_weights=np.concatenate([part[1] for part in parts]),
                parents=np.concatenate([part[2] for part in parts]),
                branches=np.concatenate([part[3] for part in parts]),
                frozen_mass=float(sum(part[5] for part in parts)),
            )
            node_count += new_level.size
            if node_count > self.truncation.node_budget:
                self.log.error("Preimage tree over budget at depth %s with %s nodes", level, node_count)
                raise TreeBudgetExceeded(achieved_depth=level - 1, node_count=node_count)
            # the unexpanded children of frozen nodes weigh at most norm_bound times their mass
            omissions.append(float(sum(part[4] for part in parts)) + parent.frozen_mass * self.norm_bound)
            levels.append(new_level)
            self.log.info("Tree level %s: %s nodes, mass %s", level, new_level.size, new_level.mass)
        tree = PreimageTree(root=w, levels=levels, level_omissions=omissions, norm_bound=self.norm_bound)
        return tree.value, tree

    def normalized_power_one(self, w: complex, n: int, P: float) -> float:
        value, _ = self.power_one(w, n)
        return float(np.exp(-n * P) * value)

    # Fixed point of the normalized operator.

    def _density_bands(self, cloud: JuliaCloud, h: np.ndarray, band_radius: float) -> dict[str, float]:
        gap = self.params.exponent_gap(self.model.M) * self.params.t
        moduli = np.abs(cloud.points)
        inside = moduli <= band_radius
        return {
            "band_radius": band_radius,
            "l_R": float(h[inside].min()) if inside.any() else float("nan"),
            "L": float(h.max()),
            "envelope_c_t": float(np.max(h * moduli**gap)),
        }

    def _residual(self, matrix: sparse.csr_matrix, h: np.ndarray, P: float) -> float:
        return float(np.abs(np.exp(-P) * (matrix @ h) - h).max() / np.abs(h).max())

    def cesaro_density(self, cloud: JuliaCloud, P: float, n_terms: int, band_radius: float = 10.0) -> GridFunction:
        """Average of the first n_terms iterates of the normalized operator applied to 1."""
        if n_terms < 1:
            raise ValueError(f"n_terms must be >= 1, got {n_terms}")
        self._check_resolution(cloud)
        matrix = self.transfer_matrix(cloud).matrix
        current = np.ones(cloud.size)
        total = np.zeros(cloud.size)
        trend = []
        for k in range(1, n_terms + 1):
            current = np.exp(-P) * (matrix @ current)
            total += current
            if k & (k - 1) == 0 or k == n_terms:
                trend.append((k, self._residual(matrix, total / k, P)))
        h = total / n_terms
        residual = trend[-1][1]
        diagnostics = {"residual": residual, "residual_trend": trend, "n_terms": n_terms, "P": P}
        diagnostics.update(self._density_bands(cloud, h, band_radius))
        if len(trend) > 1 and not trend[-1][1] < trend[0][1]:
            self.log.warning("Cesaro density residual did not decrease: %s", trend)
            diagnostics["converged"] = False
        else:
            diagnostics["converged"] = True
        self.log.info("Cesaro density with %s terms has residual %s", n_terms, residual)
        return GridFunction(cloud=cloud, values=h, nonnegative=True, error_estimate=residual * float(h.max()), diagnostics=diagnostics)

    def power_density(self, cloud: JuliaCloud, P: float, n_terms: int) -> GridFunction:
        """Plain iterate of the normalized operator, kept as a cross-check of the averaged density."""
        self._check_resolution(cloud)
        matrix = self.transfer_matrix(cloud).matrix
        current = np.ones(cloud.size)
        for _ in range(n_terms):
            current = np.exp(-P) * (matrix @ current)
        residual = self._residual(matrix, current, P)
        return GridFunction(cloud=cloud, values=current, nonnegative=True, diagnostics={"residual": residual, "n_terms": n_terms, "P": P})

    # Tail control.

    def fit_tail_constants(self, cloud: JuliaCloud, radii: Sequence[float] = (5.0, 10.0, 20.0, 40.0), max_points: int = 200) -> TailConstants:
        params = self.params
        model = self.model
        if params.tail_exponent(model.rho) <= 0:
            raise PreconditionError(f"Tail exponent r_t={params.tail_exponent(model.rho)} is not positive")
        alpha = params.borel_exponent()
        gap = params.exponent_gap(model.M) * params.t
        step = max(1, cloud.size // max_points)
        c, borel_sum, borel_tail = 0.0, 0.0, 0.0
        for w in cloud.points[::step]:
            branches = model.preimages(w, self.truncation, params)
            K_eff = max(abs(branch.branch_index) for branch in branches)
            moduli = np.asarray([abs(branch.z) for branch in branches])
            weights = np.asarray([branch.metric_weight for branch in branches])
            c = max(c, float(np.max((weights * abs(w) ** gap * moduli**alpha) ** (1.0 / params.t))))
            beyond = float(model.modulus_tail(np.asarray([w]), alpha, K_eff)[0])
            borel_sum = max(borel_sum, float(np.sum(moduli ** (-alpha))) + beyond)
            for R in radii:
                outside = float(np.sum(moduli[moduli > R] ** (-alpha))) + beyond
                borel_tail = max(borel_tail, R ** (alpha - model.rho) * outside)
        constants = TailConstants(c=c, borel_sum=borel_sum, borel_tail=borel_tail, alpha=alpha)
        self.log.info("Fitted tail constants %s", constants)
        return constants

    def transfer_norm_bound(self, constants: TailConstants) -> float:
        """(c T^-(1+1/M-tau))^t M_(tau-1)t."""
        gap = self.params.exponent_gap(self.model.M)
        return (constants.c * self.model.T_floor ** (-gap)) ** self.params.t * constants.borel_sum

    def tail_bound(self, R: float, constants: TailConstants) -> float:
        """c_t / R^r_t bounding the part of L_t 1 coming from preimages outside D(0, R)."""
        params = self.params
        model = self.model
        r_t = params.tail_exponent(model.rho)
        if r_t <= 0:
            raise PreconditionError(f"t={params.t} does not exceed rho/(tau-1)")
        if not R > 1:
            raise ValueError(f"R must be > 1, got {R}")
        gap = params.exponent_gap(model.M) * params.t
        c_t = constants.c**params.t * model.T_floor ** (-gap) * constants.borel_tail
        return c_t / R**r_t
