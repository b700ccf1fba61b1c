from __future__ import annotations

from dataclasses import dataclass

from bk_thermo_provider.engine.exceptions import InadmissibleParameters


@dataclass(frozen=True)
class PotentialParams:
    """Exponents (tau, t) of the geometric potential."""

    tau: float
    t: float

    def is_admissible(self, M: int, rho: float) -> bool:
        if not 1.0 < self.tau < 1.0 + 1.0 / M:
            return False
        return self.t > rho / (self.tau - 1.0)

    def validate(self, M: int, rho: float) -> "PotentialParams":
        if not self.is_admissible(M, rho):
            raise InadmissibleParameters(self.tau, self.t, M, rho)
        return self

    def exponent_gap(self, M: int) -> float:
        """1 + 1/M - tau, the decay exponent of the density envelope per unit t."""
        return 1.0 + 1.0 / M - self.tau

    def tail_exponent(self, rho: float) -> float:
        """r_t = (tau - 1) t - rho."""
        return (self.tau - 1.0) * self.t - rho

    def borel_exponent(self) -> float:
        return (self.tau - 1.0) * self.t

    def with_t(self, t: float) -> "PotentialParams":
        return PotentialParams(tau=self.tau, t=t)


@dataclass(frozen=True)
class TruncationPolicy:
    K: int = 60
    K_max: int = 400
    tail_tol: float = 1e-8
    node_budget: int = 5_000_000

    def __post_init__(self):
        if self.K < 0:
            raise ValueError(f"K must be non-negative, got {self.K}")
        if self.K > self.K_max:
            raise ValueError(f"K={self.K} exceeds K_max={self.K_max}")
        if not self.tail_tol > 0:
            raise ValueError(f"tail_tol must be positive, got {self.tail_tol}")
        if self.node_budget < 1:
            raise ValueError(f"node_budget must be positive, got {self.node_budget}")

    def doubled(self) -> "TruncationPolicy":
        """Oracle configuration: twice the branch range at the same tolerance."""
        K = 2 * self.K
        return TruncationPolicy(K=K, K_max=max(self.K_max, K), tail_tol=self.tail_tol, node_budget=self.node_budget)
