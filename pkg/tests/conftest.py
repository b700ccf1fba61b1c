from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pytest

from bk_thermo_provider.engine.map_model import BKMapDescriptor, JuliaSampler, TangentMap
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy

TEST_TRUNCATION = TruncationPolicy(K=30, K_max=200, tail_tol=1e-6)
REFERENCE_PARAMS = PotentialParams(tau=1.5, t=3.0)
TANGENT_SEED_HINT = 4.6


@dataclass
class DoublingMap(BKMapDescriptor):
    """z -> z^2 on the unit circle. Every branch weighs 2^-t, so P_t = (1 - t) log 2."""

    @classmethod
    def build(cls, **overrides) -> "DoublingMap":
        values = {
            "name": "doubling",
            "params": {},
            "M": 1,
            "rho": 0.0,
            "R0": 2.0,
            "T_floor": 0.5,
            "delta": 0.2,
            "sing_radius": 0.0,
        }
        values.update(overrides)
        return cls(**values)

    def _evaluate(self, z):
        return np.asarray(z, dtype=complex) ** 2

    def _derivative(self, z):
        return 2 * np.asarray(z, dtype=complex)

    def branch_indices(self, K):
        return [0, 1]

    def has_branch(self, k):
        return k in (0, 1)

    def branch_at(self, w, k):
        root = np.sqrt(np.asarray(w, dtype=complex))
        return np.where(np.asarray(k) == 0, root, -root)

    def branch_index_of(self, z):
        z = complex(z)
        return 0 if abs(complex(np.sqrt(z * z)) - z) <= 1e-12 * max(1.0, abs(z)) else 1

    def pole_locations(self, R):
        return []

    def nearest_pole(self, z):
        return complex(np.inf), float("inf")

    @property
    def omitted_values(self):
        return ()

    @property
    def singular_values(self):
        return (0j,)

    def modulus_tail(self, w, u, K):
        return np.zeros(np.broadcast(np.asarray(w), np.asarray(K)).shape)

    def weight_tail(self, w, K, p):
        return np.zeros(np.broadcast(np.asarray(w), np.asarray(K)).shape)

    def relevant_branch_limit(self, w, budget, p):
        return np.ones(np.broadcast(np.asarray(w), np.asarray(budget)).shape, dtype=np.int64)

    def norm_bound(self, p):
        return 2 * 2.0 ** (-p.t)


def doubling_pressure(t: float) -> float:
    return (1 - t) * np.log(2)


@pytest.fixture(scope="module")
def reset_db():
    """Resets Airflow db."""

    from airflow.utils import db

    db.resetdb()


@pytest.fixture(scope="session")
def tangent_model() -> TangentMap:
    return TangentMap.from_parameter(0.5)


@pytest.fixture(scope="session")
def tangent_seed(tangent_model) -> complex:
    return JuliaSampler(tangent_model).polish_seed(TANGENT_SEED_HINT)


@pytest.fixture(scope="session")
def tangent_cloud(tangent_model):
    return JuliaSampler(tangent_model).sample(TANGENT_SEED_HINT, depth=2, budget=120, rng_seed=7)


@pytest.fixture(scope="session")
def doubling_model() -> DoublingMap:
    return DoublingMap.build()


@pytest.fixture(scope="session")
def doubling_cloud(doubling_model):
    return JuliaSampler(doubling_model).sample(1.0, depth=5, budget=64, rng_seed=7)
