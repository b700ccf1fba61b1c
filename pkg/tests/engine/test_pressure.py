from __future__ import annotations

from unittest.mock import patch

import numpy as np
import pytest

from bk_thermo_provider.engine.exceptions import ConvergenceFailure
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy
from bk_thermo_provider.engine.pressure import PressureEstimate, PressureEstimator, aitken, estimate_pressure
from bk_thermo_provider.engine.xfer import PreimageTree, TreeLevel

TRUNCATION = TruncationPolicy(K=30, K_max=200, tail_tol=1e-6)
DEEP_TRUNCATION = TruncationPolicy(K=30, K_max=200, tail_tol=1e-5)
TANGENT_PRESSURE = -3.45
LOG2 = np.log(2)


def single_node_tree(log_masses: list[float]) -> PreimageTree:
    root = TreeLevel(points=np.asarray([1.0 + 0j]), log_weights=np.zeros(1), parents=np.asarray([-1]), branches=np.asarray([0]))
    levels = [root] + [
        TreeLevel(points=np.asarray([1.0 + 0j]), log_weights=np.asarray([value]), parents=np.asarray([0]), branches=np.asarray([0]))
        for value in log_masses
    ]
    return PreimageTree(root=1.0 + 0j, levels=levels, level_omissions=[0.0] * len(log_masses), norm_bound=1.0)


def fake_estimate(value: float) -> PressureEstimate:
    return PressureEstimate(
        t=3.0, tau=1.5, value=value, per_n=[(1, value)], basepoint=1.0 + 0j, error_bar=1e-6, extrapolation="none"
    )


class TestAitken:
    def test_geometric_sequence(self):
        limit, correction = aitken([1.5, 1.25, 1.125])
        assert limit == pytest.approx(1.0, abs=1e-12)
        assert correction == pytest.approx(0.125)

    def test_short_sequence(self):
        assert aitken([2.0, 3.0]) == (3.0, 0.0)

    def test_constant_sequence(self):
        assert aitken([0.5, 0.5, 0.5]) == (0.5, 0.0)


class TestPressureEstimator:
    @pytest.mark.parametrize(argnames="t", argvalues=[0.5, 1.0, 3.0])
    @pytest.mark.parametrize(argnames="extrapolation", argvalues=["ratio-aitken", "aitken", "none"])
    def test_doubling_pressure(self, doubling_model, t, extrapolation):
        estimator = PressureEstimator(doubling_model, TRUNCATION, extrapolation=extrapolation)
        estimate = estimator.estimate(PotentialParams(tau=1.5, t=t), 1.0, n_max=6)
        assert estimate.value == pytest.approx((1 - t) * LOG2, abs=1e-10)
        assert estimate.error_bar == pytest.approx(0.0, abs=1e-10)
        assert estimate.diagnostics["second_basepoint"]["basepoint"] == [-1.0, 0.0]
        assert [n for n, _ in estimate.per_n] == list(range(1, 7))

    def test_estimate_pressure_shortcut(self, doubling_model):
        estimate = estimate_pressure(doubling_model, PotentialParams(tau=1.5, t=2.0), 1.0, n_max=5, truncation=TRUNCATION)
        assert estimate.value == pytest.approx(-LOG2, abs=1e-10)
        assert estimate.per_n[0] == (1, pytest.approx(-LOG2))

    def test_invalid_arguments(self, doubling_model):
        with pytest.raises(ValueError):
            PressureEstimator(doubling_model, TRUNCATION, extrapolation="richardson")
        with pytest.raises(ValueError):
            PressureEstimator(doubling_model, TRUNCATION).estimate(PotentialParams(tau=1.5, t=3.0), 1.0, n_max=0)

    def test_tangent_reference_pressure(self, tangent_model, tangent_seed):
        estimator = PressureEstimator(tangent_model, TRUNCATION)
        estimate = estimator.estimate(PotentialParams(tau=1.5, t=3.0), tangent_seed, n_max=4, verify_basepoint=False)
        assert estimate.value == pytest.approx(TANGENT_PRESSURE, abs=0.15)
        assert estimate.error_bar >= 0
        assert estimate.diagnostics["tail_certificate"] >= 0

    def test_tangent_pressure_stable_under_doubled_branch_range(self, tangent_model, tangent_seed):
        params = PotentialParams(tau=1.5, t=3.0)
        base = PressureEstimator(tangent_model, TRUNCATION).estimate(params, tangent_seed, n_max=3, verify_basepoint=False)
        doubled = PressureEstimator(tangent_model, TRUNCATION.doubled()).estimate(
            params, tangent_seed, n_max=3, verify_basepoint=False
        )
        assert abs(base.value - doubled.value) <= base.error_bar + doubled.error_bar + 1e-3

    @pytest.mark.slow
    def test_deep_tangent_pressure_agrees_across_basepoints(self, tangent_model, tangent_seed):
        estimator = PressureEstimator(tangent_model, DEEP_TRUNCATION)
        params = PotentialParams(tau=1.5, t=3.0)
        second = estimator.default_second_basepoint(tangent_seed)
        first_estimate = estimator.estimate(params, tangent_seed, n_max=10, verify_basepoint=False)
        second_estimate = estimator.estimate(params, second, n_max=10, verify_basepoint=False)
        assert first_estimate.value == pytest.approx(TANGENT_PRESSURE, abs=0.1)
        assert abs(first_estimate.value - second_estimate.value) < 0.02

    @pytest.mark.slow
    def test_normalized_tangent_iterates_stay_in_a_band(self, tangent_model, tangent_seed):
        estimator = PressureEstimator(tangent_model, DEEP_TRUNCATION)
        params = PotentialParams(tau=1.5, t=3.0)
        estimate = estimator.estimate(params, tangent_seed, n_max=10, verify_basepoint=False)
        normalized = [np.exp(n * (average - estimate.value)) for n, average in estimate.per_n]
        assert len(normalized) == 10
        assert max(normalized) / min(normalized) < 2.0

    def test_increments_must_shrink(self, doubling_model):
        estimator = PressureEstimator(doubling_model, TRUNCATION, extrapolation="none")
        tree = single_node_tree([-1.0, -2.0, -3.0, -10.0, -30.0])
        with pytest.raises(ConvergenceFailure) as err:
            estimator._from_tree(PotentialParams(tau=1.5, t=3.0), tree, 5)
        assert len(err.value.per_n) == 5

    @patch.object(PressureEstimator, "_from_tree", side_effect=[fake_estimate(-1.0), fake_estimate(-1.5)])
    def test_basepoints_must_agree(self, mock_from_tree, doubling_model):
        estimator = PressureEstimator(doubling_model, TRUNCATION)
        with pytest.raises(ConvergenceFailure):
            estimator.estimate(PotentialParams(tau=1.5, t=3.0), 1.0, n_max=2)
        assert mock_from_tree.call_count == 2


class TestPressureCurve:
    def test_doubling_curve(self, doubling_model, doubling_cloud):
        estimator = PressureEstimator(doubling_model, TRUNCATION, n_jobs=2)
        curve = estimator.pressure_curve(1.5, [3.0, 1.0, 2.0, 2.0], 1.0, 4, cloud=doubling_cloud)
        np.testing.assert_allclose(curve.t_values, [1.0, 2.0, 3.0])
        np.testing.assert_allclose(curve.values, [0.0, -LOG2, -2 * LOG2], atol=1e-10)
        assert curve.is_strictly_decreasing()
        assert curve.rejected == []

    def test_tangent_curve_rejects_inadmissible_t(self, tangent_model, tangent_seed):
        curve = PressureEstimator(tangent_model, TRUNCATION).pressure_curve(1.5, [1.5], tangent_seed, 3)
        assert curve.samples == []
        assert [t for t, _ in curve.rejected] == [1.5]

    @patch.object(PressureEstimator, "estimate", side_effect=[fake_estimate(-1.0), fake_estimate(-0.5)])
    def test_increasing_curve_fails_when_expanding(self, mock_estimate, doubling_model, doubling_cloud):
        with pytest.raises(ConvergenceFailure):
            PressureEstimator(doubling_model, TRUNCATION).pressure_curve(1.5, [1.0, 2.0], 1.0, 3, cloud=doubling_cloud)


class TestPressureZero:
    def test_doubling_zero(self, doubling_model):
        zero = PressureEstimator(doubling_model, TRUNCATION).find_pressure_zero(1.5, (2.0, 0.5), 1e-6, 1.0, 4)
        assert zero.bracketed
        assert zero.admissible
        assert zero.experimental
        assert zero.t_star == pytest.approx(1.0, abs=1e-5)
        assert abs(zero.value) < 1e-6
        assert zero.hd_band == 0.0

    def test_no_sign_change(self, doubling_model):
        zero = PressureEstimator(doubling_model, TRUNCATION).find_pressure_zero(1.5, (1.5, 3.0), 1e-6, 1.0, 4)
        assert not zero.bracketed
        assert zero.t_star is None
        assert zero.reason == "no sign change"

    def test_inadmissible_bracket(self, tangent_model, tangent_seed):
        zero = PressureEstimator(tangent_model, TRUNCATION).find_pressure_zero(1.5, (1.5, 3.0), 1e-3, tangent_seed, 3)
        assert not zero.admissible
        assert zero.t_star is None
        assert zero.hd_band == pytest.approx(2 / 3)
        assert "t=1.5" in zero.reason
