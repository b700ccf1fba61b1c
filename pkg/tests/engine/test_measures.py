from __future__ import annotations

from unittest.mock import patch

import numpy as np
import pytest

from bk_thermo_provider.engine.exceptions import (
    CrossConstructionFailure,
    EmptyTestSetError,
    NonPositiveDensityError,
    PreconditionError,
    TightnessFailure,
)
from bk_thermo_provider.engine.measures import (
    AtomicMeasure,
    MeasureBuilder,
    Provenance,
    Strategy,
    TestFunction,
    default_test_functions,
    relative_difference,
    tail_mass,
)
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy
from bk_thermo_provider.engine.pressure import PressureEstimator
from bk_thermo_provider.engine.xfer import GridFunction, TransferOperator

PARAMS = PotentialParams(tau=1.5, t=3.0)
TRUNCATION = TruncationPolicy(K=30, K_max=200, tail_tol=1e-6)
DOUBLING_PRESSURE = (1 - 3.0) * np.log(2)
GIBBS_P_OFFSET = 0.1
TANGENT_PRESSURE = -3.45


@pytest.fixture
def builder(doubling_model) -> MeasureBuilder:
    return MeasureBuilder(TransferOperator(doubling_model, PARAMS, TRUNCATION), DOUBLING_PRESSURE)


@pytest.fixture
def uniform_measure(builder) -> AtomicMeasure:
    return builder.adjoint_delta(1.0, 9).normalized()


@pytest.fixture
def fine_measure(builder) -> AtomicMeasure:
    return builder.adjoint_delta(1.0, 12).normalized()


class TestAtomicMeasure:
    def test_duplicate_atoms_are_merged(self):
        mu = AtomicMeasure(points=[1.0, 2.0, 1.0], weights=[0.25, 0.5, 0.25], provenance=Provenance.GIBBS)
        assert mu.size == 2
        assert mu.mass_in_disk(1.0, 0.1) == pytest.approx(0.5)
        assert mu.total_mass == pytest.approx(1.0)

    def test_negative_weights(self):
        with pytest.raises(ValueError):
            AtomicMeasure(points=[1.0], weights=[-1.0], provenance=Provenance.GIBBS)

    def test_normalized_and_tail_mass(self):
        mu = AtomicMeasure(points=[1.0, 10.0], weights=[3.0, 1.0], provenance=Provenance.NU_S, metadata={"pressure": -1.0})
        normalized = mu.normalized()
        assert normalized.total_mass == pytest.approx(1.0)
        assert normalized.metadata == {"pressure": -1.0, "normalized": True}
        assert normalized.pressure == -1.0
        assert tail_mass(mu, 5.0) == pytest.approx(0.25)
        assert normalized.integrate(np.abs) == pytest.approx(3.25)
        with pytest.raises(ValueError):
            tail_mass(mu, 0.0)

    def test_test_function_sup(self):
        test = TestFunction("abs", np.abs)
        assert test.sup(np.asarray([1.0, -3.0]), np.asarray([2.0])) == 3.0
        assert test.sup(np.asarray([])) == 0.0
        assert [test.name for test in default_test_functions()] == ["one", "abs", "real", "exp_neg_abs", "disk_indicator"]


class TestConformalMeasure:
    def test_adjoint_delta(self, builder):
        mu = builder.adjoint_delta(1.0, 5)
        assert mu.size == 32
        assert mu.total_mass == pytest.approx(2.0 ** (5 * (1 - 3.0)), rel=1e-12)
        assert mu.metadata["relative_error"] == 0.0
        assert mu.provenance is Provenance.ADJOINT_POWER
        np.testing.assert_allclose(np.abs(mu.points), 1.0, atol=1e-12)

    @pytest.mark.parametrize(argnames="strategy", argvalues=["adjoint_power", Strategy.NU_S_LIMIT])
    def test_conformal_estimate_cross_check(self, builder, strategy):
        mu = builder.conformal_estimate(1.0, 6, strategy=strategy)
        cross_check = mu.metadata["cross_check"]
        assert max(cross_check["differences"].values()) <= cross_check["tolerance"]
        assert mu.total_mass == pytest.approx(1.0)

    @pytest.mark.parametrize(
        argnames="a, b, expected",
        argvalues=[(25.5, 24.52, 0.98 / 25.5), (-2.0, 2.0, 2.0), (1e-5, -1e-5, 2e-3), (0.0, 0.0, 0.0)],
    )
    def test_relative_difference(self, a, b, expected):
        assert relative_difference(a, b, 1e-2) == pytest.approx(expected)

    def test_cross_check_compares_integrals_relatively(self, builder):
        first = AtomicMeasure(points=[1.0, 50.0], weights=[0.5, 0.5], provenance=Provenance.ADJOINT_POWER)
        second = AtomicMeasure(points=[1.0, 50.0], weights=[0.52, 0.48], provenance=Provenance.NU_S)
        with patch.object(MeasureBuilder, "_build", side_effect=[first, second]):
            with pytest.raises(CrossConstructionFailure) as err:
                builder.conformal_estimate(1.0, 3)
        differences = err.value.integrals["differences"]
        assert differences["abs"] == pytest.approx(0.98 / 25.5)
        assert differences["one"] == pytest.approx(0.0, abs=1e-12)

    def test_tightness_of_circle_measures(self, builder):
        report = builder.tightness_check(1.0, 4)
        assert report.holds
        assert report.c_t == 0.0
        assert set(report.slopes.values()) == {None}
        assert sorted(report.tails) == pytest.approx([DOUBLING_PRESSURE + offset for offset in (0.05, 0.1, 0.2)])

    def test_heavy_tails_fail_tightness(self, builder):
        heavy = AtomicMeasure(points=[6.0, 12.0, 24.0, 48.0], weights=[0.25] * 4, provenance=Provenance.NU_S)
        with patch.object(MeasureBuilder, "nu_s", return_value=heavy):
            with pytest.raises(TightnessFailure) as err:
                builder.tightness_check(1.0, 4)
        assert err.value.tails["r_t"] == pytest.approx(1.5)
        assert not err.value.tails["holds"]

    def test_tangent_tails_are_tight(self, tangent_model, tangent_seed):
        operator = TransferOperator(tangent_model, PARAMS, TRUNCATION)
        report = MeasureBuilder(operator, TANGENT_PRESSURE).tightness_check(tangent_seed, 3)
        assert report.r_t == pytest.approx(0.5)
        assert report.holds
        assert all(slope is None or slope < -1.0 for slope in report.slopes.values())

    def test_nu_s_requires_s_above_pressure(self, builder):
        with pytest.raises(PreconditionError):
            builder.nu_s(1.0, DOUBLING_PRESSURE, 4)

    def test_nu_s_without_tail_closure(self, doubling_model):
        builder = MeasureBuilder(
            TransferOperator(doubling_model, PARAMS, TRUNCATION), DOUBLING_PRESSURE, tail_closure=False
        )
        mu = builder.nu_s(1.0, DOUBLING_PRESSURE + 0.01, 4)
        assert mu.metadata["series_tail_warning"]
        assert mu.metadata["relative_error"] > 0.9

    def test_eigen_residual(self, builder, uniform_measure):
        assert builder.eigen_residual(uniform_measure) == pytest.approx(0.0, abs=1e-10)
        assert builder.eigen_residual(uniform_measure, P=DOUBLING_PRESSURE + 0.5) > 0.1

    def test_cloud_eigenmeasure(self, builder, doubling_cloud):
        mu = builder.cloud_eigenmeasure(doubling_cloud)
        assert mu.pressure == pytest.approx(DOUBLING_PRESSURE, rel=1e-9)
        assert mu.total_mass == pytest.approx(1.0)

    def test_empty_test_set(self, builder, uniform_measure):
        with pytest.raises(EmptyTestSetError):
            builder.eigen_residual(uniform_measure, test_functions=[])

    def test_quasi_invariance(self, builder, uniform_measure):
        report = builder.quasi_invariance_check(uniform_measure)
        assert report.c_R == [(5.0, 0.0), (10.0, 0.0), (20.0, 0.0)]
        assert report.decaying

    def test_escaping_mass(self, builder, uniform_measure):
        assert builder.escaping_mass(uniform_measure, 0.5, 4) == [(n, pytest.approx(1.0)) for n in range(5)]
        assert builder.escaping_mass(uniform_measure, 2.0, 2)[-1][1] == 0.0

    def test_conformality(self, builder, uniform_measure):
        check = builder.conformality_check(uniform_measure, 1.0, 0.3, [0])
        assert check["atomic"] > 0
        assert check["relative_error"] < 0.1


class TestGibbsState:
    def test_gibbs_from_density(self, builder, uniform_measure, doubling_cloud):
        h = GridFunction.constant(doubling_cloud, 2.0)
        mu = builder.gibbs_from_density(uniform_measure, h)
        assert mu.provenance is Provenance.GIBBS
        np.testing.assert_allclose(mu.weights, uniform_measure.weights)
        assert mu.metadata["density_bands"]["5.0"] == [2.0, 2.0]

    def test_non_positive_density(self, builder, uniform_measure, doubling_cloud):
        h = GridFunction(cloud=doubling_cloud, values=np.zeros(doubling_cloud.size))
        with pytest.raises(NonPositiveDensityError):
            builder.gibbs_from_density(uniform_measure, h)

    def test_invariance_residual(self, builder, uniform_measure):
        assert builder.invariance_residual(uniform_measure) == pytest.approx(0.0, abs=1e-10)
        skewed = AtomicMeasure(points=[1.0, 1j], weights=[0.5, 0.5], provenance=Provenance.GIBBS)
        assert builder.invariance_residual(skewed) > 0.1

    def test_gibbs_ratio_is_bounded(self, builder, fine_measure):
        samples = fine_measure.points[[0, 1000, 3000]]
        ratios = builder.gibbs_ratio(fine_measure, samples, [2, 3, 4])
        assert len(ratios) == 9
        assert all(ratio.resolved for ratio in ratios)
        values = [ratio.ratio for ratio in ratios]
        assert max(values) / min(values) < 2.0

    def test_gibbs_ratio_counts_atoms_inside_the_disk(self, builder, fine_measure):
        z = complex(fine_measure.points[0])
        (base,) = builder.gibbs_ratio(fine_measure, [z], [2])
        distances = np.abs(fine_measure.points - z)
        neighbours = (distances > 0) & (distances <= base.disk_radius)
        assert neighbours.sum() == 16
        thinned = AtomicMeasure(
            fine_measure.points, np.where(neighbours, 0.0, fine_measure.weights), Provenance.GIBBS
        )
        (thin,) = builder.gibbs_ratio(thinned, [z], [2])
        assert thin.ratio == pytest.approx(base.ratio / 17 * 4096 / 4080, rel=1e-9)

    def test_gibbs_ratio_without_atoms_in_disk(self, builder, fine_measure):
        z = complex(fine_measure.points[0])
        emptied = AtomicMeasure(
            fine_measure.points,
            np.where(np.abs(fine_measure.points - z) <= 0.0125, 0.0, fine_measure.weights),
            Provenance.GIBBS,
        )
        (ratio,) = builder.gibbs_ratio(emptied, [z], [2])
        assert not ratio.resolved
        assert ratio.disk_radius == pytest.approx(0.0125)

    def test_gibbs_ratio_responds_to_pressure_offset(self, builder, fine_measure):
        z = fine_measure.points[1000]
        base = builder.gibbs_ratio(fine_measure, [z], [2, 4])
        offset = builder.gibbs_ratio(fine_measure, [z], [2, 4], P=DOUBLING_PRESSURE + GIBBS_P_OFFSET)
        for plain, shifted in zip(base, offset):
            assert shifted.ratio / plain.ratio == pytest.approx(np.exp(GIBBS_P_OFFSET * plain.n), rel=1e-9)

    def test_gibbs_ratio_empty_range(self, builder, uniform_measure):
        assert builder.gibbs_ratio(uniform_measure, [1.0], []) == []

    def test_heaviest_atoms(self):
        mu = AtomicMeasure(points=[1.0, 2.0, 3.0], weights=[0.2, 0.5, 0.3], provenance=Provenance.GIBBS)
        assert MeasureBuilder.heaviest_atoms(mu, 2) == [2.0, 3.0]


@pytest.fixture(scope="module")
def tangent_builder(tangent_model, tangent_seed) -> MeasureBuilder:
    estimate = PressureEstimator(tangent_model, TRUNCATION).estimate(PARAMS, tangent_seed, n_max=4, verify_basepoint=False)
    positive_tests = [test for test in default_test_functions() if test.name in ("one", "abs", "exp_neg_abs")]
    return MeasureBuilder(
        TransferOperator(tangent_model, PARAMS, TRUNCATION), estimate.value, test_functions=positive_tests, agreement_tol=0.1
    )


@pytest.mark.slow
class TestTangentMeasures:
    def test_eigen_residual(self, tangent_builder, tangent_seed):
        mu = tangent_builder.adjoint_delta(tangent_seed, 4)
        residual = tangent_builder.eigen_residual(mu)
        assert residual < 0.05
        assert tangent_builder.eigen_residual(mu, P=tangent_builder.P_hat + 0.5) > residual

    def test_constructions_agree(self, tangent_builder, tangent_seed):
        mu = tangent_builder.conformal_estimate(tangent_seed, 4)
        cross_check = mu.metadata["cross_check"]
        assert set(cross_check["differences"]) == {"one", "abs", "exp_neg_abs"}
        assert max(cross_check["differences"].values()) <= cross_check["tolerance"]

    def test_quasi_invariance_decays(self, tangent_builder, tangent_seed):
        mu = tangent_builder.adjoint_delta(tangent_seed, 4)
        report = tangent_builder.quasi_invariance_check(mu)
        values = [c for _, c in report.c_R]
        assert values[-1] > 0
        assert values[-1] < values[0]
