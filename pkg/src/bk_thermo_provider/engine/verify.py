from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Sequence, Set

import numpy as np
from joblib import Parallel, delayed
from scipy.stats import linregress

from airflow.utils.log.logging_mixin import LoggingMixin
from bk_thermo_provider.engine.exceptions import BranchUndefinedError, OrbitEscapeError
from bk_thermo_provider.engine.map_model import BKMapDescriptor, JuliaCloud
from bk_thermo_provider.engine.params import PotentialParams, TruncationPolicy
from bk_thermo_provider.engine.xfer import TransferOperator

DISTORTION_T_VALUES = (2.5, 3.0, 4.0)


class Verdict(Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    INCONCLUSIVE = "INCONCLUSIVE"

    SUCCESS_STATES = (PASS,)

    @classmethod
    def validate(cls, verdicts: str | Sequence[str] | set[str]):
        if isinstance(verdicts, (Sequence, Set)) and not isinstance(verdicts, str):
            for verdict in verdicts:
                cls(verdict)
        else:
            cls(verdicts)

    @classmethod
    def is_success(cls, verdict: str) -> bool:
        cls.validate(verdicts=verdict)
        return verdict in cls.SUCCESS_STATES.value


@dataclass
class CheckReport:
    lemma_id: str
    samples: dict
    fitted_constants: dict
    tolerance: dict
    verdict: Verdict
    notes: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return Verdict.is_success(self.verdict.value)

    def to_dict(self) -> dict[str, Any]:
        return {
            "lemma_id": self.lemma_id,
            "samples": self.samples,
            "fitted_constants": self.fitted_constants,
            "tolerance": self.tolerance,
            "verdict": self.verdict.value,
            "notes": list(self.notes),
        }


def _verdict(ok: bool) -> Verdict:
    return Verdict.PASS if ok else Verdict.FAIL


class LemmaVerifier(LoggingMixin):
    """Numerical checks of the growth, expansion, distortion and tail estimates."""

    def __init__(
        self,
        model: BKMapDescriptor,
        params: PotentialParams,
        truncation: TruncationPolicy | None = None,
        rng_seed: int = 7,
        n_jobs: int = 1,
    ):
        super().__init__()
        self.model = model
        self.params = params
        self.truncation = truncation or TruncationPolicy()
        self.rng_seed = rng_seed
        self.n_jobs = n_jobs

    def _rng(self) -> np.random.Generator:
        return np.random.default_rng(self.rng_seed)

    def _subsample(self, cloud: JuliaCloud, max_points: int, rng: np.random.Generator | None = None) -> np.ndarray:
        if cloud.size <= max_points:
            return cloud.points
        rng = rng or self._rng()
        return cloud.points[np.sort(rng.choice(cloud.size, size=max_points, replace=False))]

    # Series and growth.

    def borel_check(
        self,
        w_set: Sequence[complex],
        u: float,
        R_grid: Sequence[float] = (10.0, 100.0, 1000.0, 10000.0),
        K_direct: int = 1_000_000,
        slope_tol: float = 0.15,
    ) -> CheckReport:
        """Partial sums of |z|^-u over the preimages z of each w, summed directly up to K_direct."""
        model = self.model
        R_grid = sorted(float(R) for R in R_grid)
        divergent = u <= model.rho
        if divergent:
            K = max(model.branch_range_for_radius(w, max(R_grid), K_direct) for w in w_set) + 1
        else:
            K = K_direct
        ks = np.asarray(model.branch_indices(K), dtype=np.int64)
        sums, partials, slopes = [], [], []
        for w in w_set:
            zs = model.branch_at(np.full(ks.shape, complex(w)), ks)
            moduli = np.abs(zs)
            moduli = moduli[moduli > 0]
            terms = moduli ** (-u)
            partial = [float(terms[moduli <= R].sum()) for R in R_grid]
            partials.append(partial)
            if divergent:
                fit = linregress(np.log(R_grid), np.log(partial))
            else:
                total = float(terms.sum())
                sums.append(total)
                tails = np.asarray([total - value for value in partial])
                usable = tails > 0
                fit = linregress(np.log(np.asarray(R_grid)[usable]), np.log(tails[usable]))
            slopes.append(float(fit.slope))

        if divergent:
            growing = all(all(b > a for a, b in zip(p, p[1:])) for p in partials)
            expected = model.rho - u
            ok = growing and all(abs(slope - expected) <= slope_tol for slope in slopes)
            return CheckReport(
                lemma_id="borel_series_divergence",
                samples={"w": [[complex(w).real, complex(w).imag] for w in w_set], "R_grid": R_grid, "partial_sums": partials},
                fitted_constants={"growth_exponents": slopes},
                tolerance={"slope": slope_tol, "expected_growth_exponent": expected},
                verdict=_verdict(ok),
                notes=[f"u={u} <= rho={model.rho}: divergence mode, partial sums must grow without bound"],
            )

        expected = -(u - model.rho)
        ok = all(abs(slope - expected) <= slope_tol for slope in slopes)
        tail_bound = float(np.max(model.modulus_tail(np.asarray(list(w_set), dtype=complex), u, K_direct)))
        return CheckReport(
            lemma_id="borel_series",
            samples={"w": [[complex(w).real, complex(w).imag] for w in w_set], "R_grid": R_grid, "partial_sums": partials},
            fitted_constants={"M_u": max(sums), "sums": sums, "tail_slopes": slopes, "remainder_bound": tail_bound},
            tolerance={"slope": slope_tol, "expected_tail_slope": expected},
            verdict=_verdict(ok),
        )

    def rapid_growth_check(
        self,
        poles: Sequence[complex] | None = None,
        annulus: tuple[float, float] = (10.0, 1000.0),
        n_samples: int = 60,
        exponent_tol: float = 0.05,
        stability: float = 0.2,
    ) -> CheckReport:
        """Fit log |f'| against log |f| near poles; the slope approaches 1 + 1/m_j."""
        model = self.model
        known = model.poles(100.0)
        multiplicities = {complex(a): m for a, m in known}
        if poles is None:
            positive = [a for a, _ in known if a.real > 0]
            poles = [positive[0], positive[min(5, len(positive) - 1)]]
        low, high = annulus
        low = max(low, model.R0)
        fitted, notes, ok = {}, [], True
        for pole in poles:
            pole = complex(pole)
            m = min(multiplicities.items(), key=lambda item: abs(item[0] - pole))[1]
            offsets = np.logspace(-8, 0, 400)
            angles = np.linspace(0, 2 * np.pi, 7)[:-1]
            zs = (pole + offsets[:, None] * np.exp(1j * angles)[None, :]).ravel()
            with np.errstate(all="ignore"):
                values = np.abs(model._evaluate(zs))
                derivatives = np.abs(model._derivative(zs))
            in_range = (values >= low) & (values <= high) & np.isfinite(derivatives)
            tolerance = exponent_tol
            if in_range.sum() < 5:
                notes.append(f"pole {pole}: only {int(in_range.sum())} samples in the asymptotic range, tolerance widened")
                in_range = (values > model.R0) & np.isfinite(derivatives)
                tolerance = 2 * exponent_tol
            values, derivatives, zs = values[in_range], derivatives[in_range], zs[in_range]
            order = np.argsort(values)[:: max(1, in_range.sum() // n_samples)]
            values, derivatives, zs = values[order], derivatives[order], zs[order]
            fit = linregress(np.log(values), np.log(derivatives))
            c0_samples = derivatives * np.abs(zs) / values ** (1 + 1 / m)
            half = len(c0_samples) // 2
            c0_low, c0_high = float(c0_samples[:half].min()), float(c0_samples[half:].min())
            stable = abs(c0_high - c0_low) <= stability * max(c0_low, c0_high)
            exponent_ok = abs(fit.slope - (1 + 1 / m)) <= tolerance
            ok = ok and stable and exponent_ok and float(c0_samples.min()) > 0
            fitted[f"{pole.real:.6g}{pole.imag:+.6g}j"] = {
                "multiplicity": m,
                "exponent": float(fit.slope),
                "c0": float(c0_samples.min()),
                "c0_halves": [c0_low, c0_high],
                "samples": int(len(values)),
            }
        return CheckReport(
            lemma_id="rapid_growth",
            samples={"annulus": [low, high]},
            fitted_constants=fitted,
            tolerance={"exponent": exponent_tol, "c0_stability": stability},
            verdict=_verdict(ok),
            notes=notes,
        )

    # Expansion.

    def expansion_profile(self, points: Sequence[complex], n_max: int) -> list[tuple[int, float]]:
        """min over points of log(|(f^n)'(z)| |z| / |f^n(z)|) for n = 1..n_max."""
        profile = []
        for n in range(1, n_max + 1):
            values = []
            for z in points:
                try:
                    log_derivative, image = self.model.orbit_log_derivative(z, n)
                except OrbitEscapeError:
                    continue
                if image == 0:
                    continue
                values.append(log_derivative + np.log(abs(z)) - np.log(abs(image)))
            if values:
                profile.append((n, float(min(values))))
        return profile

    def expansion_check(self, cloud: JuliaCloud, n_max: int = 8, margin: float = 0.05, max_points: int = 200) -> CheckReport:
        points = self._subsample(cloud, max_points)
        profile = self.expansion_profile(points, n_max)
        ns = np.asarray([n for n, _ in profile], dtype=float)
        qs = np.asarray([q for _, q in profile])
        if len(profile) < 2:
            return CheckReport("expansion", {"points": int(len(points))}, {}, {"margin": margin}, Verdict.INCONCLUSIVE, ["orbits too short to fit"])
        fit = linregress(ns, qs)
        K1 = float(np.exp(fit.slope))
        c1 = float(np.exp(np.min(qs - ns * fit.slope)))
        ok = K1 > 1 + margin
        notes = [] if ok else [f"fitted K1={K1:.4f} does not exceed 1 + {margin}: parameter is not hyperbolic"]
        seed = cloud.seed
        return CheckReport(
            lemma_id="expansion",
            samples={"points": int(len(points)), "n_max": n_max, "profile": profile},
            fitted_constants={"K1": K1, "c1": c1, "seed_multiplier": abs(self.model.deriv(seed))},
            tolerance={"margin": margin},
            verdict=_verdict(ok),
            notes=notes,
        )

    # Distortion.

    def _pull(self, w: complex, word: Sequence[int], params: PotentialParams) -> tuple[complex, float, float]:
        """(f_z^-n(w), S_n Phi_t at that point, log |(f_z^-n)'(w)|)."""
        orbit = self.model.pullback_orbit(w, word)
        previous = [complex(w)] + orbit[:-1]
        zs, ws = np.asarray(orbit), np.asarray(previous)
        log_weights = self.model.log_branch_weights(zs, ws, params)
        log_derivative = -float(np.sum(np.log(np.abs(self.model.derivative_from_value(zs, ws)))))
        return orbit[-1], float(np.sum(log_weights)), log_derivative

    def ergodic_difference(self, w1: complex, w2: complex, word: Sequence[int], params: PotentialParams | None = None) -> float:
        params = params or self.params
        _, s1, _ = self._pull(w1, word, params)
        _, s2, _ = self._pull(w2, word, params)
        return abs(s1 - s2)

    def distortion_check(
        self,
        cloud: JuliaCloud,
        n_max: int = 8,
        t_values: Sequence[float] | None = None,
        max_pairs: int = 200,
        spread: int = 3,
        stability: float = 0.3,
        linear_tol: float = 1e-6,
    ) -> CheckReport:
        rng = self._rng()
        delta = self.model.delta
        pairs = cloud.neighbour_pairs(delta)
        if len(pairs) > max_pairs:
            pairs = pairs[np.sort(rng.choice(len(pairs), size=max_pairs, replace=False))]
        if len(pairs) == 0:
            return CheckReport("distortion", {"pairs": 0}, {}, {}, Verdict.INCONCLUSIVE, [f"no cloud pairs closer than delta={delta}"])
        branches = np.asarray(self.model.branch_indices(spread))
        words = {n: [list(rng.choice(branches, size=n)) for _ in range(len(pairs))] for n in range(1, n_max + 1)}

        K_by_n, K_exp, K_derivative = {}, 0.0, 0.0
        for n in range(1, n_max + 1):
            K_n = 0.0
            for (i, j), word in zip(pairs, words[n]):
                w1, w2 = complex(cloud.points[i]), complex(cloud.points[j])
                separation = abs(w1 - w2)
                try:
                    _, s1, d1 = self._pull(w1, word, self.params)
                    _, s2, d2 = self._pull(w2, word, self.params)
                except BranchUndefinedError:
                    continue
                K_n = max(K_n, abs(s1 - s2) / (self.params.t * separation))
                K_derivative = max(K_derivative, abs(d1 - d2) / separation)
                K_exp = max(K_exp, abs(np.exp(s1) - np.exp(s2)) / (np.exp(s1) * separation))
            K_by_n[n] = K_n
        K = max(K_by_n.values())
        half = K_by_n[max(1, n_max // 2)]
        stable = abs(K_by_n[n_max] - half) <= stability * max(half, K_by_n[n_max], 1e-300)
        t = self.params.t
        # e^|x - y| e^x |x - y| bound with |x - y| <= tK|w1 - w2| < tK delta
        exp_bound = t * np.exp(t * K * delta) * K
        exp_ok = K_exp <= exp_bound * (1 + 1e-9)

        linear = {}
        for t_value in t_values or []:
            scaled = self.params.with_t(t_value)
            K_t = 0.0
            for (i, j), word in zip(pairs, words[n_max]):
                w1, w2 = complex(cloud.points[i]), complex(cloud.points[j])
                try:
                    K_t = max(K_t, self.ergodic_difference(w1, w2, word, scaled) / abs(w1 - w2))
                except BranchUndefinedError:
                    continue
            linear[str(t_value)] = K_t
        # S_n Phi_t is linear in t, so K_t / t may not depend on t
        per_unit_t = [K_t / float(t_value) for t_value, K_t in linear.items()]
        spread_ratio = 0.0
        if per_unit_t and max(per_unit_t) > 0:
            spread_ratio = (max(per_unit_t) - min(per_unit_t)) / max(per_unit_t)
        linear_ok = spread_ratio <= linear_tol
        return CheckReport(
            lemma_id="distortion",
            samples={"pairs": int(len(pairs)), "n_max": n_max, "delta": delta},
            fitted_constants={
                "K": K,
                "K_by_n": {str(n): value for n, value in K_by_n.items()},
                "K_exponentiated": K_exp,
                "exponentiated_bound": exp_bound,
                "K_derivative_ratio": K_derivative,
                "tK_by_t": linear,
                "tK_spread": spread_ratio,
            },
            tolerance={"stability": stability, "linear_in_t": linear_tol},
            verdict=_verdict(stable and exp_ok and linear_ok),
        )

    def tau_bound_check(self, cloud: JuliaCloud, max_points: int = 200, stability: float = 1.25) -> CheckReport:
        model, params = self.model, self.params
        rng = self._rng()
        points = self._subsample(cloud, max_points, rng)
        gap = params.exponent_gap(model.M) * params.t
        alpha = params.borel_exponent()
        strong, weak, sandwich, moduli_w = [], [], [], []
        for w in points:
            branches = model.preimages(w, self.truncation, params)
            zs = np.asarray([b.z for b in branches])
            weights = np.asarray([b.metric_weight for b in branches])
            strong_ratio = (weights * abs(w) ** gap * np.abs(zs) ** alpha) ** (1 / params.t)
            strong.append(float(strong_ratio.max()))
            weak.append(float((strong_ratio * abs(w) ** (-1 / model.M)).max()))
            moduli_w.append(abs(w))
            fp = np.abs(model.derivative_from_value(zs, np.full(zs.shape, w)))
            simple = fp * np.abs(zs) ** params.tau / abs(w) ** params.tau
            exact = fp * (1 + np.abs(zs) ** params.tau) / (1 + abs(w) ** params.tau)
            ratio = exact / simple
            sandwich.append(float(max(ratio.max(), (1 / ratio).max())))

        strong = np.asarray(strong)
        order = rng.permutation(len(strong))
        batch_a, batch_b = strong[order[::2]], strong[order[1::2]]
        c = float(strong.max())
        c_a = float(batch_a.max())
        c_b = float(batch_b.max()) if batch_b.size else c_a
        split_ok = max(c_a, c_b) / min(c_a, c_b) <= stability
        K_T = model.metric_distortion_constant(params)
        K_T_fit = float(max(sandwich))
        sandwich_ok = K_T_fit <= K_T * (1 + 1e-12)
        c_weak = float(max(weak))
        implied = c * model.T_floor ** (-1 / model.M)
        inside = np.asarray(moduli_w) <= model.R0
        c_inside = float(strong[inside].max()) if inside.any() else 0.0
        inflation_ok = c_inside <= c_weak * model.R0 ** (1 / model.M) * (1 + 1e-12)
        weak_ok = c_weak <= implied * (1 + 1e-12)
        return CheckReport(
            lemma_id="tau_derivative",
            samples={"points": int(len(points))},
            fitted_constants={
                "c": c,
                "c_batches": [c_a, c_b],
                "K_T_tau": K_T_fit,
                "K_T_tau_bound": K_T,
                "c_weak": c_weak,
                "c_weak_implied": implied,
            },
            tolerance={"split_ratio": stability},
            verdict=_verdict(split_ok and sandwich_ok and weak_ok and inflation_ok),
        )

    def basepoint_independence(self, w_pairs: Sequence[tuple[complex, complex]], n_max: int, trend_tol: float = 0.1) -> CheckReport:
        operator = TransferOperator(self.model, self.params, self.truncation, n_jobs=self.n_jobs)
        ratios, slopes = [], []
        for w1, w2 in w_pairs:
            _, tree1 = operator.power_one(w1, n_max)
            _, tree2 = operator.power_one(w2, n_max)
            series = [tree2.level_value(n) / tree1.level_value(n) for n in range(1, n_max + 1)]
            ratios.append(series)
            if n_max >= 3:
                tail = np.log(series[1:])
                slopes.append(float(linregress(np.arange(2, n_max + 1), tail).slope))
        flat = [value for series in ratios for value in series]
        bound = float(max(max(flat), 1 / min(flat))) if flat else 1.0
        ok = all(abs(slope) <= trend_tol for slope in slopes)
        return CheckReport(
            lemma_id="basepoint_independence",
            samples={"pairs": [[[complex(a).real, complex(a).imag], [complex(b).real, complex(b).imag]] for a, b in w_pairs], "n_max": n_max},
            fitted_constants={"ratio_bound": bound, "ratios": ratios, "log_ratio_slopes": slopes},
            tolerance={"trend": trend_tol},
            verdict=_verdict(ok),
        )

    def koebe_check(self, cloud: JuliaCloud, n_max: int = 6, max_points: int = 50, spread: int = 3) -> CheckReport:
        """One-quarter inclusion for inverse branches on D(w, 2 delta) and K1^-n contraction of their derivatives."""
        rng = self._rng()
        expansion = self.expansion_check(cloud, n_max=n_max)
        K1, c1 = expansion.fitted_constants.get("K1"), expansion.fitted_constants.get("c1")
        points = self._subsample(cloud, max_points, rng)
        branches = np.asarray(self.model.branch_indices(spread))
        radius = 2 * self.model.delta
        circle = np.exp(1j * np.linspace(0, 2 * np.pi, 65)[:-1])
        worst_inclusion = np.inf
        contraction = {n: -np.inf for n in range(1, n_max + 1)}
        for w in points:
            for n in range(1, n_max + 1):
                word = list(rng.choice(branches, size=n))
                try:
                    image, _, log_derivative = self._pull(w, word, self.params)
                    boundary = [self._pull(w + radius * e, word, self.params)[0] for e in circle]
                except BranchUndefinedError:
                    continue
                quarter = 0.25 * np.exp(log_derivative) * radius
                worst_inclusion = min(worst_inclusion, float(np.min(np.abs(np.asarray(boundary) - image)) / quarter))
                if image != 0:
                    scaled = log_derivative + np.log(abs(w)) - np.log(abs(image))
                    contraction[n] = max(contraction[n], float(scaled))
        ns = np.asarray([n for n, value in contraction.items() if np.isfinite(value)], dtype=float)
        rate = float(np.exp(-linregress(ns, [contraction[int(n)] for n in ns]).slope)) if ns.size >= 2 else float("nan")
        inclusion_ok = worst_inclusion >= 1 - 1e-9
        contraction_ok = rate > 1
        return CheckReport(
            lemma_id="koebe",
            samples={"points": int(len(points)), "n_max": n_max, "radius": radius},
            fitted_constants={
                "inclusion_margin": worst_inclusion,
                "contraction_rate": rate,
                "max_log_contraction": {str(n): value for n, value in contraction.items()},
                "K1": K1,
                "c1": c1,
            },
            tolerance={"inclusion": 1.0, "contraction_rate": 1.0},
            verdict=_verdict(inclusion_ok and contraction_ok),
            notes=[
                "statement mixes |f_z^-n(w)| with |(f_z^-n)'(w)|; checked in the derivative form "
                "|(f_z^-n)'(w)| |w| / |f_z^-n(w)| <= c1^-1 K1^-n"
            ],
        )

    def transfer_bound_check(self, cloud: JuliaCloud, radii: Sequence[float] = (5.0, 10.0, 20.0, 40.0)) -> CheckReport:
        operator = TransferOperator(self.model, self.params, self.truncation, n_jobs=self.n_jobs)
        constants = operator.fit_tail_constants(cloud, radii=radii, max_points=cloud.size)
        values, tails = operator.evaluate(cloud.points)
        sup_value = float((values + tails).max())
        sup_plain = float(values.max())
        fitted_bound = operator.transfer_norm_bound(constants)
        model_bound = operator.norm_bound
        decay_order = np.argsort(np.abs(cloud.points))
        far = values[decay_order][-max(1, cloud.size // 10):]
        near = values[decay_order][: max(1, cloud.size // 10)]

        seed = cloud.seed
        branches = self.model.preimages(seed, self.truncation, self.params)
        empirical = {}
        ok = sup_value <= fitted_bound * (1 + 1e-9) and sup_plain <= model_bound * (1 + 1e-9)
        for R in radii:
            tail = sum(b.metric_weight for b in branches if abs(b.z) > R)
            bound = operator.tail_bound(R, constants)
            empirical[str(R)] = [tail, bound]
            ok = ok and tail <= bound
        return CheckReport(
            lemma_id="transfer_bound",
            samples={"points": cloud.size},
            fitted_constants={
                "sup_L1": sup_value,
                "fitted_bound": fitted_bound,
                "model_bound": model_bound,
                "c": constants.c,
                "M_alpha": constants.borel_sum,
                "borel_tail": constants.borel_tail,
                "tail_exponent": self.params.tail_exponent(self.model.rho),
                "tail_vs_bound": empirical,
                "mean_L1_near": float(near.mean()),
                "mean_L1_far": float(far.mean()),
            },
            tolerance={},
            verdict=_verdict(ok),
        )

    def run_all(self, cloud: JuliaCloud, n_max: int = 8, t_values: Sequence[float] = DISTORTION_T_VALUES) -> list[CheckReport]:
        points = self._subsample(cloud, 3)
        jobs = [
            (self.borel_check, ([0j, cloud.seed], 2.0)),
            (self.borel_check, ([cloud.seed], 0.5)),
            (self.rapid_growth_check, ()),
            (self.expansion_check, (cloud, n_max)),
            (self.distortion_check, (cloud, n_max, list(t_values))),
            (self.tau_bound_check, (cloud,)),
            (self.basepoint_independence, ([(points[0], points[-1])], n_max)),
            (self.koebe_check, (cloud,)),
            (self.transfer_bound_check, (cloud,)),
        ]
        reports = Parallel(n_jobs=self.n_jobs, prefer="threads")(delayed(job)(*args) for job, args in jobs)
        for report in reports:
            self.log.info("Check %s: %s", report.lemma_id, report.verdict.value)
        return list(reports)
