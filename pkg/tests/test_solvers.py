import numpy as np
import pytest

from longidesign.covariance import build_cs, build_dex, build_rs
from longidesign.errors import DomainError, UnattainableError
from longidesign.model.schema import (AbsoluteEffect, CmdEffect, CompoundSymmetry, LddEffect, RandomSlopes,
                                      RsIntuitiveParams, RsRawParams, TimeGrid)
from longidesign.solvers import (coefficient_to_percent, effect_coefficient, inflate_for_dropout,
                                 mde_percent, min_detectable_effect, power, power_curve, r1_r2_condition,
                                 required_n, required_n_exact, required_r)


@pytest.fixture
def unit_four_query(make_query):
    """CMD at r = 0 with pe = 0.5 and sigma2 = 1: unit variance exactly 4."""
    def _make(beta):
        return make_query(CompoundSymmetry(sigma2=1.0, rho=0.3), hyp="cmd", r=0, pe=0.5,
                          effect=AbsoluteEffect(beta=beta))
    return _make


class TestEffects:
    """Test suite for percent-scale effect conversion."""

    def test_cmd_coefficient(self):
        """Test beta2 = p1 mu00."""
        assert effect_coefficient(CmdEffect(p1=0.1, mu00=3.5086), TimeGrid(r=6, horizon=3.0)) == pytest.approx(0.35086)

    def test_ldd_coefficient_fixed_s(self):
        """Test gamma3 = p2 p3 mu00 / tau with tau = s r."""
        coef = effect_coefficient(LddEffect(p2=-0.182, p3=0.1, mu00=3.5086), TimeGrid(r=6, horizon=3.0))
        assert coef == pytest.approx(-0.182 * 0.1 * 3.5086 / 18)

    def test_ldd_coefficient_without_unexposed_change(self):
        """Test that (1 + p1) replaces p2 when p2 = 0."""
        effect = LddEffect(p2=0.0, p3=0.1, mu00=3.5, p1=0.05)
        grid = TimeGrid(r=3, mode="fixed_tau", horizon=18.0)
        assert effect_coefficient(effect, grid) == pytest.approx(1.05 * 0.1 * 3.5 / 18)

    def test_ldd_p2_zero_requires_p1(self):
        """Test that p1 is required when p2 = 0."""
        with pytest.raises(ValueError):
            LddEffect(p2=0.0, p3=0.1, mu00=3.5)

    def test_coefficient_to_percent_inverts(self):
        """Test that the percent re-expression inverts the coefficient."""
        grid = TimeGrid(r=6, horizon=3.0)
        effect = LddEffect(p2=-0.182, p3=0.1, mu00=3.5086)
        back = coefficient_to_percent(effect_coefficient(effect, grid), effect, grid)
        assert back.p3 == pytest.approx(0.1)


class TestPower:
    """Test suite for asymptotic power."""

    def test_reference_power(self, unit_four_query):
        """Test effect 1, unit variance 4 and N = 16."""
        assert power(16, unit_four_query(1.0)) == pytest.approx(0.5160, abs=1e-4)

    def test_zero_effect_gives_half_alpha(self, unit_four_query):
        """Test that a zero effect has power alpha / 2."""
        assert power(20, unit_four_query(0.0)) == pytest.approx(0.025, abs=1e-12)

    def test_power_increases_with_n(self, make_query, pilot_cs):
        """Test that power is strictly increasing in N."""
        curve = power_curve(make_query(pilot_cs), [50, 100, 200, 400, 800])
        assert np.all(np.diff(curve) > 0)

    def test_power_curve_matches_power(self, make_query, pilot_cs):
        """Test that the vectorized curve equals pointwise power."""
        query = make_query(pilot_cs)
        assert power_curve(query, [300])[0] == pytest.approx(power(300, query))

    def test_power_rejects_small_n(self, make_query, pilot_cs):
        """Test that N < 2 is a domain error."""
        with pytest.raises(DomainError):
            power(1, make_query(pilot_cs))

    def test_power_is_clipped(self, unit_four_query):
        """Test that power stays strictly below one."""
        assert power(10 ** 9, unit_four_query(1.0)) < 1.0


class TestRequiredN:
    """Test suite for sample-size calculation."""

    def test_pilot_ldd_cs(self, make_query, pilot_cs):
        """Test the pilot CS LDD sample size at 90% power."""
        assert required_n(0.9, make_query(pilot_cs)) == 918

    def test_pilot_ldd_cs_with_time_spread(self, make_query, pilot_cs):
        """Test that V(t0) = 100 lowers the pilot sample size."""
        assert required_n(0.9, make_query(pilot_cs, v_t0=100.0)) == 863

    def test_power_at_required_n(self, make_query, pilot_cs):
        """Test that the returned N reaches the target and N - 1 does not."""
        query = make_query(pilot_cs)
        n = required_n(0.9, query)
        assert power(n, query) >= 0.9
        assert power(n - 1, query) < 0.9

    def test_round_trip(self, make_query, pilot_dex):
        """Test N -> power -> N."""
        query = make_query(pilot_dex)
        achieved = power(500, query)
        assert abs(required_n(achieved, query) - 500) <= 1

    def test_zero_effect(self, unit_four_query):
        """Test that a zero effect has no finite N."""
        with pytest.raises(DomainError):
            required_n_exact(0.8, unit_four_query(0.0))

    def test_minimum_of_two(self, unit_four_query):
        """Test that an enormous effect still needs two participants."""
        assert required_n(0.8, unit_four_query(100.0)) == 2

    @pytest.mark.parametrize("n,f,expected", [(100, 0.0, 100), (100, 0.2, 125), (918, 0.3, 1312)])
    def test_inflate_for_dropout(self, n, f, expected):
        """Test dropout inflation N / (1 - f) rounded up."""
        assert inflate_for_dropout(n, f) == expected

    def test_inflate_rejects_total_dropout(self):
        """Test that f = 1 is a domain error."""
        with pytest.raises(DomainError):
            inflate_for_dropout(100, 1.0)


class TestRequiredR:
    """Test suite for the required number of repeated measures."""

    @pytest.fixture
    def cmd_query(self, make_query):
        """CMD/CS tuned so that the continuous root is r = 2.3 at N = 100 and 80% power."""
        def _make(beta):
            return make_query(CompoundSymmetry(sigma2=1.0, rho=0.2), hyp="cmd", r=0, pe=0.5,
                              effect=AbsoluteEffect(beta=beta))
        return _make

    def test_cmd_cs_closed_root(self, cmd_query):
        """Test that a root of 2.3 rounds up to r = 3."""
        query = cmd_query(0.372690)
        r = required_r(0.8, 100, query)
        assert r == 3
        assert power(100, query.with_r(3)) >= 0.8
        assert power(100, query.with_r(2)) < 0.8

    def test_cmd_cs_unattainable(self, make_query):
        """Test that the CS plateau makes a small effect unattainable."""
        query = make_query(CompoundSymmetry(sigma2=1.0, rho=0.5), hyp="cmd", r=0, pe=0.5,
                           effect=AbsoluteEffect(beta=0.1))
        with pytest.raises(UnattainableError) as exc:
            required_r(0.8, 100, query)
        assert exc.value.max_power < 0.8
        assert exc.value.limit_variance == pytest.approx(0.5 / 0.25)

    def test_ldd_cs_scan(self, make_query, pilot_cs):
        """Test that the LDD scan returns the first r meeting the target."""
        query = make_query(pilot_cs, mode="fixed_tau", horizon=18.0, effect=AbsoluteEffect(beta=0.0035))
        r = required_r(0.8, 900, query)
        assert r > 2
        assert power(900, query.with_r(r)) >= 0.8
        assert power(900, query.with_r(r - 1)) < 0.8

    def test_rs_plateau_unattainable(self, make_query, pilot_rs):
        """Test that the RS slope plateau caps power for a fixed follow-up."""
        query = make_query(pilot_rs, mode="fixed_tau", horizon=18.0, effect=AbsoluteEffect(beta=0.0001))
        with pytest.raises(UnattainableError):
            required_r(0.9, 100, query)

    def test_scan_cap(self, make_query, pilot_cs):
        """Test that an r_max below the answer raises with the best power seen."""
        query = make_query(pilot_cs, effect=AbsoluteEffect(beta=0.0005))
        with pytest.raises(UnattainableError) as exc:
            required_r(0.9, 50, query, r_max=3)
        assert exc.value.max_power == pytest.approx(power(50, query.with_r(3)))

    def test_balanced_exposure_needs_fewest(self, make_query, pilot_cs):
        """Test that pe = 0.5 minimizes the required r."""
        def needed(pe):
            query = make_query(pilot_cs, pe=pe, effect=AbsoluteEffect(beta=0.004))
            return required_r(0.8, 300, query)
        assert needed(0.5) <= needed(0.3)
        assert needed(0.5) <= needed(0.7)


class TestMde:
    """Test suite for minimum detectable effects at the pilot size."""

    def test_cmd_cs(self, make_query, pilot_cs):
        """Test CMD/CS detectable percentages at 80% and 90% power."""
        query = make_query(pilot_cs, hyp="cmd", v_t0=100.0)
        assert round(100 * mde_percent(min_detectable_effect(0.8, 133, query))) == 9
        assert round(100 * mde_percent(min_detectable_effect(0.9, 133, query))) == 10

    def test_ldd_cs(self, make_query, pilot_cs):
        """Test LDD/CS detectable percentages at 80% and 90% power."""
        query = make_query(pilot_cs, v_t0=100.0)
        assert round(100 * mde_percent(min_detectable_effect(0.8, 133, query))) == 22
        assert round(100 * mde_percent(min_detectable_effect(0.9, 133, query))) == 25

    def test_mde_is_consistent_with_n(self, make_query, pilot_cs):
        """Test that the required N at the MDE is the N it was computed for."""
        query = make_query(pilot_cs, v_t0=100.0)
        mde = min_detectable_effect(0.8, 133, query)
        assert abs(required_n(0.8, query.model_copy(update={"effect": mde})) - 133) <= 1

    def test_absolute_mde(self, unit_four_query):
        """Test the absolute MDE for unit variance 4."""
        mde = min_detectable_effect(0.5160, 16, unit_four_query(1.0))
        assert mde.beta == pytest.approx(1.0, abs=1e-3)


class TestR1R2Identity:
    """Test suite for the fixed-tau r = 1 / r = 2 covariance identity."""

    def test_cs_satisfies_identity(self):
        """Test that CS satisfies the identity."""
        lhs, rhs = r1_r2_condition(build_cs(1.0, 0.5, 2))
        assert lhs == pytest.approx(rhs)

    def test_dex_satisfies_identity(self):
        """Test that any stationary DEX satisfies the identity."""
        lhs, rhs = r1_r2_condition(build_dex(1.0, 0.8, 0.5, 9.0, 2))
        assert lhs == pytest.approx(rhs, abs=1e-12)

    def test_rs_satisfies_identity(self):
        """Test that random slopes satisfy the identity."""
        raw = RsRawParams(sigma_w2=0.5, sigma_b0_2=1.0, sigma_b1_2=0.1, sigma_b0b1=-0.2)
        lhs, rhs = r1_r2_condition(build_rs(raw, t0=0.0, s=9.0, r=2))
        assert lhs == pytest.approx(rhs)

    def test_shape_check(self):
        """Test that a non 3 x 3 matrix is rejected."""
        with pytest.raises(DomainError):
            r1_r2_condition(np.eye(2))


class TestRequiredRMonotonicity:
    """Test suite for how the required r moves with the covariance parameters."""

    @staticmethod
    def _reliability_rs(rho_t0=0.877, slope_rel=0.36):
        return RandomSlopes(params=RsIntuitiveParams(sigma_t0_2=0.34, rho_t0=rho_t0, rho_b0b1=-0.32,
                                                     slope_rel=slope_rel, r_tilde=6, rel_mode="fixed_s",
                                                     rel_horizon=3.0))

    def test_ldd_cs_decreases_with_rho(self, make_query):
        """Test that a stronger CS correlation never needs more repeated measures for LDD."""
        needed = [required_r(0.8, 200, make_query(CompoundSymmetry(sigma2=0.3214, rho=rho),
                                                  effect=AbsoluteEffect(beta=0.003)))
                  for rho in (0.0, 0.3, 0.5, 0.7, 0.9)]
        assert needed == sorted(needed, reverse=True)
        assert needed[0] > needed[-1]

    def test_ldd_rs_decreases_with_baseline_reliability(self, make_query):
        """Test that a higher baseline reliability never needs more repeated measures for LDD."""
        needed = [required_r(0.8, 500, make_query(self._reliability_rs(rho_t0=rho_t0),
                                                  effect=AbsoluteEffect(beta=0.012)))
                  for rho_t0 in (0.5, 0.7, 0.8, 0.877, 0.95)]
        assert needed == sorted(needed, reverse=True)
        assert needed[0] > needed[-1]

    def test_ldd_rs_increases_with_slope_reliability(self, make_query):
        """Test that a higher slope reliability never needs fewer repeated measures for LDD."""
        needed = [required_r(0.8, 500, make_query(self._reliability_rs(slope_rel=rel),
                                                  effect=AbsoluteEffect(beta=0.0042)))
                  for rel in (0.1, 0.2, 0.36, 0.5)]
        assert needed == sorted(needed)
        assert needed[0] < needed[-1]

    def test_cmd_cs_increases_with_rho(self, make_query):
        """Test that for CMD a stronger CS correlation needs more repeated measures, until none suffice."""
        def needed(rho):
            query = make_query(CompoundSymmetry(sigma2=1.0, rho=rho), hyp="cmd", r=0, pe=0.5,
                               effect=AbsoluteEffect(beta=0.35))
            return required_r(0.8, 100, query)
        values = [needed(rho) for rho in (0.0, 0.1, 0.2, 0.3)]
        assert values == sorted(values)
        assert values[0] < values[-1]
        with pytest.raises(UnattainableError):
            needed(0.45)

    def test_cmd_cs_single_measure_when_effect_is_large(self, make_query):
        """Test that when N pe(1-pe) beta^2 exceeds (z sum)^2 sigma^2, no repeated measure is needed at any rho."""
        for rho in (0.0, 0.5, 0.9):
            query = make_query(CompoundSymmetry(sigma2=1.0, rho=rho), hyp="cmd", r=0, pe=0.5,
                               effect=AbsoluteEffect(beta=0.6))
            assert required_r(0.8, 100, query) == 0
