import math
import numpy as np
import pytest

from longidesign.covariance import cs_inverse_sums_closed
from longidesign.errors import DomainError, QuadratureError
from longidesign.model.schema import (AbsoluteEffect, CompoundSymmetry, DampedExponential, PopulationSpec,
                                      RandomSlopes, RsRawParams, TimeGrid)
from longidesign.variance_engine import (closed_form_variance, cs_ldd_variance_vt0, expected_information,
                                         group_t0_moments,
                                         limit_for_query, rs_closed_variance, unit_variance, var_bw,
                                         var_cmd, var_ldd, var_limit_r_inf, var_rs_numeric)

PQ = 0.79 * 0.21


def _inverse_corner(query):
    return float(np.linalg.inv(expected_information(query))[-1, -1])


class TestSumFormulas:
    """Test suite for the CMD, LDD and between/within formulas on inverse sums."""

    def test_cmd_without_time_spread(self):
        """Test that CMD reduces to 1/(pq s0) when V(t0) = 0."""
        sums = cs_inverse_sums_closed(0.3214, 0.857, 6)
        uv = var_cmd(sums, 3.0, PopulationSpec(pe=0.79))
        assert uv.value == pytest.approx(1 / (PQ * sums.s0))
        assert uv.method == "closed-form"

    def test_cmd_uncorrelated_time_spread(self):
        """Test that V(t0) > 0 with rho_e_t0 = 0 leaves CMD unchanged."""
        sums = cs_inverse_sums_closed(0.3214, 0.857, 6)
        base = var_cmd(sums, 3.0, PopulationSpec(pe=0.79)).value
        assert var_cmd(sums, 3.0, PopulationSpec(pe=0.79, v_t0=100.0)).value == pytest.approx(base)

    def test_cmd_pilot_value(self):
        """Test the pilot CS CMD unit variance."""
        sums = cs_inverse_sums_closed(0.3214, 0.857, 6)
        expected = 0.3214 * (1 + 6 * 0.857) / (7 * PQ)
        assert var_cmd(sums, 3.0, PopulationSpec(pe=0.79)).value == pytest.approx(expected, rel=1e-12)

    def test_ldd_pilot_value(self):
        """Test the pilot CS LDD unit variance."""
        sums = cs_inverse_sums_closed(0.3214, 0.857, 6)
        expected = 12 * 0.3214 * (1 - 0.857) / (PQ * 9 * 6 * 7 * 8)
        assert var_ldd(sums, 3.0, PopulationSpec(pe=0.79)).value == pytest.approx(expected, rel=1e-10)
        assert expected == pytest.approx(1.09935e-3, rel=1e-4)

    def test_bw_ignores_time_spread(self):
        """Test that the between/within variance equals LDD at V(t0) = 0."""
        sums = cs_inverse_sums_closed(1.0, 0.5, 4)
        spread = PopulationSpec(pe=0.5, v_t0=10.0, rho_e_t0=0.4)
        assert var_bw(sums, 2.0, spread).value == pytest.approx(var_ldd(sums, 2.0, PopulationSpec(pe=0.5)).value)

    @pytest.mark.parametrize("v_t0,rho_e", [(0.0, 0.0), (100.0, 0.0), (25.0, 0.6)])
    def test_cs_ldd_explicit_form(self, v_t0, rho_e):
        """Test the explicit CS LDD form against the sum formula."""
        pop = PopulationSpec(pe=0.79, v_t0=v_t0, rho_e_t0=rho_e)
        sums = cs_inverse_sums_closed(0.3214, 0.857, 6)
        assert cs_ldd_variance_vt0(0.3214, 0.857, 6, 3.0, pop) == pytest.approx(
            var_ldd(sums, 3.0, pop).value, rel=1e-10)


class TestDispatcher:
    """Test suite for unit_variance routing and exact agreement across paths."""

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    @pytest.mark.parametrize("v_t0,rho_e", [(0.0, 0.0), (100.0, 0.0), (100.0, 0.3)])
    def test_cs_matches_information_matrix(self, make_query, pilot_cs, hyp, v_t0, rho_e):
        """Test the closed formulas against the inverted expected information."""
        query = make_query(pilot_cs, hyp=hyp, v_t0=v_t0, rho_e_t0=rho_e)
        assert unit_variance(query).value == pytest.approx(_inverse_corner(query), rel=1e-9)

    def test_dex_generic_matches_information(self, make_query, pilot_dex):
        """Test the DEX matrix path against the inverted expected information."""
        query = make_query(pilot_dex, v_t0=100.0, rho_e_t0=0.2)
        uv = unit_variance(query)
        assert uv.method == "generic-matrix"
        assert uv.value == pytest.approx(_inverse_corner(query), rel=1e-9)

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    def test_dex_theta_zero_equals_cs(self, make_query, hyp):
        """Test that DEX with theta = 0 equals CS."""
        dex = make_query(DampedExponential(sigma2=0.5, rho=0.6, theta=0.0), hyp=hyp)
        cs = make_query(CompoundSymmetry(sigma2=0.5, rho=0.6), hyp=hyp)
        assert unit_variance(dex).value == pytest.approx(unit_variance(cs).value, rel=1e-12)

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    def test_rs_closed_matches_information(self, make_query, pilot_rs, hyp):
        """Test the RS closed form against the inverted expected information at V(t0) = 0."""
        query = make_query(pilot_rs, hyp=hyp)
        uv = unit_variance(query)
        assert uv.method == "closed-form"
        assert uv.value == pytest.approx(_inverse_corner(query), rel=1e-9)

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    def test_rs_without_slope_variance_is_cs(self, make_query, hyp):
        """Test that RS with no slope variance reduces to CS."""
        rs = RandomSlopes(params=RsRawParams(sigma_w2=0.4, sigma_b0_2=0.6, sigma_b1_2=0.0, sigma_b0b1=0.0))
        cs = CompoundSymmetry(sigma2=1.0, rho=0.6)
        assert unit_variance(make_query(rs, hyp=hyp)).value == pytest.approx(
            unit_variance(make_query(cs, hyp=hyp)).value, rel=1e-10)

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    def test_rs_quadrature_exact_without_slope_variance(self, make_query, hyp):
        """Test that quadrature reproduces CS when Sigma does not depend on t0."""
        rs = RandomSlopes(params=RsRawParams(sigma_w2=0.4, sigma_b0_2=0.6, sigma_b1_2=0.0, sigma_b0b1=0.0))
        cs = CompoundSymmetry(sigma2=1.0, rho=0.6)
        kwargs = dict(hyp=hyp, v_t0=50.0, rho_e_t0=0.4)
        uv = unit_variance(make_query(rs, **kwargs))
        assert uv.method == "quadrature"
        assert uv.value == pytest.approx(unit_variance(make_query(cs, **kwargs)).value, rel=1e-9)

    def test_rs_quadrature_converges(self, pilot_rs_raw):
        """Test that pilot RS with V(t0) = 100 converges within the node cap."""
        grid = TimeGrid(r=6, horizon=3.0)
        uv = var_rs_numeric(pilot_rs_raw, grid, PopulationSpec(pe=0.79, v_t0=100.0), "ldd")
        closed = rs_closed_variance(pilot_rs_raw, grid, PopulationSpec(pe=0.79), "ldd")
        assert uv.method == "quadrature"
        assert uv.value < closed.value

    def test_rs_quadrature_node_cap(self, pilot_rs_raw):
        """Test that a node cap with no room to refine raises QuadratureError."""
        grid = TimeGrid(r=6, horizon=3.0)
        with pytest.raises(QuadratureError) as exc:
            var_rs_numeric(pilot_rs_raw, grid, PopulationSpec(pe=0.79, v_t0=100.0), "ldd", nodes=40, max_nodes=40)
        assert exc.value.nodes == 40

    def test_closed_form_availability(self, make_query, pilot_cs, pilot_dex, pilot_rs):
        """Test which queries have a closed expression."""
        assert closed_form_variance(make_query(pilot_cs, v_t0=100.0)).value == pytest.approx(
            unit_variance(make_query(pilot_cs, v_t0=100.0)).value)
        assert closed_form_variance(make_query(pilot_rs)).method == "closed-form"
        assert closed_form_variance(make_query(pilot_dex)) is None
        assert closed_form_variance(make_query(pilot_rs, v_t0=100.0)) is None

    def test_ldd_needs_repeated_measure(self, make_query, pilot_cs):
        """Test that LDD at r = 0 is a domain error."""
        with pytest.raises(DomainError):
            unit_variance(make_query(pilot_cs, r=0))

    def test_negative_rho_rejected(self, make_query):
        """Test that the solvers reject a negative CS correlation."""
        with pytest.raises(DomainError):
            unit_variance(make_query(CompoundSymmetry(sigma2=1.0, rho=-0.2)))

    def test_group_moments(self):
        """Test that the group means centre t0 and the mixture variance is V(t0)."""
        pop = PopulationSpec(pe=0.3, v_t0=16.0, rho_e_t0=0.5)
        m0, m1, w = group_t0_moments(pop)
        assert 0.7 * m0 + 0.3 * m1 == pytest.approx(0.0, abs=1e-12)
        assert w + 0.7 * m0 ** 2 + 0.3 * m1 ** 2 == pytest.approx(16.0)


class TestLimits:
    """Test suite for the unit variance as r grows."""

    def test_cs_cmd_plateau(self, make_query, pilot_cs):
        """Test the CS CMD plateau and convergence towards it."""
        limit = var_limit_r_inf(pilot_cs, "cmd", "fixed_s", PopulationSpec(pe=0.79), 3.0)
        assert limit.kind == "value"
        assert limit.value == pytest.approx(0.3214 * 0.857 / PQ)
        far = unit_variance(make_query(pilot_cs, hyp="cmd", r=10000)).value
        assert far == pytest.approx(limit.value, rel=1e-3)

    def test_cs_ldd_zero(self, pilot_cs):
        """Test that the CS LDD variance vanishes."""
        assert var_limit_r_inf(pilot_cs, "ldd", "fixed_tau", PopulationSpec(pe=0.79), 18.0).kind == "zero"

    def test_dex_intermediate_theta_has_no_limit(self, pilot_dex):
        """Test that DEX with 0 < theta < 1 has no closed limit."""
        assert var_limit_r_inf(pilot_dex, "ldd", "fixed_tau", PopulationSpec(pe=0.79), 18.0).kind == "none"

    def test_ar1_fixed_s_zero(self):
        """Test that AR(1) with fixed spacing has a zero limit."""
        ar1 = DampedExponential(sigma2=1.0, rho=0.8, theta=1.0)
        assert var_limit_r_inf(ar1, "cmd", "fixed_s", PopulationSpec(pe=0.5), 1.0).kind == "zero"

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    @pytest.mark.parametrize("v_t0,rho_e", [(0.0, 0.0), (20.0, 0.5)])
    def test_ar1_fixed_tau_convergence(self, make_query, hyp, v_t0, rho_e):
        """Test that AR(1) with a fixed follow-up approaches its closed limit."""
        ar1 = DampedExponential(sigma2=1.0, rho=0.8, theta=1.0)
        query = make_query(ar1, hyp=hyp, r=4000, mode="fixed_tau", horizon=6.0, pe=0.5,
                           v_t0=v_t0, rho_e_t0=rho_e, effect=AbsoluteEffect(beta=0.1))
        limit = limit_for_query(query)
        assert limit.kind == "value"
        assert unit_variance(query).value == pytest.approx(limit.value, rel=5e-3)

    def test_ar1_cmd_limit_value(self):
        """Test the AR(1) CMD limit without time spread."""
        ar1 = DampedExponential(sigma2=1.0, rho=0.8, theta=1.0)
        limit = var_limit_r_inf(ar1, "cmd", "fixed_tau", PopulationSpec(pe=0.5), 6.0)
        assert limit.value == pytest.approx(2 / (0.25 * (2 - 6 * math.log(0.8))))

    def test_rs_limits(self, pilot_rs, pilot_rs_raw):
        """Test the RS plateaus for CMD and LDD."""
        pop = PopulationSpec(pe=0.79)
        cmd = var_limit_r_inf(pilot_rs, "cmd", "fixed_tau", pop, 18.0)
        ldd = var_limit_r_inf(pilot_rs, "ldd", "fixed_tau", pop, 18.0)
        raw = pilot_rs_raw
        assert cmd.value == pytest.approx((raw.sigma_b0_2 - raw.sigma_b0b1 ** 2 / raw.sigma_b1_2) / PQ)
        assert ldd.value == pytest.approx(raw.sigma_b1_2 / PQ)

    def test_rs_ldd_convergence(self, make_query, pilot_rs):
        """Test that the RS LDD variance approaches the slope plateau."""
        query = make_query(pilot_rs, r=3000, mode="fixed_tau", horizon=18.0)
        assert unit_variance(query).value == pytest.approx(limit_for_query(query).value, rel=1e-2)

    def test_rs_with_time_spread_has_no_limit(self, pilot_rs):
        """Test that RS with V(t0) > 0 has no closed limit."""
        assert var_limit_r_inf(pilot_rs, "ldd", "fixed_s", PopulationSpec(pe=0.79, v_t0=100.0), 3.0).kind == "none"

    @pytest.mark.parametrize("mode,horizon", [("fixed_tau", 18.0), ("fixed_s", 3.0)])
    def test_rs_cmd_convergence(self, make_query, pilot_rs, mode, horizon):
        """Test that the RS CMD variance at r = 10^4 is within 1% of the intercept plateau."""
        query = make_query(pilot_rs, hyp="cmd", r=10_000, mode=mode, horizon=horizon)
        limit = limit_for_query(query)
        assert limit.kind == "value"
        assert unit_variance(query).value == pytest.approx(limit.value, rel=1e-2)


class TestInvariants:
    """Test suite for structural properties of the unit variance."""

    @pytest.fixture(params=["pilot_cs", "pilot_dex", "pilot_rs"])
    def pilot_cov(self, request):
        return request.getfixturevalue(request.param)

    @pytest.mark.parametrize("hyp", ["cmd", "ldd", "bw"])
    @pytest.mark.parametrize("v_t0", [0.0, 100.0])
    def test_exposure_prevalence_scaling(self, make_query, pilot_cov, hyp, v_t0):
        """Test that the variance scales by 1/(pe(1-pe)) when t0 is independent of exposure."""
        balanced = unit_variance(make_query(pilot_cov, hyp=hyp, pe=0.5, v_t0=v_t0)).value
        skewed = unit_variance(make_query(pilot_cov, hyp=hyp, pe=0.2, v_t0=v_t0)).value
        assert skewed == pytest.approx(balanced * 0.25 / (0.2 * 0.8), rel=1e-9)

    @pytest.mark.parametrize("rho_e", [0.0, 0.3])
    def test_ldd_non_increasing_in_time_spread(self, make_query, pilot_cs, pilot_dex, rho_e):
        """Test that spreading baseline times never raises the LDD variance."""
        for cov in (pilot_cs, pilot_dex):
            values = [unit_variance(make_query(cov, v_t0=v, rho_e_t0=rho_e if v > 0 else 0.0)).value
                      for v in (0.0, 25.0, 100.0, 400.0)]
            assert all(b <= a for a, b in zip(values, values[1:]))
            assert values[-1] < values[0]

    def test_rs_ldd_non_increasing_in_time_spread(self, make_query, pilot_rs):
        """Test that spreading baseline times never raises the RS LDD variance."""
        values = [unit_variance(make_query(pilot_rs, v_t0=v)).value for v in (0.0, 25.0, 64.0, 100.0)]
        assert all(b <= a * (1 + 1e-8) for a, b in zip(values, values[1:]))
        assert values[-1] < values[0]

    @pytest.mark.parametrize("hyp", ["cmd", "ldd"])
    @pytest.mark.parametrize("rho_e", [0.2, 0.6])
    def test_rs_sign_of_exposure_time_correlation(self, pilot_rs_raw, hyp, rho_e):
        """Test that with balanced exposure, flipping the group t0 means leaves the RS variance unchanged."""
        grid = TimeGrid(r=6, horizon=3.0)
        plus = var_rs_numeric(pilot_rs_raw, grid, PopulationSpec(pe=0.5, v_t0=100.0, rho_e_t0=rho_e), hyp)
        minus = var_rs_numeric(pilot_rs_raw, grid, PopulationSpec(pe=0.5, v_t0=100.0, rho_e_t0=-rho_e), hyp)
        assert minus.value == pytest.approx(plus.value, rel=1e-10)

    @pytest.mark.parametrize("nodes", [20, 40, 80])
    def test_rs_quadrature_stable_under_doubling(self, make_query, pilot_rs, nodes):
        """Test that doubling the starting node count moves the result by less than 1e-8."""
        query = make_query(pilot_rs, v_t0=100.0, rho_e_t0=0.3)
        quad = dict(max_nodes=1280, rel_tol=1e-10)
        coarse = unit_variance(query, nodes=nodes, **quad).value
        fine = unit_variance(query, nodes=2 * nodes, **quad).value
        assert abs(fine - coarse) / fine < 1e-8
