"""
Unit variance c' Sigma_B c of the exposure-effect estimator.

Sigma_B = (E[X' Sigma^-1 X])^-1 with c picking the last coefficient: the
exposure indicator under CMD and the exposure x time interaction under LDD
and the between/within (bw) model. Baseline time t0 is centred at zero.
"""
import math
import logging
import numpy as np
from typing import Optional, Tuple

from longidesign.covariance import (covariance_sums, random_effects_matrix, rs_raw,
                                    spd_inverse)
from longidesign.errors import DomainError, InfiniteVarianceError, QuadratureError
from longidesign.model.schema import (CompoundSymmetry, CovarianceSpec, DampedExponential,
                                      DesignQuery, GridMode, Hypothesis, LimitVariance,
                                      PopulationSpec, RandomSlopes, RsRawParams, SumTriple,
                                      TimeGrid, UnitVariance)

logger = logging.getLogger(__name__)

# Gauss-Hermite settings for RS with V(t0) > 0; the CLI overrides them from the defaults file
QUADRATURE = {"nodes": 40, "max_nodes": 320, "rel_tol": 1e-8}


def set_quadrature_defaults(nodes: Optional[int] = None, max_nodes: Optional[int] = None,
                            rel_tol: Optional[float] = None):
    for key, value in (("nodes", nodes), ("max_nodes", max_nodes), ("rel_tol", rel_tol)):
        if value is not None:
            QUADRATURE[key] = value


def _pq(pop: PopulationSpec) -> float:
    return pop.pe * (1 - pop.pe)


def _unit(value: float, method: str) -> UnitVariance:
    if not np.isfinite(value) or value <= 0:
        raise InfiniteVarianceError(f"unit variance is not finite and positive ({value})")
    return UnitVariance(value=float(value), method=method)


### Formulas on the inverse sums (same Sigma for every subject) ###

def var_cmd(sums: SumTriple, s: float, pop: PopulationSpec, method: str = "closed-form") -> UnitVariance:
    """
    CMD unit variance. Reduces to 1/(pe(1-pe) s0) when V(t0) = 0 or rho_e_t0 = 0.
    """
    pq = _pq(pop)
    if pq * sums.s0 <= 0:
        raise InfiniteVarianceError("pe(1-pe)*s0 is zero")
    if pop.v_t0 == 0 or pop.rho_e_t0 == 0:
        return _unit(1 / (pq * sums.s0), method)
    sd = s ** 2 * sums.det_a
    s0_sq_v = sums.s0 ** 2 * pop.v_t0
    value = (sd + s0_sq_v) / (pq * sums.s0 * (sd + s0_sq_v * (1 - pop.rho_e_t0 ** 2)))
    return _unit(value, method)


def var_ldd(sums: SumTriple, s: float, pop: PopulationSpec, method: str = "closed-form") -> UnitVariance:
    """LDD unit variance: s0 / (pe(1-pe)[s^2 det(A) + (1 - rho_e_t0^2) V(t0) s0^2])."""
    denom = _pq(pop) * (s ** 2 * sums.det_a + (1 - pop.rho_e_t0 ** 2) * pop.v_t0 * sums.s0 ** 2)
    if denom <= 0:
        raise InfiniteVarianceError("slope is not identifiable: det(A) = 0 with no spread in t0")
    return _unit(sums.s0 / denom, method)


def var_bw(sums: SumTriple, s: float, pop: PopulationSpec, method: str = "closed-form") -> UnitVariance:
    """Between/within model: the LDD formula with V(t0) set to zero."""
    denom = _pq(pop) * s ** 2 * sums.det_a
    if denom <= 0:
        raise InfiniteVarianceError("slope is not identifiable: det(A) = 0")
    return _unit(sums.s0 / denom, method)


_SUM_FORMULAS = {"cmd": var_cmd, "ldd": var_ldd, "bw": var_bw}


def cs_ldd_variance_vt0(sigma2: float, rho: float, r: int, s: float, pop: PopulationSpec) -> float:
    """Explicit CS form of the LDD unit variance including V(t0)."""
    num = 12 * sigma2 * (1 - rho) * (1 + r * rho)
    den = _pq(pop) * (r + 1) * (r * (r + 2) * (1 + r * rho) * s ** 2
                                 + 12 * (1 - rho) * (1 - pop.rho_e_t0 ** 2) * pop.v_t0)
    return num / den


### Random slopes ###

def rs_closed_variance(raw: RsRawParams, grid: TimeGrid, pop: PopulationSpec, hyp: Hypothesis) -> UnitVariance:
    """
    RS unit variance when every subject starts at the same time (V(t0) = 0).
    """
    pq = _pq(pop)
    r, s = grid.r, grid.s
    if hyp in ("ldd", "bw"):
        if r < 1:
            raise DomainError("LDD needs at least one repeated measure")
        return _unit((12 * raw.sigma_w2 / (s ** 2 * r * (r + 1) * (r + 2)) + raw.sigma_b1_2) / pq,
                     "closed-form")
    if r == 0:
        return _unit((raw.sigma_b0_2 + raw.sigma_w2) / pq, "closed-form")
    q1 = 12 * raw.sigma_w2 / (r * (r + 1) * (r + 2) * s ** 2)
    q0 = 2 * raw.sigma_w2 * (2 * r + 1) / ((r + 1) * (r + 2))
    q01 = 6 * raw.sigma_w2 / ((r + 1) * (r + 2) * s)
    value = (raw.sigma_b0_2 + q0) - (raw.sigma_b0b1 - q01) ** 2 / (q1 + raw.sigma_b1_2)
    return _unit(value / pq, "closed-form")


def group_t0_moments(pop: PopulationSpec) -> Tuple[float, float, float]:
    """
    Returns (mean t0 among unexposed, mean t0 among exposed, common within-group variance)
    for t0 centred at zero overall.
    """
    root_v = math.sqrt(pop.v_t0)
    m1 = pop.rho_e_t0 * root_v * math.sqrt((1 - pop.pe) / pop.pe)
    m0 = -pop.rho_e_t0 * root_v * math.sqrt(pop.pe / (1 - pop.pe))
    return m0, m1, pop.v_t0 * (1 - pop.rho_e_t0 ** 2)


def rs_subject_information(raw: RsRawParams, s: float, r: int, t0: np.ndarray) -> np.ndarray:
    """
    Z' Sigma(t0)^-1 Z for each baseline time in t0, shape (len(t0), 2, 2).
    Uses Z' (sigma_w2 I + Z D Z')^-1 Z = (sigma_w2 I + Z'Z D)^-1 Z'Z.
    """
    t0 = np.atleast_1d(np.asarray(t0, dtype=float))
    n = r + 1
    s1 = r * (r + 1) / 2
    s2 = r * (r + 1) * (2 * r + 1) / 6
    ztz = np.empty((t0.size, 2, 2))
    ztz[:, 0, 0] = n
    ztz[:, 0, 1] = ztz[:, 1, 0] = n * t0 + s * s1
    ztz[:, 1, 1] = n * t0 ** 2 + 2 * s * t0 * s1 + s ** 2 * s2
    lhs = raw.sigma_w2 * np.eye(2) + ztz @ random_effects_matrix(raw)
    return np.linalg.solve(lhs, ztz)


def _rs_group_expectations(raw: RsRawParams, grid: TimeGrid, pop: PopulationSpec,
                           nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    m0, m1, w = group_t0_moments(pop)
    if w == 0:
        return (rs_subject_information(raw, grid.s, grid.r, [m0])[0],
                rs_subject_information(raw, grid.s, grid.r, [m1])[0])
    x, wt = np.polynomial.hermite.hermgauss(nodes)
    wt = wt / math.sqrt(math.pi)
    scale = math.sqrt(2 * w)
    e0 = np.einsum("i,ijk->jk", wt, rs_subject_information(raw, grid.s, grid.r, m0 + scale * x))
    e1 = np.einsum("i,ijk->jk", wt, rs_subject_information(raw, grid.s, grid.r, m1 + scale * x))
    return e0, e1


def _assemble_information(e0: np.ndarray, e1: np.ndarray, pe: float, hyp: Hypothesis) -> np.ndarray:
    """
    Expected information for regressors (1, t, k, k t) under LDD or (1, t, k) under CMD,
    given the per-group expectations of Z' Sigma^-1 Z.
    """
    em = (1 - pe) * e0 + pe * e1
    ekm = pe * e1
    if hyp == "cmd":
        return np.array([
            [em[0, 0], em[0, 1], ekm[0, 0]],
            [em[1, 0], em[1, 1], ekm[1, 0]],
            [ekm[0, 0], ekm[0, 1], ekm[0, 0]],
        ])
    return np.block([[em, ekm], [ekm, ekm]])


def var_rs_numeric(raw: RsRawParams, grid: TimeGrid, pop: PopulationSpec, hyp: Hypothesis,
                   nodes: Optional[int] = None, max_nodes: Optional[int] = None,
                   rel_tol: Optional[float] = None) -> UnitVariance:
    """
    RS unit variance with V(t0) > 0, assuming t0 is normal within each exposure group
    with a common variance. Gauss-Hermite nodes double until successive estimates agree.
    Params:
        raw: random-effects variance components.
        grid: time grid.
        pop: exposure prevalence and baseline-time distribution.
        hyp: "cmd" or "ldd".
        nodes: initial node count per exposure group.
        max_nodes: node cap.
        rel_tol: relative agreement required between successive node counts.
    Returns:
        UnitVariance with method "quadrature".
    """
    if hyp == "bw":
        raise DomainError("the between/within variance ignores V(t0); use rs_closed_variance")
    if hyp == "ldd" and grid.r < 1:
        raise DomainError("LDD needs at least one repeated measure")
    nodes = nodes or QUADRATURE["nodes"]
    max_nodes = max_nodes or QUADRATURE["max_nodes"]
    rel_tol = rel_tol or QUADRATURE["rel_tol"]

    def estimate(k: int) -> float:
        e0, e1 = _rs_group_expectations(raw, grid, pop, k)
        return float(spd_inverse(_assemble_information(e0, e1, pop.pe, hyp))[-1, -1])

    current = estimate(nodes)
    rel_change = float("inf")
    while 2 * nodes <= max_nodes:
        nodes *= 2
        refined = estimate(nodes)
        rel_change = abs(refined - current) / abs(refined)
        logger.debug("RS quadrature: %d nodes, estimate %.12g, relative change %.3e", nodes, refined, rel_change)
        current = refined
        if rel_change <= rel_tol:
            return _unit(current, "quadrature")
    raise QuadratureError("RS quadrature did not converge", rel_change, nodes)


### Expected information (used by the oracle and for cross-checks) ###

def expected_information(query: DesignQuery, nodes: Optional[int] = None) -> np.ndarray:
    """
    E[X' Sigma^-1 X] for the query's hypothesis (bw is treated as ldd). For CS and DEX the
    matrix is exact because Z' Sigma^-1 Z is quadratic in t0; RS uses Gauss-Hermite nodes.
    """
    hyp = "cmd" if query.hyp == "cmd" else "ldd"
    grid, pop, cov = query.grid, query.pop, query.cov
    if isinstance(cov, RandomSlopes):
        e0, e1 = _rs_group_expectations(rs_raw(cov), grid, pop, nodes or QUADRATURE["nodes"])
        return _assemble_information(e0, e1, pop.pe, hyp)

    sums = covariance_sums(cov, grid)
    s = grid.s
    m0, m1, w = group_t0_moments(pop)

    def group_m(mean: float) -> np.ndarray:
        off = mean * sums.s0 + s * sums.s1
        corner = (w + mean ** 2) * sums.s0 + 2 * mean * s * sums.s1 + s ** 2 * sums.s2
        return np.array([[sums.s0, off], [off, corner]])

    return _assemble_information(group_m(m0), group_m(m1), pop.pe, hyp)


### r -> infinity ###

def var_limit_r_inf(spec: CovarianceSpec, hyp: Hypothesis, mode: GridMode,
                    pop: PopulationSpec, horizon: float) -> LimitVariance:
    """
    Limit of the unit variance as r grows, with s (fixed_s) or tau (fixed_tau) held.
    A "zero" limit means any power is reachable; "none" means no closed limit is known.
    """
    pq = _pq(pop)
    v, rho_e = pop.v_t0, pop.rho_e_t0
    is_cmd = hyp == "cmd"
    if hyp == "bw":
        v, rho_e = 0.0, 0.0

    if isinstance(spec, DampedExponential) and spec.theta == 0:
        spec = CompoundSymmetry(sigma2=spec.sigma2, rho=spec.rho)

    if isinstance(spec, CompoundSymmetry):
        if not is_cmd or spec.rho == 0:
            return LimitVariance(kind="zero", reason="variance decreases to zero")
        return LimitVariance(kind="value", value=spec.sigma2 * spec.rho / pq,
                             reason="CS plateau sigma2*rho/(pe(1-pe))")

    if isinstance(spec, DampedExponential):
        if spec.theta != 1:
            return LimitVariance(kind="none", reason=f"no closed limit for DEX with theta={spec.theta}")
        if spec.rho == 0 or mode == "fixed_s":
            return LimitVariance(kind="zero", reason="AR(1) correlation vanishes across widening gaps")
        tau, log_rho, sigma2 = horizon, math.log(spec.rho), spec.sigma2
        a = (tau ** 3 + 12 * v * tau) * log_rho ** 2
        b = 6 * (tau ** 2 + 4 * v) * log_rho
        cross = 12 * v * (tau * log_rho - 2) * rho_e ** 2 * log_rho
        if is_cmd:
            value = (2 * sigma2 * (a - b + 12 * tau)
                     / (pq * (2 - tau * log_rho) * (a - cross - b + 12 * tau)))
        else:
            value = 24 * sigma2 * log_rho / (pq * (-a + cross + b - 12 * tau))
        return LimitVariance(kind="value", value=value, reason="AR(1) with fixed follow-up")

    raw = rs_raw(spec)
    if raw.sigma_b1_2 == 0:
        cs = CompoundSymmetry(sigma2=raw.sigma_w2 + raw.sigma_b0_2,
                              rho=raw.sigma_b0_2 / (raw.sigma_w2 + raw.sigma_b0_2))
        return var_limit_r_inf(cs, hyp, mode, pop, horizon)
    if v > 0:
        return LimitVariance(kind="none", reason="RS limit is only known for V(t0) = 0")
    if is_cmd:
        value = (raw.sigma_b0_2 - raw.sigma_b0b1 ** 2 / raw.sigma_b1_2) / pq
        if value <= 0:
            return LimitVariance(kind="zero", reason="perfectly correlated random effects")
        return LimitVariance(kind="value", value=value, reason="RS intercept plateau")
    return LimitVariance(kind="value", value=raw.sigma_b1_2 / pq, reason="RS slope-variance plateau")


### Dispatcher ###

def _check_query(query: DesignQuery):
    cov, hyp = query.cov, query.hyp
    if hyp in ("ldd", "bw") and query.grid.r < 1:
        raise DomainError(f"{hyp.upper()} needs at least one repeated measure (r >= 1)")
    if isinstance(cov, (CompoundSymmetry, DampedExponential)) and cov.rho < 0:
        raise DomainError(f"design solvers require rho >= 0, got {cov.rho}")


def closed_form_variance(query: DesignQuery) -> Optional[UnitVariance]:
    """
    Unit variance from a closed expression, or None when the query has none
    (DEX with 0 < theta < 1, RS with V(t0) > 0).
    """
    _check_query(query)
    grid, pop, cov, hyp = query.grid, query.pop, query.cov, query.hyp
    if isinstance(cov, RandomSlopes):
        if pop.v_t0 == 0 or hyp == "bw":
            return rs_closed_variance(rs_raw(cov), grid, pop, hyp)
        return None
    if isinstance(cov, DampedExponential) and cov.theta not in (0, 1):
        return None
    return _SUM_FORMULAS[hyp](covariance_sums(cov, grid), grid.s, pop)


def unit_variance(query: DesignQuery, nodes: Optional[int] = None, max_nodes: Optional[int] = None,
                  rel_tol: Optional[float] = None) -> UnitVariance:
    """
    Routes a complete query to the cheapest exact path:
    CS and AR(1) closed sums, DEX matrix inversion, RS closed form at V(t0) = 0,
    RS quadrature at V(t0) > 0.
    """
    closed = closed_form_variance(query)
    if closed is not None:
        return closed

    grid, pop, cov, hyp = query.grid, query.pop, query.cov, query.hyp
    if isinstance(cov, RandomSlopes):
        logger.debug("RS with V(t0)=%s: quadrature path", pop.v_t0)
        return var_rs_numeric(rs_raw(cov), grid, pop, hyp, nodes=nodes, max_nodes=max_nodes, rel_tol=rel_tol)
    return _SUM_FORMULAS[hyp](covariance_sums(cov, grid), grid.s, pop, "generic-matrix")


def unit_variance_value(query: DesignQuery, **quad) -> float:
    return unit_variance(query, **quad).value


def limit_for_query(query: DesignQuery) -> Optional[LimitVariance]:
    return var_limit_r_inf(query.cov, query.hyp, query.grid.mode, query.pop, query.grid.horizon)
