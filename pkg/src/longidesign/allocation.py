"""
Optimal (N, r) allocation under COST = N c1 (kappa + r) / kappa.

Maximizing power under a budget and minimizing cost under a power floor share
the same r: the one minimizing (kappa + r) times the unit variance. Closed
rules locate the continuous optimum where one exists and adjacent integers are
compared on the true objective; everything else is an integer scan.
"""
import math
import logging
import pandas as pd
from concurrent.futures import ThreadPoolExecutor
from scipy.optimize import brentq, minimize_scalar
from typing import List, Optional, Tuple

from longidesign.covariance import rs_raw, slope_reliability
from longidesign.errors import DomainError
from longidesign.model.schema import (AbsoluteEffect, AllocationSolution, CompoundSymmetry,
                                      CostSpec, DampedExponential, DesignQuery, RandomSlopes)
from longidesign.solvers import effect_coefficient, power_from_variance, required_n
from longidesign.variance_engine import unit_variance

logger = logging.getLogger(__name__)


def fix_effect_rate(query: DesignQuery) -> DesignQuery:
    """
    Pins a percent effect to its coefficient at the query's own grid, so the
    divergence rate (per time unit) stays the same while r varies.
    """
    if isinstance(query.effect, AbsoluteEffect):
        return query
    coef = effect_coefficient(query.effect, query.grid)
    return query.model_copy(update={"effect": AbsoluteEffect(beta=coef)})


def objective(r: int, kappa: float, query: DesignQuery) -> float:
    """(kappa + r) * unit variance at r. Smaller is better under either constraint."""
    return (kappa + r) * unit_variance(query.with_r(r)).value


def default_r_bounds(query: DesignQuery, r_hi: int) -> Tuple[int, int]:
    lo = 0 if query.hyp == "cmd" and query.grid.mode == "fixed_s" else 1
    return lo, r_hi


def _cs_like(query: DesignQuery) -> Optional[CompoundSymmetry]:
    cov = query.cov
    if isinstance(cov, CompoundSymmetry):
        return cov
    if isinstance(cov, DampedExponential) and cov.theta == 0:
        return CompoundSymmetry(sigma2=cov.sigma2, rho=cov.rho)
    return None


def _ldd_rs_fixed_tau_root(c: float, kappa: float) -> float:
    """
    Stationary points of the fixed-tau LDD/RS objective satisfy kappa = k(r) with
    k(r) = (c (r+1)^2 (r+2)^2 + r (3r + 4)) / (r^2 - 2) for r > sqrt(2).
    Returns the larger root (the local minimum) or 1.0 when k(r) stays above kappa.
    """
    def k_of_r(r: float) -> float:
        return (c * (r + 1) ** 2 * (r + 2) ** 2 + r * (3 * r + 4)) / (r ** 2 - 2)

    lower = math.sqrt(2) + 1e-9
    upper = 10.0
    while k_of_r(upper) <= kappa or k_of_r(upper) < k_of_r(upper / 2):
        upper *= 2
    res = minimize_scalar(k_of_r, bounds=(lower, upper), method="bounded")
    if res.fun > kappa:
        return 1.0
    return brentq(lambda r: k_of_r(r) - kappa, res.x, upper)


def continuous_r_opt(query: DesignQuery, kappa: float) -> Optional[float]:
    """
    Continuous minimizer of the objective for the cases with a closed rule
    (V(t0) = 0 or, for CMD, rho_e_t0 = 0). math.inf means "as large as allowed".
    Returns None when only an integer scan applies.
    """
    pop = query.pop
    cs = _cs_like(query)
    if query.hyp == "cmd":
        if cs is None or not (pop.v_t0 == 0 or pop.rho_e_t0 == 0) or cs.rho < 0:
            return None
        if cs.rho == 0:
            return math.inf
        return math.sqrt((kappa - 1) * (1 - cs.rho) / cs.rho) - 1

    if pop.v_t0 != 0:
        return None
    if isinstance(query.cov, RandomSlopes):
        raw = rs_raw(query.cov)
        if raw.sigma_b1_2 == 0:
            return _cs_rule(query.grid.mode, kappa)
        if query.grid.mode == "fixed_s":
            c_s = raw.sigma_b1_2 * query.grid.horizon ** 2 / (12 * raw.sigma_w2)

            def slope(r: float) -> float:
                num = -2 * kappa - 6 * kappa * r - 3 * r ** 2 - 3 * kappa * r ** 2 - 2 * r ** 3
                return c_s + num / (r ** 2 * (r + 1) ** 2 * (r + 2) ** 2)

            lo, hi = 1.0, 2.0
            if slope(lo) >= 0:
                return lo
            while slope(hi) < 0:
                hi *= 2
            return brentq(slope, lo, hi)
        if kappa <= 3:
            return 1.0
        c = raw.sigma_b1_2 * query.grid.horizon ** 2 / (12 * raw.sigma_w2)
        return _ldd_rs_fixed_tau_root(c, kappa)
    if cs is not None:
        return _cs_rule(query.grid.mode, kappa)
    return None


def _cs_rule(mode: str, kappa: float) -> float:
    # fixed s: strictly decreasing; fixed tau: r = 1 unless kappa > 5, then the upper bound may win
    if mode == "fixed_s" or kappa > 5:
        return math.inf
    return 1.0


def _candidates(query: DesignQuery, kappa: float, lo: int, hi: int) -> Optional[List[int]]:
    r_cont = continuous_r_opt(query, kappa)
    if r_cont is None:
        return None
    cands = {lo, hi} if query.hyp in ("ldd", "bw") and query.grid.mode == "fixed_tau" else set()
    if math.isinf(r_cont):
        cands.add(hi)
    else:
        cands.update({math.floor(r_cont), math.ceil(r_cont)})
    return sorted({min(max(r, lo), hi) for r in cands})


def scan_objective(query: DesignQuery, kappa: float, rs: List[int], threads: int = 1) -> List[float]:
    """Objective at every r in rs, optionally across a thread pool; order is preserved."""
    if threads > 1 and len(rs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda r: objective(r, kappa, query), rs))
    return [objective(r, kappa, query) for r in rs]


def optimal_r(query: DesignQuery, kappa: float, r_bounds: Tuple[int, int], threads: int = 1) -> int:
    """
    Integer argmin of the objective over r_bounds; ties go to the smaller r.
    Params:
        query: design context (its r is ignored).
        kappa: first-measurement to follow-up cost ratio.
        r_bounds: inclusive (r_lo, r_hi).
        threads: worker threads for the integer scan.
    """
    lo, hi = r_bounds
    if query.grid.mode == "fixed_tau":
        lo = max(lo, 1)
    if query.hyp in ("ldd", "bw"):
        lo = max(lo, 1)
    if lo > hi:
        raise DomainError(f"empty r range [{lo}, {hi}]")
    if kappa < 1:
        raise DomainError(f"kappa must be >= 1, got {kappa}")

    rs = _candidates(query, kappa, lo, hi)
    if rs is None:
        rs = list(range(lo, hi + 1))
        logger.info("optimal r: scanning %d integers in [%d, %d]", len(rs), lo, hi)
    else:
        logger.info("optimal r: comparing closed-rule candidates %s", rs)
    values = scan_objective(query, kappa, rs, threads)
    best = min(range(len(rs)), key=lambda i: (values[i], rs[i]))
    return rs[best]


def optimal_n(r_opt: int, kappa: float, cost: CostSpec, query: DesignQuery) -> int:
    """
    Budget mode: floor(kappa * COST / (c1 (kappa + r_opt))).
    Power mode: required N at r_opt.
    """
    if cost.mode == "budget":
        # round away float noise before the floor
        n = math.floor(round(kappa * cost.budget / (cost.c1 * (kappa + r_opt)), 9))
        if n < 2:
            raise DomainError(f"budget {cost.budget} affords only {n} participants at r={r_opt}")
        return n
    return required_n(cost.target_power, query.with_r(r_opt))


def solve_allocation(query: DesignQuery, cost: CostSpec, r_bounds: Tuple[int, int],
                     threads: int = 1) -> AllocationSolution:
    """
    Optimal (N, r) under a budget or a power floor.
    Params:
        query: design context; its r only anchors a percent LDD effect.
        cost: per-subject cost, cost ratio and the constraint.
        r_bounds: inclusive (r_lo, r_hi).
    Returns:
        AllocationSolution with achieved power, exact cost and, for RS,
        the slope reliability at r_opt.
    """
    query = fix_effect_rate(query)
    r_opt = optimal_r(query, cost.kappa, r_bounds, threads)
    n_opt = optimal_n(r_opt, cost.kappa, cost, query)
    at_opt = query.with_r(r_opt)
    achieved = power_from_variance(n_opt, at_opt.effect.beta, unit_variance(at_opt).value, query.alpha)

    slope_rel = None
    if isinstance(query.cov, RandomSlopes) and r_opt >= 1:
        slope_rel = slope_reliability(rs_raw(query.cov), query.grid.mode, query.grid.horizon, r_opt)

    solution = AllocationSolution(
        r_opt=r_opt,
        n_opt=n_opt,
        power=achieved,
        cost=cost.total_cost(n_opt, r_opt),
        slope_rel_at_ropt=slope_rel,
        on_bound=r_opt == r_bounds[1],
        mode=cost.mode,
    )
    logger.info("allocation: r=%d N=%d power=%.4f cost=%.2f", r_opt, n_opt, achieved, solution.cost)
    return solution


def allocation_surface(query: DesignQuery, cost: CostSpec, r_bounds: Tuple[int, int]) -> pd.DataFrame:
    """One row per r in r_bounds: N the constraint allows or needs, its power, cost and objective."""
    query = fix_effect_rate(query)
    lo, hi = r_bounds
    if query.grid.mode == "fixed_tau" or query.hyp in ("ldd", "bw"):
        lo = max(lo, 1)
    rows = []
    for r in range(lo, hi + 1):
        at_r = query.with_r(r)
        var = unit_variance(at_r).value
        try:
            n = optimal_n(r, cost.kappa, cost, query)
        except DomainError as e:
            logger.warning("allocation surface: skipping r=%d (%s)", r, e)
            continue
        rows.append({
            "r": r,
            "n": n,
            "power": power_from_variance(n, at_r.effect.beta, var, query.alpha),
            "cost": cost.total_cost(n, r),
            "objective": (cost.kappa + r) * var,
        })
    return pd.DataFrame(rows, columns=["r", "n", "power", "cost", "objective"])
