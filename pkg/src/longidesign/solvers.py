"""
Single-unknown design problems: power, required N, required r and the
minimum detectable effect, plus the percent-scale effect conversions.
"""
import math
import logging
import numpy as np
from scipy.stats import norm
from typing import Iterable, Optional, Tuple, Union

from longidesign.errors import DomainError, UnattainableError
from longidesign.model.schema import (P2_ZERO_TOL, AbsoluteEffect, CmdEffect, CompoundSymmetry,
                                      DesignQuery, EffectSpec, LddEffect,
                                      TimeGrid)
from longidesign.variance_engine import limit_for_query, unit_variance

logger = logging.getLogger(__name__)

R_MAX_DEFAULT = 1000
# keeps reported power inside the open interval (0, 1)
_POWER_EPS = 1e-15


### Effect conversions ###

def effect_coefficient(effect: EffectSpec, grid: TimeGrid) -> float:
    """
    Model coefficient implied by an effect: beta2 = p1 mu00 for CMD and
    gamma3 = p2 p3 mu00 / tau for LDD (with (1 + p1) replacing p2 when p2 = 0).
    """
    if isinstance(effect, AbsoluteEffect):
        return effect.beta
    if isinstance(effect, CmdEffect):
        return effect.p1 * effect.mu00
    tau = grid.tau
    if tau <= 0:
        raise DomainError("an LDD percent effect needs a positive follow-up tau (r >= 1)")
    if abs(effect.p2) < P2_ZERO_TOL:
        return (1 + effect.p1) * effect.p3 * effect.mu00 / tau
    return effect.p2 * effect.p3 * effect.mu00 / tau


def coefficient_to_percent(coef: float, effect: EffectSpec, grid: TimeGrid) -> EffectSpec:
    """
    Inverse of effect_coefficient: re-expresses |coef| on the scale of `effect`
    (p1 for CMD, p3 for LDD with the other percentages held).
    """
    coef = abs(coef)
    if isinstance(effect, AbsoluteEffect):
        return AbsoluteEffect(beta=coef)
    if isinstance(effect, CmdEffect):
        return CmdEffect(p1=coef / abs(effect.mu00), mu00=effect.mu00)
    scale = effect.p2 if abs(effect.p2) >= P2_ZERO_TOL else 1 + effect.p1
    p3 = coef * grid.tau / abs(scale * effect.mu00)
    return LddEffect(p2=effect.p2, p3=p3, mu00=effect.mu00, p1=effect.p1)


def _z(p: float) -> float:
    return float(norm.ppf(p))


def _z_sum(target_power: float, alpha: float) -> float:
    if not 0 < target_power < 1:
        raise DomainError(f"target power must lie in (0, 1), got {target_power}")
    return _z(target_power) + _z(1 - alpha / 2)


### Power and N ###

def power_from_variance(n: float, coef: float, var: float, alpha: float) -> float:
    p = norm.cdf(math.sqrt(n) * abs(coef) / math.sqrt(var) - _z(1 - alpha / 2))
    return float(np.clip(p, _POWER_EPS, 1 - _POWER_EPS))


def power(n: int, query: DesignQuery) -> float:
    """
    Asymptotic power of the two-sided Wald test with n participants.
    Params:
        n: number of participants (>= 2).
        query: complete design context.
    Returns:
        Phi(sqrt(n) |effect| / sqrt(unit variance) - z_{1-alpha/2}).
    """
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    var = unit_variance(query).value
    coef = effect_coefficient(query.effect, query.grid)
    return power_from_variance(n, coef, var, query.alpha)


def power_curve(query: DesignQuery, n_values: Iterable[int]) -> np.ndarray:
    """Power at every n in n_values with one unit-variance evaluation."""
    n_values = np.asarray(list(n_values), dtype=float)
    if np.any(n_values < 2):
        raise DomainError("every n must be >= 2")
    var = unit_variance(query).value
    coef = effect_coefficient(query.effect, query.grid)
    p = norm.cdf(np.sqrt(n_values) * abs(coef) / math.sqrt(var) - _z(1 - query.alpha / 2))
    return np.clip(p, _POWER_EPS, 1 - _POWER_EPS)


def required_n_exact(target_power: float, query: DesignQuery) -> float:
    """N before rounding: unit variance * (z_pi + z_{1-alpha/2})^2 / effect^2."""
    coef = effect_coefficient(query.effect, query.grid)
    if coef == 0:
        raise DomainError("effect is zero; no finite N reaches the target power")
    var = unit_variance(query).value
    return var * _z_sum(target_power, query.alpha) ** 2 / coef ** 2


def required_n(target_power: float, query: DesignQuery) -> int:
    """Smallest integer N (at least 2) whose power meets target_power."""
    return max(2, math.ceil(required_n_exact(target_power, query)))


### Required r ###

def _effect_fixed_in_r(query: DesignQuery) -> bool:
    # an LDD percent effect in fixed_s mode shrinks as tau = s r grows
    return not (isinstance(query.effect, LddEffect) and query.grid.mode == "fixed_s")


def _cmd_cs_required_r(target_power: float, n: int, query: DesignQuery, r_min: int, r_max: int) -> int:
    cov = query.cov
    pq = query.pop.pe * (1 - query.pop.pe)
    coef = effect_coefficient(query.effect, query.grid)
    b = coef ** 2 * n * pq / _z_sum(target_power, query.alpha) ** 2
    plateau = cov.sigma2 * cov.rho
    if b <= plateau:
        limit = plateau / pq
        max_power = power_from_variance(n, coef, limit, query.alpha)
        raise UnattainableError(f"CMD with CS cannot reach power {target_power} with n={n} at any r",
                                max_power, limit)
    root = (cov.sigma2 - b) / (b - plateau)
    logger.debug("CMD/CS required r: continuous root %.6g", root)
    r = max(r_min, math.ceil(root) if root > 0 else 0)
    # step down past any rounding excess in the ceiling
    while r > r_min and power(n, query.with_r(r - 1)) >= target_power:
        r -= 1
    if r > r_max:
        max_power = power(n, query.with_r(r_max))
        raise UnattainableError(f"required r={r} exceeds r_max={r_max}", max_power)
    return r


def required_r(target_power: float, n: int, query: DesignQuery,
               r_min: Optional[int] = None, r_max: int = R_MAX_DEFAULT) -> int:
    """
    Smallest r in [r_min, r_max] whose power with n participants meets target_power.
    The query's own r is ignored.
    Params:
        target_power: power floor.
        n: number of participants.
        query: design context; only grid.mode and grid.horizon are used from the grid.
        r_min: lower bound; defaults to 0 for CMD in fixed_s mode and 1 otherwise.
        r_max: upper bound of the scan.
    Returns:
        The required number of post-baseline measurements.
    Raises:
        UnattainableError carrying the best achievable power.
    """
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    if r_min is None:
        r_min = 0 if query.hyp == "cmd" and query.grid.mode == "fixed_s" else 1
    if query.grid.mode == "fixed_tau":
        r_min = max(r_min, 1)
    if r_min > r_max:
        raise DomainError(f"empty r range [{r_min}, {r_max}]")

    start = query.with_r(r_min)
    pop = query.pop
    if (query.hyp == "cmd" and isinstance(start.cov, CompoundSymmetry)
            and (pop.v_t0 == 0 or pop.rho_e_t0 == 0)
            and start.cov.rho >= 0):
        return _cmd_cs_required_r(target_power, n, start, r_min, r_max)

    coef = effect_coefficient(start.effect, start.grid)
    if _effect_fixed_in_r(start):
        limit = limit_for_query(start)
        if limit.kind == "value":
            max_power = power_from_variance(n, coef, limit.value, query.alpha)
            if max_power < target_power:
                logger.info("required r: limit variance %.6g caps power at %.4f", limit.value, max_power)
                raise UnattainableError(f"power {target_power} is unattainable at n={n} for any r",
                                        max_power, limit.value)

    best = 0.0
    for r in range(r_min, r_max + 1):
        p = power(n, query.with_r(r))
        best = max(best, p)
        if p >= target_power:
            return r
    raise UnattainableError(f"power {target_power} not reached for r in [{r_min}, {r_max}]", best)


### MDE and dropout ###

def min_detectable_effect(target_power: float, n: int, query: DesignQuery) -> EffectSpec:
    """
    Smallest |effect| detectable with target_power and n participants, on the
    scale of the query's effect (p1 for CMD, p3 for LDD, beta for absolute).
    """
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    var = unit_variance(query).value
    coef = math.sqrt(var * _z_sum(target_power, query.alpha) ** 2 / n)
    return coefficient_to_percent(coef, query.effect, query.grid)


def mde_percent(effect: EffectSpec) -> float:
    """The detectable percentage carried by an MDE result (p1, p3 or beta)."""
    if isinstance(effect, CmdEffect):
        return effect.p1
    if isinstance(effect, LddEffect):
        return effect.p3
    return effect.beta


def inflate_for_dropout(n: int, f: float) -> int:
    if not 0 <= f < 1:
        raise DomainError(f"dropout fraction must lie in [0, 1), got {f}")
    # round away float noise before the ceiling, e.g. 100/0.8
    return math.ceil(round(n / (1 - f), 9))


### Fixed-tau r = 1 vs r = 2 ###

def r1_r2_condition(sigma: Union[np.ndarray, Tuple]) -> Tuple[float, float]:
    """
    Both sides of the covariance identity under which LDD power with a fixed tau
    is the same at r = 1 and r = 2. `sigma` is the 3 x 3 covariance at times 0, tau/2, tau.
    Returns:
        (sigma[0,0] - sigma[2,2], 2 (sigma[0,1] - sigma[1,2])).
    """
    m = np.asarray(sigma, dtype=float)
    if m.shape != (3, 3):
        raise DomainError(f"expected a 3 x 3 covariance, got shape {m.shape}")
    return float(m[0, 0] - m[2, 2]), float(2 * (m[0, 1] - m[1, 2]))
