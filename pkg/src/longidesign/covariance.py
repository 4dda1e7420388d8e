"""
Residual covariance matrices (CS, DEX, RS) and the inverse-covariance sums
that drive every variance formula. Time points are indexed j = 0..r and sit
at t0 + j*s in physical units.
"""
import logging
import numpy as np
from scipy import linalg
from typing import Optional

from longidesign.errors import DecompositionError, DomainError
from longidesign.model.schema import (CompoundSymmetry, CovarianceSpec, DampedExponential,
                                      GridMode, RandomSlopes, RsIntuitiveParams, RsRawParams,
                                      SumTriple, TimeGrid)

logger = logging.getLogger(__name__)


def _check_common(sigma2: float, r: int):
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if r < 0:
        raise DomainError(f"r must be >= 0, got {r}")


def build_cs(sigma2: float, rho: float, r: int) -> np.ndarray:
    """
    Compound symmetry: sigma2 on the diagonal, sigma2*rho elsewhere.
    Params:
        sigma2: residual variance.
        rho: common correlation in (-1, 1).
        r: number of post-baseline measurements.
    Returns:
        (r+1) x (r+1) covariance matrix.
    """
    _check_common(sigma2, r)
    if not -1 < rho < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    n = r + 1
    return sigma2 * (rho * np.ones((n, n)) + (1 - rho) * np.eye(n))


def build_dex(sigma2: float, rho: float, theta: float, s: float, r: int) -> np.ndarray:
    """
    Damped exponential: entry (j, j') = sigma2 * rho ** ((|j - j'| s) ** theta).
    theta = 0 reproduces CS and theta = 1 reproduces AR(1).
    """
    _check_common(sigma2, r)
    if not 0 <= theta <= 1:
        raise DomainError(f"theta must lie in [0, 1], got {theta}")
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1) for DEX, got {rho}")
    if not s > 0:
        raise DomainError(f"s must be positive, got {s}")
    j = np.arange(r + 1)
    lag = np.abs(np.subtract.outer(j, j)) * s
    # the diagonal exponent is 0 even when theta = 0
    exponent = np.zeros_like(lag)
    off_diag = lag > 0
    exponent[off_diag] = lag[off_diag] ** theta
    return sigma2 * np.power(rho, exponent)


def build_rs(raw: RsRawParams, t0: float, s: float, r: int) -> np.ndarray:
    """Random intercepts and slopes: Z D Z' + sigma_w2 I with Z = [1, t0 + j s]."""
    if r < 0:
        raise DomainError(f"r must be >= 0, got {r}")
    z = design_z(t0, s, r)
    d = random_effects_matrix(raw)
    return z @ d @ z.T + raw.sigma_w2 * np.eye(r + 1)


def design_z(t0: float, s: float, r: int) -> np.ndarray:
    times = t0 + s * np.arange(r + 1)
    return np.column_stack([np.ones(r + 1), times])


def random_effects_matrix(raw: RsRawParams) -> np.ndarray:
    return np.array([[raw.sigma_b0_2, raw.sigma_b0b1],
                     [raw.sigma_b0b1, raw.sigma_b1_2]])


### Intuitive <-> raw RS parameters ###

def _slope_reliability_factor(mode: GridMode, horizon: float, r: int) -> float:
    """
    Returns g such that the slope reliability is sigma_b1^2 g / (12 sigma_w^2 + sigma_b1^2 g).
    """
    if mode == "fixed_s":
        return horizon ** 2 * r * (r + 1) * (r + 2)
    return horizon ** 2 * (r + 1) * (r + 2) / r


def rs_intuitive_to_raw(p: RsIntuitiveParams) -> RsRawParams:
    """
    Converts the reliability notation to variance components.
    Params:
        p: baseline variance, baseline reliability, intercept-slope correlation and
           the slope reliability stated at r_tilde measurements.
    Returns:
        RsRawParams with sigma_b1_2 solving the slope reliability identity.
    """
    if not 0 <= p.slope_rel < 1:
        raise DomainError(f"slope reliability must lie in [0, 1), got {p.slope_rel}")
    sigma_b0_2 = p.rho_t0 * p.sigma_t0_2
    sigma_w2 = (1 - p.rho_t0) * p.sigma_t0_2
    g = _slope_reliability_factor(p.rel_mode, p.rel_horizon, p.r_tilde)
    sigma_b1_2 = p.slope_rel * 12 * sigma_w2 / ((1 - p.slope_rel) * g)
    sigma_b0b1 = p.rho_b0b1 * np.sqrt(sigma_b0_2) * np.sqrt(sigma_b1_2)
    return RsRawParams(sigma_w2=sigma_w2, sigma_b0_2=sigma_b0_2,
                       sigma_b1_2=sigma_b1_2, sigma_b0b1=float(sigma_b0b1))


def rs_raw_to_intuitive(raw: RsRawParams, mode: GridMode, horizon: float, r_tilde: int) -> RsIntuitiveParams:
    sigma_t0_2 = raw.sigma_w2 + raw.sigma_b0_2
    denom = np.sqrt(raw.sigma_b0_2 * raw.sigma_b1_2)
    rho_b0b1 = float(raw.sigma_b0b1 / denom) if denom > 0 else 0.0
    return RsIntuitiveParams(
        sigma_t0_2=sigma_t0_2,
        rho_t0=raw.sigma_b0_2 / sigma_t0_2,
        rho_b0b1=float(np.clip(rho_b0b1, -1.0, 1.0)),
        slope_rel=slope_reliability(raw, mode, horizon, r_tilde),
        r_tilde=r_tilde,
        rel_mode=mode,
        rel_horizon=horizon,
    )


def slope_reliability(raw: RsRawParams, mode: GridMode, horizon: float, r: int) -> float:
    """Share of the per-subject slope estimator variance due to true slope variation, at r visits."""
    if r < 1:
        raise DomainError(f"slope reliability needs r >= 1, got {r}")
    g = raw.sigma_b1_2 * _slope_reliability_factor(mode, horizon, r)
    return float(g / (12 * raw.sigma_w2 + g))


def rs_raw(spec: RandomSlopes) -> RsRawParams:
    if isinstance(spec.params, RsRawParams):
        return spec.params
    return rs_intuitive_to_raw(spec.params)


def build_covariance(spec: CovarianceSpec, grid: TimeGrid, t0: float = 0.0) -> np.ndarray:
    if isinstance(spec, CompoundSymmetry):
        return build_cs(spec.sigma2, spec.rho, grid.r)
    if isinstance(spec, DampedExponential):
        return build_dex(spec.sigma2, spec.rho, spec.theta, grid.s, grid.r)
    return build_rs(rs_raw(spec), t0, grid.s, grid.r)


### Inverse sums ###

def is_positive_definite(m: np.ndarray) -> bool:
    try:
        linalg.cholesky(m, lower=True)
    except linalg.LinAlgError:
        return False
    return True


def spd_inverse(m: np.ndarray) -> np.ndarray:
    """Inverse of a symmetric positive definite matrix via Cholesky."""
    m = np.asarray(m, dtype=float)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise DecompositionError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise DecompositionError("matrix is not symmetric")
    try:
        factor = linalg.cho_factor(m, lower=True)
    except linalg.LinAlgError as e:
        raise DecompositionError(f"matrix is not positive definite: {e}") from e
    return linalg.cho_solve(factor, np.eye(m.shape[0]))


def sums_from_inverse(inv: np.ndarray) -> SumTriple:
    j = np.arange(inv.shape[0], dtype=float)
    s0 = float(inv.sum())
    s1 = float(j @ inv.sum(axis=1))
    s2 = float(j @ inv @ j)
    return SumTriple(s0=s0, s1=s1, s2=s2, det_a=s0 * s2 - s1 ** 2)


def inverse_sums(m: np.ndarray) -> SumTriple:
    """
    Computes sum v_jj', sum j v_jj' and sum j j' v_jj' over the inverse of m,
    with det_a = s0 s2 - s1^2.
    """
    return sums_from_inverse(spd_inverse(m))


def cs_inverse_closed(sigma2: float, rho: float, r: int) -> np.ndarray:
    if not -1 < rho < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    n = r + 1
    scale = sigma2 * (1 - rho) * (1 + r * rho)
    if scale <= 0:
        raise DomainError(f"CS matrix is singular for rho={rho}, r={r}")
    off = -rho / scale
    diag = (1 + (r - 1) * rho) / scale
    return off * np.ones((n, n)) + (diag - off) * np.eye(n)


def cs_inverse_sums_closed(sigma2: float, rho: float, r: int) -> SumTriple:
    if not sigma2 > 0:
        raise DomainError(f"sigma2 must be positive, got {sigma2}")
    if not -1 < rho < 1:
        raise DomainError(f"rho must lie in (-1, 1), got {rho}")
    q = 1 + r * rho
    if q <= 0:
        raise DomainError(f"CS matrix is singular for rho={rho}, r={r}")
    s0 = (r + 1) / (sigma2 * q)
    s1 = r * (r + 1) / (2 * sigma2 * q)
    s2 = r * (r + 1) * (2 + r * (4 + (r - 1) * rho)) / (12 * sigma2 * (1 - rho) * q)
    det_a = r * (r + 1) ** 2 * (r + 2) / (12 * sigma2 ** 2 * (1 - rho) * q)
    return SumTriple(s0=s0, s1=s1, s2=s2, det_a=det_a)


def ar1_inverse_closed(sigma2: float, rho: float, s: float, r: int) -> np.ndarray:
    """Tridiagonal inverse of the AR(1) matrix sigma2 * rho ** (|j - j'| s)."""
    if r == 0:
        return np.array([[1.0 / sigma2]])
    p = rho ** s
    diag = np.full(r + 1, 1 + p ** 2)
    diag[0] = diag[-1] = 1.0
    inv = np.diag(diag) - p * (np.eye(r + 1, k=1) + np.eye(r + 1, k=-1))
    return inv / ((1 - p ** 2) * sigma2)


def ar1_inverse_sums_closed(sigma2: float, rho: float, s: float, r: int) -> SumTriple:
    if not 0 < rho < 1:
        raise DomainError(f"rho must lie in (0, 1) for AR(1), got {rho}")
    p = rho ** s
    s0 = (1 + r + p - r * p) / (sigma2 * (1 + p))
    s1 = r * (1 - p) * (1 + r * (1 - p) + p) / (2 * (1 - p ** 2) * sigma2)
    s2 = r * (1 + 4 * p + p ** 2 + 3 * r * (1 - p ** 2) + 2 * r ** 2 * (1 - p) ** 2) / (6 * (1 - p ** 2) * sigma2)
    return SumTriple(s0=s0, s1=s1, s2=s2, det_a=s0 * s2 - s1 ** 2)


def covariance_sums(spec: CovarianceSpec, grid: TimeGrid) -> Optional[SumTriple]:
    """
    Inverse sums for structures whose matrix is the same for every subject
    (CS and DEX), using the closed form where one exists.
    Returns None for RS, whose matrix depends on t0.
    """
    if isinstance(spec, CompoundSymmetry):
        return cs_inverse_sums_closed(spec.sigma2, spec.rho, grid.r)
    if isinstance(spec, DampedExponential):
        if spec.theta == 1 and spec.rho > 0:
            return ar1_inverse_sums_closed(spec.sigma2, spec.rho, grid.s, grid.r)
        if spec.theta == 0:
            return cs_inverse_sums_closed(spec.sigma2, spec.rho, grid.r)
        logger.debug("DEX theta=%s has no closed inverse; using the matrix path", spec.theta)
        return inverse_sums(build_dex(spec.sigma2, spec.rho, spec.theta, grid.s, grid.r))
    return None
