"""
Independent validation of the variance engine.

Monte Carlo estimates draw exposure and baseline time per subject, build the
subject's design and covariance matrices directly and never go through the
closed forms. The deterministic checks evaluate estimator equivalences, the
bias of summary-statistic tests and the fixed-tau r = 1 / r = 2 identity.
"""
import math
import logging
import numpy as np
from concurrent.futures import ThreadPoolExecutor
from scipy.stats import binomtest, norm
from tqdm import tqdm
from typing import List, Literal, Optional, Tuple

from longidesign.covariance import (ar1_inverse_sums_closed, build_covariance, build_dex, build_cs,
                                    cs_inverse_sums_closed, inverse_sums, random_effects_matrix,
                                    rs_raw, spd_inverse, sums_from_inverse)
from longidesign.errors import DecompositionError, DomainError
from longidesign.model.schema import (CheckReport, CompoundSymmetry, CovarianceSpec, DampedExponential,
                                      DesignQuery, InformationEstimate, LddEffect, PopulationSpec,
                                      RandomSlopes, RsRawParams, SimConfig, SimulatedPower, TimeGrid)
from longidesign.solvers import effect_coefficient, power_from_variance, r1_r2_condition
from longidesign.variance_engine import QUADRATURE, expected_information, group_t0_moments, unit_variance, var_bw

logger = logging.getLogger(__name__)

SummaryStatistic = Literal["ancova", "slanc", "slain"]


### Simulation building blocks ###

def _draw_subjects(rng: np.random.Generator, pop: PopulationSpec, size: int) -> Tuple[np.ndarray, np.ndarray]:
    """Exposure ~ Bernoulli(pe); t0 normal within each exposure group with a common variance."""
    exposed = rng.random(size) < pop.pe
    m0, m1, w = group_t0_moments(pop)
    t0 = np.where(exposed, m1, m0) + math.sqrt(w) * rng.standard_normal(size)
    return exposed.astype(float), t0


def _times(t0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    return t0[:, None] + grid.s * np.arange(grid.r + 1)[None, :]


def _design_stack(exposed: np.ndarray, t0: np.ndarray, grid: TimeGrid, hyp: str) -> np.ndarray:
    """Per-subject design matrices: columns (1, t, e) for CMD and (1, t, e, e t) otherwise."""
    t = _times(t0, grid)
    e = np.broadcast_to(exposed[:, None], t.shape)
    cols = [np.ones_like(t), t, e]
    if hyp != "cmd":
        cols.append(e * t)
    return np.stack(cols, axis=-1)


def _rs_sigma_stack(raw: RsRawParams, t0: np.ndarray, grid: TimeGrid) -> np.ndarray:
    t = _times(t0, grid)
    z = np.stack([np.ones_like(t), t], axis=-1)
    d = random_effects_matrix(raw)
    return z @ d @ np.swapaxes(z, 1, 2) + raw.sigma_w2 * np.eye(grid.r + 1)


def _subject_information(x: np.ndarray, cov: CovarianceSpec, grid: TimeGrid, t0: np.ndarray) -> np.ndarray:
    """X_i' Sigma_i^-1 X_i for every subject, shape (n, p, p)."""
    if isinstance(cov, RandomSlopes):
        sol = np.linalg.solve(_rs_sigma_stack(rs_raw(cov), t0, grid), x)
        return np.einsum("nji,njl->nil", x, sol)
    sinv = spd_inverse(build_covariance(cov, grid))
    return np.einsum("nji,jk,nkl->nil", x, sinv, x)


def mc_information(query: DesignQuery, cfg: SimConfig, progress: bool = False) -> InformationEstimate:
    """
    Monte Carlo estimate of E[X' Sigma^-1 X] with batch-means standard errors.
    Params:
        query: design context (bw is treated as ldd).
        cfg: replicate count, seed and batch count.
    Returns:
        InformationEstimate holding the mean matrix, per-entry standard errors and
        the implied unit variance (last diagonal entry of the inverse) with its error.
    """
    hyp = "cmd" if query.hyp == "cmd" else "ldd"
    batches = min(cfg.batches, cfg.replicates)
    sizes = [len(chunk) for chunk in np.array_split(np.arange(cfg.replicates), batches)]
    streams = np.random.SeedSequence(cfg.seed).spawn(batches)

    batch_means = []
    for size, stream in tqdm(list(zip(sizes, streams)), desc="Information", unit="batches", disable=not progress):
        rng = np.random.default_rng(stream)
        exposed, t0 = _draw_subjects(rng, query.pop, size)
        x = _design_stack(exposed, t0, query.grid, hyp)
        batch_means.append(_subject_information(x, query.cov, query.grid, t0).mean(axis=0))

    batch_means = np.array(batch_means)
    weights = np.array(sizes, dtype=float) / cfg.replicates
    mean = np.einsum("b,bij->ij", weights, batch_means)
    uv_batches = np.array([spd_inverse(m)[-1, -1] for m in batch_means])
    if batches > 1:
        se = batch_means.std(axis=0, ddof=1) / math.sqrt(batches)
        uv_se = float(uv_batches.std(ddof=1) / math.sqrt(batches))
    else:
        se = np.full_like(mean, np.nan)
        uv_se = float("nan")
    return InformationEstimate(mean=mean.tolist(), se=se.tolist(), unit_variance=float(spd_inverse(mean)[-1, -1]),
                               unit_variance_se=uv_se, replicates=cfg.replicates)


def _draw_residuals(rng: np.random.Generator, cov: CovarianceSpec, grid: TimeGrid, t0: np.ndarray) -> np.ndarray:
    n, k = t0.size, grid.r + 1
    if isinstance(cov, RandomSlopes):
        raw = rs_raw(cov)
        b = rng.multivariate_normal(np.zeros(2), random_effects_matrix(raw), size=n, method="eigh")
        t = _times(t0, grid)
        return b[:, [0]] + b[:, [1]] * t + math.sqrt(raw.sigma_w2) * rng.standard_normal((n, k))
    chol = np.linalg.cholesky(build_covariance(cov, grid))
    return rng.standard_normal((n, k)) @ chol.T


def _wald_rejects(query: DesignQuery, n: int, coef: float, z_crit: float,
                  stream: np.random.SeedSequence) -> Tuple[bool, int]:
    """One simulated study; GLS with the true covariance."""
    rng = np.random.default_rng(stream)
    hyp = "cmd" if query.hyp == "cmd" else "ldd"
    redraws = 0
    while True:
        exposed, t0 = _draw_subjects(rng, query.pop, n)
        if 0 < exposed.sum() < n:
            break
        redraws += 1
    x = _design_stack(exposed, t0, query.grid, hyp)
    y = coef * x[:, :, -1] + _draw_residuals(rng, query.cov, query.grid, t0)

    if isinstance(query.cov, RandomSlopes):
        sol = np.linalg.solve(_rs_sigma_stack(rs_raw(query.cov), t0, query.grid), x)
    else:
        sol = np.einsum("jk,nkp->njp", spd_inverse(build_covariance(query.cov, query.grid)), x)
    info = np.einsum("nji,njl->il", x, sol)
    score = np.einsum("nji,nj->i", sol, y)
    try:
        info_inv = spd_inverse(info)
    except DecompositionError:
        return False, redraws
    estimate = info_inv @ score
    return bool(abs(estimate[-1]) / math.sqrt(info_inv[-1, -1]) > z_crit), redraws


def simulate_power(query: DesignQuery, n: int, cfg: SimConfig, confidence: float = 0.95,
                   threads: int = 1, progress: bool = False) -> SimulatedPower:
    """
    Empirical rejection rate of the known-covariance Wald test under the query's alternative.
    Each replicate owns a stream spawned from cfg.seed, so results do not depend on threads.
    """
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    coef = effect_coefficient(query.effect, query.grid)
    z_crit = float(norm.ppf(1 - query.alpha / 2))
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.replicates)

    def one(stream):
        return _wald_rejects(query, n, coef, z_crit, stream)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(one, streams), total=cfg.replicates, desc="Simulating",
                                unit="reps", disable=not progress))
    else:
        results = [one(s) for s in tqdm(streams, desc="Simulating", unit="reps", disable=not progress)]

    rejections = sum(rejected for rejected, _ in results)
    redraws = sum(r for _, r in results)
    if redraws:
        logger.info("simulate_power: %d degenerate covariate draws redrawn", redraws)
    ci = binomtest(rejections, cfg.replicates).proportion_ci(confidence_level=confidence, method="wilson")
    return SimulatedPower(rate=rejections / cfg.replicates, ci_low=float(ci.low), ci_high=float(ci.high),
                          replicates=cfg.replicates, redraws=redraws)


def engine_variance(query: DesignQuery, cfg: Optional[SimConfig] = None) -> float:
    """Engine unit variance with the quadrature overrides carried by cfg."""
    if cfg is None:
        return unit_variance(query).value
    return unit_variance(query, nodes=cfg.nodes, rel_tol=cfg.rel_tol).value


def lachin_power(n: int, query: DesignQuery, cfg: Optional[SimConfig] = None) -> float:
    """Power with the noncentrality shrunk by (1 - 1/n); a small-sample reference for simulations."""
    if n < 2:
        raise DomainError(f"n must be >= 2, got {n}")
    var = engine_variance(query, cfg)
    coef = effect_coefficient(query.effect, query.grid)
    return power_from_variance(n - 1, coef, var, query.alpha)


### Summary-statistic tests ###

def ancova_ncp_ratio(r: int, rho: float) -> float:
    """Noncentrality of the GLS CMD test relative to ANCOVA on the follow-up mean, CS covariance."""
    if r < 1:
        raise DomainError(f"r must be >= 1, got {r}")
    if not 0 <= rho < 1:
        raise DomainError(f"rho must lie in [0, 1), got {rho}")
    return (r + 1) / (r * (1 - rho))


def summary_contrast(statistic: SummaryStatistic, r: int, rho: float) -> np.ndarray:
    """
    Weights applied to the r + 1 measurements by each summary test:
    ANCOVA (follow-up mean adjusted for baseline), SLANC (slope adjusted for baseline)
    and SLAIN (slope including baseline).
    """
    if r < 1:
        raise DomainError(f"r must be >= 1, got {r}")
    j = np.arange(r + 1, dtype=float)
    if statistic == "ancova":
        c = np.full(r + 1, 1.0 / r)
        c[0] = -rho
        return c
    if statistic == "slanc":
        c = 2 * j - r
        c[0] = -rho
        return 6 * c / (r * (r + 1) * (r + 2))
    if statistic == "slain":
        denom = r * (r + 1) * (rho * r * (r - 1) + 2 * (2 * r + 1))
        return (12 * j + 6 * rho * r * (2 * j - r - 1)) / denom
    raise DomainError(f"unknown summary statistic '{statistic}'")


def summary_bias_h0(statistic: SummaryStatistic, r: int, rho: float, p1: float, mu00: float) -> float:
    """Expected group difference of the summary statistic when the groups differ only at baseline."""
    b = p1 * mu00
    if statistic == "ancova":
        return b * (1 - rho)
    if statistic == "slanc":
        return 6 * b * (r - rho) / (r * (r + 1) * (r + 2))
    if statistic == "slain":
        return 6 * b * (1 - rho) / (rho * r * (r - 1) + 2 * (2 * r + 1))
    raise DomainError(f"unknown summary statistic '{statistic}'")


def gls_contrast_cmd(sigma: np.ndarray) -> np.ndarray:
    """GLS weights for the constant group difference: Sigma^-1 1 / (1' Sigma^-1 1)."""
    w = spd_inverse(sigma).sum(axis=1)
    return w / w.sum()


### Deterministic checks ###

def _projection(grid: TimeGrid) -> np.ndarray:
    z = np.column_stack([np.ones(grid.r + 1), grid.s * np.arange(grid.r + 1)])
    return z @ np.linalg.solve(z.T @ z, z.T)


def check_two_stage_equivalence(spec: CovarianceSpec, r: int, s: float) -> CheckReport:
    """
    Two-stage (per-subject OLS then pooled) and GLS estimates coincide iff the
    within-subject projection commutes with Sigma. Passes iff H Sigma = Sigma H.
    """
    if r < 1:
        raise DomainError(f"r must be >= 1, got {r}")
    grid = TimeGrid(r=r, mode="fixed_s", horizon=s)
    h = _projection(grid)
    sigma = build_covariance(spec, grid)
    return CheckReport.compare(f"two_stage_{spec.kind}", (h @ sigma).ravel(), (sigma @ h).ravel(), 1e-10,
                               detail="H Sigma vs Sigma H")


def two_stage_gap(spec: CovarianceSpec, r: int, s: float) -> Tuple[np.ndarray, np.ndarray]:
    grid = TimeGrid(r=r, mode="fixed_s", horizon=s)
    h = _projection(grid)
    sigma = build_covariance(spec, grid)
    return h @ sigma, sigma @ h


def check_r1_r2_equal_variance(spec: CovarianceSpec, tau: float) -> CheckReport:
    """
    With tau fixed, the LDD variance at r = 1 and r = 2 agree exactly when
    sigma(0,0) - sigma(tau,tau) = 2 (sigma(0,tau/2) - sigma(tau/2,tau)).
    Reports the identity gap and the relative variance gap.
    """
    sigma2 = build_covariance(spec, TimeGrid(r=2, mode="fixed_tau", horizon=tau))
    lhs, rhs = r1_r2_condition(sigma2)
    pop = PopulationSpec(pe=0.5)

    def ldd_var(r: int) -> float:
        query = DesignQuery(grid=TimeGrid(r=r, mode="fixed_tau", horizon=tau), pop=pop, cov=spec,
                            hyp="ldd", effect=LddEffect(p2=1.0, p3=0.1, mu00=1.0))
        return unit_variance(query).value

    v1, v2 = ldd_var(1), ldd_var(2)
    return CheckReport.compare(f"r1_r2_{spec.kind}", [lhs - rhs, v1 / v2 - 1], [0.0, 0.0], 1e-10,
                               detail=f"identity sides {lhs:.6g} / {rhs:.6g}; variances {v1:.6g} / {v2:.6g}")


def check_bw_diff_equivalence(sigma: np.ndarray, r: int, s: float) -> CheckReport:
    """
    Compares the between/within interaction with the first-difference model.
    The interaction eta is a slope per physical time unit (Z = [1, s j]), while
    the difference-model effect is a mean change per visit, i.e. s * eta. Hence
    Var(difference effect) = s^2 Var(eta), and Var(eta) matches the engine's var_bw.
    """
    sigma = np.asarray(sigma, dtype=float)
    if r < 1:
        raise DomainError(f"r must be >= 1, got {r}")
    if sigma.shape != (r + 1, r + 1):
        raise DomainError(f"expected a {r + 1} x {r + 1} covariance, got shape {sigma.shape}")
    pop = PopulationSpec(pe=0.5)
    pq = pop.pe * (1 - pop.pe)

    delta = np.diff(np.eye(r + 1), axis=0)
    var_diff = 1.0 / (pq * spd_inverse(delta @ sigma @ delta.T).sum())

    z = np.column_stack([np.ones(r + 1), s * np.arange(r + 1)])
    m = z.T @ spd_inverse(sigma) @ z
    info = np.block([[m, pop.pe * m], [pop.pe * m, pop.pe * m]])
    var_eta = spd_inverse(info)[-1, -1]

    engine = var_bw(sums_from_inverse(spd_inverse(sigma)), s, pop).value
    expected = s ** 2 * engine
    return CheckReport.compare("bw_difference", [var_diff, s ** 2 * var_eta], [expected, expected],
                               1e-10 * max(1.0, abs(expected)),
                               detail="Var(difference-model effect) vs s^2 Var(interaction)")


def _closed_vs_generic(rng: np.random.Generator, draws: int) -> List[CheckReport]:
    worst_cs, worst_ar1 = 0.0, 0.0
    for _ in range(draws):
        sigma2 = rng.uniform(0.1, 5.0)
        r = int(rng.integers(0, 21))
        rho = rng.uniform(0.0, 0.95)
        closed = cs_inverse_sums_closed(sigma2, rho, r)
        generic = inverse_sums(build_cs(sigma2, rho, r))
        worst_cs = max(worst_cs, _rel_gap(closed, generic))

        rho = rng.uniform(0.05, 0.95)
        s = rng.uniform(0.5, 3.0)
        closed = ar1_inverse_sums_closed(sigma2, rho, s, r)
        generic = inverse_sums(build_dex(sigma2, rho, 1.0, s, r))
        worst_ar1 = max(worst_ar1, _rel_gap(closed, generic))
    return [
        CheckReport.compare("closed_sums_cs", [worst_cs], [0.0], 1e-10, detail=f"max relative gap over {draws} draws"),
        CheckReport.compare("closed_sums_ar1", [worst_ar1], [0.0], 1e-10, detail=f"max relative gap over {draws} draws"),
    ]


def check_quadrature_refinement(query: DesignQuery, cfg: SimConfig) -> CheckReport:
    """
    The converged RS quadrature against the expected information evaluated
    on four times as many nodes.
    """
    nodes = cfg.nodes or QUADRATURE["nodes"]
    rel_tol = cfg.rel_tol or QUADRATURE["rel_tol"]
    converged = engine_variance(query, cfg)
    fine = float(spd_inverse(expected_information(query, nodes=4 * nodes))[-1, -1])
    gap = abs(converged - fine) / fine
    return CheckReport.compare("rs_quadrature_refined", [gap], [0.0], max(10 * rel_tol, 1e-12),
                               detail=f"relative gap to {4 * nodes} nodes; {converged:.10g} vs {fine:.10g}")


def _rel_gap(a, b) -> float:
    gaps = [abs(x - y) / max(abs(y), 1e-300) for x, y in ((a.s0, b.s0), (a.s1, b.s1), (a.s2, b.s2)) if y != 0]
    return max(gaps, default=0.0)


def run_battery(cfg: SimConfig, draws: int = 500) -> List[CheckReport]:
    """
    Every deterministic check, each expected to pass. The random parameter
    draws for the closed-form comparison come from cfg.seed.
    """
    rng = np.random.default_rng(cfg.seed)
    reports = _closed_vs_generic(rng, draws)

    cs = CompoundSymmetry(sigma2=0.3214, rho=0.857)
    dex = DampedExponential(sigma2=0.3179, rho=0.896, theta=0.5)
    rs = RandomSlopes(params=RsRawParams(sigma_w2=0.0418, sigma_b0_2=0.2982, sigma_b1_2=0.000095, sigma_b0b1=-0.0017))
    for spec in (cs, dex, rs):
        reports.append(check_r1_r2_equal_variance(spec, tau=18.0))
    for spec in (cs, rs):
        reports.append(check_two_stage_equivalence(spec, r=4, s=3.0))

    hs, sh = two_stage_gap(DampedExponential(sigma2=1.0, rho=0.8, theta=1.0), r=2, s=1.0)
    reports.append(CheckReport.compare("two_stage_ar1_differs", [hs[0, 1], sh[0, 1]], [0.866, 0.813], 1e-3,
                                       detail="AR(1) projection does not commute"))

    reports.append(check_bw_diff_equivalence(build_cs(1.0, 0.5, 2), r=2, s=1.0))
    rs_grid = TimeGrid(r=3, mode="fixed_s", horizon=2.0)
    reports.append(check_bw_diff_equivalence(build_covariance(rs, rs_grid), r=3, s=2.0))

    spread = DesignQuery(grid=TimeGrid(r=6, mode="fixed_s", horizon=3.0),
                         pop=PopulationSpec(pe=0.79, v_t0=100.0, rho_e_t0=0.3), cov=rs, hyp="ldd",
                         effect=LddEffect(p2=-0.182, p3=0.1, mu00=3.5))
    reports.append(check_quadrature_refinement(spread, cfg))

    ratios = [ancova_ncp_ratio(r, rho) for r in (1, 3, 6) for rho in (0.0, 0.5, 0.857)]
    reports.append(CheckReport(name="ancova_ncp_ratio_above_one", passed=all(x > 1 for x in ratios),
                               observed=ratios, expected=[1.0] * len(ratios), tolerance=0.0,
                               detail="GLS noncentrality exceeds ANCOVA"))

    r, rho, p1, mu00 = 6, 0.857, 0.1, 3.5
    for stat in ("ancova", "slanc", "slain"):
        direct = p1 * mu00 * summary_contrast(stat, r, rho).sum()
        reports.append(CheckReport.compare(f"bias_{stat}", [direct], [summary_bias_h0(stat, r, rho, p1, mu00)],
                                           1e-12, detail="contrast applied to a constant baseline shift"))

    failed = [rep.name for rep in reports if not rep.passed]
    if failed:
        logger.warning("oracle battery: %d of %d checks failed: %s", len(failed), len(reports), failed)
    return reports
