from typing import Annotated, Dict, List, Literal, Optional, Tuple, Union
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

Hypothesis = Literal["cmd", "ldd", "bw"]
GridMode = Literal["fixed_s", "fixed_tau"]

# |p2| below this is treated as exactly zero
P2_ZERO_TOL = 1e-12


class DesignModel(BaseModel):
    """Immutable, strictly validated base for every design record."""
    model_config = ConfigDict(extra="forbid", frozen=True)


### Covariance structures ###

class CompoundSymmetry(DesignModel):
    kind: Literal["cs"] = "cs"
    sigma2: float = Field(..., gt=0, description="Residual variance of each measurement.")
    rho: float = Field(..., gt=-1, lt=1, description="Common correlation between any two measurements.")


class DampedExponential(DesignModel):
    kind: Literal["dex"] = "dex"
    sigma2: float = Field(..., gt=0, description="Residual variance of each measurement.")
    rho: float = Field(..., ge=0, lt=1, description="Correlation between measurements one time unit apart.")
    theta: float = Field(..., ge=0, le=1, description="Damping exponent; 0 gives CS, 1 gives AR(1).")


class RsRawParams(DesignModel):
    notation: Literal["raw"] = "raw"
    sigma_w2: float = Field(..., gt=0, description="Within-subject residual variance.")
    sigma_b0_2: float = Field(..., ge=0, description="Random intercept variance.")
    sigma_b1_2: float = Field(..., ge=0, description="Random slope variance per squared time unit.")
    sigma_b0b1: float = Field(0.0, description="Random intercept-slope covariance.")

    @model_validator(mode="after")
    def check_psd(self) -> "RsRawParams":
        bound = self.sigma_b0_2 * self.sigma_b1_2
        if self.sigma_b0b1 ** 2 > bound * (1 + 1e-12) + 1e-300:
            raise ValueError(
                f"random-effects covariance is not positive semidefinite: "
                f"sigma_b0b1^2={self.sigma_b0b1 ** 2:.6g} > sigma_b0_2*sigma_b1_2={bound:.6g}"
            )
        return self


class RsIntuitiveParams(DesignModel):
    notation: Literal["reliability"] = "reliability"
    sigma_t0_2: float = Field(..., gt=0, description="Residual variance of the response at baseline.")
    rho_t0: float = Field(..., ge=0, lt=1, description="Baseline reliability sigma_b0^2 / sigma_t0^2.")
    rho_b0b1: float = Field(0.0, ge=-1, le=1, description="Correlation of random intercept and slope.")
    slope_rel: float = Field(..., ge=0, lt=1, description="Slope reliability at r_tilde measurements.")
    r_tilde: int = Field(..., ge=1, description="Trial number of repeated measures for slope_rel.")
    rel_mode: GridMode = Field("fixed_s", description="Whether slope_rel was stated for a fixed s or a fixed tau.")
    rel_horizon: float = Field(..., gt=0, description="The s (fixed_s) or tau (fixed_tau) slope_rel refers to.")


RsParams = Annotated[Union[RsRawParams, RsIntuitiveParams], Field(discriminator="notation")]


class RandomSlopes(DesignModel):
    kind: Literal["rs"] = "rs"
    params: RsParams


CovarianceSpec = Annotated[
    Union[CompoundSymmetry, DampedExponential, RandomSlopes],
    Field(discriminator="kind"),
]


### Design context ###

class TimeGrid(DesignModel):
    r: int = Field(..., ge=0, description="Number of post-baseline measurements.")
    mode: GridMode = Field("fixed_s", description="Hold the spacing s or the total follow-up tau fixed.")
    horizon: float = Field(..., gt=0, description="s in fixed_s mode, tau in fixed_tau mode.")

    @model_validator(mode="after")
    def check_tau_needs_visits(self) -> "TimeGrid":
        if self.mode == "fixed_tau" and self.r < 1:
            raise ValueError("fixed_tau mode derives s = tau/r and needs r >= 1")
        return self

    @property
    def s(self) -> float:
        return self.horizon if self.mode == "fixed_s" else self.horizon / self.r

    @property
    def tau(self) -> float:
        return self.horizon * self.r if self.mode == "fixed_s" else self.horizon

    def with_r(self, r: int) -> "TimeGrid":
        return TimeGrid(r=r, mode=self.mode, horizon=self.horizon)


class PopulationSpec(DesignModel):
    pe: float = Field(..., gt=0, lt=1, description="Exposure prevalence.")
    v_t0: float = Field(0.0, ge=0, description="Variance of the time variable at baseline.")
    rho_e_t0: float = Field(0.0, ge=-1, le=1, description="Correlation of exposure and baseline time.")

    @model_validator(mode="after")
    def check_constant_entry_time(self) -> "PopulationSpec":
        if self.v_t0 == 0 and self.rho_e_t0 != 0:
            raise ValueError("rho_e_t0 must be 0 when v_t0 = 0 (baseline time is constant)")
        return self


class CmdEffect(DesignModel):
    kind: Literal["cmd"] = "cmd"
    p1: float = Field(..., description="Percent difference between groups at baseline, as a fraction.")
    mu00: float = Field(..., description="Mean baseline response among the unexposed.")

    @field_validator("mu00")
    @classmethod
    def nonzero_mu00(cls, v: float) -> float:
        if v == 0:
            raise ValueError("mu00 must be non-zero for percent-scale effects")
        return v


class LddEffect(DesignModel):
    kind: Literal["ldd"] = "ldd"
    p2: float = Field(..., description="Percent change to end of follow-up among the unexposed.")
    p3: float = Field(..., description="Percent difference in change between exposed and unexposed.")
    mu00: float = Field(..., description="Mean baseline response among the unexposed.")
    p1: Optional[float] = Field(None, description="Baseline percent difference; required when p2 = 0.")

    @field_validator("mu00")
    @classmethod
    def nonzero_mu00(cls, v: float) -> float:
        if v == 0:
            raise ValueError("mu00 must be non-zero for percent-scale effects")
        return v

    @model_validator(mode="after")
    def p1_when_p2_zero(self) -> "LddEffect":
        if abs(self.p2) < P2_ZERO_TOL and self.p1 is None:
            raise ValueError("p1 is required when p2 = 0")
        return self


class AbsoluteEffect(DesignModel):
    kind: Literal["absolute"] = "absolute"
    beta: float = Field(..., description="Coefficient of interest on the response (per time unit for LDD).")


EffectSpec = Annotated[Union[CmdEffect, LddEffect, AbsoluteEffect], Field(discriminator="kind")]


class DesignQuery(DesignModel):
    grid: TimeGrid
    pop: PopulationSpec
    cov: CovarianceSpec
    hyp: Hypothesis = "ldd"
    effect: EffectSpec
    alpha: float = Field(0.05, gt=0, lt=1, description="Two-sided significance level.")

    @model_validator(mode="after")
    def effect_matches_hypothesis(self) -> "DesignQuery":
        if self.effect.kind == "cmd" and self.hyp != "cmd":
            raise ValueError(f"a CMD percent effect cannot be used with hypothesis '{self.hyp}'")
        if self.effect.kind == "ldd" and self.hyp == "cmd":
            raise ValueError("an LDD percent effect cannot be used with hypothesis 'cmd'")
        return self

    def with_r(self, r: int) -> "DesignQuery":
        return self.model_copy(update={"grid": self.grid.with_r(r)})


### Engine results ###

class SumTriple(DesignModel):
    s0: float
    s1: float
    s2: float
    det_a: float


class UnitVariance(DesignModel):
    value: float = Field(..., gt=0, description="Asymptotic variance of sqrt(N) times the estimator.")
    method: Literal["closed-form", "generic-matrix", "quadrature"]


class LimitVariance(DesignModel):
    """Unit variance as r grows without bound."""
    kind: Literal["value", "zero", "none"]
    value: Optional[float] = None
    reason: str = ""


### Allocation ###

class CostSpec(DesignModel):
    c1: float = Field(80.0, gt=0, description="Cost of recruiting a subject and the first measurement.")
    kappa: float = Field(..., ge=1, description="Ratio of first-measurement cost to follow-up cost.")
    budget: Optional[float] = Field(None, gt=0, description="Total budget (maximize power).")
    target_power: Optional[float] = Field(None, gt=0, lt=1, description="Power floor (minimize cost).")

    @model_validator(mode="after")
    def one_constraint(self) -> "CostSpec":
        if (self.budget is None) == (self.target_power is None):
            raise ValueError("exactly one of budget or target_power must be given")
        return self

    @property
    def mode(self) -> Literal["budget", "power"]:
        return "budget" if self.budget is not None else "power"

    def total_cost(self, n: int, r: int) -> float:
        return n * self.c1 * (self.kappa + r) / self.kappa


class AllocationSolution(DesignModel):
    r_opt: int = Field(..., ge=0)
    n_opt: int = Field(..., ge=1)
    power: float
    cost: float
    slope_rel_at_ropt: Optional[float] = None
    on_bound: bool = False
    mode: Literal["budget", "power"]


### Oracle ###

class SimConfig(DesignModel):
    replicates: int = Field(2000, ge=1)
    seed: int = Field(20240101, ge=0, lt=2 ** 64)
    nodes: Optional[int] = Field(None, ge=2, description="Override of the initial quadrature node count.")
    rel_tol: Optional[float] = Field(None, gt=0, description="Override of the quadrature tolerance.")
    batches: int = Field(20, ge=2, description="Batch count for batch-means standard errors.")


class CheckReport(DesignModel):
    name: str
    passed: bool
    observed: List[float]
    expected: List[float]
    tolerance: float
    detail: str = ""

    @classmethod
    def compare(cls, name: str, observed, expected, tolerance: float, detail: str = "") -> "CheckReport":
        observed = [float(x) for x in observed]
        expected = [float(x) for x in expected]
        passed = len(observed) == len(expected) and all(
            abs(o - e) <= tolerance for o, e in zip(observed, expected)
        )
        return cls(name=name, passed=passed, observed=observed, expected=expected,
                   tolerance=tolerance, detail=detail)


### Scenario files ###

class Scenario(DesignModel):
    schema_version: Literal[1] = 1
    name: str = "scenario"
    query: DesignQuery
    n: Optional[int] = Field(None, ge=2, description="Number of participants for power / r / mde questions.")
    target_power: float = Field(0.8, gt=0, lt=1)
    cost: Optional[CostSpec] = None
    r_bounds: Optional[Tuple[int, int]] = None
    dropout: float = Field(0.0, ge=0, lt=1, description="Expected dropout fraction used to inflate N.")
    sweep: Dict[str, List[float]] = Field(default_factory=dict,
                                          description="Dotted field path -> values; the cross product is evaluated.")

    @field_validator("r_bounds")
    @classmethod
    def ordered_bounds(cls, v: Optional[Tuple[int, int]]) -> Optional[Tuple[int, int]]:
        if v is not None and not 0 <= v[0] <= v[1]:
            raise ValueError(f"r_bounds must satisfy 0 <= lo <= hi, got {v}")
        return v


class SimulatedPower(DesignModel):
    rate: float = Field(..., ge=0, le=1, description="Empirical rejection fraction.")
    ci_low: float
    ci_high: float
    replicates: int
    redraws: int = Field(0, description="Covariate draws rejected because every subject shared one exposure.")


class InformationEstimate(DesignModel):
    """Monte Carlo estimate of E[X' Sigma^-1 X] and of the unit variance it implies."""
    mean: List[List[float]]
    se: List[List[float]]
    unit_variance: float
    unit_variance_se: float
    replicates: int
