"""
Command-line front end.

    longidesign n --scenario config/scenarios/table4_ldd_cs.json
    longidesign optimal --scenario config/scenarios/demo.json
    longidesign sweep --scenario ... --axis query.cov.rho=0.1,0.5,0.9 --format csv
    longidesign tables --which 5
    longidesign verify
    longidesign wizard --out my-study.json

Exit status: 0 success, 1 computation error (e.g. unattainable power),
2 invalid input.
"""
import sys
import json
import logging
import argparse
import pandas as pd
from pathlib import Path
from pydantic import ValidationError
from typing import Any, Callable, Dict, List, Optional, Sequence

from longidesign import tables
from longidesign.allocation import default_r_bounds, solve_allocation
from longidesign.errors import (ConfigError, DomainError, LongiDesignError, ScenarioError,
                                UnattainableError)
from longidesign.model.design_report import DesignReport
from longidesign.model.schema import (AbsoluteEffect, CheckReport, CmdEffect, CompoundSymmetry,
                                      CostSpec, DampedExponential, DesignQuery, LddEffect,
                                      PopulationSpec, RandomSlopes, RsIntuitiveParams, RsRawParams,
                                      Scenario, SimConfig, TimeGrid)
from longidesign.oracle import engine_variance, mc_information, run_battery, simulate_power
from longidesign.solvers import (inflate_for_dropout, mde_percent, min_detectable_effect, power,
                                 required_n, required_n_exact, required_r)
from longidesign.utils import (evaluate_sweep, format_validation_error, get_thread_cap,
                               load_config, load_scenario, parse_axis)
from longidesign.variance_engine import set_quadrature_defaults, unit_variance

logger = logging.getLogger(__name__)

PROJECT_ROOT = Path(__file__).resolve().parent.parent.parent
DEFAULT_CONFIG = PROJECT_ROOT / "config" / "defaults.yaml"

# used when the defaults file is not shipped alongside an installed package
BUILTIN_DEFAULTS = {
    "SOLVER_PARAMETERS": {"alpha": 0.05, "r_max": 1000, "allocation_r_max": 50},
    "QUADRATURE_PARAMETERS": {"nodes": 40, "max_nodes": 320, "rel_tol": 1e-8},
    "SIMULATION_PARAMETERS": {"replicates": 2000, "seed": 20240101, "batches": 20},
    "OUTPUT_PARAMETERS": {"significant_digits": 6, "format": "text"},
}

QUESTIONS = ("power", "n", "r", "mde", "optimal")


def load_defaults(config_path: Optional[Path]) -> Dict[str, Dict[str, Any]]:
    """Built-in defaults overlaid with the groups found in the YAML file."""
    merged = {group: dict(values) for group, values in BUILTIN_DEFAULTS.items()}
    path = Path(config_path) if config_path else DEFAULT_CONFIG
    if config_path is None and not path.exists():
        logger.debug("no defaults file at %s; using built-in defaults", path)
        return merged
    for group, values in load_config(path).items():
        if group in merged and isinstance(values, dict):
            merged[group].update(values)
    return merged


### Output ###

def emit_results(report: DesignReport, fmt: str = "text", out: Optional[Path] = None,
                 digits: int = 6) -> str:
    """
    Renders a report as aligned text, CSV (fixed header row) or JSON, prints it
    or writes it to `out`, and returns the rendered string.
    """
    if fmt == "json":
        text = json.dumps(report.to_dict(), indent=2, ensure_ascii=False)
    else:
        df = pd.DataFrame(report.results, columns=report.columns())
        if fmt == "csv":
            text = df.to_csv(index=False, float_format=f"%.{digits}g")
        elif df.empty:
            text = "(no results)"
        else:
            text = df.to_string(index=False, float_format=lambda x: f"{x:.{digits}g}")
    if out:
        out = Path(out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text if text.endswith("\n") else text + "\n", encoding="utf-8")
        print(f"Results saved to {out}")
    else:
        print(text)
    return text


def parse_scenario(path: Path) -> Scenario:
    return load_scenario(path)


### Questions ###

def _require_n(scenario: Scenario) -> int:
    if scenario.n is None:
        raise ScenarioError("this question needs 'n' in the scenario")
    return scenario.n


def _r_bounds(scenario: Scenario, settings: Dict[str, Any], r_max: Optional[int]) -> tuple:
    if scenario.r_bounds is not None:
        lo, hi = scenario.r_bounds
        return lo, min(hi, r_max) if r_max else hi
    return default_r_bounds(scenario.query, r_max or settings["SOLVER_PARAMETERS"]["allocation_r_max"])


def answer(question: str, scenario: Scenario, settings: Dict[str, Any], r_max: Optional[int] = None,
           threads: int = 1) -> Dict[str, Any]:
    """One result row for a design question. Inputs that shape the answer are echoed."""
    query = scenario.query
    row: Dict[str, Any] = {"alpha": query.alpha, "hypothesis": query.hyp, "covariance": query.cov.kind}
    if question == "power":
        n = _require_n(scenario)
        uv = unit_variance(query)
        row.update(n=n, r=query.grid.r, power=power(n, query), unit_variance=uv.value, method=uv.method)
    elif question == "n":
        n = required_n(scenario.target_power, query)
        row.update(r=query.grid.r, target_power=scenario.target_power,
                   n_exact=required_n_exact(scenario.target_power, query), n=n)
        if scenario.dropout > 0:
            row.update(dropout=scenario.dropout, n_inflated=inflate_for_dropout(n, scenario.dropout))
    elif question == "r":
        n = _require_n(scenario)
        upper = r_max or settings["SOLVER_PARAMETERS"]["r_max"]
        lo = scenario.r_bounds[0] if scenario.r_bounds else None
        hi = min(scenario.r_bounds[1], upper) if scenario.r_bounds else upper
        r = required_r(scenario.target_power, n, query, r_min=lo, r_max=hi)
        row.update(n=n, target_power=scenario.target_power, r=r, power=power(n, query.with_r(r)))
    elif question == "mde":
        n = _require_n(scenario)
        effect = min_detectable_effect(scenario.target_power, n, query)
        scale = 1.0 if isinstance(effect, AbsoluteEffect) else 100.0
        row.update(n=n, r=query.grid.r, target_power=scenario.target_power,
                   effect=effect.kind, detectable=scale * mde_percent(effect),
                   unit="absolute" if scale == 1.0 else "percent")
    elif question == "optimal":
        if scenario.cost is None:
            raise ScenarioError("the optimal question needs a 'cost' block in the scenario")
        bounds = _r_bounds(scenario, settings, r_max)
        sol = solve_allocation(query, scenario.cost, bounds, threads=threads)
        row.update(mode=sol.mode, kappa=scenario.cost.kappa, r=sol.r_opt, n=sol.n_opt, power=sol.power,
                   cost=sol.cost, slope_reliability=sol.slope_rel_at_ropt, on_bound=sol.on_bound)
    else:
        raise DomainError(f"unknown question '{question}'")
    return row


def _verify(args, settings: Dict[str, Any]) -> DesignReport:
    sim = settings["SIMULATION_PARAMETERS"]
    cfg = SimConfig(replicates=args.replicates or sim["replicates"],
                    seed=args.seed if args.seed is not None else sim["seed"],
                    batches=sim["batches"])
    checks: List[CheckReport] = run_battery(cfg)
    scenario = None
    if args.scenario and args.replicates:
        scenario = parse_scenario(args.scenario)
        checks.extend(_simulation_checks(scenario, cfg))
    report = DesignReport("verify", scenario)
    for check in checks:
        report.add(check=check.name, passed=check.passed, observed=_fmt_list(check.observed),
                   expected=_fmt_list(check.expected), tolerance=check.tolerance, detail=check.detail)
    return report


def _simulation_checks(scenario: Scenario, cfg: SimConfig) -> List[CheckReport]:
    query = scenario.query
    engine = engine_variance(query, cfg)
    est = mc_information(query, cfg)
    checks = [CheckReport.compare("mc_unit_variance", [est.unit_variance], [engine], 3 * est.unit_variance_se,
                                  detail="Monte Carlo vs engine, 3 standard errors")]
    if scenario.n is not None:
        sim = simulate_power(query, scenario.n, cfg, confidence=0.99, threads=get_thread_cap())
        analytic = power(scenario.n, query)
        checks.append(CheckReport(name="simulated_power", passed=sim.ci_low <= analytic <= sim.ci_high,
                                  observed=[sim.rate], expected=[analytic], tolerance=sim.ci_high - sim.ci_low,
                                  detail=f"99% interval [{sim.ci_low:.4f}, {sim.ci_high:.4f}], {sim.redraws} redraws"))
    return checks


def _fmt_list(values: List[float]) -> str:
    return ", ".join(f"{v:.6g}" for v in values)


### Wizard ###

class Prompter:
    """Reads answers with bracketed defaults; an empty answer takes the default."""

    def __init__(self, input_fn: Callable[[str], str] = input):
        self.input_fn = input_fn

    def number(self, prompt: str, default: Optional[float] = None, cast=float):
        suffix = f" [{default}]" if default is not None else ""
        while True:
            text = self.input_fn(f"{prompt}{suffix}: ").strip()
            if not text and default is not None:
                return cast(default)
            try:
                return cast(text)
            except ValueError:
                print(f"  '{text}' is not a number, try again.")

    def choice(self, prompt: str, options: Sequence[int], default: int) -> int:
        while True:
            value = self.number(prompt, default, int)
            if value in options:
                return value
            print(f"  choose one of {list(options)}")


def collect_scenario(ask: Prompter, settings: Dict[str, Any]) -> Scenario:
    """Prompts in the order of the interactive design program and returns the scenario."""
    goal = ask.choice("Maximize power (1) or minimize cost (2)", (1, 2), 2)
    target_power, budget = 0.8, None
    if goal == 2:
        target_power = ask.number("Enter the desired power", 0.8)
    else:
        budget = ask.number("Enter the total budget")
    mode = "fixed_s" if ask.choice("Fixed s (1) or fixed tau (2)", (1, 2), 2) == 1 else "fixed_tau"
    horizon = ask.number("Enter tau" if mode == "fixed_tau" else "Enter s")
    pe = ask.number("Enter pe, the proportion exposed")
    v_t0 = ask.number("Enter V(t0), the variance of the baseline time", 0.0)
    rho_e_t0 = ask.number("Enter the correlation of exposure and baseline time", 0.0) if v_t0 > 0 else 0.0
    hyp = "cmd" if ask.choice("CMD (1) or LDD (2)", (1, 2), 2) == 1 else "ldd"

    if ask.choice("Absolute (1) or percent (2) scale", (1, 2), 2) == 1:
        effect = AbsoluteEffect(beta=ask.number("Enter the coefficient of interest"))
    else:
        mu00 = ask.number("Enter mu00, the mean baseline response among the unexposed")
        if hyp == "cmd":
            effect = CmdEffect(p1=ask.number("Enter p1, the percent difference at baseline (fraction)"), mu00=mu00)
        else:
            p2 = ask.number("Enter p2, the percent change among the unexposed (fraction)")
            p3 = ask.number("Enter p3, the percent difference in change (fraction)")
            p1 = ask.number("Enter p1, the percent difference at baseline (fraction)") if p2 == 0 else None
            effect = LddEffect(p2=p2, p3=p3, mu00=mu00, p1=p1)

    kind = ask.choice("Covariance: CS (1), DEX (2) or RS (3)", (1, 2, 3), 1)
    if kind == 1:
        cov = CompoundSymmetry(sigma2=ask.number("Enter sigma^2"), rho=ask.number("Enter rho"))
    elif kind == 2:
        cov = DampedExponential(sigma2=ask.number("Enter sigma^2"), rho=ask.number("Enter rho"),
                                theta=ask.number("Enter theta"))
    elif ask.choice("Standard (1) or reliability (2) notation", (1, 2), 2) == 1:
        cov = RandomSlopes(params=RsRawParams(
            sigma_w2=ask.number("Enter sigma^2 within"),
            sigma_b0_2=ask.number("Enter sigma^2 b0"),
            sigma_b1_2=ask.number("Enter sigma^2 b1"),
            sigma_b0b1=ask.number("Enter sigma b0b1", 0.0),
        ))
    else:
        sigma_t0_2 = ask.number("Enter sigma^2 at t0")
        rho_t0 = ask.number("Enter rho_t0, the baseline reliability")
        r_tilde = ask.number("Enter r~, the number of repeated measures the slope reliability refers to", cast=int)
        slope_rel = ask.number("Enter the slope reliability")
        rho_b0b1 = ask.number("Enter rho_b0b1", 0.0)
        cov = RandomSlopes(params=RsIntuitiveParams(sigma_t0_2=sigma_t0_2, rho_t0=rho_t0, rho_b0b1=rho_b0b1,
                                                    slope_rel=slope_rel, r_tilde=r_tilde, rel_mode=mode,
                                                    rel_horizon=horizon))

    c1 = ask.number("Enter c1, the cost of the first measurement", 80.0)
    kappa = ask.number("Enter kappa, the cost ratio")
    r_hi = ask.number("Enter the largest feasible r", settings["SOLVER_PARAMETERS"]["allocation_r_max"], int)

    query = DesignQuery(grid=TimeGrid(r=1, mode=mode, horizon=horizon),
                        pop=PopulationSpec(pe=pe, v_t0=v_t0, rho_e_t0=rho_e_t0),
                        cov=cov, hyp=hyp, effect=effect, alpha=settings["SOLVER_PARAMETERS"]["alpha"])
    cost = CostSpec(c1=c1, kappa=kappa, budget=budget, target_power=None if budget else target_power)
    return Scenario(name="wizard", query=query, target_power=target_power, cost=cost,
                    r_bounds=default_r_bounds(query, r_hi))


def wizard(args, settings: Dict[str, Any], input_fn: Callable[[str], str] = input) -> int:
    scenario = collect_scenario(Prompter(input_fn), settings)
    out = Path(args.out) if args.out else Path("scenario-wizard.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(scenario.model_dump(mode="json"), indent=2), encoding="utf-8")
    print(f"Scenario saved to {out}")

    sol = solve_allocation(scenario.query, scenario.cost, scenario.r_bounds, threads=get_thread_cap())
    print(f"Optimal r= {sol.r_opt}, Optimal N= {sol.n_opt}, Power= {round(sol.power, 3)}, Cost= {sol.cost:g}")
    if sol.slope_rel_at_ropt is not None:
        print(f"Slope reliability at r= {sol.r_opt}: {sol.slope_rel_at_ropt:.7f}")
    if sol.on_bound:
        print(f"Note: the optimum sits on the largest feasible r ({sol.r_opt}).")
    return 0


### Entry points ###

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--scenario", type=Path, help="Path to a scenario JSON file.")
    common.add_argument("--config", type=Path, default=None, help="Path to the YAML defaults file.")
    common.add_argument("--format", choices=["text", "csv", "json"], default=None, help="Output format.")
    common.add_argument("--seed", type=int, default=None, help="Seed for random parameter draws and simulation.")
    common.add_argument("--replicates", type=int, default=None, help="Monte Carlo replicates.")
    common.add_argument("--r-max", dest="r_max", type=int, default=None, help="Upper bound on r for scans.")
    common.add_argument("--out", type=Path, default=None, help="Write output to this file instead of stdout.")
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v for INFO, -vv for DEBUG logging.")

    parser = argparse.ArgumentParser(prog="longidesign", description="Design longitudinal studies: power, N, r and allocation.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("power", parents=[common], help="Power with the scenario's n and r.")
    sub.add_parser("n", parents=[common], help="Required number of participants.")
    sub.add_parser("r", parents=[common], help="Required number of repeated measures.")
    sub.add_parser("mde", parents=[common], help="Minimum detectable effect.")
    sub.add_parser("optimal", parents=[common], help="Cost-optimal (N, r).")
    sweep = sub.add_parser("sweep", parents=[common], help="Evaluate a question over a grid of scenario values.")
    sweep.add_argument("--axis", action="append", default=[], help="field=v1,v2,... (repeatable).")
    sweep.add_argument("--question", choices=QUESTIONS, default=None,
                       help="Question answered in every cell (optimal when a cost block exists, else n).")
    sub.add_parser("verify", parents=[common], help="Run the oracle check battery.")
    tab = sub.add_parser("tables", parents=[common], help="Rebuild the reference tables.")
    tab.add_argument("--which", choices=sorted(tables.TABLES), default="4")
    sub.add_parser("wizard", parents=[common], help="Collect a scenario interactively and solve it.")
    return parser


def _configure_logging(verbosity: int):
    level = logging.WARNING if verbosity == 0 else logging.INFO if verbosity == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def run(argv: Optional[Sequence[str]] = None, input_fn: Callable[[str], str] = input) -> int:
    """
    Parses argv, dispatches the subcommand and returns the exit status.
    """
    args = build_parser().parse_args(argv)
    _configure_logging(args.verbose)
    try:
        settings = load_defaults(args.config)
        quad = settings["QUADRATURE_PARAMETERS"]
        set_quadrature_defaults(quad["nodes"], quad["max_nodes"], quad["rel_tol"])
        out_cfg = settings["OUTPUT_PARAMETERS"]
        fmt = args.format or out_cfg["format"]
        digits = out_cfg["significant_digits"]

        if args.command == "wizard":
            return wizard(args, settings, input_fn)
        if args.command == "tables":
            df = tables.TABLES[args.which]()
            emit_results(DesignReport(f"tables-{args.which}", None, df.to_dict("records")), fmt, args.out, digits)
            return 0
        if args.command == "verify":
            report = _verify(args, settings)
            emit_results(report, fmt, args.out, digits)
            failed = [row["check"] for row in report.results if not row["passed"]]
            if failed:
                print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
                return 1
            return 0

        if args.scenario is None:
            raise ScenarioError(f"'{args.command}' needs --scenario")
        scenario = parse_scenario(args.scenario)
        threads = get_thread_cap()
        if args.command == "sweep":
            axes = dict(scenario.sweep)
            axes.update(parse_axis(text) for text in args.axis)
            if not axes:
                raise ScenarioError("sweep needs at least one axis (scenario 'sweep' block or --axis)")
            question = args.question or ("optimal" if scenario.cost else "n")
            df = evaluate_sweep(scenario, axes, lambda cell: answer(question, cell, settings, args.r_max),
                                threads=threads)
            emit_results(DesignReport(f"sweep-{question}", scenario, df.to_dict("records")), fmt, args.out, digits)
            return 0

        row = answer(args.command, scenario, settings, args.r_max, threads)
        emit_results(DesignReport(args.command, scenario, [row]), fmt, args.out, digits)
        return 0

    except ValidationError as e:
        print(format_validation_error(e), file=sys.stderr)
        return 2
    except UnattainableError as e:
        print(f"Unattainable: {e}", file=sys.stderr)
        print(f"Maximum achievable power: {e.max_power:.4f}")
        return 1
    except (DomainError, ScenarioError, ConfigError, FileNotFoundError) as e:
        print(f"Input error: {e}", file=sys.stderr)
        return 2
    except LongiDesignError as e:
        print(f"Computation error: {e}", file=sys.stderr)
        return 1


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
