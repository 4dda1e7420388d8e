import os
import argparse
import pandas as pd
from pathlib import Path

from longidesign.utils import load_config, load_scenario, get_thread_cap
from longidesign.variance_engine import set_quadrature_defaults, unit_variance, limit_for_query
from longidesign.solvers import power, required_n, min_detectable_effect, mde_percent
from longidesign.allocation import allocation_surface, default_r_bounds, solve_allocation

# root path setup
PROJECT_ROOT = Path(__file__).resolve().parent.parent
PATHS = {
    "OUTPUT": PROJECT_ROOT / "data/processed",
}


def main(config_yaml: Path, scenario_json: Path):

    # worker cap from the environment or .env
    threads = get_thread_cap()
    print(f"Worker threads: {threads}.")

    # load config file
    config = load_config(config_yaml)
    print(f"Loaded yaml file from {config_yaml}.")
    quad = config['QUADRATURE_PARAMETERS']
    set_quadrature_defaults(quad['nodes'], quad['max_nodes'], quad['rel_tol'])

    scenario = load_scenario(scenario_json)
    query = scenario.query
    print(f"Loaded scenario '{scenario.name}' ({query.hyp.upper()}, {query.cov.kind.upper()}, r={query.grid.r}).")

    ### Step 1: unit variance and its r -> infinity limit ###
    uv = unit_variance(query)
    limit = limit_for_query(query)
    print(f"\nUnit variance: {uv.value:.6g} ({uv.method}); limit as r grows: {limit.kind} {limit.value or ''}")
    #############################


    ### Step 2: sample size, power and detectable effect ###
    results = {"scenario": scenario.name, "unit_variance": uv.value,
               "n_required": required_n(scenario.target_power, query)}
    if scenario.n is not None:
        results["power_at_n"] = power(scenario.n, query)
        results["mde_percent"] = 100 * mde_percent(min_detectable_effect(scenario.target_power, scenario.n, query))
    print(f"Required N for power {scenario.target_power}: {results['n_required']}")
    #############################


    ### Step 3: allocation surface and optimum ###
    PATHS['OUTPUT'].mkdir(parents=True, exist_ok=True)
    scenario_fn = os.path.basename(scenario_json).replace(".json", "")
    if scenario.cost is not None:
        r_hi = config['SOLVER_PARAMETERS']['allocation_r_max']
        bounds = scenario.r_bounds or default_r_bounds(query, r_hi)
        sol = solve_allocation(query, scenario.cost, bounds, threads=threads)
        results.update(r_opt=sol.r_opt, n_opt=sol.n_opt, power_opt=sol.power, cost_opt=sol.cost)
        print(f"Optimal r= {sol.r_opt}, Optimal N= {sol.n_opt}, Power= {sol.power:.4f}, Cost= {sol.cost:g}")

        surface = allocation_surface(query, scenario.cost, bounds)
        surface_file = PATHS['OUTPUT'] / f"surface-{scenario_fn}.csv"
        surface.to_csv(surface_file, index=False)
        print(f"Allocation surface saved to {surface_file}")
    #############################


    ### Step 4: Save summary to output data/processed directory ###
    output_file = PATHS['OUTPUT'] / f"design-{scenario_fn}.csv"
    pd.DataFrame([results]).to_csv(output_file, index=False)
    print(f"\nSaved to {output_file}")
    #############################


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description="Run a longitudinal design scenario end to end.")
    parser.add_argument("--config_yaml", type=str, default="config/defaults.yaml",
                        help="Path to the configuration YAML file.")
    parser.add_argument("--scenario", type=str, default="config/scenarios/table4_ldd_cs.json",
                        help="Path to the scenario JSON file.")
    args = parser.parse_args()

    main(Path(args.config_yaml), Path(args.scenario))
