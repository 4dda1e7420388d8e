import copy
import itertools
import logging
import pandas as pd
from concurrent.futures import ThreadPoolExecutor
from tqdm import tqdm
from typing import Any, Callable, Dict, Generator, List, Tuple

from longidesign.errors import LongiDesignError, ScenarioError
from longidesign.model.schema import Scenario

logger = logging.getLogger(__name__)


def parse_axis(text: str) -> Tuple[str, List[float]]:
    """'query.cov.rho=0.1,0.5,0.9' -> ('query.cov.rho', [0.1, 0.5, 0.9])"""
    if "=" not in text:
        raise ScenarioError(f"sweep axis must look like field=v1,v2,... got '{text}'")
    name, values = text.split("=", 1)
    try:
        return name.strip(), [float(v) for v in values.split(",") if v.strip()]
    except ValueError as e:
        raise ScenarioError(f"sweep axis '{name}' has a non-numeric value: {e}") from e


def _set_path(data: Dict[str, Any], dotted: str, value: float):
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        if not isinstance(node, dict) or node.get(key) is None:
            raise ScenarioError(f"sweep axis '{dotted}' does not name a scenario field")
        node = node[key]
    if not isinstance(node, dict) or keys[-1] not in node:
        raise ScenarioError(f"sweep axis '{dotted}' does not name a scenario field")
    node[keys[-1]] = value


def iter_sweep_cells(scenario: Scenario, axes: Dict[str, List[float]]) -> Generator[Tuple[Dict[str, float], Scenario], None, None]:
    """
    Yields (axis values, scenario) for every cell of the cross product of the axes.
    Each cell is re-validated, so an invalid combination raises with its field path.
    """
    base = scenario.model_dump(mode="json")
    names = list(axes)
    for values in itertools.product(*(axes[name] for name in names)):
        data = copy.deepcopy(base)
        for name, value in zip(names, values):
            _set_path(data, name, value)
        data["sweep"] = {}
        yield dict(zip(names, values)), Scenario.model_validate(data)


def evaluate_sweep(scenario: Scenario, axes: Dict[str, List[float]],
                   evaluate: Callable[[Scenario], Dict[str, Any]], threads: int = 1) -> pd.DataFrame:
    """
    Evaluates every sweep cell, in parallel when threads > 1. Rows keep the
    cross-product order; a cell whose computation fails carries its error text.
    """
    cells = list(iter_sweep_cells(scenario, axes))

    def run(cell: Tuple[Dict[str, float], Scenario]) -> Dict[str, Any]:
        values, cell_scenario = cell
        try:
            return {**values, **evaluate(cell_scenario), "error": ""}
        except LongiDesignError as e:
            logger.info("sweep cell %s failed: %s", values, e)
            return {**values, "error": str(e)}

    print(f"\nEvaluating {len(cells)} sweep cells...")
    if threads > 1 and len(cells) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(tqdm(pool.map(run, cells), total=len(cells), desc="Sweeping", unit="cells"))
    else:
        rows = [run(cell) for cell in tqdm(cells, desc="Sweeping", unit="cells")]
    return pd.DataFrame(rows)
