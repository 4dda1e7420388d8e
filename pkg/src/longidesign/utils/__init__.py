from .loader import format_validation_error, get_thread_cap, load_config, load_scenario
from .sweep import evaluate_sweep, iter_sweep_cells, parse_axis
