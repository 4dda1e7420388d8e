from .covariance import build_covariance, inverse_sums, slope_reliability, rs_intuitive_to_raw
from .variance_engine import unit_variance, var_limit_r_inf
from .solvers import power, required_n, required_r, min_detectable_effect, inflate_for_dropout
from .allocation import solve_allocation, optimal_r, optimal_n
from .oracle import mc_information, simulate_power, run_battery

__version__ = "0.1.0"
