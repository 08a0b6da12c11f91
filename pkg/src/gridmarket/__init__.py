"""Peer-to-peer energy market optimization.

DERs sell surplus energy, loads cover fixed demands, and the grid root node
(PCC) steers trades toward an electrically efficient allocation through
price discounts.  The package provides the market model, objective
transformations, a centralized multi-start solver with a grid-search
oracle, a region-partitioned consensus solver, and scenario sweeps with CSV
reporting.
"""

from .model import (MarketInstance, ObjectiveValues, TradeMask, TradeState,
                    baseline_state, check_feasible, compute_trade_mask,
                    der_revenue, load_expense, pcc_distance, rationality_check,
                    report_distance, validate_instance)
from .transform import (PosyCoefficients, Weights, jensen_surrogate_der,
                        jensen_surrogate_load, log_domain_der_objective,
                        log_domain_load_objective, posy_coefficients,
                        posy_der_objective, posy_load_objective,
                        scalarized_gradient, scalarized_objective,
                        surrogate_scalarized_objective)
from .solver import (Solution, SolverError, SolverOptions, brute_force_oracle,
                     default_lambda, kkt_residual, oracle_cell_bound,
                     pareto_sweep, solve_scalarized)
from .admm import (AdmmTrace, RegionPartition, admm_solve, partition_by_branch,
                   residual_trace, split_objective, write_trace_csv)
from .scenarios import (Scenario, SweepRecord, builtin_scenarios, der_gain,
                        emit_csv, load_config, load_gain, parse_csv,
                        run_scenario)

__version__ = "0.1.0"
