"""Quantized policies for controlled diffusions.

Finite-difference and Monte Carlo evaluation of finite-horizon, discounted,
ergodic, and exit-time costs under relaxed Markov policies; policy
iteration for the HJB equations; action, space, and time quantization of
policies; and test-function pairings that measure policy convergence.
"""

from .errors import (ConfigError, DiffQuantError, NumericalError, ScheduleTooCoarse)
from .grid import Dirichlet, DiscreteField, Grid, Neumann
from .model import ActionBox, Box, ControlModel, eval_cost, eval_diffusion_matrix, eval_drift
from .policy import (ActionGrid, CellPolicy, FiniteActionPolicy, KernelPolicy, NodalPolicy,
                     Policy, SimplexGrid, TimeCellPolicy, build_action_grid,
                     discretize_policy_time, nearest_action, nearest_simplex,
                     quantize_policy_actions, quantize_policy_space)
from .simulate import (CostReport, SimConfig, mc_discounted, mc_ergodic, mc_exit,
                       mc_finite_horizon, simulate_path)
from .pde import (discretize_generator, riccati_oracle, solve_discounted, solve_ergodic,
                  solve_exit, solve_hjb_discounted, solve_hjb_ergodic, solve_hjb_exit,
                  solve_hjb_parabolic, solve_parabolic, vanishing_discount)
from .borkar import TestPair, default_bank, pairing, pairing_markov, pseudo_distance

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DiffQuantError", "NumericalError", "ScheduleTooCoarse",
    "Grid", "Neumann", "Dirichlet", "DiscreteField",
    "Box", "ActionBox", "ControlModel", "eval_drift", "eval_cost", "eval_diffusion_matrix",
    "ActionGrid", "Policy", "KernelPolicy", "FiniteActionPolicy", "NodalPolicy", "CellPolicy",
    "TimeCellPolicy", "SimplexGrid", "build_action_grid", "nearest_action", "nearest_simplex",
    "quantize_policy_actions", "quantize_policy_space", "discretize_policy_time",
    "SimConfig", "CostReport", "simulate_path", "mc_finite_horizon", "mc_discounted",
    "mc_ergodic", "mc_exit",
    "discretize_generator", "solve_discounted", "solve_exit", "solve_ergodic",
    "vanishing_discount", "solve_hjb_discounted", "solve_hjb_exit", "solve_hjb_ergodic",
    "solve_hjb_parabolic", "solve_parabolic", "riccati_oracle",
    "TestPair", "pairing", "pairing_markov", "pseudo_distance", "default_bank",
]
