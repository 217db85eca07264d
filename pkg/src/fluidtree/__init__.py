"""Fluid queueing network control: discretized LP solves and tree policies."""
from .exceptions import FluidTreeError
from .network import (
    NetworkSpec, build_matrices, is_stable, load_spec, make_crisscross, make_reentrant,
    make_rybko_stolyar, random_reentrant, save_spec, workload,
)
from .fluid_solver import (
    DiscretizationConfig, FluidSolution, default_horizon, initial_control,
    priority_indices, solve_fluid, verify_pontryagin,
)

__version__ = "0.1.0"
