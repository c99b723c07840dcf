"""Learn dynamic output-feedback controllers for nonlinear SISO plants from input-output data."""
from .controller import ClosedLoopTrace, ControllerState, controller_step, simulate_closed_loop
from .dictionary import Dictionary, linear_dictionary, pendulum_dictionary
from .experiments import DataMatrices, ExperimentConfig, assemble_matrices, run_experiments
from .plant import Box, ObservabilityWindow, PendulumParams, PlantModel, get_plant, pendulum
from .roa import RoaAnalysis, empirical_roa_grid, find_gamma
from .synthesis import SynthesisResult, build_sdp, lyapunov_certificate, solve_sdp

__version__ = "0.1.0"

__all__ = [
    "Box", "ClosedLoopTrace", "ControllerState", "DataMatrices", "Dictionary", "ExperimentConfig",
    "ObservabilityWindow", "PendulumParams", "PlantModel", "RoaAnalysis", "SynthesisResult",
    "assemble_matrices", "build_sdp", "controller_step", "empirical_roa_grid", "find_gamma",
    "get_plant", "linear_dictionary", "lyapunov_certificate", "pendulum", "pendulum_dictionary",
    "run_experiments", "simulate_closed_loop", "solve_sdp",
]
