"""Adaptive backstepping for a 2x2 hyperbolic system with DeepONet kernel surrogates."""
from .errors import (BackstepError, ConfigurationError, ConvergenceError, DivergenceError, FormatError,
                     GridMismatchError, InvalidFieldError)
from .grid import Field, SpatialGrid, TriangleGrid, TriangleKernelGrid, triangle_integral
from .kernels import (KernelPair, backstepping_transform, boundary_input, control_law, inverse_transform,
                      solve_inverse_kernels, solve_kernels)
from .loop import KernelProvider, LyapunovWeights, SimSettings, SimTrace, run_closed_loop, time_averaged_error
from .neuralop import (DeepONetModel, KernelDataset, TrainConfig, generate_dataset, kernel_grid_from_model,
                       load_dataset, load_model, save_dataset, save_model, train)
from .plant import REFERENCE_M, FieldPair, PlantConfig, step_plant
from .swapping import FilterBank, ParamEstimate, estimates, prediction_errors, projection, step_adaptive_law

__version__ = "0.1.0"

__all__ = [
    "BackstepError",
    "ConfigurationError",
    "ConvergenceError",
    "DivergenceError",
    "FormatError",
    "GridMismatchError",
    "InvalidFieldError",
    "Field",
    "SpatialGrid",
    "TriangleGrid",
    "TriangleKernelGrid",
    "triangle_integral",
    "KernelPair",
    "backstepping_transform",
    "boundary_input",
    "control_law",
    "inverse_transform",
    "solve_inverse_kernels",
    "solve_kernels",
    "KernelProvider",
    "LyapunovWeights",
    "SimSettings",
    "SimTrace",
    "run_closed_loop",
    "time_averaged_error",
    "DeepONetModel",
    "KernelDataset",
    "TrainConfig",
    "generate_dataset",
    "kernel_grid_from_model",
    "load_dataset",
    "load_model",
    "save_dataset",
    "save_model",
    "train",
    "REFERENCE_M",
    "FieldPair",
    "PlantConfig",
    "step_plant",
    "FilterBank",
    "ParamEstimate",
    "estimates",
    "prediction_errors",
    "projection",
    "step_adaptive_law",
]
