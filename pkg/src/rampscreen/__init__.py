"""Ramp-loss SVM training with safe sample screening."""

from .dataio import (Dataset, LibsvmParseError, format_libsvm, load_libsvm, make_synthetic,
                     parse_libsvm, save_libsvm, subsample)
from .kernel import KernelCache, KernelSpec
from .solver import (CilProblem, SolverConfig, SolverState, build_problem, compute_gap,
                     estimate_bias, fix_and_compensate, select_working_pair, solve)
from .screening import (Decision, DynamicScreening, PropagationBounds, ScreeningReport,
                        bias_interval, compute_propagation_bounds, dynamic_screen,
                        propagate_screen, schedule)
from .cccp import (MODES, CccpTrace, Model, TrainConfig, compute_mu, load_model, predict,
                   predict_many, ramp_objective, train)

__version__ = "0.1.0"

__all__ = [
    "Dataset", "LibsvmParseError", "format_libsvm", "load_libsvm", "make_synthetic",
    "parse_libsvm", "save_libsvm", "subsample",
    "KernelCache", "KernelSpec",
    "CilProblem", "SolverConfig", "SolverState", "build_problem", "compute_gap",
    "estimate_bias", "fix_and_compensate", "select_working_pair", "solve",
    "Decision", "DynamicScreening", "PropagationBounds", "ScreeningReport", "bias_interval",
    "compute_propagation_bounds", "dynamic_screen", "propagate_screen", "schedule",
    "MODES", "CccpTrace", "Model", "TrainConfig", "compute_mu", "load_model", "predict",
    "predict_many", "ramp_objective", "train",
]
