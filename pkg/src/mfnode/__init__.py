"""Particle simulator and convergence certificates for mean-field neural ODEs."""

from .model import (Activation, Dataset, LiftedProblem, ParameterMeasure, energy, init_fixup,
                    init_random, lift, synthetic_dataset)
from .flow import FlowError, adjoint, forward, gradient, grad_norm_sq, resolvent, risk
from .cot import cot_distance, displacement, wasserstein_lower_bound
from .kernels import fourier_kernel, full_kernel_matrix, k1_matrix, lambda0
from .certify import Certificate, certify, kernel_lower_bounds, select_alpha
from .trainer import TrainerConfig, TrajectoryLog, step, train

__version__ = "0.1.0"

__all__ = [
    "Activation", "Certificate", "Dataset", "FlowError", "LiftedProblem", "ParameterMeasure", "adjoint",
    "certify", "cot_distance", "displacement", "energy", "forward", "fourier_kernel", "full_kernel_matrix",
    "grad_norm_sq", "gradient", "init_fixup", "init_random", "k1_matrix", "kernel_lower_bounds", "lambda0", "lift",
    "resolvent", "risk", "select_alpha", "step", "synthetic_dataset", "train",
    "TrainerConfig", "TrajectoryLog", "wasserstein_lower_bound",
]
