"""Differentially private training of switch-style mixture-of-experts classifiers."""
from .accountant import PrivacySpec, calibrate_sigma, epsilon_for, rdp_subsampled_gaussian, rdp_to_dp
from .dp import ClipConfig, OptState, adamw_step, clip_global, clip_per_layer, dp_step, noisy_mean
from .errors import ConfigError, InvariantError, ParameterError, PrivacyInfeasibleError, ShapeError
from .kernels import BACKEND
from .model import SwitchConfig, init_params, loss_and_grads, model_backward, model_forward
from .parallel import Cluster, distributed_dp_step
from .per_sample import compute_per_sample, per_sample_gradients
from .tensor import RngState
from .trainer import RunConfig, evaluate, train

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "ClipConfig", "Cluster", "ConfigError", "InvariantError", "OptState", "ParameterError",
    "PrivacyInfeasibleError", "PrivacySpec", "RngState", "RunConfig", "ShapeError", "SwitchConfig",
    "adamw_step", "calibrate_sigma", "clip_global", "clip_per_layer", "compute_per_sample",
    "distributed_dp_step", "dp_step", "epsilon_for", "evaluate", "init_params", "loss_and_grads",
    "model_backward", "model_forward", "noisy_mean", "per_sample_gradients", "rdp_subsampled_gaussian",
    "rdp_to_dp", "train",
]
