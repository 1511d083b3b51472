"""Evaluation metrics, factor speculators and plots."""
from .metrics import (
    MetricReport,
    Stat,
    disentanglement_score,
    disentanglement_vectors,
    fit_logistic_regression,
    intra_cluster_distances,
    intra_cluster_variance,
    linear_probe_accuracy,
    reconstruction_error,
    sci_error,
    sfi_error,
)
from .plots import PLOT_KINDS, emit_plots, plot_acceleration_profiles, plot_latent_traversal, plot_learning_curves
from .speculators import SPECULATORS, NoSpeculatorError, get_speculator, speculate_highway_p, speculate_nav2d_goal

__all__ = [
    "MetricReport",
    "Stat",
    "disentanglement_score",
    "disentanglement_vectors",
    "fit_logistic_regression",
    "intra_cluster_distances",
    "intra_cluster_variance",
    "linear_probe_accuracy",
    "reconstruction_error",
    "sci_error",
    "sfi_error",
    "PLOT_KINDS",
    "emit_plots",
    "plot_acceleration_profiles",
    "plot_latent_traversal",
    "plot_learning_curves",
    "SPECULATORS",
    "NoSpeculatorError",
    "get_speculator",
    "speculate_highway_p",
    "speculate_nav2d_goal",
]
