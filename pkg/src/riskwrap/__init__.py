"""Risk-aware wrappers for small feed-forward networks."""

from .autodiff import Tensor, cross_entropy, gaussian_nll, mse, no_grad
from .nn import Layer, SequentialModel, forward, load_checkpoint, mlp, save_checkpoint
from .optim import SGD, Adam
from .graph import clone_reinitialized, mirror_decoder, split_feature_extractor
from .wrapper import (
    RiskAwareModel,
    RiskOutput,
    TrainConfig,
    TrainingReport,
    load_wrapped,
    predict_with_risk,
    save_wrapped,
    train,
    wrap,
)
from .aleatoric import MVE, aleatoric_score
from .epistemic import VAE, Dropout, Ensemble, dropout_score, ensemble_score, ensemble_train, vae_score, vae_train
from .bias import HistogramBias, KDEBias, bias_percentiles, debias_weights, density_score, fit_density
from .composer import CompositionPlan, combine_scores, compose, joint_train_step

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "CompositionPlan",
    "Dropout",
    "Ensemble",
    "HistogramBias",
    "KDEBias",
    "Layer",
    "MVE",
    "RiskAwareModel",
    "RiskOutput",
    "SGD",
    "SequentialModel",
    "Tensor",
    "TrainConfig",
    "TrainingReport",
    "VAE",
    "aleatoric_score",
    "bias_percentiles",
    "clone_reinitialized",
    "combine_scores",
    "compose",
    "cross_entropy",
    "debias_weights",
    "density_score",
    "dropout_score",
    "ensemble_score",
    "ensemble_train",
    "fit_density",
    "forward",
    "gaussian_nll",
    "joint_train_step",
    "load_checkpoint",
    "load_wrapped",
    "mirror_decoder",
    "mlp",
    "mse",
    "no_grad",
    "predict_with_risk",
    "save_checkpoint",
    "save_wrapped",
    "split_feature_extractor",
    "train",
    "vae_score",
    "vae_train",
    "wrap",
]
