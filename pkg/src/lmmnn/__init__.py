"""Mixed-effects neural networks: structured random effects under a Gaussian
NLL, BLUP prediction, a quadrature GLMM and a simulation harness."""

from .covariance import (Combined, CovarianceSpec, Longitudinal, MultipleCategorical,
                         RandomIntercepts, REDesignData, SpatialRBF, VarianceComponents)
from .eigendecay import categorical_spectrum, fit_decay, summed_spectrum
from .estimators import (FixedEffectsClassifier, FixedEffectsRegressor, LMMNNClassifier,
                         LMMNNRegressor)
from .glmm import auc, hermite_rule, nll_glmm, train_glmm
from .harness import ExperimentConfig, report_write, run
from .nll import TrainConfig, nll_batch, train
from .predictor import blup, blup_intercepts_fast, mse, predict, subsample_blup
from .simgen import SimSpec, gen

__version__ = "0.1.0"

__all__ = [
    "Combined", "CovarianceSpec", "Longitudinal", "MultipleCategorical", "RandomIntercepts",
    "REDesignData", "SpatialRBF", "VarianceComponents", "categorical_spectrum", "fit_decay",
    "summed_spectrum", "FixedEffectsClassifier", "FixedEffectsRegressor", "LMMNNClassifier",
    "LMMNNRegressor", "auc", "hermite_rule", "nll_glmm", "train_glmm", "ExperimentConfig",
    "report_write", "run", "TrainConfig", "nll_batch", "train", "blup", "blup_intercepts_fast",
    "mse", "predict", "subsample_blup", "SimSpec", "gen",
]
