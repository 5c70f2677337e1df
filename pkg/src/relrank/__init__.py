"""Deep pairwise ranking of relative visual attributes.

A small convolutional feature extractor feeds a linear ranking unit; pairs of
images are compared through a logistic posterior and trained with binary
cross-entropy against targets in {0, 0.5, 1}.
"""

from .autodiff import Tensor, backward, gradcheck, no_grad
from .data import PairDataset, SyntheticSpec, generate_synthetic, load_dataset, load_pairs
from .evaluate import EvalResult, evaluate_model, global_ranking, kendall_tau, pairwise_accuracy
from .nn import FeatureExtractorSpec, RankModel, default_spec, extract_features, rank_score
from .ranking import PosteriorConfig, pair_loss, posterior, ranking_loss, regression_loss
from .train import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "Tensor",
    "backward",
    "gradcheck",
    "no_grad",
    "PairDataset",
    "SyntheticSpec",
    "generate_synthetic",
    "load_dataset",
    "load_pairs",
    "EvalResult",
    "evaluate_model",
    "global_ranking",
    "kendall_tau",
    "pairwise_accuracy",
    "FeatureExtractorSpec",
    "RankModel",
    "default_spec",
    "extract_features",
    "rank_score",
    "PosteriorConfig",
    "pair_loss",
    "posterior",
    "ranking_loss",
    "regression_loss",
    "TrainConfig",
    "train",
]
