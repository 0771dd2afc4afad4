"""Training-data attribution for sparse, low-rank and factorization models.

Each prediction of an l1- or nuclear-norm regularized model, and of a
matrix factorization recommender, splits exactly into per-training-point
contributions ``global * local``.
"""

__version__ = "0.1.0"

from .baselines import influence_l1, l2_representer, random_scores, tracin_cp
from .datasets import (
    EmbeddingPair,
    InteractionSet,
    LabeledDataset,
    parse_libsvm,
    parse_movielens,
)
from .errors import ConvergenceError, DivergenceError, InvalidInputError, ParseError
from .evaluation import auc_del, del_curve, run_case_deletion
from .linalg import SparseVector, SvdTriple, randomized_svd, thin_svd
from .losses import BCE, LOGISTIC, SQUARED, LossFunction, get_loss
from .models import L1LinearModel, LowRankModel, MFModel, load_model, save_model
from .representers import (
    AttributionRecord,
    CFExplainer,
    L1Explainer,
    aggregate_negative_importance,
    cf_importance,
    l1_attribute,
    normalize_factors,
    nuclear_attribute,
)
from .solvers import fit_l1, fit_mf_sgd, soft_impute

__all__ = [
    "AttributionRecord", "BCE", "CFExplainer", "ConvergenceError", "DivergenceError", "EmbeddingPair",
    "InteractionSet", "InvalidInputError", "L1Explainer", "L1LinearModel", "LOGISTIC", "LabeledDataset",
    "LossFunction", "LowRankModel", "MFModel", "ParseError", "SQUARED", "SparseVector", "SvdTriple",
    "aggregate_negative_importance", "auc_del", "cf_importance", "del_curve", "fit_l1", "fit_mf_sgd",
    "get_loss", "influence_l1", "l1_attribute", "l2_representer", "load_model", "normalize_factors",
    "nuclear_attribute", "parse_libsvm", "parse_movielens", "random_scores", "randomized_svd",
    "run_case_deletion", "save_model", "soft_impute", "thin_svd", "tracin_cp",
]
