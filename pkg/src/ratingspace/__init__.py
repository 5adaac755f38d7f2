"""Latent item spaces from ratings and their genre content.

Factor models (regularized SVD, delta-SVD, NNMF) and an MDS baseline turn a
rating matrix into item coordinates; those are put in canonical form and
scored by how well simple classifiers recover genres from them.
"""

from .classify import (
    DEFAULT_CLASSIFIER_IDS,
    ClassifierSpec,
    DistanceKind,
    LabeledPoints,
    SvmModel,
    knn_classify,
    knn_distance,
    parse_classifier,
    svm_predict,
    svm_train,
)
from .evaluate import EvalReport, Outcome, SplitPlan, kappa, make_splits, render_tables, run_experiment
from .factor import Factorization, ModelKind, TrainConfig, gradient, objective, predict, sse, train
from .ingest import LabelSet, RatingDataset, filter_min_ratings, parse_labels, parse_ratings
from .neighbor import DistanceMatrix, MdsConfig, build_distance_matrix, mds_embed, pearson, shrink, to_distance
from .standardize import CoordinateSpace, column_variances

__version__ = "0.1.0"
