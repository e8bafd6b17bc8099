"""Separate technical from biological variation in frozen embeddings with a post-hoc linear rotation."""

__version__ = "0.1.0"

from .baselines import ComBatHarmonizer, CoralAligner, combat_fit_apply, coral_apply, coral_fit
from .clustering import ClusterModel, TissueClusterer, assign, cluster_profiles, fit_cluster_model, kmeans_fit, pca_fit
from .dataio import EmbeddingRecord, EmbeddingSet, load_embeddings, save_embeddings
from .exceptions import ConfigError, DataError, LatrotError, NumericalError
from .metrics import ari, dice_matched, nmi, stability_sweep, subspace_classifier_eval
from .pairing import PairSet, build_pair_set, knn_cosine
from .rotation import LatentRotation, Projector, build_projector, fit_rotation, split
from .survival import CoxModel, CoxPH, cox_fit, hr_report
from .synth import GroundTruth, SurvivalConfig, SynthConfig, generate, generate_survival

__all__ = [
    "ClusterModel", "ComBatHarmonizer", "ConfigError", "CoralAligner", "CoxModel", "CoxPH", "DataError",
    "EmbeddingRecord", "EmbeddingSet", "GroundTruth", "LatentRotation", "LatrotError", "NumericalError",
    "PairSet", "Projector", "SurvivalConfig", "SynthConfig", "TissueClusterer", "ari", "assign",
    "build_pair_set", "build_projector", "cluster_profiles", "combat_fit_apply", "coral_apply", "coral_fit",
    "cox_fit", "dice_matched", "fit_cluster_model", "fit_rotation", "generate", "generate_survival",
    "hr_report", "kmeans_fit", "knn_cosine", "load_embeddings", "nmi", "pca_fit", "save_embeddings",
    "split", "stability_sweep", "subspace_classifier_eval",
]
