"""Siamese-network sub-models fused into re-identification ensembles."""

__version__ = "0.1.0"

from .errors import (ConfigError, IngestError, ReidentError, SpecError, TrainingError,
                     ValidationError)
from .data import (FoldAssignment, QueryGallerySplit, Sample, assign_folds, build_query_gallery,
                   generate_synthetic, load_dataset, write_manifest)
from .features import FeatureVector, extract, extract_matrix, import_features, join_features
from .neural import (EmbeddingModel, LayerSpec, NetworkSpec, TrainConfig, dense_spec, embed_all,
                     image_spec, train_siamese, triplet_loss)
from .ensemble import (EnsembleTransform, WeightVector, ZScoreStats, apply_concatenation,
                       fit_transform, fit_weighted_accuracy, fit_weighted_triplet, fit_zscore,
                       majority_vote_ranking)
from .evaluation import (cmc_curve, leave_one_out_ablation, pairwise_improvement_matrix,
                         rank_k_accuracy, relative_uncertainty, triplet_correlation)
from .pipeline import (AnalysisConfig, EnsembleConfig, EvaluationReport, SubModelConfig,
                       cross_validate, representation_size_sweep)

__all__ = [name for name in dir() if not name.startswith("_")]
