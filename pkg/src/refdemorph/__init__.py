"""Reference-based face demorphing with a self-contained synthetic test bed.

The package restores the identity hidden inside a suspected morph given a
trusted live capture of the other contributor, and ships the evaluation
machinery (thresholds, error rates, attack-potential tables) around it.
Everything runs on an analytically tractable toy imaging world so results
are exactly reproducible and independently checkable.
"""
from .core import (DemorphError, DecodeError, DivisionDomain, DocumentPair,
                   EmptyDataset, EmptyScoreSet, FeatureMap, IdentityRole,
                   ImageTensor, InsufficientIdentities, LatentCode,
                   LABEL_BONA_FIDE, LABEL_MORPH, LossWeights,
                   MissingGroundTruth, MissingLiveCapture, PassType,
                   RangeError, RestorationScenario, ScenarioNotApplicable,
                   ScoreRecord, ShapeMismatch, StateMismatch,
                   TooSmallForScales, UnknownKind, target_and_nontarget,
                   validate_pair)
from .backends import (DTYPE, BackendConfig, Discriminator, ToyBackends,
                       ToyEncoder, ToyFaceRecognizer, ToyGenerator,
                       ToyPerceptual, build_toy_backends, preprocess)
from .losses import LossReport, compose_losses, ms_ssim, total_loss
from .demorpher import (CHECKPOINT_FORMAT, CheckpointState, DemorpherModel,
                        FeatureDemorph, FeatureFusion, ImageDemorph,
                        demorph, demorph_batch, load_checkpoint,
                        save_checkpoint)
from .training import TrainConfig, TrainingData, train
from .dmad import (Threshold, calibrate_threshold, classify, score_pair,
                   similarity_score)
from .metrics import (DetCurve, MapTable, ScoreSet, bms, bscer,
                      bscer_at_macer, build_dd, det_curve, dnti, dti, eer,
                      macer, map_matrix, read_scores_csv, write_det_csv,
                      write_map_csv, write_metrics_csv, write_scores_csv)
from .toyworld import (CaptureParams, CorpusConfig, CorpusData,
                       ToyCorpusManifest, ToyWorld, build_corpus, corrupt)
from .config import (RunConfig, apply_overrides, load_config, parse_config,
                     to_lines, toy_train_config)

__version__ = "0.1.0"

__all__ = [
    "DemorphError", "DecodeError", "DivisionDomain", "DocumentPair",
    "EmptyDataset", "EmptyScoreSet", "FeatureMap", "IdentityRole",
    "ImageTensor", "InsufficientIdentities", "LatentCode", "LABEL_BONA_FIDE",
    "LABEL_MORPH", "LossWeights", "MissingGroundTruth", "MissingLiveCapture",
    "PassType", "RangeError", "RestorationScenario", "ScenarioNotApplicable",
    "ScoreRecord", "ShapeMismatch", "StateMismatch", "TooSmallForScales",
    "UnknownKind", "target_and_nontarget", "validate_pair",
    "DTYPE", "BackendConfig", "Discriminator", "ToyBackends", "ToyEncoder",
    "ToyFaceRecognizer", "ToyGenerator", "ToyPerceptual",
    "build_toy_backends", "preprocess",
    "LossReport", "compose_losses", "ms_ssim", "total_loss",
    "CHECKPOINT_FORMAT", "CheckpointState", "DemorpherModel",
    "FeatureDemorph", "FeatureFusion", "ImageDemorph", "demorph",
    "demorph_batch", "load_checkpoint", "save_checkpoint",
    "TrainConfig", "TrainingData", "train",
    "Threshold", "calibrate_threshold", "classify", "score_pair",
    "similarity_score",
    "DetCurve", "MapTable", "ScoreSet", "bms", "bscer", "bscer_at_macer",
    "build_dd", "det_curve", "dnti", "dti", "eer", "macer", "map_matrix",
    "read_scores_csv", "write_det_csv", "write_map_csv",
    "write_metrics_csv", "write_scores_csv",
    "CaptureParams", "CorpusConfig", "CorpusData", "ToyCorpusManifest",
    "ToyWorld", "build_corpus", "corrupt",
    "RunConfig", "apply_overrides", "load_config", "parse_config",
    "to_lines", "toy_train_config",
    "__version__",
]
