"""Learn guiding questions for a frozen vision-language model and score video frames for anomalies."""

from .estimators import GuidingQuestionLearner, VeraScorer
from .evaluator import MetricReport, aggregate, average_precision, roc_auc
from .manifest import DatasetManifest, VideoRecord, expand_labels, load_manifest, write_manifest
from .prompting import QuestionSet, load_preset_questions
from .scorer import ScoreConfig, score_video
from .trainer import TrainConfig, run_training

__all__ = [
    "DatasetManifest",
    "GuidingQuestionLearner",
    "MetricReport",
    "QuestionSet",
    "ScoreConfig",
    "TrainConfig",
    "VeraScorer",
    "VideoRecord",
    "aggregate",
    "average_precision",
    "expand_labels",
    "load_manifest",
    "load_preset_questions",
    "roc_auc",
    "run_training",
    "score_video",
    "write_manifest",
]

__version__ = "0.1.0"
