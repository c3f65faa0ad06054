"""scikit-learn style front ends for training and scoring.

``GuidingQuestionLearner`` is a classifier over videos: ``fit`` learns the
guiding questions from video-level labels and ``predict`` returns the
learner's 0/1 verdict per video. ``VeraScorer`` is a transformer from videos
to frame-level anomaly scores. Both expose their settings through
``get_params``/``set_params`` so they clone and grid-search like any other
estimator.
"""

from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError

from .manifest import DatasetManifest, VideoRecord
from .prompting import QuestionSet, load_preset_questions
from .scorer import ScoreConfig, refine_scores, score_video
from .trainer import TrainConfig, learner_step, run_training


def _as_manifest(X, y=None) -> DatasetManifest:
    if isinstance(X, DatasetManifest):
        videos = list(X.videos)
    else:
        videos = list(X)
        if not all(isinstance(v, VideoRecord) for v in videos):
            raise TypeError("X must be a DatasetManifest or a sequence of VideoRecord")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(videos),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(videos)},)")
        if not np.array_equal(y, [v.video_label for v in videos]):
            raise ValueError("y disagrees with the video labels in X")
    return DatasetManifest("fit", tuple(videos), "train")


class GuidingQuestionLearner(ClassifierMixin, BaseEstimator):
    """Learn guiding questions for a frozen chat model from video-level labels.

    Parameters
    ----------
    chat : ChatBackend
        Backend serving both the learner and the optimizer role.
    max_iterations, batch_size, frames_per_video, question_count,
    validation_period, val_fraction, sampling_strategy, seed, max_epochs,
    optimizer_temperature : see :class:`vera.trainer.TrainConfig`.
    initial_questions : QuestionSet, optional
        Starting point; defaults to the shipped two-question preset.
    learner_template, optimizer_template : optional
        Override the shipped prompt templates.
    checkpoint_path, log_path : path, optional
        Where to write the checkpoint and the per-iteration log.

    Attributes
    ----------
    questions_ : QuestionSet
        Best validated question set.
    best_accuracy_ : float
        Its validation accuracy.
    train_state_ : TrainState
        Full final state of the optimization loop.
    """

    def __init__(
        self,
        chat=None,
        max_iterations=5000,
        batch_size=2,
        frames_per_video=8,
        question_count=5,
        validation_period=100,
        val_fraction=0.10,
        sampling_strategy="uniform",
        seed=0,
        max_epochs=10,
        optimizer_temperature=0.7,
        initial_questions=None,
        learner_template=None,
        optimizer_template=None,
        checkpoint_path=None,
        log_path=None,
    ):
        self.chat = chat
        self.max_iterations = max_iterations
        self.batch_size = batch_size
        self.frames_per_video = frames_per_video
        self.question_count = question_count
        self.validation_period = validation_period
        self.val_fraction = val_fraction
        self.sampling_strategy = sampling_strategy
        self.seed = seed
        self.max_epochs = max_epochs
        self.optimizer_temperature = optimizer_temperature
        self.initial_questions = initial_questions
        self.learner_template = learner_template
        self.optimizer_template = optimizer_template
        self.checkpoint_path = checkpoint_path
        self.log_path = log_path

    def _config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X, y=None, resume=False):
        if self.chat is None:
            raise ValueError("a chat backend is required")
        manifest = _as_manifest(X, y)
        self.classes_ = np.array([0, 1])
        best, state = run_training(
            manifest,
            self._config(),
            self.chat,
            self.learner_template,
            self.optimizer_template,
            self.initial_questions,
            checkpoint_path=self.checkpoint_path,
            log_path=self.log_path,
            resume=resume,
        )
        self.questions_ = best
        self.best_accuracy_ = state.best_acc
        self.train_state_ = state
        return self

    def predict(self, X):
        if not hasattr(self, "questions_"):
            raise NotFittedError("GuidingQuestionLearner is not fitted yet")
        videos = _as_manifest(X).videos
        cfg = self._config()
        return np.array(
            [learner_step(v, self.questions_, cfg, self.chat, self.learner_template, epoch="val") for v in videos]
        )


class VeraScorer(TransformerMixin, BaseEstimator):
    """Turn videos into frame-level anomaly scores with fixed guiding questions.

    Parameters mirror :class:`vera.scorer.ScoreConfig`, plus the backends and
    the question set (defaults to the shipped UCF-Crime preset). ``fit`` only
    validates parameters; the model itself is frozen.
    """

    def __init__(
        self,
        chat=None,
        embedder=None,
        questions=None,
        template=None,
        d=16,
        k_ratio=0.10,
        tau=10.0,
        kernel_size=15,
        sigma1=10.0,
        sigma2_ratio=0.5,
        window_seconds=10.0,
        per_window=8,
    ):
        self.chat = chat
        self.embedder = embedder
        self.questions = questions
        self.template = template
        self.d = d
        self.k_ratio = k_ratio
        self.tau = tau
        self.kernel_size = kernel_size
        self.sigma1 = sigma1
        self.sigma2_ratio = sigma2_ratio
        self.window_seconds = window_seconds
        self.per_window = per_window

    def _config(self) -> ScoreConfig:
        names = {f.name for f in fields(ScoreConfig)}
        return ScoreConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def fit(self, X=None, y=None):
        self.config_ = self._config()
        q = self.questions if self.questions is not None else load_preset_questions("ucf_crime")
        if not isinstance(q, QuestionSet):
            q = QuestionSet(tuple(q))
        self.questions_ = q
        return self

    def _check(self):
        if not hasattr(self, "config_"):
            raise NotFittedError("call fit before transform")
        if self.chat is None or self.embedder is None:
            raise ValueError("chat and embedder backends are required")

    def score_videos(self, X):
        """Return ``[(FrameScoreSeries, SegmentScoreSeries), ...]`` per video."""
        self._check()
        return [
            score_video(v, self.questions_, self.config_, self.chat, self.embedder, self.template)
            for v in _as_manifest(X).videos
        ]

    def transform(self, X):
        """List of per-video frame score arrays (videos differ in length)."""
        return [frames.scores for frames, _ in self.score_videos(X)]

    def refine(self, initial, embeddings, frame_count, steps=("ensemble", "smooth", "weight")):
        """Apply the numeric steps to cached segment verdicts and embeddings."""
        cfg = getattr(self, "config_", None) or self._config()
        frames, _, _ = refine_scores(initial, embeddings, cfg.d, frame_count, cfg, steps)
        return frames
