"""Learning guiding questions by verbal optimization.

Each iteration draws a mini-batch of training videos, asks the learner (chat
model + learner template + current questions) for a 0/1 verdict per video,
then shows the optimizer (chat model + optimizer template) the frames, the
verdicts and the video labels and parses a rewritten question list from its
reply. Every ``validation_period`` iterations the current questions are scored
on a held-out split; the best-scoring set is kept and returned.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ._concurrency import ordered_map
from ._validation import check_fraction, check_positive_int
from .gateway import ChatRequest, load_frames
from .manifest import DatasetManifest
from .prompting import (
    LearnerTemplate,
    OptimizerTemplate,
    ParseFailure,
    QuestionSet,
    load_learner_template,
    load_optimizer_template,
    load_preset_questions,
    parse_binary_verdict,
    parse_question_set,
    render_learner_prompt,
    render_optimizer_prompt,
)
from .sampler import SAMPLERS, VideoTooShort, derive_seed, sample_frames

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    max_iterations: int = 5000
    batch_size: int = 2
    frames_per_video: int = 8
    question_count: int = 5
    validation_period: int = 100
    val_fraction: float = 0.10
    sampling_strategy: str = "uniform"
    seed: int = 0
    max_epochs: int = 10
    optimizer_temperature: float = 0.7
    optimizer_retries: int = 2
    image_limit: int = 16

    def __post_init__(self):
        if self.max_iterations < 0:
            raise ValueError("max_iterations must be non-negative")
        check_positive_int(self.batch_size, "batch_size")
        check_positive_int(self.frames_per_video, "frames_per_video")
        check_positive_int(self.question_count, "question_count")
        check_positive_int(self.validation_period, "validation_period")
        check_positive_int(self.max_epochs, "max_epochs")
        check_fraction(self.val_fraction, "val_fraction", closed_high=False)
        if self.sampling_strategy not in SAMPLERS:
            raise ValueError(f"sampling_strategy must be one of {sorted(SAMPLERS)}")
        if self.batch_size * self.frames_per_video > self.image_limit:
            raise ValueError(
                f"batch_size * frames_per_video = {self.batch_size * self.frames_per_video} "
                f"exceeds the image limit {self.image_limit}"
            )
        if self.optimizer_retries < 0 or self.optimizer_temperature < 0:
            raise ValueError("optimizer_retries and optimizer_temperature must be non-negative")

    def digest(self) -> str:
        """Hash of the settings a resumed run must share with the original."""
        d = asdict(self)
        d.pop("max_iterations")
        d.pop("max_epochs")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class TrainState:
    t: int
    current_q: QuestionSet
    best_q: QuestionSet
    best_acc: float
    epoch: int = 0
    history: list = field(default_factory=list)

    @property
    def iterations_done(self) -> int:
        return self.t - 1

    def to_json(self) -> dict:
        def q(x):
            return {"questions": list(x.questions), "iteration": x.iteration, "val_accuracy": x.val_accuracy}

        return {
            "t": self.t,
            "epoch": self.epoch,
            "current_q": q(self.current_q),
            "best_q": q(self.best_q),
            "best_acc": self.best_acc,
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_json(cls, obj) -> "TrainState":
        def q(x):
            return QuestionSet(tuple(x["questions"]), x["iteration"], x["val_accuracy"])

        return cls(
            t=obj["t"],
            current_q=q(obj["current_q"]),
            best_q=q(obj["best_q"]),
            best_acc=obj["best_acc"],
            epoch=obj["epoch"],
            history=[tuple(h) for h in obj["history"]],
        )


def save_checkpoint(state: TrainState, config: TrainConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"config_digest": config.digest(), "config": asdict(config), "state": state.to_json()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    tmp.replace(path)


def load_checkpoint(path, config: TrainConfig) -> TrainState:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if payload.get("config_digest") != config.digest():
        raise ValueError("checkpoint was written with a different training configuration")
    return TrainState.from_json(payload["state"])


# ---------------------------------------------------------------------------
# Data split
# ---------------------------------------------------------------------------


def split_validation(manifest: DatasetManifest, val_fraction: float = 0.10, seed: int = 0):
    """Seeded, label-stratified split into ``(train, val)`` manifests."""
    N = len(manifest)
    if N < 2:
        raise ValueError("need at least two videos to hold out a validation set")
    check_fraction(val_fraction, "val_fraction", closed_high=False)
    n_val = min(N - 1, max(1, int(math.floor(val_fraction * N + 0.5))))
    rng = np.random.default_rng(derive_seed(seed, "split"))
    by_label = {lab: [v.id for v in manifest.videos if v.video_label == lab] for lab in (0, 1)}
    for ids in by_label.values():
        rng.shuffle(ids)
    n_pos = int(math.floor(n_val * len(by_label[1]) / N + 0.5))
    if n_val >= 2 and by_label[0] and by_label[1]:
        n_pos = min(max(n_pos, 1), n_val - 1)
    n_pos = min(n_pos, len(by_label[1]))
    n_neg = min(n_val - n_pos, len(by_label[0]))
    n_pos = n_val - n_neg
    val_ids = set(by_label[1][:n_pos] + by_label[0][:n_neg])
    order = [v.id for v in manifest.videos]
    train = manifest.subset([i for i in order if i not in val_ids], split="train")
    val = manifest.subset([i for i in order if i in val_ids], split="val")
    return train, val


# ---------------------------------------------------------------------------
# Learner / optimizer calls
# ---------------------------------------------------------------------------


def _sample_for(record, config: TrainConfig, epoch) -> list:
    return sample_frames(
        record.frame_count,
        config.frames_per_video,
        config.sampling_strategy,
        derive_seed(config.seed, str(epoch), record.id),
    )


def learner_step(record, q: QuestionSet, config: TrainConfig, chat, template: Optional[LearnerTemplate] = None, epoch=0) -> int:
    """Binary verdict of the learner on one video's sampled frames."""
    if record.frame_count < config.frames_per_video:
        raise VideoTooShort(f"video {record.id!r} has {record.frame_count} < {config.frames_per_video} frames")
    template = template or load_learner_template()
    images = load_frames(record, _sample_for(record, config, epoch))
    request = ChatRequest(render_learner_prompt(template, q, n_images=len(images)), tuple(images), 0.0)
    try:
        return parse_binary_verdict(chat.chat(request))
    except ParseFailure:
        logger.info("learner reply for %s unparseable; retrying once", record.id)
        return parse_binary_verdict(chat.chat(request))


def optimizer_step(
    batch,
    q: QuestionSet,
    config: TrainConfig,
    chat,
    template: Optional[OptimizerTemplate] = None,
    t: int = 0,
    epoch=0,
) -> QuestionSet:
    """One verbal update of the questions from ``(record, pred, target)`` triples.

    Returns the parsed set of ``config.question_count`` questions tagged with
    iteration ``t + 1``. If the reply still has the wrong shape after
    ``config.optimizer_retries`` retries, the input questions are returned
    unchanged (re-tagged with ``t + 1``).
    """
    if not batch or len(batch) > config.batch_size:
        raise ValueError(f"batch must hold 1..{config.batch_size} videos, got {len(batch)}")
    template = template or load_optimizer_template()
    images = []
    for record, _, _ in batch:
        images.extend(load_frames(record, _sample_for(record, config, epoch)))
    prompt = render_optimizer_prompt(
        template,
        q,
        [p for _, p, _ in batch],
        [y for _, _, y in batch],
        m=config.question_count,
        images_per_video=config.frames_per_video,
    )
    request = ChatRequest(prompt, tuple(images), temperature=config.optimizer_temperature, max_tokens=1024)
    for attempt in range(config.optimizer_retries + 1):
        reply = chat.chat(request)
        try:
            return parse_question_set(reply, config.question_count, iteration=t + 1)
        except ParseFailure as exc:
            logger.info("optimizer reply rejected (%s), attempt %d", exc, attempt + 1)
    return replace(q, iteration=t + 1, val_accuracy=None)


def validate(
    q: QuestionSet,
    val: DatasetManifest,
    config: TrainConfig,
    chat,
    template: Optional[LearnerTemplate] = None,
    return_skipped: bool = False,
):
    """Fraction of validation videos whose label the learner predicts correctly."""
    usable = [v for v in val.videos if v.frame_count >= config.frames_per_video]
    skipped = [v.id for v in val.videos if v.frame_count < config.frames_per_video]
    if skipped:
        logger.warning("skipping %d validation videos shorter than %d frames: %s", len(skipped), config.frames_per_video, skipped)
    if not usable:
        raise ValueError("no usable validation videos")
    workers = max(1, getattr(chat, "parallelism", 1))
    preds = ordered_map(lambda v: learner_step(v, q, config, chat, template, epoch="val"), usable, workers)
    acc = float(np.mean([p == v.video_label for p, v in zip(preds, usable)]))
    return (acc, skipped) if return_skipped else acc


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _epoch_order(train: DatasetManifest, seed: int, epoch: int) -> list:
    rng = np.random.default_rng(derive_seed(seed, "epoch", epoch))
    return [train.videos[i] for i in rng.permutation(len(train))]


def eligible_videos(manifest: DatasetManifest, config: TrainConfig) -> DatasetManifest:
    short = [v.id for v in manifest.videos if v.frame_count < config.frames_per_video]
    if short:
        logger.warning("excluding %d videos shorter than %d frames: %s", len(short), config.frames_per_video, short)
    return manifest.subset([v.id for v in manifest.videos if v.id not in set(short)])


def run_training(
    manifest: DatasetManifest,
    config: TrainConfig,
    chat,
    learner_template: Optional[LearnerTemplate] = None,
    optimizer_template: Optional[OptimizerTemplate] = None,
    initial_questions: Optional[QuestionSet] = None,
    checkpoint_path=None,
    log_path=None,
    resume: bool = False,
):
    """Optimize the guiding questions; returns ``(best_questions, state)``.

    The initial questions are validated before the first iteration, so the
    returned accuracy is never below theirs. With ``resume=True`` and an
    existing checkpoint, training continues from the recorded iteration.
    """
    learner_template = learner_template or load_learner_template()
    optimizer_template = optimizer_template or load_optimizer_template()
    q0 = initial_questions or load_preset_questions("initial")
    manifest = eligible_videos(manifest, config)
    train, val = split_validation(manifest, config.val_fraction, config.seed)
    n = config.batch_size
    batches_per_epoch = math.ceil(len(train) / n)
    cap = min(config.max_iterations, config.max_epochs * batches_per_epoch)

    log = open(log_path, "a" if resume else "w", encoding="utf-8") if log_path else None

    def emit(record):
        if log:
            log.write(json.dumps(record) + "\n")
            log.flush()

    try:
        if resume and checkpoint_path and Path(checkpoint_path).exists():
            state = load_checkpoint(checkpoint_path, config)
            logger.info("resuming at iteration %d", state.t)
        else:
            acc0 = validate(q0, val, config, chat, learner_template)
            q0 = q0.with_accuracy(acc0)
            state = TrainState(t=1, current_q=q0, best_q=q0, best_acc=acc0, history=[(0, acc0)])
            emit({"t": 0, "val_accuracy": acc0})

        while state.t <= cap:
            k = state.t - 1
            epoch, cursor = divmod(k, batches_per_epoch)
            state.epoch = epoch
            order = _epoch_order(train, config.seed, epoch)
            batch_videos = order[cursor * n:(cursor + 1) * n]
            workers = max(1, getattr(chat, "parallelism", 1))
            preds = ordered_map(
                lambda v: learner_step(v, state.current_q, config, chat, learner_template, epoch),
                batch_videos,
                workers,
            )
            batch = [(v, p, v.video_label) for v, p in zip(batch_videos, preds)]
            new_q = optimizer_step(batch, state.current_q, config, chat, optimizer_template, state.t, epoch)
            emit(
                {
                    "t": state.t,
                    "batch": [v.id for v in batch_videos],
                    "preds": preds,
                    "targets": [v.video_label for v in batch_videos],
                    "changed": new_q.questions != state.current_q.questions,
                }
            )
            state.current_q = new_q
            state.t += 1
            if state.t % config.validation_period == 0:
                acc = validate(state.current_q, val, config, chat, learner_template)
                state.current_q = state.current_q.with_accuracy(acc)
                state.history.append((state.t, acc))
                emit({"t": state.t, "val_accuracy": acc})
                if acc > state.best_acc:
                    state.best_q, state.best_acc = state.current_q, acc
                if checkpoint_path:
                    save_checkpoint(state, config, checkpoint_path)
        if checkpoint_path:
            save_checkpoint(state, config, checkpoint_path)
    finally:
        if log:
            log.close()
    return state.best_q, state
