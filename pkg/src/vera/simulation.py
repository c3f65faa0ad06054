"""Deterministic simulated backends for testing without a real model.

A :class:`SimWorld` plants anomaly intervals in named videos. The simulated
chat backend answers learner prompts by checking whether any of the attached
frames falls inside a planted interval, and is right with probability
``detector_accuracy`` plus a bonus for every vocabulary keyword that appears in
the guiding questions. Whether a given answer is right is decided by a hash of
the frames, so raising the accuracy only ever flips wrong answers to right
ones. Optimizer prompts are answered by :func:`sim_optimizer_reply`.

Every reply is a pure function of the world and the request.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .gateway import ChatBackend, ChatRequest, EmbeddingBackend, decode_sim_frame
from .manifest import DatasetManifest, VideoRecord
from .prompting import QuestionSet, extract_numbered_list, split_rendered_sections
from .sampler import derive_seed

FILLER_QUESTIONS = (
    "Is anyone in the scene moving in an unusual way?",
    "Is any object being handled or used in an unusual way?",
    "Does the overall environment look different from an ordinary day?",
    "Is there any interaction between people that looks unusual?",
    "Is anything in the scene damaged or out of place?",
    "Is any vehicle behaving in an unusual way?",
    "Are people reacting to something unexpected?",
    "Is there a sudden change between consecutive frames?",
)


@dataclass(frozen=True)
class SimWorld:
    videos: dict = field(default_factory=dict)
    detector_accuracy: float = 1.0
    vocabulary: tuple = ()
    seed: int = 0
    embed_dim: int = 32
    embed_noise: float = 0.35

    def __post_init__(self):
        object.__setattr__(self, "videos", {k: tuple(tuple(iv) for iv in v) for k, v in self.videos.items()})
        object.__setattr__(self, "vocabulary", tuple((str(k).lower(), float(b)) for k, b in self.vocabulary))
        if not 0.0 <= self.detector_accuracy <= 1.0:
            raise ValueError("detector_accuracy must lie in [0, 1]")
        if any(b < 0 for _, b in self.vocabulary):
            raise ValueError("keyword bonuses must be non-negative")
        if self.detector_accuracy + sum(b for _, b in self.vocabulary) > 1.0 + 1e-12:
            raise ValueError("detector_accuracy plus total keyword bonus exceeds 1")

    def is_anomalous(self, video_id: str, index: int) -> bool:
        return any(a <= index <= b for a, b in self.videos.get(video_id, ()))

    def scene_of(self, video_id: str, index: int) -> int:
        for k, (a, b) in enumerate(self.videos.get(video_id, ())):
            if a <= index <= b:
                return k
        return -1

    def matched_keywords(self, questions: Sequence[str]) -> list:
        text = " ".join(questions).lower()
        return [kw for kw, _ in self.vocabulary if re.search(rf"\b{re.escape(kw)}\b", text)]

    def accuracy_for(self, questions: Sequence[str]) -> float:
        bonus = dict(self.vocabulary)
        return min(1.0, self.detector_accuracy + sum(bonus[k] for k in self.matched_keywords(questions)))

    def to_json(self) -> dict:
        return {
            "videos": {k: [list(iv) for iv in v] for k, v in self.videos.items()},
            "detector_accuracy": self.detector_accuracy,
            "vocabulary": [[k, b] for k, b in self.vocabulary],
            "seed": self.seed,
            "embed_dim": self.embed_dim,
            "embed_noise": self.embed_noise,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "SimWorld":
        return cls(
            videos=obj.get("videos", {}),
            detector_accuracy=obj.get("detector_accuracy", 1.0),
            vocabulary=obj.get("vocabulary", ()),
            seed=obj.get("seed", 0),
            embed_dim=obj.get("embed_dim", 32),
            embed_noise=obj.get("embed_noise", 0.35),
        )

    @classmethod
    def from_manifest(cls, manifest: DatasetManifest, **kwargs) -> "SimWorld":
        videos = {v.id: v.gt_intervals or () for v in manifest.videos}
        return cls(videos=videos, **kwargs)


def load_sim_world(path) -> SimWorld:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"sim world file not found: {path}")
    return SimWorld.from_json(json.loads(path.read_text(encoding="utf-8")))


def save_sim_world(world: SimWorld, path) -> None:
    Path(path).write_text(json.dumps(world.to_json(), indent=2) + "\n", encoding="utf-8")


def keyword_question(keyword: str) -> str:
    return f"Is there any sign of {keyword} in this scene?"


def sim_optimizer_reply(world: SimWorld, current_q: QuestionSet, batch_outcome, m: Optional[int] = None) -> str:
    """Deterministic stand-in for the optimizer model.

    Keeps the current questions (padded or truncated to ``m``) and, when the
    batch contains a wrong prediction, swaps one question for a question
    about a vocabulary keyword that no current question mentions yet.
    """
    m = current_q.m if m is None else m
    outcomes = [(int(p), int(y)) for p, y in batch_outcome]
    questions = list(current_q.questions[:m])
    for filler in FILLER_QUESTIONS:
        if len(questions) >= m:
            break
        if filler not in questions:
            questions.append(filler)
    k = 1
    while len(questions) < m:
        questions.append(f"Is there anything unusual about detail {k} of the scene?")
        k += 1

    if any(p != y for p, y in outcomes):
        used = set(world.matched_keywords(questions))
        candidates = [kw for kw, _ in world.vocabulary if kw not in used]
        if candidates:
            rng = np.random.default_rng(
                derive_seed(world.seed, *current_q.questions, *(f"{p}{y}" for p, y in outcomes))
            )
            keyword = candidates[int(rng.integers(len(candidates)))]
            plain = [i for i, q in enumerate(questions) if not world.matched_keywords([q])]
            slots = plain or list(range(len(questions)))
            questions[slots[int(rng.integers(len(slots)))]] = keyword_question(keyword)

    lines = "\n".join(f"{i}. {q}" for i, q in enumerate(questions, start=1))
    return f"After reviewing the batch, here are the revised questions:\n{lines}"


_PAIR_RE = re.compile(r"prediction\s*=\s*([01]).*?target\s*=\s*([01])", re.IGNORECASE)
_COUNT_RE = re.compile(r"exactly\s+(\d+)", re.IGNORECASE)

EXPLAIN_ANOMALY = "Explanation: The frames show activity that matches the guiding questions' description of an anomaly."
EXPLAIN_NORMAL = "Explanation: Nothing in the frames matches the anomalous patterns described by the guiding questions."


class SimChatBackend(ChatBackend):
    """Chat backend answering rendered learner and optimizer prompts from a :class:`SimWorld`."""

    def __init__(self, world: SimWorld, **kwargs):
        kwargs.setdefault("backoff", 0.0)
        super().__init__(**kwargs)
        self.world = world

    def _send(self, request: ChatRequest) -> str:
        sections = split_rendered_sections(request.prompt)
        if "Optimization Instruction" in sections:
            return self._optimizer_reply(sections)
        if "Prompt Questions" in sections:
            return self._learner_reply(sections, request)
        return "I can only answer anomaly-detection prompts."

    def _optimizer_reply(self, sections) -> str:
        current = extract_numbered_list(sections.get("Current Prompt Questions", ""))
        outcomes = _PAIR_RE.findall(sections.get("Model Predictions & Targets", ""))
        m_match = _COUNT_RE.search(sections["Optimization Instruction"])
        m = int(m_match.group(1)) if m_match else len(current)
        return sim_optimizer_reply(self.world, QuestionSet(tuple(current)), outcomes, m)

    def _learner_reply(self, sections, request) -> str:
        frames = [decode_sim_frame(img) for img in request.images]
        questions = extract_numbered_list(sections["Prompt Questions"])
        verdict = self.learner_verdict(frames, questions)
        lines = ["I looked at each frame and considered every guiding question.", f"Answer: {verdict}"]
        if "explanation" in sections.get("Output Formatting", "").lower():
            lines.append(EXPLAIN_ANOMALY if verdict else EXPLAIN_NORMAL)
        return "\n".join(lines)

    def learner_verdict(self, frames, questions) -> int:
        if not frames:
            return 0
        truth = int(any(self.world.is_anomalous(vid, i) for vid, i in frames))
        key = [f"{vid}:{i}" for vid, i in frames]
        u = derive_seed(self.world.seed, "learner", *key) / 2.0**64
        correct = u < self.world.accuracy_for(questions)
        return truth if correct else 1 - truth


class SimEmbeddingBackend(EmbeddingBackend):
    """Embeddings clustered by planted scene: frames of one interval look alike."""

    def __init__(self, world: SimWorld, **kwargs):
        kwargs.setdefault("backoff", 0.0)
        super().__init__(**kwargs)
        self.world = world

    def _send(self, frames):
        decoded = [decode_sim_frame(f) for f in frames]
        vid = decoded[0][0]
        indices = sorted(i for _, i in decoded)
        anchor = indices[len(indices) // 2]
        scene = self.world.scene_of(vid, anchor)
        base = np.random.default_rng(derive_seed(self.world.seed, "scene", vid, scene + 1)).standard_normal(
            self.world.embed_dim
        )
        base /= np.linalg.norm(base)
        noise = np.random.default_rng(derive_seed(self.world.seed, "frames", vid, *indices)).standard_normal(
            self.world.embed_dim
        )
        noise *= self.world.embed_noise / np.sqrt(self.world.embed_dim)
        return (base + noise).tolist()


def make_synthetic_benchmark(
    n_videos: int = 20,
    seed: int = 0,
    anomaly_fraction: float = 0.5,
    frame_range=(640, 1280),
    interval_fraction=(0.15, 0.4),
    fps: float = 30,
    split: str = "train",
    name: str = "synthetic",
) -> tuple:
    """Generate a manifest plus matching planted intervals.

    Returns ``(manifest, intervals)`` where ``intervals`` maps video id to the
    planted intervals, ready for ``SimWorld(videos=intervals, ...)``. Exactly
    ``round(anomaly_fraction * n_videos)`` videos carry one planted interval.
    """
    rng = np.random.default_rng(seed)
    n_pos = int(round(anomaly_fraction * n_videos))
    labels = np.array([1] * n_pos + [0] * (n_videos - n_pos))
    rng.shuffle(labels)
    videos, planted = [], {}
    for j, label in enumerate(labels):
        vid = f"{name}_{j:03d}"
        F = int(rng.integers(frame_range[0], frame_range[1] + 1))
        intervals = []
        if label:
            length = max(1, int(round(rng.uniform(*interval_fraction) * F)))
            start = int(rng.integers(1, F - length + 2))
            intervals = [(start, start + length - 1)]
        planted[vid] = tuple(intervals)
        videos.append(
            VideoRecord(
                id=vid,
                frame_count=F,
                fps=fps,
                frame_source=f"sim://{vid}/{{index}}",
                video_label=int(label),
                gt_intervals=intervals,
            )
        )
    return DatasetManifest(name, tuple(videos), split), planted
