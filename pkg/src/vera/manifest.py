"""Dataset manifests, ground truth, and on-disk formats.

A manifest is a JSON-lines file. The optional first line is a header object
``{"name": ..., "split": ...}``; every other line is one video record with the
keys ``id``, ``frame_count``, ``fps``, ``frame_source``, ``label`` and
``intervals`` (a list of inclusive, 1-based ``[start, end]`` frame ranges).

This module also owns the question-set file (JSON) and the per-video score
file (``frame_index,score`` CSV).
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .prompting import QuestionSet

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class ManifestError(ValueError):
    """A manifest or annotation file could not be parsed or validated."""


def _normalize_intervals(intervals) -> tuple:
    return tuple(sorted((int(a), int(b)) for a, b in intervals))


@dataclass(frozen=True)
class VideoRecord:
    id: str
    frame_count: int
    fps: float
    frame_source: str = ""
    video_label: int = 0
    gt_intervals: Optional[tuple] = ()

    def __post_init__(self):
        if self.gt_intervals is not None:
            object.__setattr__(self, "gt_intervals", _normalize_intervals(self.gt_intervals))
        self.validate()

    def validate(self) -> None:
        vid = self.id
        if not isinstance(vid, str) or not vid:
            raise ManifestError("video id must be a non-empty string")
        if isinstance(self.frame_count, bool) or int(self.frame_count) != self.frame_count or self.frame_count < 1:
            raise ManifestError(f"video {vid!r}: frame_count must be a positive integer")
        if not self.fps > 0:
            raise ManifestError(f"video {vid!r}: fps must be positive")
        if self.video_label not in (0, 1):
            raise ManifestError(f"video {vid!r}: label must be 0 or 1")
        if self.gt_intervals is None:
            return
        prev_end = 0
        for start, end in self.gt_intervals:
            if not 1 <= start <= end <= self.frame_count:
                raise ManifestError(
                    f"video {vid!r}: interval [{start}, {end}] outside 1..{self.frame_count} or reversed"
                )
            if start <= prev_end:
                raise ManifestError(f"video {vid!r}: intervals overlap at frame {start}")
            prev_end = end
        if self.video_label != int(bool(self.gt_intervals)):
            raise ManifestError(f"video {vid!r}: label {self.video_label} disagrees with intervals")

    def frame_path(self, index: int) -> str:
        """Resolve the frame source template for a 1-based frame index."""
        return self.frame_source.format(index=index, id=self.id)

    def to_json(self) -> dict:
        fps = self.fps
        return {
            "id": self.id,
            "frame_count": int(self.frame_count),
            "fps": int(fps) if float(fps).is_integer() else float(fps),
            "frame_source": self.frame_source,
            "label": int(self.video_label),
            "intervals": None if self.gt_intervals is None else [list(iv) for iv in self.gt_intervals],
        }

    @classmethod
    def from_json(cls, obj: Mapping) -> "VideoRecord":
        missing = {"id", "frame_count", "fps", "label"} - set(obj)
        if missing:
            raise ManifestError(f"record {obj.get('id', '?')!r} is missing {sorted(missing)}")
        fps = obj["fps"]
        if isinstance(fps, str):
            fps = float(Fraction(fps))
        intervals = obj.get("intervals")
        return cls(
            id=str(obj["id"]),
            frame_count=obj["frame_count"],
            fps=fps,
            frame_source=obj.get("frame_source", ""),
            video_label=obj["label"],
            gt_intervals=intervals,
        )


@dataclass(frozen=True)
class DatasetManifest:
    name: str
    videos: tuple
    split: str = "test"

    def __post_init__(self):
        object.__setattr__(self, "videos", tuple(self.videos))
        if self.split not in SPLITS:
            raise ManifestError(f"split must be one of {SPLITS}, got {self.split!r}")
        seen = set()
        for v in self.videos:
            if v.id in seen:
                raise ManifestError(f"duplicate video id {v.id!r}")
            seen.add(v.id)

    def __len__(self):
        return len(self.videos)

    def __iter__(self):
        return iter(self.videos)

    def get(self, video_id: str) -> VideoRecord:
        for v in self.videos:
            if v.id == video_id:
                return v
        raise KeyError(video_id)

    def subset(self, ids, split=None, name=None) -> "DatasetManifest":
        wanted = list(ids)
        by_id = {v.id: v for v in self.videos}
        unknown = [i for i in wanted if i not in by_id]
        if unknown:
            raise KeyError(f"unknown video ids: {unknown}")
        return DatasetManifest(name or self.name, tuple(by_id[i] for i in wanted), split or self.split)

    @property
    def labels(self) -> np.ndarray:
        return np.array([v.video_label for v in self.videos], dtype=np.int64)


@dataclass(frozen=True)
class GroundTruthLabels:
    video_id: str
    labels: np.ndarray = field(repr=False)


def expand_labels(record: VideoRecord) -> GroundTruthLabels:
    """Expand interval annotations into a per-frame 0/1 vector."""
    if record.gt_intervals is None:
        raise ManifestError(f"video {record.id!r} has no ground-truth intervals")
    labels = np.zeros(record.frame_count, dtype=np.int64)
    for start, end in record.gt_intervals:
        labels[start - 1:end] = 1
    return GroundTruthLabels(record.id, labels)


# ---------------------------------------------------------------------------
# Manifest IO
# ---------------------------------------------------------------------------


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    name, split = path.stem, "test"
    videos = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise ManifestError(f"{path}:{lineno}: expected an object")
            if "id" not in obj:
                name = obj.get("name", name)
                split = obj.get("split", split)
                continue
            try:
                videos.append(VideoRecord.from_json(obj))
            except (TypeError, ValueError) as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return DatasetManifest(name, tuple(videos), split)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"name": manifest.name, "split": manifest.split}) + "\n")
        for v in manifest.videos:
            fh.write(json.dumps(v.to_json()) + "\n")


def import_ucf_annotations(
    path,
    fps_default: float = 30,
    frame_counts: Optional[Mapping[str, int]] = None,
    frame_source: str = "",
    name: Optional[str] = None,
    split: str = "test",
) -> DatasetManifest:
    """Convert a UCF-Crime temporal annotation file into a manifest.

    Each line reads ``name category start1 end1 start2 end2`` with ``-1`` marking
    an absent interval. The file carries no frame counts, so they are taken from
    ``frame_counts`` when given; otherwise the last annotated frame (or 1 for
    normal videos) is used as a placeholder and a warning is logged.
    """
    path = Path(path)
    frame_counts = dict(frame_counts or {})
    videos = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) < 6 or (len(fields) - 2) % 2:
                raise ManifestError(f"{path}:{lineno}: expected 'name category s1 e1 s2 e2', got {len(fields)} fields")
            vid, category = fields[0], fields[1]
            try:
                nums = [int(x) for x in fields[2:]]
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: non-integer frame bound") from None
            intervals = [(a, b) for a, b in zip(nums[0::2], nums[1::2]) if a != -1 and b != -1]
            if category.lower() == "normal":
                intervals = []
            # UCF frame numbers start at 0 in some releases; the manifest is 1-based.
            intervals = [(max(a, 1), max(b, 1)) for a, b in intervals]
            if vid in frame_counts:
                count = int(frame_counts[vid])
            else:
                count = max([b for _, b in intervals], default=1)
                logger.warning("no frame count for %s; using placeholder %d", vid, count)
            try:
                videos.append(
                    VideoRecord(
                        id=vid,
                        frame_count=count,
                        fps=fps_default,
                        frame_source=frame_source,
                        video_label=int(bool(intervals)),
                        gt_intervals=intervals,
                    )
                )
            except ManifestError as exc:
                raise ManifestError(f"{path}:{lineno}: {exc}") from None
    return DatasetManifest(name or path.stem, tuple(videos), split)


# ---------------------------------------------------------------------------
# Question sets
# ---------------------------------------------------------------------------


def question_set_to_text(q: QuestionSet) -> str:
    payload = {"questions": list(q.questions), "iteration": q.iteration, "val_accuracy": q.val_accuracy}
    return json.dumps(payload, indent=2) + "\n"


def read_question_set_text(text: str) -> QuestionSet:
    obj = json.loads(text)
    if "questions" not in obj:
        raise ManifestError("question-set file lacks a 'questions' field")
    return QuestionSet(
        tuple(obj["questions"]),
        iteration=int(obj.get("iteration", 0)),
        val_accuracy=obj.get("val_accuracy"),
    )


def write_question_set(q: QuestionSet, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(question_set_to_text(q), encoding="utf-8")


def read_question_set(path) -> QuestionSet:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"question-set file not found: {path}")
    return read_question_set_text(path.read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# Score files
# ---------------------------------------------------------------------------


def write_scores(scores: Sequence[float], path) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["frame_index", "score"])
    for i, s in enumerate(scores, start=1):
        writer.writerow([i, repr(float(s))])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_scores(path) -> np.ndarray:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["frame_index", "score"]:
            raise ManifestError(f"{path}: expected header 'frame_index,score'")
        rows = [(int(i), float(s)) for i, s in reader]
    indices = [i for i, _ in rows]
    if indices != list(range(1, len(rows) + 1)):
        raise ManifestError(f"{path}: frame indices must run 1..N without gaps")
    return np.array([s for _, s in rows], dtype=np.float64)
