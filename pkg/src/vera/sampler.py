"""Frame selection: training-time subsampling and inference-time segments.

All indices are 1-based frame numbers. The three training samplers are pure
functions of ``(F, S, seed)``.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from ._validation import check_positive, check_positive_int


class VideoTooShort(ValueError):
    """The video has fewer frames than the number of frames requested."""


def _check_fs(F, S):
    F = check_positive_int(F, "F")
    S = check_positive_int(S, "S")
    if F < S:
        raise VideoTooShort(f"cannot sample {S} frames from a {F}-frame video")
    return F, S


def uniform_sample(F: int, S: int, offset: int = 0) -> list:
    """Return ``[1, l+1, ..., (S-1)*l+1]`` with ``l = floor(F / S)``."""
    F, S = _check_fs(F, S)
    step = F // S
    return [offset + k * step + 1 for k in range(S)]


def random_sample(F: int, S: int, seed: int) -> list:
    """Draw ``S`` distinct frames without replacement and return them sorted."""
    F, S = _check_fs(F, S)
    rng = np.random.default_rng(seed)
    picked = rng.choice(F, size=S, replace=False)
    return sorted(int(i) + 1 for i in picked)


def tsn_sample(F: int, S: int, seed: int) -> list:
    """Pick one seeded frame from each of ``S`` contiguous chunks.

    Chunks have ``floor(F / S)`` frames; the remainder goes to the last chunk.
    """
    F, S = _check_fs(F, S)
    rng = np.random.default_rng(seed)
    size = F // S
    out = []
    for k in range(S):
        lo = k * size + 1
        hi = F if k == S - 1 else (k + 1) * size
        out.append(int(rng.integers(lo, hi + 1)))
    return out


SAMPLERS = {"uniform": None, "random": random_sample, "tsn": tsn_sample}


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from a mix of ints and strings."""
    blob = "\x1f".join(f"{type(p).__name__}:{p}" for p in parts).encode("utf-8")
    return int.from_bytes(hashlib.blake2b(blob, digest_size=8).digest(), "little")


def sample_frames(F: int, S: int, strategy: str = "uniform", seed: int = 0) -> list:
    if strategy == "uniform":
        return uniform_sample(F, S)
    try:
        fn = SAMPLERS[strategy]
    except KeyError:
        raise ValueError(f"unknown sampling strategy {strategy!r}; choose from {sorted(SAMPLERS)}") from None
    return fn(F, S, seed)


@dataclass(frozen=True)
class SegmentPlan:
    """Segment centers, scoring windows and the frames sampled in each window."""

    centers: tuple
    interval_d: int
    segment_count: int
    windows: tuple
    window_samples: tuple
    frame_count: int

    def segment_range(self, u: int) -> tuple:
        """Frames that inherit segment ``u``'s score (0-based ``u``)."""
        d, h, F = self.interval_d, self.segment_count, self.frame_count
        lo = u * d + 1
        hi = F if u == h - 1 else min((u + 1) * d, F)
        return lo, hi


def _window_frames(lo: int, hi: int, per_window: int) -> tuple:
    length = hi - lo + 1
    if length <= per_window:
        return tuple(range(lo, hi + 1))
    return tuple(uniform_sample(length, per_window, offset=lo - 1))


def plan_segments(record, d: int = 16, window_seconds: float = 10.0, per_window: int = 8) -> SegmentPlan:
    """Place equidistant segment centers and sample frames around each.

    Centers sit at ``(u-1)*d + 1`` for ``u = 1..floor(F/d)``. Each window spans
    ``window_seconds`` around its center and is clamped to the video. Videos
    shorter than ``d`` frames get a single segment covering the whole video.
    """
    d = check_positive_int(d, "d")
    per_window = check_positive_int(per_window, "per_window")
    window_seconds = check_positive(window_seconds, "window_seconds")
    F = record.frame_count
    if F < d:
        return SegmentPlan((1,), d, 1, ((1, F),), (_window_frames(1, F, per_window),), F)
    h = F // d
    half = math.floor(window_seconds / 2 * record.fps)
    centers, windows, samples = [], [], []
    for u in range(h):
        c = u * d + 1
        lo, hi = max(1, c - half), min(F, c + half)
        centers.append(c)
        windows.append((lo, hi))
        samples.append(_window_frames(lo, hi, per_window))
    return SegmentPlan(tuple(centers), d, h, tuple(windows), tuple(samples), F)
