"""Frame-level anomaly scoring from segment verdicts.

The pipeline runs in three stages:

1. every segment's sampled frames are shown to the chat model with the learned
   questions, giving a 0/1 verdict per segment;
2. each verdict is replaced by a softmax-weighted mix of the verdicts of the
   top-K most similar segments (embedding cosine similarity);
3. the mixed scores are smoothed with a normalized Gaussian kernel, copied out
   to the frames of each segment, and multiplied by a Gaussian position weight
   centred on the middle frame.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ._concurrency import ordered_map
from ._validation import (
    check_binary_vector,
    check_fraction,
    check_odd_kernel,
    check_positive,
    check_positive_int,
)
from .gateway import ChatRequest, load_frames
from .prompting import (
    LearnerTemplate,
    ParseFailure,
    QuestionSet,
    load_learner_template,
    parse_binary_verdict,
    parse_explanation,
    render_learner_prompt,
)
from .sampler import SegmentPlan, plan_segments

logger = logging.getLogger(__name__)

MAX_FAILED_FRACTION = 0.10
ALL_STEPS = ("ensemble", "smooth", "weight")


class VideoAborted(RuntimeError):
    """Too many segments of a video could not be scored."""


@dataclass(frozen=True)
class ScoreConfig:
    d: int = 16
    k_ratio: float = 0.10
    tau: float = 10.0
    kernel_size: int = 15
    sigma1: float = 10.0
    sigma2_ratio: float = 0.5
    window_seconds: float = 10.0
    per_window: int = 8

    def __post_init__(self):
        check_positive_int(self.d, "d")
        check_fraction(self.k_ratio, "k_ratio")
        check_positive(self.tau, "tau")
        check_odd_kernel(self.kernel_size, "kernel_size")
        check_positive(self.sigma1, "sigma1")
        check_positive(self.sigma2_ratio, "sigma2_ratio")
        check_positive(self.window_seconds, "window_seconds")
        check_positive_int(self.per_window, "per_window")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class SegmentScoreSeries:
    plan: SegmentPlan
    initial: np.ndarray
    embeddings: np.ndarray
    ensembled: np.ndarray
    smoothed: np.ndarray
    explanations: Optional[list] = None
    failed: list = field(default_factory=list)


@dataclass
class FrameScoreSeries:
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if not np.isfinite(self.scores).all():
            raise ValueError("frame scores contain NaN or infinite entries")

    def __len__(self):
        return self.scores.size


# ---------------------------------------------------------------------------
# Numerics
# ---------------------------------------------------------------------------


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def similarity_matrix(embeddings) -> np.ndarray:
    e = np.asarray(embeddings, dtype=np.float64)
    norms = np.linalg.norm(e, axis=1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cosine similarity is undefined for a zero vector")
    e = e / norms
    return np.clip(e @ e.T, -1.0, 1.0)


def top_k_count(h: int, k_ratio: float) -> int:
    return min(h, max(1, math.floor(k_ratio * h + 0.5)))


def neighbour_order(sim_row: np.ndarray, u: int) -> np.ndarray:
    """Segment indices ranked by similarity to ``u``: ``u`` first, ties by index."""
    others = np.array([w for w in range(sim_row.size) if w != u], dtype=np.int64)
    if others.size:
        others = others[np.lexsort((others, -sim_row[others]))]
    return np.concatenate(([u], others)).astype(np.int64)


def ensemble_weights(sims: np.ndarray, tau: float) -> np.ndarray:
    z = sims / tau
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def ensemble_scores(initial, embeddings, config: ScoreConfig = ScoreConfig(), return_details: bool = False):
    """Blend each segment's verdict with those of its top-K similar segments.

    Parameters
    ----------
    initial : array-like of shape (h,)
        0/1 segment verdicts.
    embeddings : array-like of shape (h, dim)
        Segment embeddings.
    config : ScoreConfig
        Supplies ``k_ratio`` and ``tau``.
    return_details : bool
        Also return the neighbour indices and softmax weights per segment.
    """
    y = check_binary_vector(initial, "initial").astype(np.float64)
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2 or e.shape[0] != y.size:
        raise ValueError(f"expected {y.size} embeddings, got array of shape {e.shape}")
    h = y.size
    if h == 0:
        raise ValueError("no segments to ensemble")
    K = top_k_count(h, config.k_ratio)
    sim = similarity_matrix(e)
    out = np.empty(h)
    neighbours, weights = [], []
    for u in range(h):
        kappa = neighbour_order(sim[u], u)[:K]
        w = ensemble_weights(sim[u, kappa], config.tau)
        # clamp away rounding so the result stays inside the neighbours' range
        out[u] = min(max(float(np.dot(w, y[kappa])), y[kappa].min()), y[kappa].max())
        neighbours.append(kappa)
        weights.append(w)
    if return_details:
        return out, neighbours, weights
    return out


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    """Sampled Gaussian of odd length ``kernel_size``, normalized to sum 1."""
    kernel_size = check_odd_kernel(kernel_size)
    half = kernel_size // 2
    p = np.arange(-half, half + 1, dtype=np.float64)
    g = np.exp(-(p ** 2) / (2.0 * sigma ** 2))
    return g / g.sum()


def gaussian_smooth(ensembled, config: ScoreConfig = ScoreConfig()) -> np.ndarray:
    """Convolve with the normalized kernel, replicating edge values as padding."""
    x = np.asarray(ensembled, dtype=np.float64)
    g = gaussian_kernel(config.kernel_size, config.sigma1)
    half = g.size // 2
    padded = np.pad(x, half, mode="edge")
    return np.clip(np.convolve(padded, g, mode="valid"), 0.0, 1.0)


def flatten_to_frames(smoothed, plan_or_d, F: int) -> np.ndarray:
    """Copy segment ``u``'s score to frames ``[(u-1)d+1, ud]``.

    Frames past ``h*d`` take the last segment's score.
    """
    s = np.asarray(smoothed, dtype=np.float64)
    d = plan_or_d.interval_d if isinstance(plan_or_d, SegmentPlan) else int(plan_or_d)
    if s.size == 0:
        raise ValueError("no segment scores to flatten")
    rho = np.repeat(s, d)[:F]
    if rho.size < F:
        rho = np.concatenate([rho, np.full(F - rho.size, s[-1])])
    return rho


def position_sigma(F: int, sigma2_ratio: float) -> float:
    sigma = math.floor(sigma2_ratio * F)
    return float(sigma) if sigma >= 1 else float(sigma2_ratio * F)


def position_weights(F: int, sigma2_ratio: float = 0.5) -> np.ndarray:
    """Gaussian weight per frame, peaking at frame ``floor(F/2)``."""
    sigma = position_sigma(F, sigma2_ratio)
    c = F // 2
    i = np.arange(1, F + 1, dtype=np.float64)
    return np.exp(-((i - c) ** 2) / (2.0 * sigma ** 2))


def position_weight(rho, F: int, config: ScoreConfig = ScoreConfig()) -> FrameScoreSeries:
    rho = np.asarray(rho, dtype=np.float64)
    if rho.size != F:
        raise ValueError(f"expected {F} frame scores, got {rho.size}")
    return FrameScoreSeries(position_weights(F, config.sigma2_ratio) * rho)


def refine_scores(initial, embeddings, plan_or_d, F: int, config: ScoreConfig = ScoreConfig(), steps=ALL_STEPS):
    """Run the numeric part of the pipeline on cached segment results.

    ``steps`` selects which of ``"ensemble"``, ``"smooth"`` and ``"weight"`` to
    apply; flattening always happens. Returns ``(frame_scores, ensembled,
    smoothed)``.
    """
    unknown = set(steps) - set(ALL_STEPS)
    if unknown:
        raise ValueError(f"unknown steps {sorted(unknown)}")
    y = np.asarray(initial, dtype=np.float64)
    ens = ensemble_scores(initial, embeddings, config) if "ensemble" in steps else y.copy()
    smooth = gaussian_smooth(ens, config) if "smooth" in steps else ens.copy()
    rho = flatten_to_frames(smooth, plan_or_d, F)
    frames = position_weight(rho, F, config).scores if "weight" in steps else rho
    return frames, ens, smooth


# ---------------------------------------------------------------------------
# Model-driven steps
# ---------------------------------------------------------------------------


def _score_segment(chat, template, q, record, frames_idx, explain):
    images = load_frames(record, frames_idx)
    prompt = render_learner_prompt(template, q, n_images=len(images), explain=explain)
    request = ChatRequest(prompt, tuple(images), temperature=0.0)
    for attempt in range(2):
        reply = chat.chat(request)
        try:
            return parse_binary_verdict(reply), parse_explanation(reply)
        except ParseFailure:
            if attempt == 1:
                return None, ""
            logger.info("unparseable verdict for %s; retrying", record.id)


def initial_scores(
    record,
    q: QuestionSet,
    config: ScoreConfig,
    chat,
    template: Optional[LearnerTemplate] = None,
    plan: Optional[SegmentPlan] = None,
    explain: bool = True,
):
    """Ask the chat model for a 0/1 verdict on every segment.

    Returns ``(initial, explanations, failed)``. Segments whose reply cannot be
    parsed after one retry score 0 and are listed in ``failed``; more than 10%
    failures abort the video.
    """
    template = template or load_learner_template()
    plan = plan or plan_segments(record, config.d, config.window_seconds, config.per_window)
    workers = max(1, getattr(chat, "parallelism", 1))
    results = ordered_map(
        lambda s: _score_segment(chat, template, q, record, s, explain), plan.window_samples, workers
    )
    failed = [u for u, (v, _) in enumerate(results) if v is None]
    if len(failed) > MAX_FAILED_FRACTION * plan.segment_count:
        raise VideoAborted(f"video {record.id!r}: {len(failed)} of {plan.segment_count} segments failed to parse")
    initial = np.array([0 if v is None else v for v, _ in results], dtype=np.int64)
    explanations = [e for _, e in results]
    return initial, explanations, failed


def segment_embeddings(record, plan: SegmentPlan, embedder) -> np.ndarray:
    workers = max(1, getattr(embedder, "parallelism", 1))

    def one(frames_idx):
        return embedder.embed(load_frames(record, frames_idx))

    return np.vstack(ordered_map(one, plan.window_samples, workers))


def score_video(
    record,
    q: QuestionSet,
    config: ScoreConfig,
    chat,
    embedder,
    template: Optional[LearnerTemplate] = None,
    explain: bool = True,
):
    """Score every frame of ``record``; returns ``(FrameScoreSeries, SegmentScoreSeries)``."""
    plan = plan_segments(record, config.d, config.window_seconds, config.per_window)
    initial, explanations, failed = initial_scores(record, q, config, chat, template, plan, explain)
    emb = segment_embeddings(record, plan, embedder)
    frames, ens, smooth = refine_scores(initial, emb, plan, record.frame_count, config)
    segments = SegmentScoreSeries(
        plan=plan,
        initial=initial,
        embeddings=emb,
        ensembled=ens,
        smoothed=smooth,
        explanations=explanations if explain else None,
        failed=failed,
    )
    return FrameScoreSeries(frames), segments
