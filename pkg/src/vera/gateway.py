"""Access to the chat vision-language model and the embedding model.

Two HTTP backends speak the usual serving protocols: an OpenAI-compatible
``/chat/completions`` endpoint with base64 image parts, and a minimal
``/embed`` endpoint returning a float array. Simulated stand-ins live in
:mod:`vera.simulation`.
"""

from __future__ import annotations

import base64
import logging
import mimetypes
import os
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import httpx
import numpy as np

logger = logging.getLogger(__name__)

SIM_MEDIA_TYPE = "image/x-vera-sim"
DEFAULT_IMAGE_LIMIT = 16


class BackendError(RuntimeError):
    """Base class for model-backend failures."""


class BackendUnavailable(BackendError):
    """The backend could not be reached after all retries."""


class PayloadTooLarge(BackendError):
    """The request carries more images or bytes than the backend accepts."""


class BackendInconsistent(BackendError):
    """The backend changed behaviour between calls (e.g. embedding size)."""


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str = "image/jpeg"

    def data_uri(self) -> str:
        return f"data:{self.media_type};base64,{base64.b64encode(self.data).decode('ascii')}"


@dataclass(frozen=True)
class ChatRequest:
    prompt: str
    images: tuple = ()
    temperature: float = 0.0
    max_tokens: int = 512

    def __post_init__(self):
        object.__setattr__(self, "images", tuple(self.images))
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")


def sim_frame(video_id: str, index: int) -> ImagePayload:
    """Placeholder image understood by the simulated backends."""
    return ImagePayload(f"vera-sim:{video_id}:{int(index)}".encode("utf-8"), SIM_MEDIA_TYPE)


def decode_sim_frame(image: ImagePayload) -> tuple:
    if image.media_type != SIM_MEDIA_TYPE:
        raise ValueError("not a simulated frame")
    body = image.data.decode("utf-8").removeprefix("vera-sim:")
    video_id, index = body.rsplit(":", 1)
    return video_id, int(index)


def load_frames(record, indices: Sequence[int]) -> list:
    """Load frames ``indices`` (1-based) of ``record`` as image payloads.

    ``sim://`` frame sources yield placeholder payloads for the simulator;
    anything else is formatted with ``index`` and ``id`` and read from disk.
    """
    if record.frame_source.startswith("sim://") or not record.frame_source:
        return [sim_frame(record.id, i) for i in indices]
    out = []
    for i in indices:
        path = Path(record.frame_path(i))
        try:
            data = path.read_bytes()
        except FileNotFoundError:
            raise FileNotFoundError(f"frame {i} of video {record.id!r} not found at {path}") from None
        media_type = mimetypes.guess_type(path.name)[0] or "image/jpeg"
        out.append(ImagePayload(data, media_type))
    return out


def normalize_embedding(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64).ravel()
    if v.size == 0 or not np.isfinite(v).all():
        raise BackendInconsistent("embedding is empty or contains non-finite values")
    norm = np.linalg.norm(v)
    if norm == 0:
        raise BackendInconsistent("embedding is the zero vector")
    return v / norm


class ChatBackend:
    """Common retry and concurrency handling for chat backends.

    Subclasses implement :meth:`_send`. Transient failures raise
    :class:`_Transient` inside ``_send`` and are retried with capped
    exponential backoff.
    """

    def __init__(self, max_images=DEFAULT_IMAGE_LIMIT, attempts=3, backoff=0.5, max_backoff=8.0, parallelism=4):
        self.max_images = max_images
        self.attempts = attempts
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.parallelism = parallelism
        self._slots = threading.BoundedSemaphore(parallelism)

    def chat(self, request: ChatRequest) -> str:
        if len(request.images) > self.max_images:
            raise PayloadTooLarge(f"{len(request.images)} images exceed the limit of {self.max_images}")
        with self._slots:
            return _with_retries(lambda: self._send(request), self.attempts, self.backoff, self.max_backoff)

    def _send(self, request: ChatRequest) -> str:  # pragma: no cover - abstract
        raise NotImplementedError


class EmbeddingBackend:
    def __init__(self, attempts=3, backoff=0.5, max_backoff=8.0, parallelism=4):
        self.attempts = attempts
        self.backoff = backoff
        self.max_backoff = max_backoff
        self._slots = threading.BoundedSemaphore(parallelism)
        self._dim = None
        self._dim_lock = threading.Lock()

    def embed(self, frames: Sequence[ImagePayload]) -> np.ndarray:
        """Return a unit-norm embedding for an ordered list of frames."""
        if not frames:
            raise ValueError("embed needs at least one frame")
        with self._slots:
            raw = _with_retries(lambda: self._send(list(frames)), self.attempts, self.backoff, self.max_backoff)
        raw = np.asarray(raw, dtype=np.float64)
        if raw.ndim == 2:
            # per-frame embeddings: average them into one segment vector
            raw = np.mean([normalize_embedding(r) for r in raw], axis=0)
        vec = normalize_embedding(raw)
        with self._dim_lock:
            if self._dim is None:
                self._dim = vec.size
            elif vec.size != self._dim:
                raise BackendInconsistent(f"embedding dimension changed from {self._dim} to {vec.size}")
        return vec

    def _send(self, frames):  # pragma: no cover - abstract
        raise NotImplementedError


class _Transient(Exception):
    pass


def _with_retries(fn, attempts, backoff, max_backoff):
    last = None
    for attempt in range(attempts):
        try:
            return fn()
        except _Transient as exc:
            last = exc
            if attempt + 1 < attempts:
                delay = min(max_backoff, backoff * (2 ** attempt))
                logger.warning("backend call failed (%s); retrying in %.2fs", exc, delay)
                time.sleep(delay)
    raise BackendUnavailable(f"backend unavailable after {attempts} attempts: {last}")


def _post(client: httpx.Client, url: str, payload: dict, headers: dict) -> dict:
    try:
        resp = client.post(url, json=payload, headers=headers)
    except httpx.TransportError as exc:
        raise _Transient(f"{type(exc).__name__}: {exc}") from exc
    if resp.status_code == 413:
        raise PayloadTooLarge(f"{url} rejected the payload as too large")
    if resp.status_code == 429 or resp.status_code >= 500:
        raise _Transient(f"HTTP {resp.status_code}")
    if resp.status_code >= 400:
        raise BackendError(f"{url} returned HTTP {resp.status_code}: {resp.text[:200]}")
    try:
        return resp.json()
    except ValueError:
        raise BackendError(f"{url} returned a non-JSON body") from None


class OpenAIChatBackend(ChatBackend):
    """Chat backend for any OpenAI-compatible ``/chat/completions`` server."""

    def __init__(
        self,
        base_url: Optional[str] = None,
        model: str = "InternVL2-8B",
        api_key: Optional[str] = None,
        timeout: float = 120.0,
        transport: Optional[httpx.BaseTransport] = None,
        **kwargs,
    ):
        super().__init__(**kwargs)
        base_url = base_url or os.environ.get("VERA_CHAT_URL")
        if not base_url:
            raise ValueError("no chat URL configured (set chat_url or VERA_CHAT_URL)")
        self.url = base_url.rstrip("/") + "/chat/completions"
        self.model = model
        self.api_key = api_key if api_key is not None else os.environ.get("VERA_CHAT_KEY")
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def build_body(self, request: ChatRequest) -> dict:
        content = [{"type": "text", "text": request.prompt}]
        content += [{"type": "image_url", "image_url": {"url": img.data_uri()}} for img in request.images]
        return {
            "model": self.model,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }

    def _send(self, request: ChatRequest) -> str:
        headers = {"Authorization": f"Bearer {self.api_key}"} if self.api_key else {}
        body = _post(self._client, self.url, self.build_body(request), headers)
        try:
            return body["choices"][0]["message"]["content"] or ""
        except (KeyError, IndexError, TypeError):
            raise BackendError("malformed chat completion response") from None


class HTTPEmbeddingBackend(EmbeddingBackend):
    """Embedding backend posting base64 images to ``{embed_url}/embed``."""

    def __init__(
        self,
        embed_url: Optional[str] = None,
        timeout: float = 30.0,
        transport: Optional[httpx.BaseTransport] = None,
        **kwargs,
    ):
        super().__init__(**kwargs)
        embed_url = embed_url or os.environ.get("VERA_EMBED_URL")
        if not embed_url:
            raise ValueError("no embedding URL configured (set embed_url or VERA_EMBED_URL)")
        self.url = embed_url.rstrip("/") + "/embed"
        self._client = httpx.Client(timeout=timeout, transport=transport)

    def _send(self, frames):
        payload = [base64.b64encode(f.data).decode("ascii") for f in frames]
        body = _post(self._client, self.url, payload, {})
        if "embedding" in body:
            return body["embedding"]
        if "embeddings" in body:
            return body["embeddings"]
        raise BackendError("embedding response lacks an 'embedding' field")
