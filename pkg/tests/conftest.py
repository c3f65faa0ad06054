import pytest

from vera.manifest import DatasetManifest, VideoRecord
from vera.simulation import SimChatBackend, SimEmbeddingBackend, SimWorld, make_synthetic_benchmark

VOCAB = (("fire", 0.15), ("weapon", 0.12), ("crash", 0.08))


@pytest.fixture
def small_bench():
    manifest, planted = make_synthetic_benchmark(n_videos=6, seed=1, frame_range=(96, 160))
    return manifest, planted


@pytest.fixture
def perfect_world(small_bench):
    manifest, planted = small_bench
    return SimWorld(videos=planted, detector_accuracy=1.0, seed=5)


@pytest.fixture
def perfect_backends(perfect_world):
    return SimChatBackend(perfect_world), SimEmbeddingBackend(perfect_world)


@pytest.fixture
def planted_video():
    rec = VideoRecord("v", 96, 30, "sim://v/{index}", 1, [(30, 60)])
    world = SimWorld(videos={"v": ((30, 60),)}, detector_accuracy=1.0, seed=2)
    return rec, world


@pytest.fixture
def two_video_manifest():
    videos = (
        VideoRecord("a", 100, 30, "", 1, [(10, 20)]),
        VideoRecord("b", 50, 25, "", 0, []),
    )
    return DatasetManifest("tiny", videos, "test")
