import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from pmr import numerics  # noqa: E402
from pmr.beholders import VideoInputs  # noqa: E402
from pmr.dataio import VideoAnnotation  # noqa: E402
from pmr.numerics import ParamStore  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def random_inputs(rng: np.random.Generator, T: int, C: int, F: int, K: int, max_actors: int = 3) -> VideoInputs:
    M = max(max_actors, 1)
    mask = np.zeros((T, M))
    for t in range(T):
        mask[t, : rng.integers(0, max_actors + 1)] = 1.0
    return VideoInputs(
        env=rng.normal(size=(T, C)),
        actors=rng.normal(size=(T, M, C)) * mask[..., None],
        actor_mask=mask,
        objects=rng.normal(size=(T, K, F)),
        object_ids=np.tile(np.arange(K), (T, 1)),
    )


def identity_store(d: int, prefix: str = "aam") -> ParamStore:
    """AAM parameters with single-layer identity MLPs and identity attention."""
    s = ParamStore()
    eye = np.eye(d)
    s.add(f"{prefix}.env.0.weight", eye)
    s.add(f"{prefix}.env.0.bias", np.zeros(d))
    s.add(f"{prefix}.ent.0.weight", eye)
    s.add(f"{prefix}.ent.0.bias", np.zeros(d))
    for n in "qkvo":
        s.add(f"{prefix}.attn.{n}", eye)
    return s


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_annotation(rng: np.random.Generator, video_id: str = "v") -> VideoAnnotation:
    dur = float(rng.uniform(5, 200))
    acts = []
    for _ in range(rng.integers(0, 4)):
        a = float(rng.uniform(0, dur * 0.95))
        acts.append((a, float(rng.uniform(a + 1e-3, dur))))
    return VideoAnnotation(video_id, dur, acts)


def random_recall_instance(rng: np.random.Generator):
    """Up to 5 videos with up to 4 GT each, plus score-sorted proposals."""
    anns, props = [], {}
    for v in range(rng.integers(1, 6)):
        dur = float(rng.uniform(20, 100))
        gts = []
        for _ in range(rng.integers(1, 5)):
            a = float(rng.uniform(0, dur - 1))
            gts.append((a, float(rng.uniform(a + 0.5, dur))))
        anns.append(VideoAnnotation(f"v{v}", dur, gts))
        ps = []
        for _ in range(rng.integers(0, 30)):
            if rng.random() < 0.3:  # near-GT proposals so high thresholds matter
                g = gts[rng.integers(len(gts))]
                a, b = g[0] + rng.normal(0, 1), g[1] + rng.normal(0, 1)
            else:
                a, b = rng.uniform(0, dur, size=2)
            a, b = min(a, b), max(a, b)
            if b - a > 1e-3:
                ps.append((float(a), float(b), float(rng.random())))
        ps.sort(key=lambda p: -p[2])
        props[f"v{v}"] = ps
    return props, anns


def relu_margin(fn) -> float:
    """Smallest |pre-activation| seen by any ReLU while ``fn`` runs."""
    seen = [np.inf]
    original = numerics.relu

    def spy(a):
        a = numerics.as_tensor(a)
        seen[0] = min(seen[0], float(np.min(np.abs(a.data), initial=np.inf)))
        return original(a)

    numerics.relu = spy
    try:
        fn()
    finally:
        numerics.relu = original
    return seen[0]
