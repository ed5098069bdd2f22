import numpy as np
import pytest

from deltanets.config import TrainConfig
from deltanets.data import synth_tasks
from deltanets.delta import build_topology
from deltanets.engine import train_base
from deltanets.init import make_rng
from deltanets.nets import build_backbone


def randomize_bn(bb, rng):
    """Non-trivial running statistics so eval-mode BN is not an identity map."""
    for name in bb.buffers:
        shape = bb.buffers[name].shape
        dtype = bb.buffers[name].dtype
        if name.endswith(".mean"):
            bb.buffers[name] = rng.normal(0.0, 0.2, shape).astype(dtype)
        else:
            bb.buffers[name] = rng.uniform(0.5, 1.5, shape).astype(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def narrow_bb():
    """Frozen 4-block network, narrow enough for per-test construction."""
    r = make_rng(5)
    bb = build_backbone("narrow", (1, 16, 16), 5, r, widths=(4, 8, 8, 8), depths=(2, 2, 2, 2))
    randomize_bn(bb, r)
    return bb.freeze()


@pytest.fixture(scope="session")
def small_tasks():
    return synth_tasks(3, 4, 5, 40, 16, test_per_class=20)


@pytest.fixture(scope="session")
def trained_tiny(small_tasks):
    """Tiny preset briefly trained on task 0; shared read-only across tests."""
    train, test = small_tasks[0]
    bb = build_backbone("tiny", (1, 16, 16), 5, make_rng(0, 1))
    train_base(bb, train, test, TrainConfig(epochs=5, optimizer="adam", lr=1e-3, batch_size=32))
    return bb, build_topology(bb)


def quick_cfg(**kw):
    base = dict(epochs=1, optimizer="adam", lr=1e-3, batch_size=32)
    base.update(kw)
    return TrainConfig(**base)
