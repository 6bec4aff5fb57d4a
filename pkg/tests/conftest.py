import numpy as np
import pytest
import torch

from avth.media import Frame, FrameSequence
from avth.synthetic import synthetic_talking_head

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def head64():
    """60-frame 64x64 synthetic talking head with matching 16 kHz audio."""
    return synthetic_talking_head(60, 64, 64, seed=0)


@pytest.fixture(scope="session")
def head128():
    return synthetic_talking_head(60, 128, 128, seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def noise_frame(rng, w=32, h=32):
    planes = (rng.integers(0, 256, (h, w)), rng.integers(0, 256, (h // 2, w // 2)),
              rng.integers(0, 256, (h // 2, w // 2)))
    return Frame(w, h, tuple(p.astype(np.uint8) for p in planes))


def gradient_frame(w=64, h=64):
    y = np.add.outer(np.arange(h) * 2, np.arange(w) * 2) % 256
    c = np.full((h // 2, w // 2), 128)
    return Frame(w, h, (y.astype(np.uint8), c.astype(np.uint8), c.astype(np.uint8)))


def seq_of(frames, fps=25):
    return FrameSequence(list(frames), fps)
