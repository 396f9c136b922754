import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from gs4d.scene import CameraModel, GaussianSet


def make_camera(width=32, height=32, focal=40.0, R=None, t=None, near=0.2, far=400.0):
    K = np.array([[focal, 0.0, width / 2], [0.0, focal, height / 2], [0.0, 0.0, 1.0]])
    return CameraModel(K=K, R=np.eye(3) if R is None else R,
                       t=np.zeros(3) if t is None else t,
                       width=width, height=height, near=near, far=far)


def random_scene(rng, n=20, nfeat=8, depth_range=(4.0, 10.0), spread=2.0,
                 with_motion=False):
    mu = np.column_stack([
        rng.uniform(-spread, spread, n),
        rng.uniform(-spread, spread, n),
        rng.uniform(*depth_range, n),
    ])
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    s = rng.uniform(0.05, 0.45, (n, 3))
    alpha = rng.uniform(0.2, 0.95, n)
    c = rng.uniform(0.05, 0.95, (n, 3))
    feature = rng.normal(size=(n, nfeat)) if nfeat else None
    g = GaussianSet(mu, q, s, alpha, c, feature)
    if with_motion:
        g.speeds = rng.normal(0.0, 0.2, g.speeds.shape)
        d = rng.normal(size=g.dirs.shape)
        g.dirs = d / np.linalg.norm(d, axis=-1, keepdims=True)
    return g


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
