import numpy as np
import pytest

from dynrecon.camera import Intrinsics, Pose
from dynrecon.scene import GaussianSet, MotionTracks, Scene


def make_gaussian_set(rng, n, depth_range=(2.5, 5.0), spread=0.8,
                      opacity_range=(-1.0, 1.5)):
    """Random Gaussians in front of an identity camera.

    Depths are spaced by at least 0.01 so finite-difference probes cannot
    flip the compositing order.
    """
    depths = np.sort(rng.uniform(*depth_range, n))
    while np.any(np.diff(depths) < 0.01):
        depths = np.sort(rng.uniform(*depth_range, n))
    means = np.stack([
        rng.normal(0.0, spread, n) * depths / 4.0,
        rng.normal(0.0, spread, n) * depths / 4.0,
        depths,
    ], axis=1)
    return GaussianSet(
        means=means,
        quats=rng.normal(size=(n, 4)),
        log_scales=rng.uniform(np.log(0.05), np.log(0.35), (n, 3)),
        opacity_logits=rng.uniform(*opacity_range, n),
        colors=rng.uniform(0.1, 0.9, (n, 3)),
    )


def make_scene(rng, n_static=6, n_dynamic=4, n_knots=5, n_frames=8):
    g = make_gaussian_set(rng, n_static + n_dynamic)
    sl = slice(0, n_static)
    dl = slice(n_static, None)

    def sub(s):
        return GaussianSet(g.means[s], g.quats[s], g.log_scales[s],
                           g.opacity_logits[s], g.colors[s])

    tracks = MotionTracks(rng.normal(0, 0.1, (n_dynamic, n_knots, 3)), n_frames)
    return Scene(sub(sl), sub(dl), tracks, n_frames,
                 background_color=rng.uniform(0, 0.3, 3))


def small_intrinsics(size=16, f=20.0):
    return Intrinsics(f, f, size / 2.0, size / 2.0, size, size)


def random_pose(rng, jitter=0.05):
    q = np.array([1.0, 0, 0, 0]) + rng.normal(0, jitter, 4)
    c = rng.normal(0, 0.15, 3)
    return Pose(q, c)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
