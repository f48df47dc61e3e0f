"""Synthetic ground-truthed dynamic scenes for desk-scale experiments.

Generates an analytic Gaussian scene (static backdrop + moving foreground
with exactly representable knot tracks), a monocular orbit trajectory, held
out test views, and renders the full dataset: frames, depths, dynamic masks,
co-visibility masks and test ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io_utils
from .camera import Intrinsics, Pose, Trajectory
from .render import RenderSettings, render
from .rotations import matrix_to_quat
from .scene import GaussianSet, MotionTracks, Scene, deform_at_time

PRESETS = ("blob", "orbit_pair", "bar")
SPEC_SCHEMA = "dynrecon.synthspec/1"


@dataclass
class SynthSpec:
    preset: str = "blob"
    n_frames: int = 60
    image_size: int = 64
    orbit_radius: float = 4.0
    arc_deg: float = 80.0
    elevation: float = 0.12        # radians above the orbit plane
    motion_amp: float = 0.6
    n_static: int = 700
    n_dynamic: int = 250
    n_test: int = 8
    n_knots: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ValueError(f"unknown preset {self.preset!r}")
        if self.n_frames < 8:
            raise ValueError("need at least 8 frames")
        if not (0 <= self.arc_deg <= 360):
            raise ValueError("arc must lie in [0, 360] degrees")

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class SynthResult:
    scene: Scene
    train: Trajectory
    test: Trajectory
    test_times: np.ndarray          # frame time of each test view
    degenerate_arc: bool = False


def _look_at(center, target, up=np.array([0.0, 1.0, 0.0])):
    z = target - center
    z = z / np.linalg.norm(z)
    x = np.cross(z, up)
    x = x / np.linalg.norm(x)
    y = np.cross(z, x)
    R = np.stack([x, y, z], axis=1)
    return Pose(matrix_to_quat(R), center)


def _orbit_pose(radius, azimuth, elevation):
    c = radius * np.array([
        np.sin(azimuth) * np.cos(elevation),
        np.sin(elevation),
        -np.cos(azimuth) * np.cos(elevation),
    ])
    return _look_at(c, np.zeros(3))


def _texture_colors(pos, rng):
    """Smooth pseudo-random coloration plus per-Gaussian speckle."""
    freqs = rng.uniform(1.5, 4.0, size=(3, 3))
    phases = rng.uniform(0, 2 * np.pi, size=3)
    base = 0.5 + 0.35 * np.sin(pos @ freqs.T + phases)
    speckle = rng.uniform(-0.12, 0.12, size=base.shape)
    return np.clip(base + speckle, 0.05, 0.95)


def _gaussian_cloud(pos, scale, colors, opacity=0.9):
    n = len(pos)
    quats = np.zeros((n, 4))
    quats[:, 0] = 1.0
    return GaussianSet(
        pos, quats, np.full((n, 3), np.log(scale)),
        np.full(n, np.log(opacity / (1 - opacity))), colors,
    )


def _knotify(offset_fn, n_dynamic, n_knots, n_frames):
    """Evaluate per-Gaussian offsets at the knot times (exactly representable)."""
    knot_times = np.linspace(0, n_frames - 1, n_knots)
    knots = np.zeros((n_dynamic, n_knots, 3))
    for k, tk in enumerate(knot_times):
        knots[:, k] = offset_fn(tk)
    return MotionTracks(knots, n_frames)


def generate_scene(spec: SynthSpec) -> SynthResult:
    """Analytic scene + monocular train orbit + displaced held-out test views."""
    rng = np.random.default_rng(spec.seed)
    T = spec.n_frames

    # static backdrop: jittered grid on a plane behind the action
    side = int(np.ceil(np.sqrt(spec.n_static)))
    g = np.linspace(-4.0, 4.0, side)
    xx, yy = np.meshgrid(g, g)
    pts = np.stack([xx.ravel(), yy.ravel()], axis=1)[: spec.n_static]
    jitter = rng.uniform(-0.5, 0.5, size=pts.shape) * (8.0 / side)
    static_pos = np.concatenate(
        [pts + jitter, np.full((len(pts), 1), 1.5) + rng.uniform(-0.05, 0.05, (len(pts), 1))],
        axis=1,
    )
    static = _gaussian_cloud(static_pos, 8.0 / side * 0.8,
                             _texture_colors(static_pos, rng))

    # dynamic foreground per preset
    nd = spec.n_dynamic
    amp = spec.motion_amp
    if spec.preset == "blob":
        base = rng.normal(0, 0.28, size=(nd, 3)) * np.array([1.0, 1.0, 0.4])
        base += np.array([0.0, 0.0, -0.2])

        def offset_fn(t):
            ph = 2 * np.pi * t / (T - 1)
            o = amp * np.array([np.sin(ph), 0.35 * np.sin(2 * ph), 0.0])
            return np.tile(o, (nd, 1))
    elif spec.preset == "orbit_pair":
        half = nd // 2
        base = np.concatenate([
            rng.normal([-0.45, 0, -0.2], 0.18, size=(half, 3)),
            rng.normal([0.45, 0, -0.2], 0.18, size=(nd - half, 3)),
        ])
        sign = np.concatenate([np.ones(half), -np.ones(nd - half)])

        def offset_fn(t):
            ph = 2 * np.pi * t / (T - 1)
            return 0.5 * amp * sign[:, None] * np.array(
                [np.cos(ph) - 1.0, np.sin(ph), 0.0]
            )[None, :]
    else:  # bar: points along a segment swinging about its end
        s = rng.uniform(-0.7, 0.7, size=nd)
        base = np.stack([s, rng.normal(0, 0.05, nd),
                         np.full(nd, -0.2) + rng.normal(0, 0.05, nd)], axis=1)

        def offset_fn(t):
            ang = 0.8 * amp * np.sin(2 * np.pi * t / (T - 1))
            ca, sa = np.cos(ang), np.sin(ang)
            x, y = base[:, 0], base[:, 1]
            return np.stack([x * ca - y * sa - x, x * sa + y * ca - y,
                             np.zeros(nd)], axis=1)

    dynamic = _gaussian_cloud(base, 0.06, _texture_colors(base * 3.0, rng))
    tracks = _knotify(offset_fn, nd, spec.n_knots, T)
    scene = Scene(static, dynamic, tracks, T,
                  background_color=np.array([0.05, 0.05, 0.08]))

    # trajectories
    size = spec.image_size
    f = size * 1.2
    intr = Intrinsics(f, f, size / 2.0, size / 2.0, size, size)
    arc = np.deg2rad(spec.arc_deg)
    degenerate = arc == 0.0
    az = np.linspace(-arc / 2, arc / 2, T)
    train = Trajectory([_orbit_pose(spec.orbit_radius, a, spec.elevation) for a in az],
                       intr, tag="input")
    test_az = np.linspace(-arc / 2 * 1.1, arc / 2 * 1.1, spec.n_test)
    test = Trajectory(
        [_orbit_pose(spec.orbit_radius, a, spec.elevation + 0.25) for a in test_az],
        intr, tag="input",
    )
    test_times = np.round(np.linspace(0, T - 1, spec.n_test)).astype(int)
    return SynthResult(scene, train, test, test_times, degenerate)


# --------------------------------------------------------------------------
# Dataset rendering


def default_settings(spec: SynthSpec, dtype="float32") -> RenderSettings:
    return RenderSettings(spec.image_size, spec.image_size, dtype=dtype)


def render_dataset(result: SynthResult, out_dir, settings: RenderSettings | None = None,
                   spec: SynthSpec | None = None, covis_gamma=0.05, covis_eps=0.01):
    """Render and persist the full synthetic dataset directory."""
    out = Path(out_dir)
    for sub in ("frames", "depths", "dyn_masks", "test_gt", "test_dyn_masks",
                "covis_masks"):
        io_utils.ensure_dir(out / sub)
    settings = settings or default_settings(spec or SynthSpec())
    scene, train, test = result.scene, result.train, result.test

    train_depths = []
    for t in range(scene.n_frames):
        posed = deform_at_time(scene, t)
        outp = render(posed, train.poses[t], train.intrinsics, settings, with_ctx=False)
        dyn = render(posed, train.poses[t], train.intrinsics, settings,
                     dynamic_only=True, with_ctx=False)
        name = f"{t:04d}.png"
        io_utils.save_image(out / "frames" / name, outp.color)
        io_utils.save_float_image(str(out / "frames" / name) + ".npy", outp.color)
        io_utils.save_depth(out / "depths" / name, outp.depth)
        io_utils.save_mask(out / "dyn_masks" / name, dyn.alpha >= 0.5)
        train_depths.append(outp.depth)

    for i, (pose, t) in enumerate(zip(test.poses, result.test_times)):
        posed = deform_at_time(scene, int(t))
        outp = render(posed, pose, test.intrinsics, settings, with_ctx=False)
        dyn = render(posed, pose, test.intrinsics, settings,
                     dynamic_only=True, with_ctx=False)
        name = f"{i:04d}.png"
        io_utils.save_image(out / "test_gt" / name, outp.color)
        io_utils.save_float_image(str(out / "test_gt" / name) + ".npy", outp.color)
        io_utils.save_mask(out / "test_dyn_masks" / name, dyn.alpha >= 0.5)
        covis = compute_covisibility(pose, int(t), scene, train, train_depths,
                                     settings, gamma=covis_gamma, eps=covis_eps)
        io_utils.save_mask(out / "covis_masks" / name, covis)

    from .camera import save_trajectory
    from .scene import save_scene
    save_trajectory(train, out / "cameras.json")
    save_trajectory(test, out / "test_cameras.json")
    save_scene(scene, out / "gt_scene.json")
    io_utils.write_json(out / "spec.json", {
        "schema": SPEC_SCHEMA,
        "spec": (spec.to_dict() if spec else None),
        "test_times": result.test_times.tolist(),
    })


def compute_covisibility(test_pose: Pose, test_time: int, scene: Scene,
                         train: Trajectory, train_depths, settings: RenderSettings,
                         gamma=0.05, eps=0.01):
    """Depth-tested co-visibility of a test view against all training frames.

    A pixel is co-visible iff its back-projected surface point passes a
    relative depth test (tolerance eps) in at least gamma of the training
    frames. Non-surface (background) pixels are never co-visible.
    """
    intr = train.intrinsics
    posed = deform_at_time(scene, test_time)
    ref = render(posed, test_pose, intr, settings, with_ctx=False)
    H, W = ref.depth.shape
    surface = ref.alpha >= 0.5
    ys, xs = np.nonzero(surface)
    if len(xs) == 0:
        return np.zeros((H, W), dtype=np.uint8)
    d = ref.depth[ys, xs]
    cam = np.stack([(xs + 0.5 - intr.cx) / intr.fx * d,
                    (ys + 0.5 - intr.cy) / intr.fy * d, d], axis=1)
    world = cam @ test_pose.R.T + test_pose.center

    hits = np.zeros(len(xs), dtype=np.int32)
    for t, pose in enumerate(train.poses):
        p = (world - pose.center) @ pose.R
        z = p[:, 2]
        valid = z > settings.near
        u = intr.fx * p[:, 0] / np.where(valid, z, 1.0) + intr.cx
        v = intr.fy * p[:, 1] / np.where(valid, z, 1.0) + intr.cy
        ui = np.round(u - 0.5).astype(int)
        vi = np.round(v - 0.5).astype(int)
        inside = valid & (ui >= 0) & (ui < W) & (vi >= 0) & (vi < H)
        dmap = train_depths[t]
        zi = np.where(inside, dmap[np.clip(vi, 0, H - 1), np.clip(ui, 0, W - 1)], 0.0)
        pass_depth = inside & (np.abs(zi - z) <= eps * np.maximum(z, 1e-9))
        hits += pass_depth.astype(np.int32)

    mask = np.zeros((H, W), dtype=np.uint8)
    mask[ys, xs] = (hits >= max(1, int(np.ceil(gamma * len(train.poses))))).astype(np.uint8)
    return mask


# --------------------------------------------------------------------------
# Dataset loading (the directory contract the CLI consumes)


@dataclass
class Dataset:
    frames: list
    depths: list
    dyn_masks: list
    train: Trajectory
    test: Trajectory
    test_times: np.ndarray
    root: Path


def load_dataset(root) -> Dataset:
    from .camera import load_trajectory
    root = Path(root)
    doc = io_utils.read_json(root / "spec.json")
    if doc.get("schema") != SPEC_SCHEMA:
        raise ValueError(f"unsupported dataset schema {doc.get('schema')!r}")
    train = load_trajectory(root / "cameras.json")
    test = load_trajectory(root / "test_cameras.json")
    frames, depths, masks = [], [], []
    for t in range(len(train)):
        name = f"{t:04d}.png"
        frames.append(io_utils.load_float_image(str(root / "frames" / name) + ".npy"))
        depths.append(io_utils.load_depth(root / "depths" / name))
        masks.append(io_utils.load_mask(root / "dyn_masks" / name))
    return Dataset(frames, depths, masks, train, test,
                   np.array(doc["test_times"]), root)
