"""4D scene representation: static/dynamic Gaussian sets with motion tracks.

Gaussians are stored as struct-of-arrays for vectorized rendering. Activation
conventions are fixed project-wide: scales activate through exp, opacity
through sigmoid.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field

import numpy as np

from .camera import Intrinsics, Pose, Trajectory

log = logging.getLogger(__name__)

SCENE_SCHEMA = "dynrecon.scene/1"
MAX_SCALE = 10.0  # hard ceiling on activated extent, scene units


@dataclass
class GaussianSet:
    """Struct-of-arrays bundle of anisotropic Gaussians."""

    means: np.ndarray          # (N, 3)
    quats: np.ndarray          # (N, 4) wxyz, unit
    log_scales: np.ndarray     # (N, 3)
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray         # (N, 3) linear RGB

    def __post_init__(self):
        n = len(self.means)
        for name in ("means", "quats", "log_scales", "opacity_logits", "colors"):
            arr = np.ascontiguousarray(getattr(self, name), dtype=np.float64)
            setattr(self, name, arr)
            if len(arr) != n:
                raise ValueError(f"{name} length {len(arr)} != {n}")
        if self.means.shape != (n, 3) or self.quats.shape != (n, 4):
            raise ValueError("bad gaussian array shapes")

    def __len__(self):
        return len(self.means)

    def renormalize(self):
        """Restore quaternion unit norm and the scale ceiling in place."""
        if len(self) == 0:
            return
        norms = np.linalg.norm(self.quats, axis=1, keepdims=True)
        np.divide(self.quats, norms, out=self.quats)
        np.clip(self.log_scales, None, np.log(MAX_SCALE), out=self.log_scales)

    def copy(self):
        return GaussianSet(
            self.means.copy(), self.quats.copy(), self.log_scales.copy(),
            self.opacity_logits.copy(), self.colors.copy(),
        )

    @classmethod
    def empty(cls):
        z = np.zeros
        return cls(z((0, 3)), z((0, 4)), z((0, 3)), z((0,)), z((0, 3)))


@dataclass
class MotionTracks:
    """Per-dynamic-Gaussian translation tracks: K knots uniform over [0, T-1]."""

    knots: np.ndarray  # (N, K, 3) absolute offsets added to the base mean
    n_frames: int

    def __post_init__(self):
        self.knots = np.ascontiguousarray(self.knots, dtype=np.float64)
        if self.knots.ndim != 3 or self.knots.shape[2] != 3:
            raise ValueError("knots must be (N, K, 3)")
        if self.knots.shape[1] < 2:
            raise ValueError("need at least 2 knots")
        if self.n_frames < 1:
            raise ValueError("n_frames must be positive")

    @property
    def n_knots(self):
        return self.knots.shape[1]

    def interp_weights(self, t: float):
        """Linear interpolation: returns (k0, k1, w) with offset = (1-w)*knot[k0] + w*knot[k1]."""
        T = self.n_frames
        if not (0.0 <= t <= T - 1):
            raise ValueError(f"time {t} outside [0, {T - 1}]")
        K = self.n_knots
        u = 0.0 if T == 1 else t / (T - 1) * (K - 1)
        k0 = min(int(np.floor(u)), K - 2)
        return k0, k0 + 1, u - k0

    def offsets_at(self, t: float):
        k0, k1, w = self.interp_weights(t)
        return (1.0 - w) * self.knots[:, k0] + w * self.knots[:, k1]

    def copy(self):
        return MotionTracks(self.knots.copy(), self.n_frames)

    @classmethod
    def constant(cls, n: int, n_knots: int, n_frames: int):
        return cls(np.zeros((n, n_knots, 3)), n_frames)


@dataclass
class Scene:
    static_set: GaussianSet
    dynamic_set: GaussianSet
    tracks: MotionTracks
    n_frames: int
    background_color: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background_color = np.asarray(self.background_color, dtype=np.float64)
        if len(self.dynamic_set) != len(self.tracks.knots):
            raise ValueError("|dynamic_set| must equal number of tracks")
        if self.tracks.n_frames != self.n_frames:
            raise ValueError("tracks and scene disagree on n_frames")

    @property
    def n_gaussians(self):
        return len(self.static_set) + len(self.dynamic_set)

    def copy(self):
        return Scene(
            self.static_set.copy(), self.dynamic_set.copy(), self.tracks.copy(),
            self.n_frames, self.background_color.copy(),
        )


@dataclass
class PosedGaussians:
    """Gaussians posed at one time: static unchanged, dynamic means offset.

    Keeps the interpolation stencil so the renderer can chain gradients from
    posed means back to track knots.
    """

    gaussians: GaussianSet
    n_static: int
    knot_stencil: tuple[int, int, float] | None  # (k0, k1, w) for dynamic means
    n_knots: int
    time: float
    background_color: np.ndarray

    @property
    def n_dynamic(self):
        return len(self.gaussians) - self.n_static


def deform_at_time(scene: Scene, t: float) -> PosedGaussians:
    """Pose the scene at (possibly fractional) frame time t."""
    stencil = None
    if len(scene.dynamic_set) > 0:
        stencil = scene.tracks.interp_weights(t)
        offsets = scene.tracks.offsets_at(t)
        dyn = scene.dynamic_set.copy()
        dyn.means = dyn.means + offsets
    else:
        # still validates the time domain
        if not (0.0 <= t <= scene.n_frames - 1):
            raise ValueError(f"time {t} outside [0, {scene.n_frames - 1}]")
        dyn = scene.dynamic_set.copy()
    s = scene.static_set
    merged = GaussianSet(
        np.concatenate([s.means, dyn.means]),
        np.concatenate([s.quats, dyn.quats]),
        np.concatenate([s.log_scales, dyn.log_scales]),
        np.concatenate([s.opacity_logits, dyn.opacity_logits]),
        np.concatenate([s.colors, dyn.colors]),
    )
    return PosedGaussians(merged, len(s), stencil, scene.tracks.n_knots, t,
                          scene.background_color)


# --------------------------------------------------------------------------
# Seeding from depth


def _lift_pixels(intr: Intrinsics, pose: Pose, us, vs, depths):
    x = (us - intr.cx) / intr.fx * depths
    y = (vs - intr.cy) / intr.fy * depths
    p_cam = np.stack([x, y, depths], axis=1)
    return p_cam @ pose.R.T + pose.center


def seed_from_depth(
    frames, depths, dyn_masks, trajectory: Trajectory,
    n_static: int, n_dynamic: int, seed: int,
    n_knots: int = 8, opacity: float = 0.8,
) -> Scene:
    """Back-project masked pixels into an initial Scene.

    Static seeds come from mask==0 pixels, dynamic seeds from mask==1 pixels;
    each dynamic Gaussian gets a constant track at its lift position. Initial
    scale is the pixel footprint depth/fx, isotropic.
    """
    T = len(frames)
    if not (len(depths) == len(dyn_masks) == len(trajectory) == T):
        raise ValueError("frames, depths, masks and trajectory must have equal length")
    rng = np.random.default_rng(seed)
    intr = trajectory.intrinsics

    static_parts, dynamic_parts = [], []
    for want_dynamic, total in ((False, n_static), (True, n_dynamic)):
        per_frame = _split_count(total, T, rng)
        rows = []
        for t in range(T):
            mask = np.asarray(dyn_masks[t]) > 0
            depth = np.asarray(depths[t], dtype=np.float64)
            valid = (mask if want_dynamic else ~mask) & (depth > 0)
            vs, us = np.nonzero(valid)
            if len(us) == 0:
                continue
            take = min(per_frame[t], len(us))
            idx = rng.choice(len(us), size=take, replace=take > len(us))
            u, v, d = us[idx].astype(np.float64), vs[idx].astype(np.float64), depth[vs[idx], us[idx]]
            pos = _lift_pixels(intr, trajectory.poses[t], u + 0.5, v + 0.5, d)
            color = np.asarray(frames[t], dtype=np.float64)[vs[idx], us[idx]]
            scale = d / intr.fx
            rows.append((pos, color, scale))
        target = dynamic_parts if want_dynamic else static_parts
        target.extend(rows)

    def build(rows, label):
        if not rows:
            log.warning("no %s seeds found (mask empty for that class)", label)
            return GaussianSet.empty()
        pos = np.concatenate([r[0] for r in rows])
        color = np.concatenate([r[1] for r in rows])
        scale = np.concatenate([r[2] for r in rows])
        n = len(pos)
        quats = np.zeros((n, 4))
        quats[:, 0] = 1.0
        eps = 1e-4  # color logits stay finite; colors are stored activated anyway
        return GaussianSet(
            pos, quats, np.log(np.maximum(scale, 1e-6))[:, None].repeat(3, axis=1),
            np.full(n, _logit(opacity)), np.clip(color, eps, 1 - eps),
        )

    static = build(static_parts, "static")
    dynamic = build(dynamic_parts, "dynamic")
    tracks = MotionTracks.constant(len(dynamic), n_knots, T)
    return Scene(static, dynamic, tracks, T)


def _split_count(total, parts, rng):
    base = np.full(parts, total // parts)
    base[: total % parts] += 1
    return base


def _logit(p):
    return float(np.log(p / (1.0 - p)))


# --------------------------------------------------------------------------
# Serialization: JSON header + little-endian binary payload


_ARRAY_FIELDS = [
    ("static", "means"), ("static", "quats"), ("static", "log_scales"),
    ("static", "opacity_logits"), ("static", "colors"),
    ("dynamic", "means"), ("dynamic", "quats"), ("dynamic", "log_scales"),
    ("dynamic", "opacity_logits"), ("dynamic", "colors"),
    ("tracks", "knots"),
]


def save_scene(scene: Scene, path):
    """Write a JSON document plus a sibling '<path>.bin' little-endian payload."""
    path = str(path)
    records, payload = [], bytearray()
    for group, name in _ARRAY_FIELDS:
        arr = _get_array(scene, group, name)
        data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        records.append({
            "group": group, "name": name, "dtype": "<f8",
            "shape": list(arr.shape), "offset": len(payload), "nbytes": len(data),
        })
        payload.extend(data)
    doc = {
        "schema": SCENE_SCHEMA,
        "n_frames": scene.n_frames,
        "n_knots": scene.tracks.n_knots,
        "background_color": scene.background_color.tolist(),
        "payload": path.rsplit("/", 1)[-1] + ".bin",
        "arrays": records,
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)
    with open(path + ".bin", "wb") as f:
        f.write(bytes(payload))


def load_scene(path) -> Scene:
    path = str(path)
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != SCENE_SCHEMA:
        raise ValueError(f"unsupported scene schema {doc.get('schema')!r}")
    with open(path + ".bin", "rb") as f:
        payload = f.read()
    arrays = {}
    for rec in doc["arrays"]:
        raw = payload[rec["offset"]: rec["offset"] + rec["nbytes"]]
        arrays[(rec["group"], rec["name"])] = np.frombuffer(
            raw, dtype=rec["dtype"]
        ).reshape(rec["shape"]).copy()

    def gset(group):
        return GaussianSet(
            arrays[(group, "means")], arrays[(group, "quats")],
            arrays[(group, "log_scales")], arrays[(group, "opacity_logits")],
            arrays[(group, "colors")],
        )

    tracks = MotionTracks(arrays[("tracks", "knots")], doc["n_frames"])
    return Scene(gset("static"), gset("dynamic"), tracks, doc["n_frames"],
                 np.array(doc["background_color"]))


def _get_array(scene: Scene, group, name):
    if group == "tracks":
        return scene.tracks.knots
    gset = scene.static_set if group == "static" else scene.dynamic_set
    return getattr(gset, name)
