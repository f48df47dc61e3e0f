"""Cameras: intrinsics, SE(3) poses, trajectories and training-view sampling.

Poses are camera-to-world (rotation quaternion + camera center). The
world-to-camera transform is derived on demand and never stored.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import rotations as rot

TRAJECTORY_SCHEMA = "dynrecon.trajectory/1"


class BehindCameraError(ValueError):
    pass


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width and 0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self):
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world pose: unit quaternion + camera center."""

    quat: np.ndarray  # (4,) wxyz
    center: np.ndarray  # (3,)

    def __post_init__(self):
        object.__setattr__(self, "quat", rot.quat_normalize(self.quat))
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))

    @property
    def R(self):
        """Camera-to-world rotation matrix."""
        return rot.quat_to_matrix(self.quat)

    def world_to_camera(self, x_world):
        x_world = np.asarray(x_world, dtype=np.float64)
        return (x_world - self.center) @ self.R  # R^T @ (x - c)

    def compose_right(self, R_delta, t_delta):
        R = self.R
        return Pose(rot.matrix_to_quat(R @ R_delta), R @ t_delta + self.center)

    def almost_equal(self, other, tol=1e-12):
        dq = min(np.abs(self.quat - other.quat).max(), np.abs(self.quat + other.quat).max())
        return dq <= tol and np.abs(self.center - other.center).max() <= tol


@dataclass
class Trajectory:
    poses: list[Pose]
    intrinsics: Intrinsics
    tag: str = "input"  # "input" | "sampled"

    def __post_init__(self):
        if not self.poses:
            raise ValueError("trajectory must contain at least one pose")
        if self.tag not in ("input", "sampled"):
            raise ValueError(f"unknown trajectory tag {self.tag!r}")
        for p in self.poses:
            if not (np.all(np.isfinite(p.quat)) and np.all(np.isfinite(p.center))):
                raise ValueError("non-finite pose in trajectory")

    def __len__(self):
        return len(self.poses)

    def centers(self):
        return np.stack([p.center for p in self.poses])


def project_point(intr: Intrinsics, pose: Pose, x_world, near: float = 1e-6):
    """Pinhole projection; returns ((u, v), camera-frame depth)."""
    p = pose.world_to_camera(x_world)
    z = p[2]
    if z <= near:
        raise BehindCameraError(f"point at camera depth {z:.3g} <= near {near:.3g}")
    u = intr.fx * p[0] / z + intr.cx
    v = intr.fy * p[1] / z + intr.cy
    return np.array([u, v]), float(z)


def se3_update(pose: Pose, tangent) -> Pose:
    """Right-compose the pose with exp of a (rotation, translation) 6-vector."""
    tangent = np.asarray(tangent, dtype=np.float64)
    if tangent.shape != (6,) or not np.all(np.isfinite(tangent)):
        raise ValueError("tangent must be a finite 6-vector")
    R_delta, t_delta = rot.se3_exp(tangent)
    return pose.compose_right(R_delta, t_delta)


def pose_error(a: Pose, b: Pose) -> float:
    """Norm of the SE(3) log of a^-1 b (relative pose magnitude)."""
    Ra, Rb = a.R, b.R
    R_rel = Ra.T @ Rb
    t_rel = Ra.T @ (b.center - a.center)
    return float(np.linalg.norm(rot.se3_log(R_rel, t_rel)))


# --------------------------------------------------------------------------
# Reference sphere and extreme-view selection


@dataclass
class SphereFit:
    center: np.ndarray
    radius: float
    rms_residual: float
    degenerate: bool = False


def fit_reference_sphere(traj: Trajectory) -> SphereFit:
    """Least-squares sphere through the camera centers.

    Solves ||x||^2 = 2 c.x + (r^2 - ||c||^2) as a linear system. Near-coplanar
    or collinear centers fall back to a sphere centered at the look-at
    centroid with radius equal to the mean center distance.
    """
    centers = traj.centers()
    mean = centers.mean(axis=0)
    centered = centers - mean
    # rank of the spread decides whether the linear fit is well-posed
    svals = np.linalg.svd(centered, compute_uv=False)
    scale = svals[0] if svals[0] > 0 else 1.0
    well_posed = centers.shape[0] >= 4 and svals[2] > 1e-6 * scale

    if well_posed:
        A = np.concatenate([2.0 * centers, np.ones((len(centers), 1))], axis=1)
        b = np.sum(centers**2, axis=1)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        c = sol[:3]
        r2 = sol[3] + np.dot(c, c)
        if r2 > 0:
            r = float(np.sqrt(r2))
            resid = np.linalg.norm(centers - c, axis=1) - r
            return SphereFit(c, r, float(np.sqrt(np.mean(resid**2))))

    # fallback: centroid of the per-camera look-at directions
    lookat = np.mean(
        [p.center + p.R[:, 2] * np.linalg.norm(centers - mean, axis=1).mean() for p in traj.poses],
        axis=0,
    )
    dists = np.linalg.norm(centers - lookat, axis=1)
    r = float(dists.mean())
    resid = dists - r
    return SphereFit(lookat, r, float(np.sqrt(np.mean(resid**2))), degenerate=True)


def _trajectory_up_axis(centers):
    """Plane normal of the camera centers (smallest principal axis)."""
    centered = centers - centers.mean(axis=0)
    cov = centered.T @ centered
    w, v = np.linalg.eigh(cov)
    axis = v[:, 0]
    # deterministic sign
    k = int(np.argmax(np.abs(axis)))
    if axis[k] < 0:
        axis = -axis
    return axis


def camera_longitudes(traj: Trajectory, sphere: SphereFit):
    """Longitude of each camera center about the trajectory-plane up-axis."""
    centers = traj.centers()
    up = _trajectory_up_axis(centers)
    # build an orthonormal frame (e1, e2, up)
    ref = np.array([1.0, 0.0, 0.0])
    if abs(np.dot(ref, up)) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    e1 = ref - np.dot(ref, up) * up
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(up, e1)
    rel = centers - sphere.center
    return np.arctan2(rel @ e2, rel @ e1)


def wrapped_angle_diff(a, b):
    """Absolute angular difference wrapped to [0, pi]."""
    d = np.abs(a - b) % (2 * np.pi)
    return np.minimum(d, 2 * np.pi - d)


def find_extreme_views(traj: Trajectory, sphere: SphereFit):
    """Index pair with the largest longitudinal displacement on the sphere."""
    lon = camera_longitudes(traj, sphere)
    n = len(lon)
    if n == 2:
        return 0, 1, False
    best, pair = -1.0, (0, n - 1)
    for i in range(n - 1):
        d = wrapped_angle_diff(lon[i], lon[i + 1:])
        j = int(np.argmax(d))
        if d[j] > best:
            best = float(d[j])
            pair = (i, i + 1 + j)
    degenerate = best <= 1e-12
    if degenerate:
        pair = (0, n - 1)
    return pair[0], pair[1], degenerate


# --------------------------------------------------------------------------
# Pose blending, perturbation, sampling


def blend_poses(a: Pose, b: Pose, w: float) -> Pose:
    """Linear center interpolation + quaternion slerp; w=1 returns b."""
    return Pose(rot.quat_slerp(a.quat, b.quat, w), (1 - w) * a.center + w * b.center)


def perturb_pose(pose: Pose, amp_t: float, amp_r: float, rng) -> Pose:
    """Uniform-ball center offset (radius amp_t) + random axis-angle <= amp_r."""
    if amp_t < 0 or amp_r < 0:
        raise ValueError("perturbation amplitudes must be >= 0")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    # uniform in the ball: direction uniform on the sphere, radius ~ u^(1/3)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction)
    offset = direction * amp_t * rng.uniform() ** (1.0 / 3.0)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = amp_r * rng.uniform()
    R_delta = rot.so3_exp(axis * angle)
    return Pose(rot.matrix_to_quat(pose.R @ R_delta), pose.center + offset)


@dataclass
class SamplerConfig:
    w_min: float = 0.3
    w_max: float = 0.9
    noise_t_min_frac: float = 0.01  # fraction of the sphere radius
    noise_t_max_frac: float = 0.05
    noise_r_min_deg: float = 0.5
    noise_r_max_deg: float = 2.5

    def to_dict(self):
        return dict(self.__dict__)


CAMERAS_PER_TIMESTEP = 18
_N_RANDOM_PAIR = 4   # blends of two random input poses
_N_PER_EXTREME = 6   # ramped blends toward each extreme view


def sample_training_cameras(
    traj: Trajectory, seed: int, config: SamplerConfig | None = None
) -> Trajectory:
    """Sample 18 training cameras per input timestep.

    Per timestep: 4 means of two random input poses with minimum-amplitude
    noise; for each of the 2 extreme views 6 blends with a random input pose,
    blend weight and noise amplitude ramping together; the 2 extreme poses
    verbatim. Deterministic under seed.
    """
    if len(traj) < 2:
        raise ValueError("need at least 2 input poses to sample from")
    cfg = config or SamplerConfig()
    sphere = fit_reference_sphere(traj)
    ia, ib, _ = find_extreme_views(traj, sphere)
    extremes = (traj.poses[ia], traj.poses[ib])
    radius = sphere.radius
    amp_t_lo, amp_t_hi = cfg.noise_t_min_frac * radius, cfg.noise_t_max_frac * radius
    amp_r_lo = np.deg2rad(cfg.noise_r_min_deg)
    amp_r_hi = np.deg2rad(cfg.noise_r_max_deg)

    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n = len(traj)
    sampled: list[Pose] = []
    for _t in range(n):
        for _ in range(_N_RANDOM_PAIR):
            i, j = rng.integers(0, n, size=2)
            p = blend_poses(traj.poses[i], traj.poses[j], 0.5)
            sampled.append(perturb_pose(p, amp_t_lo, amp_r_lo, rng))
        for ext in extremes:
            for k in range(_N_PER_EXTREME):
                s = k / (_N_PER_EXTREME - 1)
                w = cfg.w_min + s * (cfg.w_max - cfg.w_min)
                i = rng.integers(0, n)
                p = blend_poses(traj.poses[i], ext, w)
                amp_t = amp_t_lo + s * (amp_t_hi - amp_t_lo)
                amp_r = amp_r_lo + s * (amp_r_hi - amp_r_lo)
                sampled.append(perturb_pose(p, amp_t, amp_r, rng))
        sampled.extend(extremes)
    return Trajectory(sampled, traj.intrinsics, tag="sampled")


# --------------------------------------------------------------------------
# Serialization


def save_trajectory(traj: Trajectory, path):
    doc = {
        "schema": TRAJECTORY_SCHEMA,
        "tag": traj.tag,
        "intrinsics": traj.intrinsics.to_dict(),
        "poses": [
            {"quat": p.quat.tolist(), "center": p.center.tolist()} for p in traj.poses
        ],
    }
    with open(path, "w") as f:
        json.dump(doc, f, indent=1)


def load_trajectory(path) -> Trajectory:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("schema") != TRAJECTORY_SCHEMA:
        raise ValueError(f"unsupported trajectory schema {doc.get('schema')!r}")
    return Trajectory(
        [Pose(np.array(p["quat"]), np.array(p["center"])) for p in doc["poses"]],
        Intrinsics.from_dict(doc["intrinsics"]),
        tag=doc["tag"],
    )
