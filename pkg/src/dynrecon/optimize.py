"""Training engine: grouped Adam, baseline phase and two-pass refinement.

Parameter groups are {gaussians, tracks, input_poses, sampled_poses}. Pose
groups live on SE(3): Adam runs on the tangent gradient at the identity and
the resulting step is applied through the exponential map, so poses stay on
the manifold and moments persist across steps.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from . import losses
from .camera import Intrinsics, Pose, Trajectory, se3_update
from .enhance import PseudoViewRecord
from .io_utils import load_float_image, load_mask
from .render import RenderSettings, render_core
from .scene import GaussianSet, MotionTracks, Scene

log = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

GAUSSIAN_PARAMS = ("means", "quats", "log_scales", "opacity_logits", "colors")


class NumericFailure(RuntimeError):
    pass


@dataclass
class LearningRates:
    means: float = 1.6e-3
    quats: float = 5e-3
    log_scales: float = 5e-3
    opacity_logits: float = 5e-3
    colors: float = 2.5e-3
    tracks: float = 1.6e-3
    input_poses: float = 1e-4
    sampled_poses: float = 1e-4

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class Schedule:
    phase1_iters: int = 8000
    phase2_iters: int = 40000
    lr: LearningRates = field(default_factory=LearningRates)
    lr_scale: float = 1.0
    pseudo_weight: float = 1.0  # weight of L_dyn vs the baseline input-view loss
    seed: int = 0

    def __post_init__(self):
        if self.phase1_iters <= 0 or self.phase2_iters <= 0:
            raise ValueError("iteration counts must be positive")

    def to_dict(self):
        d = dict(self.__dict__)
        d["lr"] = self.lr.to_dict()
        return d


@dataclass
class OptimState:
    """Adam first/second moments keyed by parameter name, plus step counters."""

    moments: dict = field(default_factory=dict)   # name -> (m, v) numpy arrays
    steps: dict = field(default_factory=dict)     # name -> update count

    def slot(self, name, shape):
        if name not in self.moments:
            self.moments[name] = (np.zeros(shape), np.zeros(shape))
        return self.moments[name]


def adam_direction(state: OptimState, group: str, name: str, grad, lr: float):
    """One Adam update direction -lr * mhat / (sqrt(vhat) + eps)."""
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise NumericFailure(f"non-finite gradient for {name}")
    m, v = state.slot(name, grad.shape)
    t = state.steps[name] = state.steps.get(name, 0) + 1
    m *= ADAM_BETA1
    m += (1 - ADAM_BETA1) * grad
    v *= ADAM_BETA2
    v += (1 - ADAM_BETA2) * grad * grad
    mhat = m / (1 - ADAM_BETA1**t)
    vhat = v / (1 - ADAM_BETA2**t)
    return -lr * mhat / (np.sqrt(vhat) + ADAM_EPS)


class TrainState:
    """Mutable optimization state: torch scene parameters + pose lists."""

    def __init__(self, scene: Scene, input_traj: Trajectory,
                 sampled_traj: Trajectory | None, schedule: Schedule,
                 settings: RenderSettings):
        self.dtype = settings.torch_dtype
        self.settings = settings
        self.schedule = schedule
        self.intr = input_traj.intrinsics
        self.n_frames = scene.n_frames
        self.n_static = len(scene.static_set)
        self.background = torch.tensor(scene.background_color, dtype=self.dtype)

        def param(arr):
            return torch.tensor(arr, dtype=self.dtype, requires_grad=True)

        self.params = {}
        for name in GAUSSIAN_PARAMS:
            self.params[f"static.{name}"] = param(getattr(scene.static_set, name))
            self.params[f"dynamic.{name}"] = param(getattr(scene.dynamic_set, name))
        self.params["tracks.knots"] = param(scene.tracks.knots)
        self.n_knots = scene.tracks.n_knots

        self.input_poses = list(input_traj.poses)
        self.sampled_poses = list(sampled_traj.poses) if sampled_traj else []
        self.sampled_tag_intr = sampled_traj.intrinsics if sampled_traj else self.intr
        self.opt = OptimState()

    # -- forward ----------------------------------------------------------

    def posed_params(self, t: float):
        """Graph-connected merged parameter bundle at frame time t."""
        knots = self.params["tracks.knots"]
        T, K = self.n_frames, self.n_knots
        if not (0.0 <= t <= T - 1):
            raise ValueError(f"time {t} outside [0, {T - 1}]")
        u = 0.0 if T == 1 else t / (T - 1) * (K - 1)
        k0 = min(int(np.floor(u)), K - 2)
        w = u - k0
        offsets = (1.0 - w) * knots[:, k0] + w * knots[:, k0 + 1]
        bundle = {}
        for name in GAUSSIAN_PARAMS:
            s, d = self.params[f"static.{name}"], self.params[f"dynamic.{name}"]
            if name == "means" and len(d) > 0:
                d = d + offsets
            bundle[name] = torch.cat([s, d]) if len(d) > 0 else s
        return bundle

    def forward(self, t: float, pose: Pose, tangent: torch.Tensor,
                intr: Intrinsics | None = None, dynamic_only=False):
        bundle = self.posed_params(t)
        pose_q = torch.tensor(pose.quat, dtype=self.dtype)
        pose_c = torch.tensor(pose.center, dtype=self.dtype)
        subset = slice(self.n_static, None) if dynamic_only else None
        bg = torch.zeros(3, dtype=self.dtype) if dynamic_only else self.background
        color, alpha, depth, _ = render_core(
            bundle, pose_q, pose_c, tangent, intr or self.intr,
            self.settings, bg, subset,
        )
        return color, alpha, depth

    # -- updates ----------------------------------------------------------

    def adam_step(self, group: str, grads: dict):
        """Apply Adam to one group. grads maps param name -> gradient array;
        pose groups map pose index -> 6-vector tangent gradient."""
        lr = self.schedule.lr
        scale = self.schedule.lr_scale
        if group == "gaussians":
            with torch.no_grad():
                for name in GAUSSIAN_PARAMS:
                    rate = getattr(lr, name) * scale
                    for prefix in ("static", "dynamic"):
                        key = f"{prefix}.{name}"
                        if key not in grads or self.params[key].numel() == 0:
                            continue
                        step = adam_direction(self.opt, group, key, grads[key], rate)
                        self.params[key] += torch.tensor(step, dtype=self.dtype)
                for prefix in ("static", "dynamic"):
                    q = self.params[f"{prefix}.quats"]
                    if q.numel():
                        q /= q.norm(dim=1, keepdim=True)
        elif group == "tracks":
            with torch.no_grad():
                if "tracks.knots" in grads and self.params["tracks.knots"].numel():
                    step = adam_direction(self.opt, group, "tracks.knots",
                                          grads["tracks.knots"], lr.tracks * scale)
                    self.params["tracks.knots"] += torch.tensor(step, dtype=self.dtype)
        elif group in ("input_poses", "sampled_poses"):
            poses = self.input_poses if group == "input_poses" else self.sampled_poses
            rate = getattr(lr, group) * scale
            for idx, g in grads.items():
                step = adam_direction(self.opt, group, f"{group}.{idx}", g, rate)
                poses[idx] = se3_update(poses[idx], step)
        else:
            raise ValueError(f"unknown parameter group {group!r}")

    def scene_param_grads(self):
        grads = {}
        for key, p in self.params.items():
            if p.grad is not None:
                grads[key] = p.grad.numpy().astype(np.float64)
        return grads

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- export -----------------------------------------------------------

    def to_scene(self) -> Scene:
        def gset(prefix):
            return GaussianSet(*[
                self.params[f"{prefix}.{n}"].detach().numpy().astype(np.float64)
                for n in GAUSSIAN_PARAMS
            ])
        tracks = MotionTracks(
            self.params["tracks.knots"].detach().numpy().astype(np.float64),
            self.n_frames,
        )
        return Scene(gset("static"), gset("dynamic"), tracks, self.n_frames,
                     self.background.numpy().astype(np.float64))

    def input_trajectory(self) -> Trajectory:
        return Trajectory(list(self.input_poses), self.intr, tag="input")

    def sampled_trajectory(self) -> Trajectory:
        return Trajectory(list(self.sampled_poses), self.sampled_tag_intr,
                          tag="sampled")

    def checksums(self):
        """Per-group content hashes for update-isolation auditing."""
        def digest(arrays):
            h = hashlib.sha256()
            for a in arrays:
                h.update(np.ascontiguousarray(a).tobytes())
            return h.hexdigest()
        gauss = [self.params[f"{p}.{n}"].detach().numpy()
                 for p in ("static", "dynamic") for n in GAUSSIAN_PARAMS]
        return {
            "gaussians": digest(gauss),
            "tracks": digest([self.params["tracks.knots"].detach().numpy()]),
            "input_poses": digest([np.concatenate([p.quat, p.center])
                                   for p in self.input_poses]),
            "sampled_poses": digest([np.concatenate([p.quat, p.center])
                                     for p in self.sampled_poses]),
        }


# --------------------------------------------------------------------------
# Phase 1: baseline monocular training


def _baseline_loss(color, target, weights: losses.LossWeights):
    target_t = torch.tensor(np.asarray(target), dtype=color.dtype)
    term_l1 = losses.l1(target_t, color)
    term_s = 1.0 - losses.masked_ssim_mean(target_t, color)
    return term_l1 + weights.lambda_s * term_s


def train_baseline(
    scene: Scene, frames, input_traj: Trajectory, schedule: Schedule,
    settings: RenderSettings, weights: losses.LossWeights | None = None,
    iters: int | None = None, callback=None,
):
    """Per-frame photometric training of Gaussians, tracks and input poses."""
    weights = weights or losses.LossWeights()
    state = TrainState(scene, input_traj, None, schedule, settings)
    rng = np.random.default_rng(np.random.SeedSequence(schedule.seed, spawn_key=(1,)))
    n_iters = iters if iters is not None else schedule.phase1_iters
    T = scene.n_frames
    for it in range(n_iters):
        t = int(rng.integers(T))
        tangent = torch.zeros(6, dtype=state.dtype, requires_grad=True)
        color, _, _ = state.forward(t, state.input_poses[t], tangent)
        loss = _baseline_loss(color, frames[t], weights)
        if not torch.isfinite(loss):
            raise NumericFailure(f"baseline loss non-finite at iteration {it} (frame {t})")
        state.zero_grad()
        loss.backward()
        grads = state.scene_param_grads()
        state.adam_step("gaussians", grads)
        state.adam_step("tracks", grads)
        state.adam_step("input_poses", {t: tangent.grad.numpy().astype(np.float64)})
        if callback:
            callback(it, float(loss.detach()), state)
    return state.to_scene(), state.input_trajectory(), state


# --------------------------------------------------------------------------
# Phase 2: diffusion-aware refinement


class PseudoCache:
    """In-memory view of a batch-built pseudo dataset (enhanced + masks).

    Only images produced by the batch build can be read; there is no path
    for on-the-fly enhancement here.
    """

    def __init__(self, records: list[PseudoViewRecord], cameras_per_step: int):
        self.cameras_per_step = cameras_per_step
        self.by_key = {}
        for r in records:
            E = load_float_image(r.enhanced_path + ".npy").astype(np.float32)
            D = load_mask(r.mask_path)
            self.by_key[(r.camera_index, r.frame)] = (E, D, r)

    def get(self, m, t):
        return self.by_key[(m, t)]


def refine_diffusion_aware(
    scene: Scene, frames, input_traj: Trajectory,
    records: list[PseudoViewRecord], sampled: Trajectory,
    schedule: Schedule, settings: RenderSettings,
    weights: losses.LossWeights | None = None,
    use_dr: bool = True, use_so: bool = True,
    iters: int | None = None, cameras_per_step: int = 18,
    callback=None, audit_isolation: bool = False,
):
    """Two-pass refinement on the pseudo-multi-view dataset.

    Pass 1 (when use_so): camera loss on two sampled views of the input
    frame's timestep, updating only the sampled poses. Pass 2: re-render the
    same views with the updated poses; dynamic-masked loss (full-image when
    use_dr is off) plus the baseline input-view loss, updating Gaussians,
    tracks and the input pose.
    """
    weights = weights or losses.LossWeights()
    cache = PseudoCache(records, cameras_per_step)
    state = TrainState(scene, input_traj, sampled, schedule, settings)
    rng = np.random.default_rng(np.random.SeedSequence(schedule.seed, spawn_key=(2,)))
    n_iters = iters if iters is not None else schedule.phase2_iters
    T = scene.n_frames
    audit_log = []
    for it in range(n_iters):
        t = int(rng.integers(T))
        cams = rng.choice(cameras_per_step, size=2, replace=False)
        before = state.checksums() if audit_isolation else None

        if use_so:
            tangents = []
            total = None
            for m in cams:
                tangent = torch.zeros(6, dtype=state.dtype, requires_grad=True)
                idx = t * cameras_per_step + int(m)
                color, _, _ = state.forward(t, state.sampled_poses[idx], tangent,
                                            intr=state.sampled_tag_intr)
                E, _, _rec = cache.get(int(m), t)
                rep = losses.camera_loss(E, color, weights)
                total = rep.total if total is None else total + rep.total
                tangents.append((idx, tangent))
            total = total / len(cams)
            if not torch.isfinite(total):
                raise NumericFailure(f"camera loss non-finite at iteration {it}")
            state.zero_grad()
            total.backward()
            pose_grads = {idx: tg.grad.numpy().astype(np.float64)
                          for idx, tg in tangents}
            state.zero_grad()  # pass 1 must not leak scene gradients into pass 2
            state.adam_step("sampled_poses", pose_grads)
            if audit_isolation:
                after = state.checksums()
                audit_log.append(_isolation_delta(before, after, {"sampled_poses"}))
                before = after

        # pass 2: fresh forward with the updated sampled poses
        pseudo_total = None
        for m in cams:
            idx = t * cameras_per_step + int(m)
            tangent = torch.zeros(6, dtype=state.dtype)  # pose fixed in pass 2
            color, _, _ = state.forward(t, state.sampled_poses[idx], tangent,
                                        intr=state.sampled_tag_intr)
            E, D, _rec = cache.get(int(m), t)
            if use_dr:
                rep = losses.dynamic_loss(E, color, D, weights)
            else:
                rep = losses.camera_loss(E, color, weights)
            pseudo_total = rep.total if pseudo_total is None else pseudo_total + rep.total
        pseudo_total = pseudo_total / len(cams)

        in_tangent = torch.zeros(6, dtype=state.dtype, requires_grad=True)
        color, _, _ = state.forward(t, state.input_poses[t], in_tangent)
        loss = _baseline_loss(color, frames[t], weights) \
            + schedule.pseudo_weight * pseudo_total
        if not torch.isfinite(loss):
            raise NumericFailure(f"refinement loss non-finite at iteration {it}")
        state.zero_grad()
        loss.backward()
        grads = state.scene_param_grads()
        state.adam_step("gaussians", grads)
        state.adam_step("tracks", grads)
        state.adam_step("input_poses", {t: in_tangent.grad.numpy().astype(np.float64)})
        if audit_isolation:
            after = state.checksums()
            audit_log.append(_isolation_delta(
                before, after, {"gaussians", "tracks", "input_poses"}))
        if callback:
            callback(it, float(loss.detach()), state)
    result = (state.to_scene(), state.input_trajectory(), state.sampled_trajectory())
    if audit_isolation:
        return (*result, audit_log)
    return result


def _isolation_delta(before, after, allowed):
    changed = {k for k in before if before[k] != after[k]}
    return {"changed": sorted(changed), "violations": sorted(changed - allowed)}
