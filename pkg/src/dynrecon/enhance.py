"""Pseudo-ground-truth enhancement: deterministic simulator + file protocol.

The simulator reproduces the property the refinement stage is built around:
outputs are sharp and structure-preserving but not spatio-temporally
consistent (each frame gets an independent low-frequency warp plus gain/bias
jitter). An external enhancer can be swapped in through a directory-based
exchange protocol.
"""

from __future__ import annotations

import json
import shlex
import subprocess
import time as time_mod
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io_utils
from .camera import Pose, Trajectory
from .render import RenderSettings, render
from .scene import Scene, deform_at_time

PROTOCOL_SCHEMA = "dynrecon.enhance-batch/1"
STRENGTH_REF = 10  # strength_k at which the nominal amplitudes apply

MODES = ("simulate_from_gt", "blind", "external")


class ProtocolError(RuntimeError):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code  # "timeout" | "missing_output" | "dimension_mismatch" | "responder_error"


@dataclass
class EnhancerConfig:
    mode: str = "blind"
    strength_k: int = STRENGTH_REF
    warp_amp: float = 3.0       # pixels, at reference strength
    gain_jitter: float = 0.05
    bias_jitter: float = 0.02
    noise_sigma: float = 0.01
    seed: int = 0
    external_cmd: str | None = None
    timeout_s: float = 3600.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown enhancer mode {self.mode!r}")
        for name in ("warp_amp", "gain_jitter", "bias_jitter", "noise_sigma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.strength_k < 0:
            raise ValueError("strength_k must be >= 0")
        if self.mode == "external" and not self.external_cmd:
            raise ValueError("external mode requires external_cmd")

    @property
    def strength_scale(self):
        return self.strength_k / STRENGTH_REF

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class PseudoViewRecord:
    camera_index: int
    frame: int
    render_path: str
    enhanced_path: str
    mask_path: str
    pose_quat: list
    pose_center: list
    empty_mask: bool = False

    def to_dict(self):
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def _frame_rng(cfg: EnhancerConfig, m: int, t: int):
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(m, t)))


def _smooth_field(shape, max_amp, rng):
    """Low-frequency displacement field with max magnitude max_amp pixels."""
    H, W = shape
    coarse = (max(2, H // 16) + 1, max(2, W // 16) + 1)
    field = rng.normal(size=(2, *coarse))
    zoom = (1, H / coarse[0], W / coarse[1])
    field = ndimage.zoom(field, zoom, order=3)[:, :H, :W]
    field = ndimage.gaussian_filter(field, sigma=(0, 2, 2))
    mag = np.sqrt((field**2).sum(axis=0)).max()
    if mag > 0:
        field = field / mag * max_amp
    return field


def _warp(img, field):
    H, W = img.shape[:2]
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64),
                         np.arange(W, dtype=np.float64), indexing="ij")
    coords = np.stack([yy + field[0], xx + field[1]])
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], coords, order=1,
                                              mode="reflect")
    return out


def _unsharp(img, amount, sigma=1.5):
    blurred = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0))
    return img + amount * (img - blurred)


def simulate_enhance(R, gt=None, cfg: EnhancerConfig | None = None,
                     camera_index: int = 0, frame: int = 0):
    """Deterministic enhancement of one frame.

    simulate_from_gt: warped, jittered ground truth (sharp but inconsistent).
    blind: unsharp-masked render with the same jitter family (no gt needed).
    All amplitudes scale linearly with strength_k; zero strength is the
    identity on the source image.
    """
    cfg = cfg or EnhancerConfig()
    if cfg.mode == "external":
        raise ValueError("simulate_enhance does not handle external mode")
    if cfg.mode == "simulate_from_gt":
        if gt is None:
            raise ValueError("simulate_from_gt mode requires a ground-truth image")
        source = np.asarray(gt, dtype=np.float64)
    else:
        source = np.asarray(R, dtype=np.float64)

    s = cfg.strength_scale
    if s == 0.0 and cfg.mode == "simulate_from_gt":
        return source.copy()

    rng = _frame_rng(cfg, camera_index, frame)
    out = source
    warp_amp = cfg.warp_amp * s
    if cfg.mode == "blind":
        out = _unsharp(out, amount=0.8 * s)
    if warp_amp > 0:
        out = _warp(out, _smooth_field(source.shape[:2], warp_amp, rng))
    gain = 1.0 + cfg.gain_jitter * s * rng.uniform(-1, 1)
    bias = cfg.bias_jitter * s * rng.uniform(-1, 1)
    out = out * gain + bias
    if cfg.noise_sigma > 0 and s > 0:
        out = out + rng.normal(0, cfg.noise_sigma * s, size=out.shape)
    return np.clip(out, 0.0, 1.0)


# --------------------------------------------------------------------------
# Batch dataset build


def _record_name(m, t):
    return f"c{m:03d}_t{t:04d}.png"


def build_pseudo_dataset(
    scene: Scene,
    sampled: Trajectory,
    settings: RenderSettings,
    cfg: EnhancerConfig,
    out_dir,
    gt_provider=None,
    cameras_per_step: int = 18,
) -> list[PseudoViewRecord]:
    """Render, mask and enhance every (camera, time) supervision sample.

    The sampled trajectory holds cameras_per_step poses per frame. Everything
    is persisted in one batch pass; refinement never enhances on the fly.
    gt_provider(m, t, pose) supplies ground-truth images for simulate_from_gt.
    """
    T = scene.n_frames
    if len(sampled) != T * cameras_per_step:
        raise ValueError(
            f"sampled trajectory has {len(sampled)} poses, expected "
            f"{T} x {cameras_per_step}"
        )
    out_dir = Path(out_dir)
    for sub in ("renders", "enhanced", "masks"):
        io_utils.ensure_dir(out_dir / sub)

    records: list[PseudoViewRecord] = []
    pending = []  # (record, R, gt) for non-external enhancement
    for t in range(T):
        posed = deform_at_time(scene, t)
        for m in range(cameras_per_step):
            pose = sampled.poses[t * cameras_per_step + m]
            out = render(posed, pose, sampled.intrinsics, settings, with_ctx=False)
            if posed.n_dynamic > 0:
                dyn = render(posed, pose, sampled.intrinsics, settings,
                             dynamic_only=True, with_ctx=False)
                mask = (dyn.alpha >= 0.5).astype(np.uint8)
            else:
                mask = np.zeros(out.alpha.shape, dtype=np.uint8)
            rec = PseudoViewRecord(
                camera_index=m, frame=t,
                render_path=str(out_dir / "renders" / _record_name(m, t)),
                enhanced_path=str(out_dir / "enhanced" / _record_name(m, t)),
                mask_path=str(out_dir / "masks" / _record_name(m, t)),
                pose_quat=pose.quat.tolist(), pose_center=pose.center.tolist(),
                empty_mask=bool(mask.sum() == 0),
            )
            io_utils.save_float_image(rec.render_path + ".npy", out.color)
            io_utils.save_image(rec.render_path, out.color)
            io_utils.save_mask(rec.mask_path, mask)
            if cfg.mode != "external":
                gt = gt_provider(m, t, pose) if (gt_provider and cfg.mode == "simulate_from_gt") else None
                pending.append((rec, out.color, gt))
            records.append(rec)

    if cfg.mode == "external":
        _run_external_batch(out_dir, records, sampled, cfg)
    else:
        for rec, R, gt in pending:
            E = simulate_enhance(R, gt, cfg, rec.camera_index, rec.frame)
            io_utils.save_float_image(rec.enhanced_path + ".npy", E)
            io_utils.save_image(rec.enhanced_path, E)

    io_utils.write_json(out_dir / "records.json", {
        "schema": PROTOCOL_SCHEMA,
        "cameras_per_step": cameras_per_step,
        "n_frames": T,
        "enhancer": cfg.to_dict(),
        "records": [r.to_dict() for r in records],
    })
    return records


def load_pseudo_dataset(out_dir):
    doc = io_utils.read_json(Path(out_dir) / "records.json")
    if doc.get("schema") != PROTOCOL_SCHEMA:
        raise ValueError(f"unsupported pseudo-dataset schema {doc.get('schema')!r}")
    return [PseudoViewRecord.from_dict(d) for d in doc["records"]]


# --------------------------------------------------------------------------
# External exchange protocol


def write_request(batch_dir, names, meta):
    """Lay out renders/, meta.json and the READY sentinel."""
    batch_dir = Path(batch_dir)
    io_utils.ensure_dir(batch_dir / "renders")
    io_utils.write_json(batch_dir / "meta.json", {
        "schema": PROTOCOL_SCHEMA,
        "expected_outputs": names,
        **meta,
    })
    (batch_dir / "READY").touch()


def _run_external_batch(out_dir, records, sampled: Trajectory, cfg: EnhancerConfig):
    names = [_record_name(r.camera_index, r.frame) for r in records]
    write_request(out_dir, names, {
        "strength_k": cfg.strength_k,
        "intrinsics": sampled.intrinsics.to_dict(),
        "poses": [{"quat": r.pose_quat, "center": r.pose_center} for r in records],
    })
    external_enhance(out_dir, cfg)
    for rec in records:
        E = io_utils.load_image(rec.enhanced_path)
        io_utils.save_float_image(rec.enhanced_path + ".npy", E)


def external_enhance(batch_dir, cfg: EnhancerConfig):
    """Invoke the configured responder on a request directory and validate."""
    batch_dir = Path(batch_dir)
    meta = io_utils.read_json(batch_dir / "meta.json")
    expected = meta["expected_outputs"]

    proc = None
    if cfg.external_cmd:
        proc = subprocess.Popen(shlex.split(cfg.external_cmd) + [str(batch_dir)])

    deadline = time_mod.monotonic() + cfg.timeout_s
    done, error = batch_dir / "DONE", batch_dir / "ERROR"
    while time_mod.monotonic() < deadline:
        if error.exists() and error.stat().st_size > 0:
            if proc:
                proc.wait()
            raise ProtocolError("responder_error", error.read_text().strip())
        if done.exists():
            break
        if proc and proc.poll() is not None and not done.exists():
            # give the filesystem a beat, then re-check once
            time_mod.sleep(0.05)
            if not done.exists():
                break
        time_mod.sleep(0.02)
    else:
        if proc:
            proc.kill()
        raise ProtocolError("timeout", f"no DONE sentinel within {cfg.timeout_s}s")

    if not done.exists():
        raise ProtocolError("timeout", "responder exited without DONE sentinel")
    if proc:
        proc.wait()

    enhanced = batch_dir / "enhanced"
    images = {}
    for name in expected:
        path = enhanced / name
        if not path.exists():
            raise ProtocolError("missing_output", f"responder omitted {name}")
        img = io_utils.load_image(path)
        ref = io_utils.load_image(batch_dir / "renders" / name)
        if img.shape != ref.shape:
            raise ProtocolError(
                "dimension_mismatch",
                f"{name}: got {img.shape[:2]}, expected {ref.shape[:2]}",
            )
        images[name] = img
    return images
