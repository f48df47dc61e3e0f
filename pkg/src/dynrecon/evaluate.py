"""Masked image-quality benchmark: PSNR/SSIM with co-visibility (-m) and
dynamic (-D) masks, plus mask-intersection statistics."""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import io_utils
from .losses import ssim_map

PSNR_CAP_DB = 99.0
REPORT_SCHEMA = "dynrecon.metrics/1"


@dataclass
class FrameMetrics:
    name: str
    psnr_m: float | None
    ssim_m: float | None
    psnr_d: float | None
    ssim_d: float | None


@dataclass
class MetricsReport:
    psnr_m: float
    ssim_m: float
    psnr_d: float
    ssim_d: float
    intersection_pct: float | None
    frames: list = field(default_factory=list)
    capped_frames: list = field(default_factory=list)

    def to_dict(self):
        return {
            "schema": REPORT_SCHEMA,
            "psnr_m": self.psnr_m, "ssim_m": self.ssim_m,
            "psnr_d": self.psnr_d, "ssim_d": self.ssim_d,
            "intersection_pct": self.intersection_pct,
            "capped_frames": self.capped_frames,
            "frames": [f.__dict__ for f in self.frames],
        }

    def table(self) -> str:
        lines = [
            f"{'metric':<18}{'value':>10}",
            f"{'PSNR-m (dB)':<18}{self.psnr_m:>10.3f}",
            f"{'SSIM-m':<18}{self.ssim_m:>10.4f}",
            f"{'PSNR-D (dB)':<18}{self.psnr_d:>10.3f}",
            f"{'SSIM-D':<18}{self.ssim_d:>10.4f}",
        ]
        if self.intersection_pct is not None:
            lines.append(f"{'covis/dyn int. %':<18}{self.intersection_pct:>10.2f}")
        return "\n".join(lines)


def psnr_masked(pred, gt, mask):
    """PSNR over masked pixels; exact match is capped at 99 dB (flagged)."""
    pred, gt = np.asarray(pred, dtype=np.float64), np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError("image shapes differ")
    m = np.asarray(mask) > 0
    if m.shape != pred.shape[:2]:
        raise ValueError("mask shape does not match images")
    n = m.sum()
    if n == 0:
        return None
    err = (pred - gt)[m]
    mse = float(np.mean(err**2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def ssim_masked(pred, gt, mask):
    """Mean of the full SSIM map inside the mask (None for an empty mask)."""
    m = np.asarray(mask) > 0
    if m.sum() == 0:
        return None
    smap = ssim_map(pred, gt).numpy()
    return float(smap[m].mean())


def intersection_stats(covis_seq, dynamic_seq):
    """100 * |covis AND dynamic| / |covis| aggregated over all frames."""
    if len(covis_seq) != len(dynamic_seq):
        raise ValueError("mask sequences differ in length")
    inter = total = 0
    for c, d in zip(covis_seq, dynamic_seq):
        c = np.asarray(c) > 0
        d = np.asarray(d) > 0
        if c.shape != d.shape:
            raise ValueError("mask shapes differ within a frame")
        inter += int((c & d).sum())
        total += int(c.sum())
    if total == 0:
        return None
    return 100.0 * inter / total


def _mean(vals):
    vals = [v for v in vals if v is not None]
    return float(np.mean(vals)) if vals else float("nan")


def benchmark_report(pred_dir, gt_dir, covis_dir=None, dyn_dir=None,
                     use_float_dumps=False) -> MetricsReport:
    """Benchmark aligned prediction/ground-truth directories.

    Masks are matched by filename; a missing prediction is an error naming
    the frame. Frames are averaged with equal weight.
    """
    names = sorted(f for f in os.listdir(gt_dir) if f.endswith(".png"))
    missing = [n for n in names
               if not os.path.exists(os.path.join(pred_dir, n))]
    if missing:
        raise FileNotFoundError(f"missing predictions: {', '.join(missing)}")

    frames, capped = [], []
    covis_masks, dyn_masks = [], []
    for name in names:
        if use_float_dumps:
            pred = io_utils.load_float_image(os.path.join(pred_dir, name) + ".npy")
            gt = io_utils.load_float_image(os.path.join(gt_dir, name) + ".npy")
        else:
            pred = io_utils.load_image(os.path.join(pred_dir, name))
            gt = io_utils.load_image(os.path.join(gt_dir, name))
        full = np.ones(gt.shape[:2], dtype=np.uint8)
        covis = io_utils.load_mask(os.path.join(covis_dir, name)) if covis_dir else full
        dyn = io_utils.load_mask(os.path.join(dyn_dir, name)) if dyn_dir else full
        covis_masks.append(covis)
        dyn_masks.append(dyn)
        pm, sm = psnr_masked(pred, gt, covis), ssim_masked(pred, gt, covis)
        pd, sd = psnr_masked(pred, gt, dyn), ssim_masked(pred, gt, dyn)
        if pm == PSNR_CAP_DB or pd == PSNR_CAP_DB:
            capped.append(name)
        frames.append(FrameMetrics(name, pm, sm, pd, sd))

    inter = intersection_stats(covis_masks, dyn_masks) if (covis_dir and dyn_dir) else None
    return MetricsReport(
        psnr_m=_mean([f.psnr_m for f in frames]),
        ssim_m=_mean([f.ssim_m for f in frames]),
        psnr_d=_mean([f.psnr_d for f in frames]),
        ssim_d=_mean([f.ssim_d for f in frames]),
        intersection_pct=inter, frames=frames, capped_frames=capped,
    )
