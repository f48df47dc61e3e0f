"""Image and file I/O: sRGB PNG round trips, depth maps, binary masks."""

from __future__ import annotations

import json
import os

import numpy as np
from PIL import Image

DEPTH_SCALE_MM = 1000.0  # 16-bit depth pngs store millimeters


def srgb_encode(linear):
    linear = np.clip(linear, 0.0, 1.0)
    return np.where(linear <= 0.0031308, 12.92 * linear,
                    1.055 * np.power(linear, 1 / 2.4) - 0.055)


def srgb_decode(encoded):
    encoded = np.clip(encoded, 0.0, 1.0)
    return np.where(encoded <= 0.04045, encoded / 12.92,
                    np.power((encoded + 0.055) / 1.055, 2.4))


def save_image(path, linear_rgb):
    """Write linear-RGB floats as an 8-bit sRGB PNG."""
    u8 = np.round(srgb_encode(linear_rgb) * 255.0).astype(np.uint8)
    Image.fromarray(u8, mode="RGB").save(path)


def load_image(path):
    """Read an 8-bit PNG back to linear-RGB floats in [0, 1]."""
    u8 = np.asarray(Image.open(path).convert("RGB"), dtype=np.float64)
    return srgb_decode(u8 / 255.0)


def save_float_image(path, img):
    """Lossless float dump (oracle tests bypass the 8-bit quantization)."""
    np.save(path, np.asarray(img, dtype=np.float64))


def load_float_image(path):
    return np.load(path)


def save_depth(path, depth):
    mm = np.clip(np.asarray(depth) * DEPTH_SCALE_MM, 0, 65535).astype(np.uint16)
    Image.fromarray(mm).save(path)


def load_depth(path):
    mm = np.asarray(Image.open(path), dtype=np.float64)
    return mm / DEPTH_SCALE_MM


def save_mask(path, mask):
    """Binary mask -> single-channel PNG with values {0, 255}."""
    u8 = np.where(np.asarray(mask) > 0, 255, 0).astype(np.uint8)
    Image.fromarray(u8, mode="L").save(path)


def load_mask(path):
    u8 = np.asarray(Image.open(path).convert("L"))
    bad = np.setdiff1d(np.unique(u8), [0, 255])
    if bad.size:
        raise ValueError(f"mask {path} contains non-binary values {bad.tolist()}")
    return (u8 == 255).astype(np.uint8)


def write_json(path, doc):
    with open(path, "w") as f:
        json.dump(doc, f, indent=1, sort_keys=True)


def read_json(path):
    with open(path) as f:
        return json.load(f)


def ensure_dir(path):
    os.makedirs(path, exist_ok=True)
    return path
