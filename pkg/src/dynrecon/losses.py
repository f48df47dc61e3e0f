"""Photometric loss atoms and the two composite supervision losses.

All atoms accept numpy arrays or torch tensors (H, W, 3) in [0, 1]; when fed
graph-connected torch tensors the composites stay differentiable end to end.
The perceptual term is a multi-scale image-gradient distance standing in for
a pretrained-network feature loss (no learned weights in the core engine).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    lambda_p: float = 0.1
    lambda_s: float = 0.1

    def __post_init__(self):
        if self.lambda_p < 0 or self.lambda_s < 0:
            raise ValueError("loss weights must be >= 0")


@dataclass
class LossReport:
    total: object                    # scalar (torch if inputs were torch)
    components: dict = field(default_factory=dict)
    masked_pixel_count: int = 0
    empty_mask: bool = False

    def total_float(self) -> float:
        return float(self.total)

    def to_dict(self):
        return {
            "total": self.total_float(),
            "components": {k: float(v) for k, v in self.components.items()},
            "masked_pixel_count": self.masked_pixel_count,
            "empty_mask": self.empty_mask,
        }


def _as_tensor(img, like=None):
    if isinstance(img, torch.Tensor):
        return img
    dtype = like.dtype if isinstance(like, torch.Tensor) else torch.float64
    return torch.tensor(np.asarray(img), dtype=dtype)


def _check_shapes(a, b):
    if tuple(a.shape) != tuple(b.shape):
        raise ValueError(f"image shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")


def _mask_tensor(mask, like):
    if mask is None:
        return None
    m = _as_tensor(mask, like)
    if m.dim() == 3:
        m = m[..., 0]
    return (m > 0.5).to(like.dtype)


def l1(a, b, mask=None):
    """Mean absolute difference over the mask (all pixels when mask is None)."""
    b = _as_tensor(b, a if isinstance(a, torch.Tensor) else None)
    a = _as_tensor(a, b)
    _check_shapes(a, b)
    diff = torch.abs(a - b)
    m = _mask_tensor(mask, a)
    if m is None:
        return diff.mean()
    denom = m.sum() * a.shape[-1]
    if float(denom) == 0:
        return torch.zeros((), dtype=a.dtype)
    return (diff * m[..., None]).sum() / denom


def _gaussian_kernel(dtype):
    half = SSIM_WINDOW // 2
    x = torch.arange(-half, half + 1, dtype=dtype)
    g = torch.exp(-(x**2) / (2 * SSIM_SIGMA**2))
    g = g / g.sum()
    return (g[:, None] * g[None, :])[None, None]


def _filter2d(img_chw, kernel):
    # reflect-pad so the map keeps the image size
    half = SSIM_WINDOW // 2
    x = img_chw[None]
    x = F.pad(x, (half, half, half, half), mode="reflect")
    k = kernel.expand(x.shape[1], 1, -1, -1)
    return F.conv2d(x, k, groups=x.shape[1])[0]


def ssim_map(a, b):
    """Per-pixel SSIM (11x11 Gaussian window, unit dynamic range), (H, W, 3)."""
    b = _as_tensor(b, a if isinstance(a, torch.Tensor) else None)
    a = _as_tensor(a, b)
    _check_shapes(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    k = _gaussian_kernel(a.dtype)
    mu_x, mu_y = _filter2d(x, k), _filter2d(y, k)
    sxx = _filter2d(x * x, k) - mu_x * mu_x
    syy = _filter2d(y * y, k) - mu_y * mu_y
    sxy = _filter2d(x * y, k) - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x**2 + mu_y**2 + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).permute(1, 2, 0)


def masked_ssim_mean(a, b, mask=None):
    """Full SSIM map, then the mean inside the mask."""
    smap = ssim_map(a, b)
    m = _mask_tensor(mask, smap)
    if m is None:
        return smap.mean()
    denom = m.sum() * smap.shape[-1]
    if float(denom) == 0:
        return torch.ones((), dtype=smap.dtype)
    return (smap * m[..., None]).sum() / denom


def perceptual_proxy(a, b, mask=None):
    """Multi-scale edge distance: L1 between image-gradient maps at 3 scales."""
    b = _as_tensor(b, a if isinstance(a, torch.Tensor) else None)
    a = _as_tensor(a, b)
    _check_shapes(a, b)
    x = a.permute(2, 0, 1)[None]
    y = b.permute(2, 0, 1)[None]
    m = _mask_tensor(mask, a)
    m = None if m is None else m[None, None]
    terms = []
    for _ in range(3):
        gx_a, gy_a = _image_grads(x)
        gx_b, gy_b = _image_grads(y)
        d = (torch.abs(gx_a - gx_b).mean(dim=1, keepdim=True)
             + torch.abs(gy_a - gy_b).mean(dim=1, keepdim=True))
        if m is None:
            terms.append(d.mean())
        else:
            denom = m.sum()
            terms.append(torch.zeros((), dtype=a.dtype) if float(denom) == 0
                         else (d * m).sum() / denom)
        x = F.avg_pool2d(x, 2, ceil_mode=True)
        y = F.avg_pool2d(y, 2, ceil_mode=True)
        if m is not None:
            m = (F.avg_pool2d(m, 2, ceil_mode=True) > 0.5).to(a.dtype)
    return sum(terms) / len(terms)


def _image_grads(x):
    gx = torch.zeros_like(x)
    gy = torch.zeros_like(x)
    gx[..., :, :-1] = x[..., :, 1:] - x[..., :, :-1]
    gy[..., :-1, :] = x[..., 1:, :] - x[..., :-1, :]
    return gx, gy


def _composite(E, I_hat, mask, w: LossWeights) -> LossReport:
    I_hat_t = _as_tensor(I_hat)
    E_t = _as_tensor(E, I_hat_t)
    _check_shapes(E_t, I_hat_t)
    m = _mask_tensor(mask, I_hat_t)
    count = int(m.sum()) if m is not None else int(np.prod(I_hat_t.shape[:2]))
    if count == 0:
        zero = torch.zeros((), dtype=I_hat_t.dtype)
        return LossReport(zero, {"l1": zero, "perceptual": zero, "ssim": zero},
                          0, empty_mask=True)
    if m is not None:
        E_m = E_t * m[..., None]
        I_m = I_hat_t * m[..., None]
    else:
        E_m, I_m = E_t, I_hat_t
    term_l1 = l1(E_m, I_m, m)
    term_p = perceptual_proxy(E_m, I_m, m)
    term_s = 1.0 - masked_ssim_mean(E_m, I_m, m)
    total = term_l1 + w.lambda_p * term_p + w.lambda_s * term_s
    return LossReport(total, {"l1": term_l1, "perceptual": term_p, "ssim": term_s},
                      count)


def dynamic_loss(E, I_hat, dyn_mask, w: LossWeights | None = None) -> LossReport:
    """Composite loss over the dynamic-masked region only."""
    mask = np.asarray(dyn_mask) if not isinstance(dyn_mask, torch.Tensor) else dyn_mask
    vals = np.unique(np.asarray(mask)) if not isinstance(mask, torch.Tensor) else None
    if vals is not None and not np.all(np.isin(vals, (0, 1))):
        raise ValueError("dynamic mask must be binary")
    return _composite(E, I_hat, mask, w or LossWeights())


def camera_loss(E, I_hat, w: LossWeights | None = None) -> LossReport:
    """Composite loss over the full image (sampled-pose supervision)."""
    return _composite(E, I_hat, None, w or LossWeights())
