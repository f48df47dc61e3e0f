"""Differentiable Gaussian rasterizer: forward splatting + exact reverse mode.

Forward pass projects every Gaussian to an image-plane ellipse, sorts by
depth (stable, index tie-break) and alpha-composites front to back over the
full pixel grid. The whole computation is expressed in torch so the backward
pass is the exact reverse-mode gradient of the compositing equation,
including the camera pose tangent (right-perturbation convention matching
camera.se3_update) and track knots when the posed Gaussians carry an
interpolation stencil.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .camera import Intrinsics, Pose
from .scene import PosedGaussians

ALPHA_MAX = 0.99


class ContextMismatchError(ValueError):
    pass


@dataclass
class RenderSettings:
    width: int
    height: int
    near: float = 0.01
    dilation: float = 0.3       # pixels^2 added to the projected covariance
    alpha_cutoff: float = 1.0 / 255.0
    tile_size: int = 8          # pixel-chunk height for the grid evaluation
    dtype: str = "float32"      # "float64" for gradient-check work

    def __post_init__(self):
        if self.near <= 0:
            raise ValueError("near plane must be positive")
        if self.dilation < 0:
            raise ValueError("dilation must be >= 0")
        if not (0 < self.alpha_cutoff < 1):
            raise ValueError("alpha cutoff must lie in (0, 1)")

    @property
    def torch_dtype(self):
        return torch.float64 if self.dtype == "float64" else torch.float32


@dataclass
class RenderContext:
    """Saved forward state for render_backward (torch graph + leaves)."""

    color: torch.Tensor           # (H, W, 3), graph-connected
    leaves: dict[str, torch.Tensor]
    n_static: int
    knot_stencil: tuple | None
    n_knots: int
    shape: tuple[int, int]


@dataclass
class RenderOutput:
    color: np.ndarray   # (H, W, 3)
    alpha: np.ndarray   # (H, W)
    depth: np.ndarray   # (H, W)
    ctx: RenderContext | None = None


@dataclass
class GradientSet:
    means: np.ndarray
    quats: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    pose_tangent: np.ndarray      # (6,) rotation, translation
    knots: np.ndarray | None = None  # (Nd, K, 3) when a stencil was present


# --------------------------------------------------------------------------
# Torch-side rotation helpers (batched)


def quats_to_matrices(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    row = torch.stack
    return torch.stack([
        row([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        row([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        row([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], dim=-2)


def se3_exp_torch(xi: torch.Tensor):
    """Exact SE(3) exponential, differentiable through xi = 0."""
    omega, rho = xi[:3], xi[3:]
    theta2 = (omega * omega).sum()
    small = theta2 < 1e-12
    # the unused where-branch still gets a backward pass: keep it NaN-free
    theta2_safe = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(theta2_safe)
    a = torch.where(small, 1.0 - theta2 / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta2 / 24.0, (1.0 - torch.cos(theta)) / theta2_safe)
    c = torch.where(small, 1.0 / 6.0 - theta2 / 120.0,
                    (theta - torch.sin(theta)) / (theta2_safe * theta))
    K = torch.zeros(3, 3, dtype=xi.dtype)
    K[0, 1], K[0, 2] = -omega[2], omega[1]
    K[1, 0], K[1, 2] = omega[2], -omega[0]
    K[2, 0], K[2, 1] = -omega[1], omega[0]
    I = torch.eye(3, dtype=xi.dtype)
    R = I + a * K + b * (K @ K)
    V = I + b * K + c * (K @ K)
    return R, V @ rho


# --------------------------------------------------------------------------
# Differentiable core


def render_core(
    params: dict[str, torch.Tensor],
    pose_q: torch.Tensor,
    pose_c: torch.Tensor,
    tangent: torch.Tensor,
    intr: Intrinsics,
    settings: RenderSettings,
    background: torch.Tensor,
    subset: slice | None = None,
):
    """Differentiable splatting of a parameter bundle.

    params holds means/quats/log_scales/opacity_logits/colors (torch, (N,*)).
    The effective camera-to-world pose is pose * exp(tangent). subset limits
    compositing to a contiguous Gaussian range (dynamic-only renders).
    Returns (color (H,W,3), alpha (H,W), depth (H,W)) torch tensors.
    """
    dtype = params["means"].dtype
    H, W = settings.height, settings.width

    means = params["means"]
    quats = params["quats"]
    log_scales = params["log_scales"]
    opac = torch.sigmoid(params["opacity_logits"])
    colors = params["colors"]
    if subset is not None:
        means, quats, log_scales = means[subset], quats[subset], log_scales[subset]
        opac, colors = opac[subset], colors[subset]

    # effective camera-to-world = pose o exp(tangent), right composition
    R_pose = quats_to_matrices(pose_q[None])[0]
    R_delta, t_delta = se3_exp_torch(tangent)
    R_c2w = R_pose @ R_delta
    center = R_pose @ t_delta + pose_c
    Wmat = R_c2w.transpose(0, 1)  # world-to-camera rotation

    p_cam = (means - center) @ Wmat.transpose(0, 1)  # (N, 3)
    z = p_cam[:, 2]
    visible = z > settings.near
    if visible.sum() == 0:
        bg = background.to(dtype)
        color = bg.expand(H, W, 3).clone()
        alpha = torch.zeros(H, W, dtype=dtype)
        depth = torch.zeros(H, W, dtype=dtype)
        return color, alpha, depth, visible

    idx = torch.nonzero(visible, as_tuple=False).squeeze(1)
    p = p_cam[idx]
    zv = p[:, 2]
    fx, fy = intr.fx, intr.fy
    u = fx * p[:, 0] / zv + intr.cx
    v = fy * p[:, 1] / zv + intr.cy

    # 3D covariance: R S S^T R^T
    R3 = quats_to_matrices(quats[idx])
    S = torch.exp(log_scales[idx])
    M = R3 * S[:, None, :]
    cov3 = M @ M.transpose(1, 2)

    # projection Jacobian rows at the mean
    zero = torch.zeros_like(zv)
    J = torch.stack([
        torch.stack([fx / zv, zero, -fx * p[:, 0] / zv**2], -1),
        torch.stack([zero, fy / zv, -fy * p[:, 1] / zv**2], -1),
    ], dim=1)  # (n, 2, 3)
    JW = J @ Wmat
    cov2 = JW @ cov3 @ JW.transpose(1, 2)
    cov2 = cov2 + settings.dilation * torch.eye(2, dtype=dtype)

    a, b_, c_ = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c_ - b_ * b_
    inv_a, inv_b, inv_c = c_ / det, -b_ / det, a / det

    # stable front-to-back order: depth then original index
    order = np.lexsort((idx.detach().numpy(), zv.detach().numpy()))
    order_t = torch.from_numpy(np.ascontiguousarray(order))
    u, v, zv = u[order_t], v[order_t], zv[order_t]
    inv_a, inv_b, inv_c = inv_a[order_t], inv_b[order_t], inv_c[order_t]
    op = opac[idx][order_t]
    col = colors[idx][order_t]

    ys = torch.arange(H, dtype=dtype) + 0.5
    xs = torch.arange(W, dtype=dtype) + 0.5
    bg = background.to(dtype)

    # conservative per-Gaussian reach: alpha < cutoff strictly outside it, so
    # chunk-level culling below cannot change the composited output
    with torch.no_grad():
        lam_max = 0.5 * (a + c_) + torch.sqrt(
            torch.clamp((0.5 * (a - c_)) ** 2 + b_ * b_, min=0.0)
        )
        reach2 = 2.0 * torch.clamp(torch.log(op / settings.alpha_cutoff), min=0.0)
        rmax = torch.sqrt(reach2 * lam_max[order_t]) + 1.0
        u_det, v_det = u.detach(), v.detach()
        op_det = op.detach()

    color_rows, alpha_rows, depth_rows = [], [], []
    chunk = max(1, settings.tile_size)
    for y0 in range(0, H, chunk):
        h = min(chunk, H - y0)
        keep = ((op_det >= settings.alpha_cutoff)
                & (v_det + rmax >= y0) & (v_det - rmax <= y0 + h)
                & (u_det + rmax >= 0.0) & (u_det - rmax <= W))
        sel = torch.nonzero(keep, as_tuple=False).squeeze(1)
        if sel.numel() == 0:
            color_rows.append(bg.expand(h, W, 3).clone())
            alpha_rows.append(torch.zeros(h, W, dtype=dtype))
            depth_rows.append(torch.zeros(h, W, dtype=dtype))
            continue
        yb = ys[y0: y0 + chunk]
        dx = xs[None, None, :] - u[sel][:, None, None]      # (n, 1, W)
        dy = yb[None, :, None] - v[sel][:, None, None]      # (n, h, 1)
        quad = (inv_a[sel][:, None, None] * dx * dx
                + 2.0 * inv_b[sel][:, None, None] * dx * dy
                + inv_c[sel][:, None, None] * dy * dy)
        alpha = op[sel][:, None, None] * torch.exp(-0.5 * quad)
        alpha = torch.clamp(alpha, max=ALPHA_MAX)
        alpha = torch.where(alpha >= settings.alpha_cutoff, alpha,
                            torch.zeros((), dtype=dtype))
        # exclusive front-to-back transmittance via log-space cumsum
        # (equivalent to cumprod(1 - alpha) but with a much cheaper backward;
        #  alpha <= ALPHA_MAX keeps log1p well-conditioned)
        log_t = torch.log1p(-alpha)
        t_excl = torch.exp(torch.cumsum(log_t, dim=0) - log_t)
        w = alpha * t_excl                                  # (n, h, W)
        acc = w.sum(dim=0)
        color_rows.append((w[..., None] * col[sel][:, None, None, :]).sum(dim=0)
                          + (1.0 - acc)[..., None] * bg)
        alpha_rows.append(acc)
        depth_rows.append((w * zv[sel][:, None, None]).sum(dim=0)
                          / torch.clamp(acc, min=1e-12))
    color = torch.cat(color_rows, dim=0)
    alpha_img = torch.cat(alpha_rows, dim=0)
    depth_img = torch.cat(depth_rows, dim=0)
    return color, alpha_img, depth_img, visible


def make_leaves(posed: PosedGaussians, dtype, requires_grad=True):
    """Torch leaf tensors for a posed-Gaussian bundle (plus knot leaves)."""
    g = posed.gaussians
    leaves = {
        "means": torch.tensor(g.means, dtype=dtype, requires_grad=requires_grad),
        "quats": torch.tensor(g.quats, dtype=dtype, requires_grad=requires_grad),
        "log_scales": torch.tensor(g.log_scales, dtype=dtype, requires_grad=requires_grad),
        "opacity_logits": torch.tensor(g.opacity_logits, dtype=dtype, requires_grad=requires_grad),
        "colors": torch.tensor(g.colors, dtype=dtype, requires_grad=requires_grad),
    }
    return leaves


def render(
    posed: PosedGaussians,
    pose: Pose,
    intr: Intrinsics,
    settings: RenderSettings,
    dynamic_only: bool = False,
    with_ctx: bool = True,
) -> RenderOutput:
    """Rasterize posed Gaussians; saves a backward context unless disabled.

    dynamic_only composites only the dynamic subset (mask synthesis).
    """
    dtype = settings.torch_dtype
    leaves = make_leaves(posed, dtype, requires_grad=with_ctx)
    tangent = torch.zeros(6, dtype=dtype, requires_grad=with_ctx)
    leaves["pose_tangent"] = tangent
    pose_q = torch.tensor(pose.quat, dtype=dtype)
    pose_c = torch.tensor(pose.center, dtype=dtype)
    background = torch.tensor(
        np.zeros(3) if dynamic_only else posed.background_color, dtype=dtype
    )
    subset = slice(posed.n_static, None) if dynamic_only else None

    grad_mode = torch.enable_grad if with_ctx else torch.no_grad
    with grad_mode():
        color, alpha, depth, _ = render_core(
            leaves, pose_q, pose_c, tangent, intr, settings, background, subset
        )
    ctx = None
    if with_ctx:
        ctx = RenderContext(
            color=color, leaves=leaves, n_static=posed.n_static,
            knot_stencil=posed.knot_stencil, n_knots=posed.n_knots,
            shape=(settings.height, settings.width),
        )
    return RenderOutput(
        color=color.detach().numpy(), alpha=alpha.detach().numpy(),
        depth=depth.detach().numpy(), ctx=ctx,
    )


def render_backward(ctx: RenderContext, dL_dimage: np.ndarray) -> GradientSet:
    """Exact reverse-mode gradients of the compositing output."""
    if ctx is None:
        raise ContextMismatchError("render was called without a backward context")
    dL = np.asarray(dL_dimage)
    if dL.shape != ctx.color.shape:
        raise ContextMismatchError(
            f"gradient shape {dL.shape} does not match render {tuple(ctx.color.shape)}"
        )
    upstream = torch.tensor(dL, dtype=ctx.color.dtype)
    names = ["means", "quats", "log_scales", "opacity_logits", "colors", "pose_tangent"]
    grads = torch.autograd.grad(
        ctx.color, [ctx.leaves[n] for n in names],
        grad_outputs=upstream, retain_graph=True, allow_unused=True,
    )
    out = {}
    for name, g in zip(names, grads):
        out[name] = (torch.zeros_like(ctx.leaves[name]) if g is None else g).numpy()
    knots = None
    if ctx.knot_stencil is not None:
        # chain rule through linear knot interpolation: grad splits by weight
        k0, k1, w = ctx.knot_stencil
        dyn_mean_grad = out["means"][ctx.n_static:]
        n, K = len(dyn_mean_grad), ctx.n_knots
        knots = np.zeros((n, K, 3))
        knots[:, k0] += (1.0 - w) * dyn_mean_grad
        knots[:, k1] += w * dyn_mean_grad
    return GradientSet(
        means=out["means"], quats=out["quats"], log_scales=out["log_scales"],
        opacity_logits=out["opacity_logits"], colors=out["colors"],
        pose_tangent=out["pose_tangent"], knots=knots,
    )


def project_covariance(mean, quat, log_scale, pose: Pose, intr: Intrinsics,
                       settings: RenderSettings) -> np.ndarray:
    """2x2 projected covariance of a single Gaussian (numpy convenience)."""
    dtype = torch.float64
    params = {
        "means": torch.tensor(np.asarray(mean)[None], dtype=dtype),
        "quats": torch.tensor(np.asarray(quat)[None], dtype=dtype),
        "log_scales": torch.tensor(np.asarray(log_scale)[None], dtype=dtype),
    }
    Wmat = torch.tensor(pose.R.T, dtype=dtype)
    p = (params["means"] - torch.tensor(pose.center, dtype=dtype)) @ Wmat.T
    z = float(p[0, 2])
    if z <= settings.near:
        raise ValueError("gaussian behind the near plane (culled)")
    R3 = quats_to_matrices(params["quats"])
    S = torch.exp(params["log_scales"])
    M = R3 * S[:, None, :]
    cov3 = (M @ M.transpose(1, 2))[0]
    fx, fy = intr.fx, intr.fy
    x, y = float(p[0, 0]), float(p[0, 1])
    J = torch.tensor([
        [fx / z, 0.0, -fx * x / z**2],
        [0.0, fy / z, -fy * y / z**2],
    ], dtype=dtype)
    JW = J @ Wmat
    cov2 = JW @ cov3 @ JW.T + settings.dilation * torch.eye(2, dtype=dtype)
    return cov2.numpy()
