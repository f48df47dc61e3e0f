"""Independent reference implementations used as test oracles.

Everything here is written from the mathematical definitions with plain
numpy/scipy loops, deliberately sharing no code with the package under test.
"""

import numpy as np
from scipy import ndimage


def quat_matrix(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * y * y - 2 * z * z, 2 * x * y - 2 * w * z, 2 * x * z + 2 * w * y],
        [2 * x * y + 2 * w * z, 1 - 2 * x * x - 2 * z * z, 2 * y * z - 2 * w * x],
        [2 * x * z - 2 * w * y, 2 * y * z + 2 * w * x, 1 - 2 * x * x - 2 * y * y],
    ])


def naive_render(gaussians, background, pose, intr, settings):
    """Per-pixel, per-Gaussian alpha compositing, full sort, python loops.

    gaussians: object with means/quats/log_scales/opacity_logits/colors.
    Returns (color, alpha, depth) numpy arrays.
    """
    H, W = settings.height, settings.width
    Rc2w = quat_matrix(pose.quat)
    Wm = Rc2w.T

    splats = []
    for i in range(len(gaussians.means)):
        p = Wm @ (gaussians.means[i] - pose.center)
        z = p[2]
        if z <= settings.near:
            continue
        u = intr.fx * p[0] / z + intr.cx
        v = intr.fy * p[1] / z + intr.cy
        R3 = quat_matrix(gaussians.quats[i])
        S = np.diag(np.exp(gaussians.log_scales[i]))
        cov3 = R3 @ S @ S @ R3.T
        J = np.array([
            [intr.fx / z, 0.0, -intr.fx * p[0] / z**2],
            [0.0, intr.fy / z, -intr.fy * p[1] / z**2],
        ])
        JW = J @ Wm
        cov2 = JW @ cov3 @ JW.T + settings.dilation * np.eye(2)
        inv = np.linalg.inv(cov2)
        op = 1.0 / (1.0 + np.exp(-gaussians.opacity_logits[i]))
        splats.append((z, i, u, v, inv, op, gaussians.colors[i]))

    splats.sort(key=lambda s: (s[0], s[1]))
    color = np.zeros((H, W, 3))
    acc = np.zeros((H, W))
    depth = np.zeros((H, W))
    for yi in range(H):
        for xi in range(W):
            px, py = xi + 0.5, yi + 0.5
            trans = 1.0
            c = np.zeros(3)
            d = 0.0
            a_tot = 0.0
            for z, _i, u, v, inv, op, col in splats:
                dxy = np.array([px - u, py - v])
                alpha = op * np.exp(-0.5 * dxy @ inv @ dxy)
                alpha = min(alpha, 0.99)
                if alpha < settings.alpha_cutoff:
                    continue
                w = alpha * trans
                c += w * col
                d += w * z
                a_tot += w
                trans *= 1.0 - alpha
            color[yi, xi] = c + (1.0 - a_tot) * background
            acc[yi, xi] = a_tot
            depth[yi, xi] = d / max(a_tot, 1e-12)
    return color, acc, depth


def ref_psnr(pred, gt, mask):
    sel = np.asarray(mask) > 0
    errs = []
    H, W = sel.shape
    for y in range(H):
        for x in range(W):
            if sel[y, x]:
                for ch in range(pred.shape[2]):
                    errs.append((float(pred[y, x, ch]) - float(gt[y, x, ch])) ** 2)
    if not errs:
        return None
    mse = sum(errs) / len(errs)
    if mse == 0.0:
        return 99.0
    return min(10.0 * np.log10(1.0 / mse), 99.0)


def ref_ssim_map(a, b, window=11, sigma=1.5, c1=0.01**2, c2=0.03**2):
    """SSIM map via scipy gaussian correlation (mirror boundary, i.e. the
    whole-sample symmetric reflection that excludes the edge pixel)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    half = window // 2
    x = np.arange(-half, half + 1, dtype=np.float64)
    g1 = np.exp(-(x**2) / (2 * sigma**2))
    g1 /= g1.sum()
    k = g1[:, None] * g1[None, :]

    def filt(img):
        return np.stack([
            ndimage.correlate(img[..., ch], k, mode="mirror")
            for ch in range(img.shape[2])
        ], axis=-1)

    mu_a, mu_b = filt(a), filt(b)
    saa = filt(a * a) - mu_a**2
    sbb = filt(b * b) - mu_b**2
    sab = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (saa + sbb + c2)
    return num / den


def ref_intersection_pct(covis_list, dyn_list):
    inter = total = 0
    for c, d in zip(covis_list, dyn_list):
        c = np.asarray(c) > 0
        d = np.asarray(d) > 0
        inter += int(np.logical_and(c, d).sum())
        total += int(c.sum())
    return None if total == 0 else 100.0 * inter / total
