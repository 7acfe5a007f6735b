"""Training objective (MSE + SSIM + visibility) and evaluation metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, stack, where_mask
from .cameras import EPS_Z, Camera

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass
class LossWeights:
    ssim: float = 0.2
    vis: float = 1.0
    vis_clip: float = 1.0
    vis_normalize: bool = False  # mean instead of sum over Gaussians

    def __post_init__(self):
        if self.ssim < 0 or self.vis < 0 or self.vis_clip < 0:
            raise ValueError("loss weights must be non-negative")


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def mse_loss(pred, target) -> Tensor:
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("mse_loss", pred.shape, target.shape)
    diff = pred - target
    return (diff * diff).mean()


def _gaussian_kernel(n=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _band_matrix(length, kernel):
    """Valid-mode 1D convolution as a (length-n+1, length) matrix."""
    n = kernel.size
    out = length - n + 1
    mat = np.zeros((out, length), dtype=np.float64)
    for i in range(out):
        mat[i, i:i + n] = kernel
    return mat


def _filter2d(x: Tensor, kh: Tensor, kw: Tensor) -> Tensor:
    # separable Gaussian window as two banded matmuls
    return kh.matmul(x).matmul(kw.T)


def ssim(pred, target) -> Tensor:
    """Mean SSIM over channels, 11x11 Gaussian window (sigma 1.5)."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError("ssim", pred.shape, target.shape)
    h, w = pred.shape[0], pred.shape[1]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"ssim: image {h}x{w} smaller than {SSIM_WINDOW}-pixel window")
    kernel = _gaussian_kernel()
    kh = Tensor(_band_matrix(h, kernel))
    kw = Tensor(_band_matrix(w, kernel))
    channels = [pred] if pred.ndim == 2 else [pred[:, :, c] for c in range(pred.shape[2])]
    targets = [target] if target.ndim == 2 else [target[:, :, c] for c in range(target.shape[2])]
    vals = []
    for x, y in zip(channels, targets):
        mu_x = _filter2d(x, kh, kw)
        mu_y = _filter2d(y, kh, kw)
        var_x = _filter2d(x * x, kh, kw) - mu_x * mu_x
        var_y = _filter2d(y * y, kh, kw) - mu_y * mu_y
        cov = _filter2d(x * y, kh, kw) - mu_x * mu_y
        num = (2.0 * mu_x * mu_y + SSIM_C1) * (2.0 * cov + SSIM_C2)
        den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (var_x + var_y + SSIM_C2)
        vals.append((num / den).mean())
    total = vals[0]
    for v in vals[1:]:
        total = total + v
    return total * (1.0 / len(vals))


def ssim_loss(pred, target) -> Tensor:
    return 1.0 - ssim(pred, target)


def visibility_loss(means, sup_cameras, clip=1.0, normalize=False) -> Tensor:
    """Clipped out-of-frustum penalty pulling means into at least one view.

    Per Gaussian: min over cameras of ReLU(|u~|-1) + ReLU(|v~|-1) in
    normalized image coordinates, with behind-camera projections assigned
    the clip value, then clipped at `clip` and summed over Gaussians.
    """
    if not sup_cameras:
        raise ValueError("visibility_loss: need at least one supervision camera")
    means = _as_tensor(means)
    penalties = []
    for cam in sup_cameras:
        p_cam = (means - Tensor(cam.center[None, :])).matmul(Tensor(cam.rotation))
        z = p_cam[:, 2]
        behind = z.data <= EPS_Z
        z_safe = where_mask(behind, Tensor(np.ones_like(z.data)), z)
        u = p_cam[:, 0] / z_safe * cam.fx + cam.cx
        v = p_cam[:, 1] / z_safe * cam.fy + cam.cy
        un = u * (2.0 / cam.width) - 1.0
        vn = v * (2.0 / cam.height) - 1.0
        pen = (un.abs() - 1.0).relu() + (vn.abs() - 1.0).relu()
        pen = where_mask(behind, Tensor(np.full_like(pen.data, clip)), pen)
        penalties.append(pen)
    best = penalties[0]
    for p in penalties[1:]:
        best = best.minimum(p)
    best = best.minimum(Tensor(np.full_like(best.data, clip)))
    return best.mean() if normalize else best.sum()


def total_loss(pred, target, means, sup_cameras, weights: LossWeights):
    """Combined objective; returns (loss, components dict of floats)."""
    l_mse = mse_loss(pred, target)
    l_ssim = ssim_loss(pred, target)
    loss = l_mse + weights.ssim * l_ssim
    comps = {"mse": l_mse.item(), "ssim_loss": l_ssim.item(), "vis_loss": 0.0}
    if weights.vis > 0 and means is not None:
        l_vis = visibility_loss(means, sup_cameras, clip=weights.vis_clip,
                                normalize=weights.vis_normalize)
        loss = loss + weights.vis * l_vis
        comps["vis_loss"] = l_vis.item()
    comps["total"] = loss.item()
    return loss, comps


def psnr(pred, target) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 100."""
    pred = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    target = target.data if isinstance(target, Tensor) else np.asarray(target)
    mse = float(np.mean((pred - target) ** 2))
    if mse <= 1e-10:
        return 100.0
    return float(10.0 * np.log10(1.0 / mse))
