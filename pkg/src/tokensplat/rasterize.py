"""Differentiable Gaussian rasterizer.

Forward: EWA-style projection of 3D Gaussians to 2D image-plane Gaussians,
global depth sort, per-pixel alpha compositing over each splat's 3-sigma
bounding box.  Backward is hand-derived and registered as a single custom
node so gradients reach means, colors, scales, opacities, and quaternions
(the latter two via the covariance built from tensor ops).

Everything runs sequentially over splats with vectorized per-pixel math,
so results are deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, custom_op
from .cameras import Camera, EPS_Z
from .gaussians import GaussianSet, covariance


@dataclass
class RenderConfig:
    background: tuple = (0.0, 0.0, 0.0)
    alpha_min: float = 1.0 / 255.0
    alpha_max: float = 0.999
    dilation: float = 0.3  # px^2 added to the 2D covariance diagonal
    t_stop: float = 1e-4  # early-stop transmittance; <= 0 disables

    def __post_init__(self):
        if not (0.0 < self.alpha_min < self.alpha_max <= 1.0):
            raise ValueError("require 0 < alpha_min < alpha_max <= 1")
        if self.dilation < 0 or not (self.t_stop < 1.0):
            raise ValueError("invalid dilation or t_stop")

    def to_dict(self):
        return {"background": list(self.background), "alpha_min": self.alpha_min,
                "alpha_max": self.alpha_max, "dilation": self.dilation,
                "t_stop": self.t_stop}

    @classmethod
    def from_dict(cls, d):
        return cls(background=tuple(d["background"]), alpha_min=d["alpha_min"],
                   alpha_max=d["alpha_max"], dilation=d["dilation"],
                   t_stop=d["t_stop"])


@dataclass
class RenderOutput:
    image: Tensor  # (H, W, 3), differentiable
    transmittance: np.ndarray  # (H, W) final transmittance
    visible: np.ndarray  # (M,) bool, splat contributed to >= 1 pixel


def project_gaussian(means, covs, camera: Camera, dilation=0.0):
    """Project 3D Gaussians to the image plane.

    Returns (mean2d (M,2), cov2d (M,2,2), depth (M,), valid (M,) bool).
    Behind-camera and numerically singular splats are marked invalid.
    """
    means = np.asarray(means, dtype=np.float64)
    covs = np.asarray(covs, dtype=np.float64)
    r_wc = camera.rotation.T
    p_cam = (means - camera.center) @ camera.rotation
    z = p_cam[:, 2]
    behind = z <= EPS_Z
    z_safe = np.where(behind, 1.0, z)

    u = camera.fx * p_cam[:, 0] / z_safe + camera.cx
    v = camera.fy * p_cam[:, 1] / z_safe + camera.cy
    mean2d = np.stack([u, v], axis=1)

    cov_cam = np.einsum("ij,mjk,lk->mil", r_wc, covs, r_wc)
    jac = _pinhole_jacobian(p_cam, z_safe, camera)
    cov2d = np.einsum("mij,mjk,mlk->mil", jac, cov_cam, jac)
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    valid = (~behind) & (det > 1e-12)
    return mean2d, cov2d, z, valid


def _pinhole_jacobian(p_cam, z_safe, camera):
    m = p_cam.shape[0]
    jac = np.zeros((m, 2, 3), dtype=np.float64)
    jac[:, 0, 0] = camera.fx / z_safe
    jac[:, 0, 2] = -camera.fx * p_cam[:, 0] / z_safe**2
    jac[:, 1, 1] = camera.fy / z_safe
    jac[:, 1, 2] = -camera.fy * p_cam[:, 1] / z_safe**2
    return jac


def render(gaussians: GaussianSet, camera: Camera, cfg: RenderConfig | None = None) -> RenderOutput:
    """Render a GaussianSet through `camera` with alpha compositing."""
    cfg = cfg or RenderConfig()
    means_t, colors_t, opac_t = gaussians.means, gaussians.colors, gaussians.opacities
    cov_t = covariance(gaussians.quats, gaussians.scales)
    needs_grad = any(t.requires_grad for t in
                     (means_t, colors_t, opac_t, gaussians.quats, gaussians.scales))

    fwd = _Forward(means_t.data, colors_t.data, opac_t.data, cov_t.data,
                   camera, cfg, keep_stash=needs_grad)
    fwd.run()

    if needs_grad:
        def backward(g_img):
            return fwd.backward(g_img)
        image = custom_op((means_t, colors_t, opac_t, cov_t),
                          fwd.image, backward, op="render")
    else:
        image = Tensor(fwd.image)
    return RenderOutput(image, fwd.transmittance, fwd.visible)


class _Forward:
    """One rasterization pass; retains per-splat state for the backward pass."""

    def __init__(self, means, colors, opacities, covs, camera, cfg, keep_stash):
        self.means = np.asarray(means, dtype=np.float64)
        self.colors = np.asarray(colors, dtype=np.float64)
        self.opacities = np.asarray(opacities, dtype=np.float64)
        self.covs = np.asarray(covs, dtype=np.float64)
        self.camera = camera
        self.cfg = cfg
        self.keep_stash = keep_stash
        self.dtype = np.asarray(means).dtype

    def run(self):
        cam, cfg = self.camera, self.cfg
        h, w = cam.height, cam.width
        m = self.means.shape[0]

        r_wc = cam.rotation.T
        p_cam = (self.means - cam.center) @ cam.rotation
        z = p_cam[:, 2]
        behind = z <= EPS_Z
        z_safe = np.where(behind, 1.0, z)
        u = cam.fx * p_cam[:, 0] / z_safe + cam.cx
        v = cam.fy * p_cam[:, 1] / z_safe + cam.cy

        cov_cam = np.einsum("ij,mjk,lk->mil", r_wc, self.covs, r_wc)
        jac = _pinhole_jacobian(p_cam, z_safe, cam)
        cov2d = np.einsum("mij,mjk,mlk->mil", jac, cov_cam, jac)
        cov2d[:, 0, 0] += cfg.dilation
        cov2d[:, 1, 1] += cfg.dilation

        a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
        det = a * c - b * b
        ok = (~behind) & (det > 1e-12)
        mid = 0.5 * (a + c)
        lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
        radius = 3.0 * np.sqrt(np.maximum(lam_max, 0.0))

        # integer bounding boxes, clipped to the image
        x0 = np.clip(np.floor(u - radius).astype(np.int64), 0, w)
        x1 = np.clip(np.ceil(u + radius).astype(np.int64) + 1, 0, w)
        y0 = np.clip(np.floor(v - radius).astype(np.int64), 0, h)
        y1 = np.clip(np.ceil(v + radius).astype(np.int64) + 1, 0, h)
        nonempty = (x1 > x0) & (y1 > y0)
        ok &= nonempty

        idx = np.nonzero(ok)[0]
        order = idx[np.argsort(z[idx], kind="stable")]

        px = np.arange(w, dtype=np.float64) + 0.5
        py = np.arange(h, dtype=np.float64) + 0.5

        color_sum = np.zeros((h, w, 3), dtype=np.float64)
        trans = np.ones((h, w), dtype=np.float64)
        visible = np.zeros(m, dtype=bool)
        stash = []
        early = cfg.t_stop > 0.0

        inv = np.empty_like(cov2d)
        inv[:, 0, 0] = c / det.clip(min=1e-300)
        inv[:, 1, 1] = a / det.clip(min=1e-300)
        inv[:, 0, 1] = inv[:, 1, 0] = -b / det.clip(min=1e-300)

        for i in order:
            sy, sx = slice(y0[i], y1[i]), slice(x0[i], x1[i])
            dx = px[sx][None, :] - u[i]
            dy = py[sy][:, None] - v[i]
            ia, ib, ic = inv[i, 0, 0], inv[i, 0, 1], inv[i, 1, 1]
            power = -0.5 * (ia * dx * dx + ic * dy * dy) - ib * dx * dy
            gauss = np.exp(np.minimum(power, 0.0))
            alpha_raw = self.opacities[i] * gauss
            alpha = np.minimum(alpha_raw, cfg.alpha_max)
            t_before = trans[sy, sx]
            contrib = alpha >= cfg.alpha_min
            if early:
                contrib &= t_before > cfg.t_stop
            if not contrib.any():
                if self.keep_stash:
                    stash.append(None)
                continue
            alpha_eff = np.where(contrib, alpha, 0.0)
            visible[i] = True
            weight = alpha_eff * t_before
            color_sum[sy, sx] += weight[:, :, None] * self.colors[i]
            trans[sy, sx] = t_before * (1.0 - alpha_eff)
            if self.keep_stash:
                stash.append((dx, dy, gauss, alpha_eff, contrib, alpha_raw < cfg.alpha_max))

        bg = np.asarray(self.cfg.background, dtype=np.float64)
        image = color_sum + trans[:, :, None] * bg

        self.image = image
        self.transmittance = trans
        self.visible = visible
        self._order = order
        self._stash = stash
        self._geom = (p_cam, z_safe, u, v, inv, jac, cov_cam, r_wc, (x0, x1, y0, y1))

    def backward(self, g_img):
        """Gradients of a scalar loss wrt means, colors, opacities, cov3d."""
        g_img = np.asarray(g_img, dtype=np.float64)
        m = self.means.shape[0]
        g_mean = np.zeros((m, 3))
        g_color = np.zeros((m, 3))
        g_opac = np.zeros(m)
        g_mean2d = np.zeros((m, 2))
        g_cov2d = np.zeros((m, 2, 2))

        p_cam, z_safe, u, v, inv, jac, cov_cam, r_wc, (x0, x1, y0, y1) = self._geom
        bg = np.asarray(self.cfg.background, dtype=np.float64)

        # suffix state: transmittance behind the current splat and the
        # composited color contributed by everything behind it
        t_behind = self.transmittance.copy()
        suffix = t_behind[:, :, None] * bg

        for pos in range(len(self._order) - 1, -1, -1):
            i = self._order[pos]
            entry = self._stash[pos]
            if entry is None:
                continue
            dx, dy, gauss, alpha_eff, contrib, uncapped = entry
            sy, sx = slice(y0[i], y1[i]), slice(x0[i], x1[i])
            tb = t_behind[sy, sx]
            sfx = suffix[sy, sx]
            go = g_img[sy, sx]

            one_minus = 1.0 - alpha_eff
            t_i = tb / one_minus  # transmittance before this splat
            weight = alpha_eff * t_i

            # color gradient
            g_color[i] = np.einsum("yx,yxc->c", weight, go)

            # alpha gradient: d(image)/d(alpha) = T_i * c_i - suffix / (1 - alpha)
            d_alpha = (np.einsum("yxc,c->yx", go, self.colors[i]) * t_i
                       - np.einsum("yxc,yxc->yx", go, sfx) / one_minus)
            d_alpha = np.where(contrib & uncapped, d_alpha, 0.0)

            g_opac[i] = np.sum(d_alpha * gauss)
            d_power = d_alpha * self.opacities[i] * gauss

            ia, ib, ic = inv[i, 0, 0], inv[i, 0, 1], inv[i, 1, 1]
            # power = -0.5 d^T A d with d = p - mean2d
            gdx = d_power * (-(ia * dx + ib * dy))
            gdy = d_power * (-(ic * dy + ib * dx))
            g_mean2d[i, 0] = -np.sum(gdx)
            g_mean2d[i, 1] = -np.sum(gdy)

            # gradient wrt the inverse covariance A, then map to cov2d
            ga = -0.5 * np.sum(d_power * dx * dx)
            gc_ = -0.5 * np.sum(d_power * dy * dy)
            gb_ = -np.sum(d_power * dx * dy)
            g_a_mat = np.array([[ga, 0.5 * gb_], [0.5 * gb_, gc_]])
            a_mat = inv[i]
            g_cov2d[i] = -a_mat @ g_a_mat @ a_mat

            # roll suffix state back past this splat
            suffix[sy, sx] = sfx + weight[:, :, None] * self.colors[i]
            t_behind[sy, sx] = t_i

        # chain 2D gradients to camera-space position and 3D covariance
        cam = self.camera
        g_cov3d = np.zeros((m, 3, 3))
        g_pcam = np.zeros((m, 3))
        touched = np.nonzero((np.abs(g_mean2d).sum(axis=1) > 0)
                             | (np.abs(g_cov2d).sum(axis=(1, 2)) > 0))[0]
        for i in touched:
            j = jac[i]
            g_cov_cam = j.T @ g_cov2d[i] @ j
            g_cov3d[i] = r_wc.T @ g_cov_cam @ r_wc
            gj = 2.0 * g_cov2d[i] @ j @ cov_cam[i]

            x_c, y_c, z_c = p_cam[i]
            zs = z_safe[i]
            gx = g_mean2d[i, 0] * cam.fx / zs
            gy = g_mean2d[i, 1] * cam.fy / zs
            gz = (-g_mean2d[i, 0] * cam.fx * x_c / zs**2
                  - g_mean2d[i, 1] * cam.fy * y_c / zs**2)
            gx += gj[0, 2] * (-cam.fx / zs**2)
            gy += gj[1, 2] * (-cam.fy / zs**2)
            gz += (gj[0, 0] * (-cam.fx / zs**2)
                   + gj[1, 1] * (-cam.fy / zs**2)
                   + gj[0, 2] * (2.0 * cam.fx * x_c / zs**3)
                   + gj[1, 2] * (2.0 * cam.fy * y_c / zs**3))
            g_pcam[i] = (gx, gy, gz)

        g_mean[:] = g_pcam @ r_wc
        return (g_mean.astype(self.dtype), g_color.astype(self.dtype),
                g_opac.astype(self.dtype), g_cov3d.astype(self.dtype))
