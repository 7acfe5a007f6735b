"""The 14-parameter Gaussian primitive and its activation mappings.

Raw column layout (fixed everywhere: checkpoints, PLY, tests):
    [x, y, z, r, g, b, s1, s2, s3, opacity, q0, q1, q2, q3]
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, concatenate, custom_op, stack, where_mask

RAW_COLUMNS = ("x", "y", "z", "r", "g", "b", "s1", "s2", "s3",
               "opacity", "q0", "q1", "q2", "q3")

S_MIN = 1e-4
S_MAX = 1.0
Z_OFFSET_DEFAULT = 1.0


@dataclass
class GaussianSet:
    """M activated primitives; fields are Tensors so rendering stays differentiable."""

    means: Tensor  # (M, 3)
    colors: Tensor  # (M, 3) in [0, 1]
    scales: Tensor  # (M, 3) in [S_MIN, S_MAX]
    opacities: Tensor  # (M,) in [0, 1]
    quats: Tensor  # (M, 4) unit norm
    token_id: np.ndarray | None = None  # (M,) provenance, optional

    def __len__(self):
        return self.means.shape[0]

    def detach(self):
        return GaussianSet(self.means.detach(), self.colors.detach(),
                           self.scales.detach(), self.opacities.detach(),
                           self.quats.detach(), self.token_id)

    def to_matrix(self):
        """Activated attributes as an (M, 14) float array in the raw column order."""
        return np.concatenate([
            self.means.data, self.colors.data, self.scales.data,
            self.opacities.data[:, None], self.quats.data,
        ], axis=1)

    @classmethod
    def from_matrix(cls, mat, token_id=None):
        mat = np.asarray(mat)
        if mat.ndim != 2 or mat.shape[1] != 14:
            raise ValueError(f"expected (M, 14) matrix, got {mat.shape}")
        return cls(Tensor(mat[:, 0:3]), Tensor(mat[:, 3:6]), Tensor(mat[:, 6:9]),
                   Tensor(mat[:, 9]), Tensor(mat[:, 10:14]), token_id)


def _signed_expm1(x: Tensor) -> Tensor:
    """Odd, monotone coordinate map: sign(x) * (exp(|x|) - 1)."""
    data = np.sign(x.data) * np.expm1(np.abs(x.data))

    def backward(g):
        return (g * np.exp(np.abs(x.data)),)

    return custom_op((x,), data, backward, op="signed_expm1")


def _unit_tanh(x: Tensor) -> Tensor:
    """Map reals onto [0, 1] via (tanh(x) + 1) / 2."""
    return (x.tanh() + 1.0) * 0.5


def activate(raw, z_offset=Z_OFFSET_DEFAULT, s_min=S_MIN, s_max=S_MAX,
             token_id=None) -> GaussianSet:
    """Map an (M, 14) pre-activation matrix to a valid GaussianSet.

    XYZ uses the signed exponential map with a z offset added after
    activation; color and opacity use scaled tanh; scale a clipped
    exponential; quaternions unit normalization (degenerate rows fall back
    to the identity quaternion).
    """
    if not isinstance(raw, Tensor):
        raw = Tensor(raw)
    if raw.ndim != 2 or raw.shape[1] != 14:
        raise ValueError(f"activate: expected (M, 14), got {raw.shape}")
    if not np.isfinite(raw.data).all():
        bad = np.argwhere(~np.isfinite(raw.data))[0]
        raise ValueError(f"activate: non-finite input at row {bad[0]}, column {bad[1]}")

    means = _signed_expm1(raw[:, 0:3])
    offset = np.array([0.0, 0.0, float(z_offset)], dtype=raw.dtype)
    means = means + Tensor(offset)
    colors = _unit_tanh(raw[:, 3:6])
    scales = raw[:, 6:9].clamp(np.log(s_min), np.log(s_max)).exp()
    opacities = _unit_tanh(raw[:, 9])

    q_raw = raw[:, 10:14]
    norm = np.linalg.norm(q_raw.data, axis=1)
    degenerate = norm < 1e-8
    identity = np.zeros_like(q_raw.data)
    identity[:, 0] = 1.0
    q_safe = where_mask(degenerate[:, None], Tensor(identity), q_raw)
    q_norm = (q_safe * q_safe).sum(axis=1, keepdims=True).sqrt()
    quats = q_safe / q_norm

    return GaussianSet(means, colors, scales, opacities, quats, token_id)


def quat_to_rotmat(q: Tensor) -> Tensor:
    """Batched (M, 4) unit quaternions -> (M, 3, 3) rotation matrices."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rows = [
        stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=1),
        stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=1),
        stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=1),
    ]
    return stack(rows, axis=1)


def covariance(quats: Tensor, scales: Tensor) -> Tensor:
    """World-space 3x3 covariances: R diag(s)^2 R^T per Gaussian."""
    rot = quat_to_rotmat(quats)
    m = scales.shape[0]
    s2 = (scales * scales).reshape(m, 1, 3)
    # R diag(s^2) R^T == (R * s^2) @ R^T with s^2 broadcast over columns
    return (rot * s2).matmul(rot.swapaxes(1, 2))
