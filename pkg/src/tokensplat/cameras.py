"""Pinhole cameras, Plucker ray maps, projection, and coordinate normalization."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# depth below this counts as behind the camera
EPS_Z = 1e-6


@dataclass
class Camera:
    """Camera-to-world pose plus pinhole intrinsics.

    Convention: x right, y down, z forward; pixel centers at half-integer
    coordinates; the world frame is the reference camera's frame.
    """

    rotation: np.ndarray  # (3,3) camera-to-world
    translation: np.ndarray  # (3,) camera center in world coords
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    timestamp: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {self.rotation.shape}")
        if not np.allclose(self.rotation.T @ self.rotation, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if self.fx <= 0 or self.fy <= 0 or self.width <= 0 or self.height <= 0:
            raise ValueError("focal lengths and image size must be positive")

    @property
    def center(self):
        return self.translation

    def world_to_cam(self, points):
        """Map (N,3) world points into the camera frame."""
        p = np.asarray(points, dtype=np.float64)
        return (p - self.translation) @ self.rotation

    def to_dict(self):
        return {
            "rotation": self.rotation.reshape(-1).tolist(),
            "translation": self.translation.tolist(),
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            rotation=np.asarray(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.asarray(d["translation"], dtype=np.float64),
            fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
            width=int(d["width"]), height=int(d["height"]),
            timestamp=float(d.get("timestamp", 0.0)),
        )


def identity_camera(width, height, focal=None, timestamp=0.0):
    """Reference camera: identity pose, principal point at image center."""
    focal = float(focal if focal is not None else width)
    return Camera(np.eye(3), np.zeros(3), focal, focal,
                  width / 2.0, height / 2.0, width, height, timestamp)


def look_at_camera(position, target, width, height, focal=None, timestamp=0.0):
    """Camera at `position` looking at `target` (y-down world)."""
    position = np.asarray(position, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ValueError("camera position coincides with target")
    fwd = fwd / n
    down_world = np.array([0.0, 1.0, 0.0])
    right = np.cross(down_world, fwd)
    rn = np.linalg.norm(right)
    if rn < 1e-9:  # looking straight up/down: pick an arbitrary right
        right = np.array([1.0, 0.0, 0.0])
    else:
        right = right / rn
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    focal = float(focal if focal is not None else width)
    return Camera(rot, position, focal, focal, width / 2.0, height / 2.0,
                  width, height, timestamp)


def plucker_rays(camera: Camera) -> np.ndarray:
    """Per-pixel (H, W, 6) map of unit ray direction and moment o x d."""
    h, w = camera.height, camera.width
    u = (np.arange(w, dtype=np.float64) + 0.5)[None, :].repeat(h, axis=0)
    v = (np.arange(h, dtype=np.float64) + 0.5)[:, None].repeat(w, axis=1)
    d_cam = np.stack([(u - camera.cx) / camera.fx,
                      (v - camera.cy) / camera.fy,
                      np.ones_like(u)], axis=-1)
    d_world = d_cam @ camera.rotation.T
    d_world = d_world / np.linalg.norm(d_world, axis=-1, keepdims=True)
    moment = np.cross(np.broadcast_to(camera.center, d_world.shape), d_world)
    return np.concatenate([d_world, moment], axis=-1)


def project(points, camera: Camera):
    """Project (N,3) world points; returns (u, v, z_cam, behind_mask).

    u, v are pixel coordinates; points with z_cam <= EPS_Z are flagged and
    their u, v are not meaningful.
    """
    p_cam = camera.world_to_cam(points)
    z = p_cam[:, 2]
    behind = z <= EPS_Z
    z_safe = np.where(behind, 1.0, z)
    u = camera.fx * p_cam[:, 0] / z_safe + camera.cx
    v = camera.fy * p_cam[:, 1] / z_safe + camera.cy
    return u, v, z, behind


def normalize_coords(u, v, width, height):
    """Map pixel coordinates to [-1, 1] image coordinates."""
    return 2.0 * (np.asarray(u) / width) - 1.0, 2.0 * (np.asarray(v) / height) - 1.0
