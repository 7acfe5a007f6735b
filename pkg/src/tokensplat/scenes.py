"""Procedural multi-view scene generation with ground-truth Gaussians.

Scenes are clusters of Gaussian blobs around a center placed at unit depth
in front of the reference camera; cameras sit on an orbit of radius ~1
around that center so mean scene depth is ~1.  Targets are rendered with
our own rasterizer, so a perfect model attains zero photometric loss and
the ground-truth sets double as oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cameras import Camera, look_at_camera
from .gaussians import GaussianSet
from .rasterize import RenderConfig, render

SCENE_CENTER = np.array([0.0, 0.0, 1.0])


@dataclass
class SceneSpec:
    seed: int = 0
    n_static_blobs: int = 3
    n_dynamic_blobs: int = 0
    blob_size_range: tuple = (0.05, 0.12)
    splat_scale_range: tuple = (0.015, 0.05)  # per-splat scale bounds
    palette: tuple = ((0.9, 0.3, 0.25), (0.3, 0.75, 0.35), (0.25, 0.4, 0.9),
                     (0.9, 0.8, 0.3), (0.8, 0.4, 0.8))
    ground_plane: bool = True
    motions: list | None = None  # per dynamic blob: {"kind", ...}; auto if None
    orbit_radius: float = 1.0
    elevation: float = 0.35  # radians, peak orbit elevation
    n_views: int = 8
    image_size: tuple = (32, 32)
    timestamps: tuple = (0.0,)

    def __post_init__(self):
        if self.n_static_blobs + self.n_dynamic_blobs < 1:
            raise ValueError("need at least one blob")
        if self.orbit_radius <= 0.3:
            raise ValueError("orbit radius must exceed the blob extent")

    def to_dict(self):
        d = {k: getattr(self, k) for k in self.__dataclass_fields__}
        d["blob_size_range"] = list(d["blob_size_range"])
        d["splat_scale_range"] = list(d["splat_scale_range"])
        d["palette"] = [list(c) for c in d["palette"]]
        d["image_size"] = list(d["image_size"])
        d["timestamps"] = list(d["timestamps"])
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["blob_size_range"] = tuple(d["blob_size_range"])
        d["splat_scale_range"] = tuple(d["splat_scale_range"])
        d["palette"] = tuple(tuple(c) for c in d["palette"])
        d["image_size"] = tuple(d["image_size"])
        d["timestamps"] = tuple(d["timestamps"])
        return cls(**d)


@dataclass
class SceneSample:
    spec: SceneSpec
    cameras: list  # rig cameras; camera.timestamp set cyclically for dynamic
    view_time_index: np.ndarray  # (V,) timestamp index of each view's input image
    gt_matrices: list  # per timestamp: (M, 14) activated attribute matrix
    images: np.ndarray  # (T, V, H, W, 3) float renders
    motions: list  # realized motion descriptors, one per dynamic blob

    @property
    def timestamps(self):
        return list(self.spec.timestamps)

    def gt_set(self, t_index=0):
        return GaussianSet.from_matrix(self.gt_matrices[t_index])

    def context_images(self, view_indices):
        """Each view contributes its image at the view's own timestamp."""
        return np.stack([self.images[self.view_time_index[v], v] for v in view_indices])

    def target_images(self, view_indices, t_index):
        return np.stack([self.images[t_index, v] for v in view_indices])


def orbit_cameras(spec: SceneSpec):
    """Cameras on an orbit around the scene center; view 0 is the identity
    reference camera."""
    h, w = spec.image_size
    cams = []
    for i in range(spec.n_views):
        theta = 2.0 * np.pi * i / spec.n_views
        phi = spec.elevation * np.sin(theta)
        offset = np.array([np.sin(theta) * np.cos(phi),
                           -np.sin(phi),
                           -np.cos(theta) * np.cos(phi)])
        pos = SCENE_CENTER + spec.orbit_radius * offset
        cams.append(look_at_camera(pos, SCENE_CENTER, w, h, focal=float(w)))
    return cams


def _make_blob(rng, spec, dynamic):
    n = int(rng.integers(20, 101))
    center = SCENE_CENTER + rng.uniform(-0.25, 0.25, size=3)
    size = rng.uniform(*spec.blob_size_range)
    base_color = np.asarray(spec.palette[int(rng.integers(len(spec.palette)))])
    mat = np.zeros((n, 14))
    mat[:, 0:3] = center + rng.normal(0.0, size, size=(n, 3))
    mat[:, 3:6] = np.clip(base_color + rng.normal(0.0, 0.05, size=(n, 3)), 0.0, 1.0)
    lo, hi = spec.splat_scale_range
    mat[:, 6:9] = np.exp(rng.uniform(np.log(lo), np.log(hi), size=(n, 3)))
    mat[:, 9] = rng.uniform(0.6, 0.95, size=n)
    q = rng.normal(size=(n, 4))
    mat[:, 10:14] = q / np.linalg.norm(q, axis=1, keepdims=True)
    return mat, center


def _ground_plane(rng):
    xs = np.linspace(-0.5, 0.5, 8)
    zs = np.linspace(-0.5, 0.5, 8)
    gx, gz = np.meshgrid(xs, zs)
    n = gx.size
    mat = np.zeros((n, 14))
    mat[:, 0] = gx.ravel() + SCENE_CENTER[0]
    mat[:, 1] = 0.35  # y-down: below scene center
    mat[:, 2] = gz.ravel() + SCENE_CENTER[2]
    shade = rng.uniform(0.35, 0.55, size=(n, 1))
    mat[:, 3:6] = shade
    mat[:, 6] = 0.09
    mat[:, 7] = 0.01
    mat[:, 8] = 0.09
    mat[:, 9] = 0.9
    mat[:, 10] = 1.0  # identity quaternion: flat slabs
    return mat


def _motion_offset(motion, t):
    kind = motion["kind"]
    if kind == "linear":
        return float(t) * np.asarray(motion["velocity"], dtype=np.float64)
    if kind == "circular":
        amp = float(motion["amplitude"])
        phase = float(motion.get("phase", 0.0))
        ang0, ang = phase, 2.0 * np.pi * float(t) + phase
        return amp * np.array([np.cos(ang) - np.cos(ang0), 0.0,
                               np.sin(ang) - np.sin(ang0)])
    raise ValueError(f"unknown motion kind {kind!r}")


def _default_motion(rng):
    direction = rng.normal(size=3)
    direction[1] *= 0.3  # mostly lateral motion
    direction /= np.linalg.norm(direction)
    return {"kind": "linear", "velocity": (0.3 * direction).tolist()}


def generate_scene(spec: SceneSpec, render_cfg: RenderConfig | None = None) -> SceneSample:
    """Deterministically realize one scene from its spec."""
    rng = np.random.default_rng(spec.seed)
    render_cfg = render_cfg or RenderConfig()

    static_parts = []
    if spec.ground_plane:
        static_parts.append(_ground_plane(rng))
    for _ in range(spec.n_static_blobs):
        mat, _ = _make_blob(rng, spec, dynamic=False)
        static_parts.append(mat)
    static = np.concatenate(static_parts) if static_parts else np.zeros((0, 14))

    dyn_blobs = []
    motions = []
    for j in range(spec.n_dynamic_blobs):
        mat, _ = _make_blob(rng, spec, dynamic=True)
        dyn_blobs.append(mat)
        if spec.motions is not None and j < len(spec.motions):
            motions.append(dict(spec.motions[j]))
        else:
            motions.append(_default_motion(rng))

    gt_matrices = []
    for t in spec.timestamps:
        parts = [static]
        for mat, motion in zip(dyn_blobs, motions):
            moved = mat.copy()
            moved[:, 0:3] += _motion_offset(motion, t)
            parts.append(moved)
        gt_matrices.append(np.concatenate(parts))

    cams = orbit_cameras(spec)
    n_t = len(spec.timestamps)
    view_time_index = np.arange(spec.n_views) % n_t
    for v, cam in enumerate(cams):
        cam.timestamp = float(spec.timestamps[view_time_index[v]])

    h, w = spec.image_size
    images = np.zeros((n_t, spec.n_views, h, w, 3))
    for ti in range(n_t):
        gset = GaussianSet.from_matrix(gt_matrices[ti])
        for v, cam in enumerate(cams):
            images[ti, v] = render(gset, cam, render_cfg).image.data

    return SceneSample(spec, cams, view_time_index, gt_matrices, images, motions)


def generate_dataset(base_spec: SceneSpec, n_scenes, render_cfg=None):
    """Scenes with per-sample seeds base_seed + index."""
    samples = []
    for i in range(n_scenes):
        d = base_spec.to_dict()
        d["seed"] = base_spec.seed + i
        samples.append(generate_scene(SceneSpec.from_dict(d), render_cfg))
    return samples


def sample_context_target(sample: SceneSample, n_context, n_target, rng):
    """Evenly spaced context views; targets drawn from the remaining views."""
    n_views = sample.spec.n_views
    if n_context + n_target > n_views:
        raise ValueError(f"need {n_context}+{n_target} views, rig has {n_views}")
    context = [round(i * n_views / n_context) % n_views for i in range(n_context)]
    remaining = sorted(set(range(n_views)) - set(context))
    target = sorted(rng.choice(remaining, size=n_target, replace=False).tolist())
    return context, target
