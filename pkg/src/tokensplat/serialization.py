"""File formats: checkpoints, PLY splat export, PPM images, dataset dirs."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .cameras import Camera
from .gaussians import GaussianSet
from .rasterize import RenderConfig
from .scenes import SceneSample, SceneSpec

CKPT_MAGIC = b"TSCK"
CKPT_VERSION = 1
SH_DC = 0.28209479177387814  # zeroth spherical-harmonic basis constant


# ---- checkpoint container ----------------------------------------------------


def save_checkpoint(path, arrays, kind="model", meta=None):
    """Versioned binary container: json header + named little-endian blocks."""
    blocks = []
    offset = 0
    names = sorted(arrays)
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        blocks.append({"name": name, "dtype": arr.dtype.str,
                       "shape": list(arr.shape), "offset": offset})
        offset += arr.nbytes
    header = json.dumps({"kind": kind, "meta": meta or {}, "blocks": blocks},
                        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(arrays[name]).tobytes())


def load_checkpoint(path):
    """Returns (arrays dict, kind, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", f.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        data = f.read()
    arrays = {}
    for blk in header["blocks"]:
        dt = np.dtype(blk["dtype"])
        n = int(np.prod(blk["shape"])) if blk["shape"] else 1
        start = blk["offset"]
        arr = np.frombuffer(data, dtype=dt, count=n, offset=start)
        arrays[blk["name"]] = arr.reshape(blk["shape"]).copy()
    return arrays, header["kind"], header["meta"]


def save_model_checkpoint(path, model, train_cfg=None, step=0, optimizer=None,
                          rng=None):
    arrays = dict(model.state_arrays())
    if optimizer is not None:
        for k, v in optimizer.state_arrays().items():
            arrays[f"opt.{k}"] = v
    meta = {"network": model.cfg.to_dict(), "step": step}
    if train_cfg is not None:
        meta["train"] = train_cfg.to_dict()
    if rng is not None:
        meta["rng_state"] = rng.bit_generator.state
    save_checkpoint(path, arrays, kind="model", meta=meta)


def load_model_checkpoint(path):
    """Returns (model, meta, optimizer_arrays)."""
    from .network import NetworkConfig, TokenSplatModel

    arrays, kind, meta = load_checkpoint(path)
    if kind != "model":
        raise ValueError(f"{path}: expected a model checkpoint, got kind={kind!r}")
    model = TokenSplatModel(NetworkConfig.from_dict(meta["network"]))
    opt_arrays = {k[4:]: v for k, v in arrays.items() if k.startswith("opt.")}
    model.load_state({k: v for k, v in arrays.items() if not k.startswith("opt.")})
    return model, meta, opt_arrays


def save_gaussian_checkpoint(path, gset: GaussianSet, meta=None):
    """Pseudo-checkpoint holding an activated Gaussian matrix."""
    arrays = {"gaussians": gset.to_matrix()}
    if gset.token_id is not None:
        arrays["token_id"] = gset.token_id
    save_checkpoint(path, arrays, kind="gaussians", meta=meta)


def load_gaussian_checkpoint(path):
    arrays, kind, meta = load_checkpoint(path)
    if kind != "gaussians":
        raise ValueError(f"{path}: expected a gaussian checkpoint, got kind={kind!r}")
    return GaussianSet.from_matrix(arrays["gaussians"],
                                   arrays.get("token_id")), meta


# ---- PLY splat export --------------------------------------------------------

_PLY_PROPS = ["x", "y", "z", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3", "opacity",
              "f_dc_0", "f_dc_1", "f_dc_2"]


def export_ply(gset: GaussianSet, path):
    """Binary little-endian PLY in the de-facto 3DGS viewer convention:
    log scales, logit opacity (clamped to +-15), DC-coefficient colors."""
    m = len(gset)
    cols = np.zeros((m, len(_PLY_PROPS)), dtype=np.float32)
    cols[:, 0:3] = gset.means.data
    cols[:, 3:6] = np.log(gset.scales.data)
    cols[:, 6:10] = gset.quats.data
    op = np.clip(gset.opacities.data, 1e-12, 1 - 1e-12)
    cols[:, 10] = np.clip(np.log(op / (1.0 - op)), -15.0, 15.0)
    cols[:, 11:14] = (gset.colors.data - 0.5) / SH_DC
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {m}"]
    header += [f"property float {p}" for p in _PLY_PROPS]
    header += ["end_header", ""]
    with open(path, "wb") as f:
        f.write("\n".join(header).encode("ascii"))
        f.write(np.ascontiguousarray(cols, dtype="<f4").tobytes())


def import_ply(path):
    with open(path, "rb") as f:
        raw = f.read()
    end = raw.index(b"end_header\n") + len(b"end_header\n")
    lines = raw[:end].decode("ascii").splitlines()
    if lines[0] != "ply" or "format binary_little_endian 1.0" not in lines[1]:
        raise ValueError(f"{path}: not a binary little-endian PLY")
    m = None
    props = []
    for ln in lines:
        if ln.startswith("element vertex"):
            m = int(ln.split()[-1])
        elif ln.startswith("property float"):
            props.append(ln.split()[-1])
    data = np.frombuffer(raw[end:], dtype="<f4", count=m * len(props))
    cols = data.reshape(m, len(props)).astype(np.float64)
    col = {p: cols[:, i] for i, p in enumerate(props)}
    mat = np.zeros((m, 14))
    mat[:, 0] = col["x"]; mat[:, 1] = col["y"]; mat[:, 2] = col["z"]
    mat[:, 3:6] = np.stack([col[f"f_dc_{i}"] for i in range(3)], 1) * SH_DC + 0.5
    mat[:, 6:9] = np.exp(np.stack([col[f"scale_{i}"] for i in range(3)], 1))
    mat[:, 9] = 1.0 / (1.0 + np.exp(-col["opacity"]))
    mat[:, 10:14] = np.stack([col[f"rot_{i}"] for i in range(4)], 1)
    return GaussianSet.from_matrix(mat)


# ---- PPM images --------------------------------------------------------------


def write_ppm(path, image):
    """8-bit binary P6 from a float image in [0, 1]."""
    img = np.clip(np.asarray(image), 0.0, 1.0)
    q = np.round(img * 255.0).astype(np.uint8)
    h, w = q.shape[0], q.shape[1]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(q.tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        raw = f.read()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM")
    w, h = (int(x) for x in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


# ---- dataset directories -----------------------------------------------------


def save_dataset(out_dir, samples, render_cfg: RenderConfig):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scene_dirs = []
    for i, s in enumerate(samples):
        name = f"scene_{i:03d}"
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        n_t, n_v = s.images.shape[0], s.images.shape[1]
        img_names = [[f"img_t{t:03d}_v{v:03d}" for v in range(n_v)] for t in range(n_t)]
        for t in range(n_t):
            for v in range(n_v):
                write_ppm(sdir / f"{img_names[t][v]}.ppm", s.images[t, v])
                np.save(sdir / f"{img_names[t][v]}.npy", s.images[t, v])
        gt_names = [f"gt_t{t:03d}.npy" for t in range(n_t)]
        for t, gname in enumerate(gt_names):
            np.save(sdir / gname, s.gt_matrices[t])
        scene_json = {
            "spec": s.spec.to_dict(),
            "motions": s.motions,
            "view_time_index": s.view_time_index.tolist(),
            "cameras": [c.to_dict() for c in s.cameras],
            "images": img_names,
            "gt": gt_names,
        }
        (sdir / "scene.json").write_text(json.dumps(scene_json, sort_keys=True, indent=1))
        scene_dirs.append(name)
    manifest = {"format_version": 1, "render_config": render_cfg.to_dict(),
                "scenes": scene_dirs}
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=1))


def load_dataset(in_dir):
    """Returns (samples, render_config)."""
    root = Path(in_dir)
    manifest = json.loads((root / "manifest.json").read_text())
    render_cfg = RenderConfig.from_dict(manifest["render_config"])
    samples = []
    for name in manifest["scenes"]:
        sdir = root / name
        sj = json.loads((sdir / "scene.json").read_text())
        spec = SceneSpec.from_dict(sj["spec"])
        cams = [Camera.from_dict(c) for c in sj["cameras"]]
        gt = [np.load(sdir / g) for g in sj["gt"]]
        images = np.stack([
            np.stack([np.load(sdir / f"{n}.npy") for n in row])
            for row in sj["images"]
        ])
        samples.append(SceneSample(spec, cams, np.asarray(sj["view_time_index"]),
                                   gt, images, sj["motions"]))
    return samples, render_cfg


# ---- scene-flow export -------------------------------------------------------


def flow_rows(model, images, cameras, timestamps):
    """Per-timestamp forward passes linked positionally by Gaussian index."""
    if model.cfg.n_dynamic == 0:
        raise ValueError("flow export requires a model with dynamic tokens")
    if len(timestamps) < 2:
        raise ValueError("flow export needs at least two timestamps")
    rows = []
    for t in timestamps:
        gset = model.forward(images, cameras, t=t)
        mu = gset.means.data
        op = gset.opacities.data
        for i in range(len(gset)):
            rows.append((i, int(gset.token_id[i]), float(t),
                         float(mu[i, 0]), float(mu[i, 1]), float(mu[i, 2]),
                         float(op[i])))
    return rows


def flow_csv(rows):
    lines = ["gaussian_index,token_id,t,x,y,z,opacity"]
    for r in rows:
        lines.append(f"{r[0]},{r[1]},{r[2]!r},{r[3]!r},{r[4]!r},{r[5]!r},{r[6]!r}")
    return "\n".join(lines) + "\n"
