"""Run configuration: flat dotted-key text files with CLI overrides.

File format: one `key = value` per line, `#` comments.  Unknown keys are a
hard error.  `value` syntax depends on the declared type; lists use commas
(e.g. `render.background = 0,0,0`).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .network import NetworkConfig
from .rasterize import RenderConfig
from .scenes import SceneSpec
from .training import TrainConfig
from .tuning import TuneConfig


class ConfigError(ValueError):
    pass


def _parse_bool(s):
    if s.lower() in ("true", "1", "yes"):
        return True
    if s.lower() in ("false", "0", "no"):
        return False
    raise ConfigError(f"invalid boolean {s!r}")


def _parse_floats(s):
    return tuple(float(x) for x in s.split(","))


def _parse_choice(*options):
    def parse(s):
        if s not in options:
            raise ConfigError(f"expected one of {options}, got {s!r}")
        return s
    return parse


# key -> (parser, default, help)
SCHEMA = {
    "precision": (int, 64, "global float precision: 32 or 64"),

    "scene.seed": (int, 0, "base seed; scene i uses seed + i"),
    "scene.n_scenes": (int, 1, "number of scenes to generate"),
    "scene.n_static_blobs": (int, 3, "static Gaussian blobs per scene"),
    "scene.n_dynamic_blobs": (int, 0, "moving blobs per scene"),
    "scene.ground_plane": (_parse_bool, True, "include a flat ground slab"),
    "scene.splat_scale_range": (_parse_floats, (0.015, 0.05),
                                "per-splat scale bounds (scene units)"),
    "scene.orbit_radius": (float, 1.0, "camera orbit radius (scene units)"),
    "scene.elevation": (float, 0.35, "peak orbit elevation (radians)"),
    "scene.n_views": (int, 8, "cameras on the orbit"),
    "scene.image_size": (int, 32, "square image side in pixels"),
    "scene.timestamps": (_parse_floats, (0.0,), "timestamps in [0, 1]"),

    "network.channels": (int, 64, "transformer width C"),
    "network.enc_depth": (int, 2, "encoder layers"),
    "network.dec_depth": (int, 4, "decoder layers"),
    "network.patch": (int, 8, "encoder patch size in pixels"),
    "network.heads": (int, 8, "attention heads"),
    "network.mlp_ratio": (float, 4.0, "MLP hidden ratio"),
    "network.n_static": (int, 64, "static Gaussian tokens"),
    "network.n_dynamic": (int, 0, "dynamic Gaussian tokens"),
    "network.d_time": (int, 64, "time-embedding dimension"),
    "network.z_offset": (float, 1.0, "depth offset of the XYZ activation"),
    "network.init_seed": (int, 0, "weight-initialization seed"),

    "train.lr_max": (float, 4e-4, "peak learning rate"),
    "train.lr_min": (float, 4e-6, "final learning rate of the cosine decay"),
    "train.warmup_steps": (int, 200, "linear warmup steps"),
    "train.total_steps": (int, 2000, "total optimization steps"),
    "train.weight_decay": (float, 0.05, "decoupled weight decay"),
    "train.grad_clip_norm": (float, 1.0, "global gradient-norm clip"),
    "train.batch_size": (int, 4, "scenes per step"),
    "train.n_context": (int, 4, "context views per sample"),
    "train.n_target": (int, 2, "supervised target views per sample"),
    "train.lambda_ssim": (float, 0.2, "SSIM loss weight"),
    "train.lambda_vis": (float, 1.0, "visibility loss weight"),
    "train.vis_clip": (float, 1.0, "visibility penalty clip"),
    "train.seed": (int, 0, "training RNG seed"),
    "train.log_interval": (int, 50, "steps between metric rows"),
    "train.ckpt_interval": (int, 1000, "steps between checkpoints"),

    "tune.steps": (int, 50, "tuning gradient steps"),
    "tune.lr": (float, 1e-4, "tuning learning rate"),
    "tune.target": (_parse_choice("tokens", "gaussians"), "tokens",
                    "what to optimize at test time"),
    "tune.lambda_ssim": (float, 0.2, "SSIM weight during tuning"),
    "tune.lambda_vis": (float, 1.0, "visibility weight during tuning"),
    "tune.vis_clip": (float, 1.0, "visibility clip during tuning"),

    "render.background": (_parse_floats, (0.0, 0.0, 0.0), "background RGB"),
    "render.alpha_min": (float, 1.0 / 255.0, "splat contribution cutoff"),
    "render.alpha_max": (float, 0.999, "per-splat opacity cap"),
    "render.dilation": (float, 0.3, "px^2 added to 2D covariance diagonal"),
    "render.t_stop": (float, 1e-4, "early-stop transmittance (<=0 disables)"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: v[1] for k, v in SCHEMA.items()}
        for k in self.values:
            if k not in SCHEMA:
                raise ConfigError(f"unknown config key {k!r}")
        full.update(self.values)
        self.values = full

    def __getitem__(self, key):
        return self.values[key]

    def section(self, prefix):
        return {k.split(".", 1)[1]: v for k, v in self.values.items()
                if k.startswith(prefix + ".")}

    # ---- typed views ---------------------------------------------------------

    def scene_spec(self):
        s = self.section("scene")
        n = s.pop("image_size")
        s.pop("n_scenes")
        return SceneSpec(image_size=(n, n), **s)

    def n_scenes(self):
        return self["scene.n_scenes"]

    def network_config(self):
        return NetworkConfig(precision=self["precision"], **self.section("network"))

    def train_config(self):
        return TrainConfig(**self.section("train"))

    def tune_config(self):
        return TuneConfig(**self.section("tune"))

    def render_config(self):
        return RenderConfig(**self.section("render"))


def parse_value(key, text):
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}")
    parser = SCHEMA[key][0]
    try:
        return parser(text.strip())
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value for {key}: {text!r} ({e})") from None


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `key = value`, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key] = parse_value(key, val)
    return values


def load_run_config(path=None, overrides=()):
    """File values (if any) overlaid with `key=value` override strings."""
    values = {}
    if path is not None:
        with open(path) as f:
            values.update(parse_config_text(f.read()))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must be key=value, got {item!r}")
        key, val = (part.strip() for part in item.split("=", 1))
        values[key] = parse_value(key, val)
    return RunConfig(values)


def config_reference():
    """Generated reference of every key, default, and description."""
    lines = ["# Configuration reference (defaults shown)", ""]
    for key, (_, default, help_text) in SCHEMA.items():
        if isinstance(default, tuple):
            default = ",".join(repr(x) for x in default)
        lines.append(f"{key} = {default}  # {help_text}")
    return "\n".join(lines) + "\n"
