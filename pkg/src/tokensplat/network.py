"""Encoder-decoder Transformer over learnable Gaussian tokens.

Encoder: ViT blocks over patchified image + Plucker-ray embeddings, joint
attention across views, final layer norm.  Decoder: DETR-style blocks
(cross-attention to image tokens, masked self-attention among Gaussian
tokens, per-token MLP) with key/value projections of the image tokens
computed once and shared by all layers.  LayerScale and QK-normalization
throughout; no layer norm before the regression head.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concatenate
from .cameras import plucker_rays
from .gaussians import GaussianSet, activate

N_PER_TOKEN = 64
N_RAW_ATTRS = 14


@dataclass
class NetworkConfig:
    channels: int = 64
    enc_depth: int = 2
    dec_depth: int = 4
    patch: int = 8
    heads: int = 8
    mlp_ratio: float = 4.0
    n_static: int = 64
    n_dynamic: int = 0
    d_time: int = 64
    z_offset: float = 1.0
    init_seed: int = 0
    precision: int = 64

    def __post_init__(self):
        if self.channels % self.heads != 0:
            raise ValueError("channels must be divisible by heads")
        if self.n_static + self.n_dynamic < 1:
            raise ValueError("need at least one token")
        if self.d_time % 2 != 0:
            raise ValueError("d_time must be even")

    @property
    def n_tokens(self):
        return self.n_static + self.n_dynamic

    @property
    def dtype(self):
        return np.float32 if self.precision == 32 else np.float64

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


LAYERSCALE_INIT = 1e-5
TOKEN_INIT_STD = 0.01
HEAD_INIT_STD = 2e-3
LINEAR_INIT_STD = 0.02


def _param(rng, shape, std, dtype):
    if std == 0.0:
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


class Linear:
    def __init__(self, rng, d_in, d_out, dtype, std=LINEAR_INIT_STD, bias=True):
        self.weight = _param(rng, (d_in, d_out), std, dtype)
        self.bias = _param(rng, (d_out,), 0.0, dtype) if bias else None

    def __call__(self, x):
        y = x.matmul(self.weight)
        return y + self.bias if self.bias is not None else y

    def params(self, prefix):
        p = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            p[f"{prefix}.bias"] = self.bias
        return p


class LayerNorm:
    def __init__(self, dim, dtype, eps=1e-6):
        self.gain = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)
        self.eps = eps

    def __call__(self, x):
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return xc / (var + self.eps).sqrt() * self.gain + self.bias

    def params(self, prefix):
        return {f"{prefix}.gain": self.gain, f"{prefix}.bias": self.bias}


class LayerScale:
    def __init__(self, dim, dtype, init=LAYERSCALE_INIT):
        self.gamma = Tensor(np.full(dim, init, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return x * self.gamma

    def params(self, prefix):
        return {f"{prefix}.gamma": self.gamma}


def _gelu(x):
    # tanh approximation, composable from primitive ops
    c = math.sqrt(2.0 / math.pi)
    return x * 0.5 * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())


def _l2norm(x, eps=1e-12):
    return x / ((x * x).sum(axis=-1, keepdims=True) + eps).sqrt()


class Attention:
    """Multi-head attention with per-head QK L2 normalization and learnable
    temperature (init sqrt(d_head))."""

    def __init__(self, rng, dim, heads, dtype, with_kv=True):
        self.dim, self.heads = dim, heads
        self.d_head = dim // heads
        self.wq = Linear(rng, dim, dim, dtype)
        self.wk = Linear(rng, dim, dim, dtype) if with_kv else None
        self.wv = Linear(rng, dim, dim, dtype) if with_kv else None
        self.wo = Linear(rng, dim, dim, dtype)
        self.temp = Tensor(np.full(heads, math.sqrt(self.d_head), dtype=dtype),
                           requires_grad=True)

    def split(self, x):
        n = x.shape[0]
        return x.reshape(n, self.heads, self.d_head).transpose(1, 0, 2)

    def project_kv(self, kv_input):
        return self.split(self.wk(kv_input)), self.split(self.wv(kv_input))

    def __call__(self, x, kv_input=None, kv=None, mask=None):
        """`kv` overrides internal projections (shared-KV decoding)."""
        q = self.split(self.wq(x))
        if kv is None:
            kv = self.project_kv(kv_input if kv_input is not None else x)
        k, v = kv
        qn, kn = _l2norm(q), _l2norm(k)
        logits = qn.matmul(kn.swapaxes(1, 2)) * self.temp.reshape(self.heads, 1, 1)
        if mask is not None:
            logits = logits + Tensor(mask[None, :, :])
        attn = logits.softmax(axis=-1)
        out = attn.matmul(v)  # (heads, N, d_head)
        n = x.shape[0]
        out = out.transpose(1, 0, 2).reshape(n, self.dim)
        return self.wo(out)

    def params(self, prefix):
        p = {}
        p.update(self.wq.params(f"{prefix}.wq"))
        if self.wk is not None:
            p.update(self.wk.params(f"{prefix}.wk"))
            p.update(self.wv.params(f"{prefix}.wv"))
        p.update(self.wo.params(f"{prefix}.wo"))
        p[f"{prefix}.temp"] = self.temp
        return p


class Mlp:
    def __init__(self, rng, dim, ratio, dtype):
        hidden = int(dim * ratio)
        self.fc1 = Linear(rng, dim, hidden, dtype)
        self.fc2 = Linear(rng, hidden, dim, dtype)

    def __call__(self, x):
        return self.fc2(_gelu(self.fc1(x)))

    def params(self, prefix):
        return {**self.fc1.params(f"{prefix}.fc1"), **self.fc2.params(f"{prefix}.fc2")}


class EncoderBlock:
    def __init__(self, rng, cfg):
        c, dt = cfg.channels, cfg.dtype
        self.norm1 = LayerNorm(c, dt)
        self.attn = Attention(rng, c, cfg.heads, dt)
        self.ls1 = LayerScale(c, dt)
        self.norm2 = LayerNorm(c, dt)
        self.mlp = Mlp(rng, c, cfg.mlp_ratio, dt)
        self.ls2 = LayerScale(c, dt)

    def __call__(self, x):
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x)))
        return x

    def params(self, prefix):
        p = {}
        for name in ("norm1", "attn", "ls1", "norm2", "mlp", "ls2"):
            p.update(getattr(self, name).params(f"{prefix}.{name}"))
        return p


class DecoderBlock:
    """Cross-attention to image tokens, masked self-attention, MLP."""

    def __init__(self, rng, cfg):
        c, dt = cfg.channels, cfg.dtype
        self.norm_c = LayerNorm(c, dt)
        self.cross = Attention(rng, c, cfg.heads, dt, with_kv=False)
        self.ls_c = LayerScale(c, dt)
        self.norm_s = LayerNorm(c, dt)
        self.self_attn = Attention(rng, c, cfg.heads, dt)
        self.ls_s = LayerScale(c, dt)
        self.norm_m = LayerNorm(c, dt)
        self.mlp = Mlp(rng, c, cfg.mlp_ratio, dt)
        self.ls_m = LayerScale(c, dt)

    def __call__(self, x, kv_img, mask):
        x = x + self.ls_c(self.cross(self.norm_c(x), kv=kv_img))
        x = x + self.ls_s(self.self_attn(self.norm_s(x), mask=mask))
        x = x + self.ls_m(self.mlp(self.norm_m(x)))
        return x

    def params(self, prefix):
        p = {}
        for name in ("norm_c", "cross", "ls_c", "norm_s", "self_attn", "ls_s",
                     "norm_m", "mlp", "ls_m"):
            p.update(getattr(self, name).params(f"{prefix}.{name}"))
        return p


class TokenBank:
    """Learnable static/dynamic query tokens plus the time projection."""

    def __init__(self, rng, cfg: NetworkConfig):
        c, dt = cfg.channels, cfg.dtype
        self.n_static, self.n_dynamic = cfg.n_static, cfg.n_dynamic
        self.static = _param(rng, (cfg.n_static, c), TOKEN_INIT_STD, dt)
        self.dynamic = _param(rng, (cfg.n_dynamic, c), TOKEN_INIT_STD, dt)
        self.time_proj = Linear(rng, cfg.d_time, c, dt)
        self.d_time = cfg.d_time

    def tokens(self, t=None):
        if self.n_dynamic == 0:
            return self.static
        if t is None:
            raise ValueError("dynamic tokens require a timestamp")
        feat = Tensor(time_features(t, self.d_time).astype(self.static.dtype))
        dyn = self.dynamic + self.time_proj(feat.reshape(1, self.d_time))
        return concatenate([self.static, dyn], axis=0)

    def params(self, prefix="bank"):
        p = {f"{prefix}.static": self.static, f"{prefix}.dynamic": self.dynamic}
        p.update(self.time_proj.params(f"{prefix}.time_proj"))
        return p

    def copy_values(self):
        return {k: v.data.copy() for k, v in self.params().items()}

    def load_values(self, values, prefix="bank"):
        for k, v in self.params(prefix).items():
            v.data = values[k].copy()


def time_features(t, d_time):
    """Sinusoidal features at geometrically spaced periods from 1 to 1e4."""
    k = d_time // 2
    periods = np.power(10.0, 4.0 * np.arange(k) / max(k - 1, 1))
    ang = 2.0 * np.pi * float(t) / periods
    return np.concatenate([np.sin(ang), np.cos(ang)])


def build_mask(n_static, n_dynamic):
    """Boolean (N, N) self-attention mask: entry (query, key) = allowed.

    Static queries see only static keys; dynamic queries see everything.
    """
    n = n_static + n_dynamic
    mask = np.ones((n, n), dtype=bool)
    mask[:n_static, n_static:] = False
    return mask


def additive_mask(mask_bool, dtype=np.float64):
    return np.where(mask_bool, 0.0, -np.inf).astype(dtype)


class TokenSplatModel:
    """Full feed-forward pipeline: images + cameras -> GaussianSet."""

    def __init__(self, cfg: NetworkConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.init_seed)
        dt = cfg.dtype
        c = cfg.channels
        p2 = cfg.patch * cfg.patch
        self.embed_img = Linear(rng, p2 * 3, c, dt)
        self.embed_ray = Linear(rng, p2 * 6, c, dt)
        self.enc_blocks = [EncoderBlock(rng, cfg) for _ in range(cfg.enc_depth)]
        self.enc_norm = LayerNorm(c, dt)
        # shared key/value projections of the image tokens
        self.kv_img = Attention(rng, c, cfg.heads, dt)
        self.dec_blocks = [DecoderBlock(rng, cfg) for _ in range(cfg.dec_depth)]
        self.bank = TokenBank(rng, cfg)
        self.head = Linear(rng, c, N_PER_TOKEN * N_RAW_ATTRS, dt, std=HEAD_INIT_STD)

    # ---- stages --------------------------------------------------------------

    def patchify_embed(self, images, pluckers):
        """(V, H, W, 3) images and (V, H, W, 6) ray maps -> (N_I, C) tokens."""
        p = self.cfg.patch
        img = _patchify(np.asarray(images), p).astype(self.cfg.dtype)
        ray = _patchify(np.asarray(pluckers), p).astype(self.cfg.dtype)
        return self.embed_img(Tensor(img)) + self.embed_ray(Tensor(ray))

    def encode(self, a):
        for blk in self.enc_blocks:
            a = blk(a)
        return self.enc_norm(a)

    def decode(self, tokens, image_tokens, mask=None, shared_kv=None):
        kv = shared_kv if shared_kv is not None else self.kv_img.project_kv(image_tokens)
        add = None if mask is None else additive_mask(mask, self.cfg.dtype)
        x = tokens
        for blk in self.dec_blocks:
            x = blk(x, kv, add)
        return x

    def regress(self, t_out):
        """Decoder outputs -> (N_t * 64, 14) raw attribute matrix."""
        n_t = t_out.shape[0]
        raw = self.head(t_out).reshape(n_t * N_PER_TOKEN, N_RAW_ATTRS)
        token_id = np.repeat(np.arange(n_t), N_PER_TOKEN)
        return raw, token_id

    def forward_raw(self, images, cameras, t=None, bank=None, shared_kv=None,
                    image_tokens=None):
        """Forward pass up to the raw (N_t * 64, 14) attribute matrix.

        `bank`, `shared_kv`, `image_tokens` may be supplied to reuse cached
        state (token tuning).
        """
        bank = bank or self.bank
        if image_tokens is None and shared_kv is None:
            self._check_sizes(images, cameras)
            pluckers = np.stack([plucker_rays(cam) for cam in cameras])
            image_tokens = self.encode(self.patchify_embed(images, pluckers))
        tokens = bank.tokens(t)
        mask = build_mask(bank.n_static, bank.n_dynamic)
        t_out = self.decode(tokens, image_tokens, mask, shared_kv=shared_kv)
        return self.regress(t_out)

    def forward(self, images, cameras, t=None, bank=None, shared_kv=None,
                image_tokens=None):
        """End-to-end forward pass; returns an activated GaussianSet."""
        raw, token_id = self.forward_raw(images, cameras, t=t, bank=bank,
                                         shared_kv=shared_kv,
                                         image_tokens=image_tokens)
        return activate(raw, z_offset=self.cfg.z_offset, token_id=token_id)

    def _check_sizes(self, images, cameras):
        images = np.asarray(images)
        v, h, w = images.shape[0], images.shape[1], images.shape[2]
        if len(cameras) != v:
            raise ValueError(f"{v} images but {len(cameras)} cameras")
        if h % self.cfg.patch or w % self.cfg.patch:
            raise ValueError(f"image {h}x{w} not divisible by patch {self.cfg.patch}")

    # ---- parameters ----------------------------------------------------------

    def params(self):
        p = {}
        p.update(self.embed_img.params("embed_img"))
        p.update(self.embed_ray.params("embed_ray"))
        for i, blk in enumerate(self.enc_blocks):
            p.update(blk.params(f"encoder.{i}"))
        p.update(self.enc_norm.params("encoder.norm"))
        p.update(self.kv_img.params("kv_img"))
        for i, blk in enumerate(self.dec_blocks):
            p.update(blk.params(f"decoder.{i}"))
        p.update(self.bank.params("bank"))
        p.update(self.head.params("head"))
        return p

    def network_params(self):
        """All weights except the token bank (frozen set during token tuning)."""
        return {k: v for k, v in self.params().items() if not k.startswith("bank.")}

    def zero_grad(self):
        for v in self.params().values():
            v.zero_grad()

    def state_arrays(self):
        return {k: v.data for k, v in self.params().items()}

    def load_state(self, arrays):
        for k, v in self.params().items():
            if k not in arrays:
                raise KeyError(f"missing parameter {k}")
            if v.data.shape != arrays[k].shape:
                raise ValueError(f"shape mismatch for {k}: {v.data.shape} vs {arrays[k].shape}")
            v.data = np.ascontiguousarray(arrays[k], dtype=self.cfg.dtype)


def _patchify(arr, p):
    """(V, H, W, C) -> (V * H/p * W/p, p*p*C), view-major then raster order."""
    v, h, w, c = arr.shape
    gh, gw = h // p, w // p
    x = arr.reshape(v, gh, p, gw, p, c)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(v * gh * gw, p * p * c)


def grow_bank(model: TokenSplatModel, n_static, n_dynamic, seed=0):
    """Return a new model with a grown token bank.

    New tokens copy existing ones cyclically plus N(0, 0.01^2) noise; all
    other weights are shared by reference with the source model.
    """
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(**{**model.cfg.to_dict(),
                           "n_static": n_static, "n_dynamic": n_dynamic})
    grown = TokenSplatModel(cfg)
    state = model.state_arrays()
    old_static = state.pop("bank.static")
    old_dynamic = state.pop("bank.dynamic")
    new_state = dict(grown.state_arrays())
    new_state.update(state)

    def expand(old, n_new):
        if n_new == 0:
            return np.zeros((0, cfg.channels), dtype=cfg.dtype)
        if old.shape[0] == 0:
            old = old_static  # seed dynamic tokens from the static bank
        reps = np.take(old, np.arange(n_new) % old.shape[0], axis=0)
        return (reps + rng.normal(0.0, TOKEN_INIT_STD, reps.shape)).astype(cfg.dtype)

    new_state["bank.static"] = expand(old_static, n_static)
    new_state["bank.dynamic"] = expand(old_dynamic, n_dynamic)
    grown.load_state(new_state)
    return grown
