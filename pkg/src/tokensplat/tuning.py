"""Test-time scaling: context extension, token tuning, direct Gaussian tuning."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .cameras import plucker_rays
from .gaussians import activate
from .losses import LossWeights, mse_loss, psnr, ssim_loss, visibility_loss
from .network import TokenBank, TokenSplatModel
from .rasterize import RenderConfig, render
from .training import AdamW


@dataclass
class TuneConfig:
    steps: int = 50
    lr: float = 1e-4
    target: str = "tokens"  # "tokens" or "gaussians"
    lambda_ssim: float = 0.2
    lambda_vis: float = 1.0
    vis_clip: float = 1.0

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.target not in ("tokens", "gaussians"):
            raise ValueError(f"unknown tuning target {self.target!r}")

    def weights(self):
        return LossWeights(ssim=self.lambda_ssim, vis=self.lambda_vis,
                           vis_clip=self.vis_clip)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def weight_digest(model: TokenSplatModel) -> str:
    """SHA-256 over all non-token network parameters, order-independent."""
    h = hashlib.sha256()
    for name in sorted(model.network_params()):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.network_params()[name].data).tobytes())
    return h.hexdigest()


def context_extend(model, images, cameras, t=None):
    """Plain forward with an arbitrary number of context views."""
    return model.forward(images, cameras, t=t)


def _input_view_loss(gset, images, cameras, weights, render_cfg):
    loss = None
    psnr_sum = 0.0
    for img, cam in zip(images, cameras):
        out = render(gset, cam, render_cfg)
        term = mse_loss(out.image, img) + weights.ssim * ssim_loss(out.image, img)
        loss = term if loss is None else loss + term
        psnr_sum += psnr(out.image, img)
    loss = loss * (1.0 / len(cameras))
    if weights.vis > 0:
        loss = loss + weights.vis * visibility_loss(
            gset.means, list(cameras), clip=weights.vis_clip)
    return loss, psnr_sum / len(cameras)


def _heldout_psnr(gset, heldout):
    if heldout is None:
        return float("nan")
    images, cameras, render_cfg = heldout
    return float(np.mean([psnr(render(gset.detach(), cam, render_cfg).image, img)
                          for img, cam in zip(images, cameras)]))


def token_tune(model: TokenSplatModel, images, cameras, cfg: TuneConfig,
               t=None, render_cfg=None, heldout=None):
    """Optimize only the token embeddings against the input views.

    Image tokens and their shared key/value projections are computed once
    and cached; network weights are untouched.  Returns (bank, history)
    where `bank` holds the best-so-far values by input-view loss.
    """
    render_cfg = render_cfg or RenderConfig()
    weights = cfg.weights()
    model._check_sizes(images, cameras)
    pluckers = np.stack([plucker_rays(cam) for cam in cameras])
    image_tokens = self_detach(model.encode(model.patchify_embed(images, pluckers)))
    kv = tuple(self_detach(x) for x in model.kv_img.project_kv(image_tokens))

    bank = TokenBank(np.random.default_rng(0), model.cfg)
    bank.load_values(model.bank.copy_values())
    tunable = {"bank.static": bank.static, "bank.dynamic": bank.dynamic}
    opt = AdamW(tunable, weight_decay=0.0, grad_clip_norm=None)

    def evaluate():
        gset = model.forward(None, None, t=t, bank=bank, shared_kv=kv)
        return gset, *_input_view_loss(gset, images, cameras, weights, render_cfg)

    gset, loss, in_psnr = evaluate()
    best = (loss.item(), bank.copy_values())
    history = [{"step": 0, "input_psnr": in_psnr,
                "heldout_psnr": _heldout_psnr(gset, heldout)}]
    for step in range(cfg.steps):
        if not np.isfinite(loss.item()):
            break  # return best-so-far
        opt.zero_grad()
        loss.backward()
        opt.step(cfg.lr)
        gset, loss, in_psnr = evaluate()
        if loss.item() < best[0]:
            best = (loss.item(), bank.copy_values())
        history.append({"step": step + 1, "input_psnr": in_psnr,
                        "heldout_psnr": _heldout_psnr(gset, heldout)})
    bank.load_values(best[1])
    return bank, history


def gaussian_tune(raw, images, cameras, cfg: TuneConfig, z_offset=1.0,
                  render_cfg=None, heldout=None, token_id=None):
    """Optimize the pre-activation Gaussian matrix directly.

    Domain constraints hold by construction since updates happen before the
    activation mappings.  Returns (GaussianSet, raw matrix, history) with
    best-so-far selection by input-view loss.
    """
    render_cfg = render_cfg or RenderConfig()
    weights = cfg.weights()
    raw_t = Tensor(np.array(raw.data if isinstance(raw, Tensor) else raw),
                   requires_grad=True)
    opt = AdamW({"raw": raw_t}, weight_decay=0.0, grad_clip_norm=None)

    def evaluate():
        gset = activate(raw_t, z_offset=z_offset, token_id=token_id)
        return gset, *_input_view_loss(gset, images, cameras, weights, render_cfg)

    gset, loss, in_psnr = evaluate()
    best = (loss.item(), raw_t.data.copy())
    history = [{"step": 0, "input_psnr": in_psnr,
                "heldout_psnr": _heldout_psnr(gset, heldout)}]
    for step in range(cfg.steps):
        if not np.isfinite(loss.item()):
            break
        opt.zero_grad()
        loss.backward()
        opt.step(cfg.lr)
        gset, loss, in_psnr = evaluate()
        if loss.item() < best[0]:
            best = (loss.item(), raw_t.data.copy())
        history.append({"step": step + 1, "input_psnr": in_psnr,
                        "heldout_psnr": _heldout_psnr(gset, heldout)})
    best_set = activate(Tensor(best[1]), z_offset=z_offset, token_id=token_id)
    return best_set, best[1], history


def self_detach(x):
    return Tensor(x.data)


def tune_history_csv(history):
    lines = ["step,input_psnr,heldout_psnr"]
    for row in history:
        lines.append(f"{row['step']},{row['input_psnr']!r},{row['heldout_psnr']!r}")
    return "\n".join(lines) + "\n"
