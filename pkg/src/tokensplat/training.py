"""AdamW training loop with cosine schedule, warmup, clipping, checkpoints."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .losses import LossWeights, mse_loss, psnr, ssim_loss, visibility_loss
from .rasterize import RenderConfig, render
from .scenes import sample_context_target

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.95
ADAM_EPS = 1e-8

# weight decay never touches biases, normalization parameters, or tokens
WD_EXEMPT_SUFFIXES = (".bias", ".gain", ".temp")
WD_EXEMPT_NAMES = ("bank.static", "bank.dynamic")


@dataclass
class TrainConfig:
    lr_max: float = 4e-4
    lr_min: float = 4e-6
    warmup_steps: int = 200
    total_steps: int = 2000
    weight_decay: float = 0.05
    grad_clip_norm: float = 1.0
    batch_size: int = 4
    n_context: int = 4
    n_target: int = 2
    lambda_ssim: float = 0.2
    lambda_vis: float = 1.0
    vis_clip: float = 1.0
    seed: int = 0
    log_interval: int = 50
    ckpt_interval: int = 1000

    def __post_init__(self):
        if self.warmup_steps >= self.total_steps:
            raise ValueError("warmup_steps must be below total_steps")
        if self.grad_clip_norm <= 0:
            raise ValueError("grad_clip_norm must be positive")

    def weights(self):
        return LossWeights(ssim=self.lambda_ssim, vis=self.lambda_vis,
                           vis_clip=self.vis_clip)

    def to_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lr_schedule(step, cfg: TrainConfig) -> float:
    """Linear warmup to lr_max, then cosine decay to lr_min."""
    if step < 0 or step > cfg.total_steps:
        raise ValueError(f"step {step} outside [0, {cfg.total_steps}]")
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    phase = (step - cfg.warmup_steps) / (cfg.total_steps - cfg.warmup_steps)
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * phase))


def wd_exempt(name: str) -> bool:
    return name.endswith(WD_EXEMPT_SUFFIXES) or name in WD_EXEMPT_NAMES


class AdamW:
    """Decoupled-weight-decay Adam over a named parameter dict."""

    def __init__(self, params: dict, weight_decay=0.0, grad_clip_norm=None,
                 exempt_fn=wd_exempt):
        self.params = params
        self.weight_decay = weight_decay
        self.grad_clip_norm = grad_clip_norm
        self.exempt_fn = exempt_fn
        self.step_count = 0
        self.m = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.v = {k: np.zeros_like(v.data) for k, v in params.items()}
        self.skipped = 0

    def grads_finite(self):
        return all(v.grad is None or np.isfinite(v.grad).all()
                   for v in self.params.values())

    def step(self, lr):
        """One update from the accumulated gradients; skips non-finite grads."""
        if not self.grads_finite():
            self.skipped += 1
            return False
        grads = {k: (v.grad if v.grad is not None else np.zeros_like(v.data))
                 for k, v in self.params.items()}
        if self.grad_clip_norm is not None:
            total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if total > self.grad_clip_norm:
                scale = self.grad_clip_norm / total
                grads = {k: g * scale for k, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - ADAM_BETA1**t
        bc2 = 1.0 - ADAM_BETA2**t
        for k, p in self.params.items():
            g = grads[k]
            self.m[k] = ADAM_BETA1 * self.m[k] + (1.0 - ADAM_BETA1) * g
            self.v[k] = ADAM_BETA2 * self.v[k] + (1.0 - ADAM_BETA2) * g * g
            update = (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + ADAM_EPS)
            if self.weight_decay and not self.exempt_fn(k):
                p.data = p.data - lr * self.weight_decay * p.data
            p.data = p.data - lr * update
        return True

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def state_arrays(self):
        out = {"step_count": np.array([self.step_count], dtype=np.int64)}
        for k in sorted(self.m):
            out[f"m.{k}"] = self.m[k]
            out[f"v.{k}"] = self.v[k]
        return out

    def load_state(self, arrays):
        self.step_count = int(arrays["step_count"][0])
        for k in self.m:
            self.m[k] = arrays[f"m.{k}"].copy()
            self.v[k] = arrays[f"v.{k}"].copy()


def sample_step_loss(model, sample, context, target, t_index, cfg,
                     render_cfg, weights):
    """Forward one scene sample and return (loss Tensor, component floats)."""
    t = sample.timestamps[t_index]
    ctx_cams = [sample.cameras[i] for i in context]
    ctx_imgs = sample.context_images(context)
    gset = model.forward(ctx_imgs, ctx_cams, t=t if model.cfg.n_dynamic else None)

    tgt_imgs = sample.target_images(target, t_index)
    l_photo = None
    mse_sum = ssim_sum = psnr_sum = 0.0
    for j, vi in enumerate(target):
        out = render(gset, sample.cameras[vi], render_cfg)
        l_mse = mse_loss(out.image, tgt_imgs[j])
        l_ssim = ssim_loss(out.image, tgt_imgs[j])
        term = l_mse + weights.ssim * l_ssim
        l_photo = term if l_photo is None else l_photo + term
        mse_sum += l_mse.item()
        ssim_sum += l_ssim.item()
        psnr_sum += psnr(out.image, tgt_imgs[j])
    n = len(target)
    loss = l_photo * (1.0 / n)
    comps = {"mse": mse_sum / n, "ssim_loss": ssim_sum / n,
             "psnr": psnr_sum / n, "vis_loss": 0.0}
    if weights.vis > 0:
        # supervision frusta: context plus target views of this step
        sup = [sample.cameras[i] for i in sorted(set(context) | set(target))]
        l_vis = visibility_loss(gset.means, sup, clip=weights.vis_clip,
                                normalize=weights.vis_normalize)
        loss = loss + weights.vis * l_vis
        comps["vis_loss"] = l_vis.item()
    comps["total"] = loss.item()
    return loss, comps


@dataclass
class TrainState:
    step: int
    model: object
    optimizer: AdamW
    rng: np.random.Generator
    metrics: list = field(default_factory=list)


def train(samples, model, cfg: TrainConfig, render_cfg=None, state=None,
          on_checkpoint=None, progress=None):
    """Optimize `model` on a list of SceneSamples.

    Returns the final TrainState.  `on_checkpoint(state)` fires every
    ckpt_interval steps; metric rows are dicts collected in state.metrics.
    """
    render_cfg = render_cfg or RenderConfig()
    weights = cfg.weights()
    if state is None:
        opt = AdamW(model.params(), cfg.weight_decay, cfg.grad_clip_norm)
        state = TrainState(0, model, opt, np.random.default_rng(cfg.seed))
    opt, rng = state.optimizer, state.rng

    n_timestamps = len(samples[0].timestamps)
    consecutive_bad = 0
    while state.step < cfg.total_steps:
        lr = lr_schedule(state.step, cfg)
        opt.zero_grad()
        batch_comps = []
        loss_total = None
        for _ in range(cfg.batch_size):
            sample = samples[int(rng.integers(len(samples)))]
            context, target = sample_context_target(sample, cfg.n_context,
                                                    cfg.n_target, rng)
            t_index = int(rng.integers(n_timestamps))
            loss, comps = sample_step_loss(model, sample, context, target,
                                           t_index, cfg, render_cfg, weights)
            loss_total = loss if loss_total is None else loss_total + loss
            batch_comps.append(comps)
        loss_mean = loss_total * (1.0 / cfg.batch_size)

        if not np.isfinite(loss_mean.item()):
            consecutive_bad += 1
            if consecutive_bad >= 3:
                raise RuntimeError(
                    f"aborting at step {state.step}: 3 consecutive non-finite losses")
            state.step += 1
            continue
        consecutive_bad = 0

        loss_mean.backward()
        opt.step(lr)
        state.step += 1

        if state.step % cfg.log_interval == 0 or state.step == cfg.total_steps:
            row = {"step": state.step, "lr": lr}
            for key in ("mse", "ssim_loss", "vis_loss", "total", "psnr"):
                row[key] = float(np.mean([c[key] for c in batch_comps]))
            state.metrics.append(row)
            if progress:
                progress(row)
        if on_checkpoint and state.step % cfg.ckpt_interval == 0:
            on_checkpoint(state)
    return state


METRIC_COLUMNS = ("step", "lr", "mse", "ssim_loss", "vis_loss", "total", "psnr")


def metrics_to_csv(rows):
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in METRIC_COLUMNS))
    return "\n".join(lines) + "\n"
