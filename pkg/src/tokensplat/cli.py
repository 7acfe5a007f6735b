"""Command-line surface.

Subcommands: synth, train, eval, render, tune, export-ply, flow, gradcheck.
Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import os
import sys

# thread-count override must land before BLAS spins up its pools
_threads = os.environ.get("TOKENSPLAT_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import numpy as np  # noqa: E402

from . import gradcheck as gradcheck_mod  # noqa: E402
from .config import ConfigError, config_reference, load_run_config  # noqa: E402
from .losses import psnr, ssim  # noqa: E402
from .network import TokenSplatModel  # noqa: E402
from .rasterize import render as render_view  # noqa: E402
from .scenes import generate_dataset, sample_context_target  # noqa: E402
from .serialization import (  # noqa: E402
    export_ply, flow_csv, flow_rows, load_dataset, load_gaussian_checkpoint,
    load_checkpoint, load_model_checkpoint, save_dataset,
    save_gaussian_checkpoint, save_model_checkpoint, write_ppm,
)
from .training import AdamW, TrainState, metrics_to_csv, train  # noqa: E402
from .tuning import gaussian_tune, token_tune, tune_history_csv  # noqa: E402

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def _common(p):
    p.add_argument("--config", help="run-config file with dotted keys")
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="override a config value")
    p.add_argument("--precision", type=int, choices=(32, 64),
                   help="shorthand for --set precision=N")


def build_parser():
    ap = argparse.ArgumentParser(prog="tokensplat")
    ap.add_argument("--config-reference", action="store_true",
                    help="print all config keys with defaults and exit")
    sub = ap.add_subparsers(dest="command")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, help="shorthand for --set scene.seed=N")
    p.add_argument("--scenes", type=int, help="shorthand for --set scene.n_scenes=N")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="PSNR/SSIM over dataset target views")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", help="model or gaussian checkpoint")
    p.add_argument("--oracle", action="store_true",
                   help="evaluate the stored ground-truth Gaussians")
    p.add_argument("--out", help="CSV output path (default: stdout)")

    p = sub.add_parser("render", help="render views from a checkpoint")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--context", default=None, help="comma list of context views")
    p.add_argument("--views", required=True, help="comma list of views to render")
    p.add_argument("--t", type=float, default=None, help="timestamp for dynamic models")
    p.add_argument("--out", required=True)

    p = sub.add_parser("tune", help="test-time tuning on one scene")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("export-ply", help="export a GaussianSet as PLY")
    _common(p)
    p.add_argument("--ckpt", required=True, help="model or gaussian checkpoint")
    p.add_argument("--data", help="dataset (context views) for model checkpoints")
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--t", type=float, default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("flow", help="export per-Gaussian trajectories over time")
    _common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--timestamps", required=True, help="comma list, length >= 2")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="run all finite-difference suites")
    _common(p)
    return ap


def _run_config(args):
    overrides = list(args.overrides)
    if getattr(args, "precision", None):
        overrides.append(f"precision={args.precision}")
    if getattr(args, "seed", None) is not None:
        overrides.append(f"scene.seed={args.seed}")
    if getattr(args, "scenes", None) is not None:
        overrides.append(f"scene.n_scenes={args.scenes}")
    return load_run_config(args.config, overrides)


def _context_split(sample, cfg, rng=None):
    rng = rng or np.random.default_rng(0)
    tc = cfg.train_config()
    return sample_context_target(sample, tc.n_context, tc.n_target, rng)


def cmd_synth(args):
    cfg = _run_config(args)
    samples = generate_dataset(cfg.scene_spec(), cfg.n_scenes(), cfg.render_config())
    save_dataset(args.out, samples, cfg.render_config())
    print(f"wrote {len(samples)} scene(s) to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _run_config(args)
    samples, render_cfg = load_dataset(args.data)
    tc = cfg.train_config()
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "model.ckpt")

    if args.resume:
        model, meta, opt_arrays = load_model_checkpoint(args.resume)
        opt = AdamW(model.params(), tc.weight_decay, tc.grad_clip_norm)
        if opt_arrays:
            opt.load_state(opt_arrays)
        rng = np.random.default_rng(tc.seed)
        if "rng_state" in meta:
            rng.bit_generator.state = meta["rng_state"]
        state = TrainState(meta["step"], model, opt, rng)
    else:
        model = TokenSplatModel(cfg.network_config())
        state = None

    def checkpoint(st):
        save_model_checkpoint(ckpt_path, st.model, tc, st.step, st.optimizer, st.rng)

    def progress(row):
        print(f"step {row['step']:6d} lr {row['lr']:.2e} total {row['total']:.5f} "
              f"psnr {row['psnr']:.2f}")

    state = train(samples, model, tc, render_cfg, state=state,
                  on_checkpoint=checkpoint, progress=progress)
    checkpoint(state)
    with open(os.path.join(args.out, "metrics.csv"), "w") as f:
        f.write(metrics_to_csv(state.metrics))
    return EXIT_OK


def _load_any_checkpoint(path):
    _, kind, _ = load_checkpoint(path)
    if kind == "gaussians":
        gset, _ = load_gaussian_checkpoint(path)
        return None, gset
    model, _, _ = load_model_checkpoint(path)
    return model, None


def _scene_gaussians(model, gset, sample, cfg, t=None, context=None):
    """Resolve the GaussianSet to evaluate for one scene."""
    if gset is not None:
        return gset
    if context is None:
        context, _ = _context_split(sample, cfg)
    cams = [sample.cameras[i] for i in context]
    imgs = sample.context_images(context)
    return model.forward(imgs, cams, t=t if model.cfg.n_dynamic else None)


def cmd_eval(args):
    cfg = _run_config(args)
    samples, render_cfg = load_dataset(args.data)
    if args.oracle == bool(args.ckpt):
        raise ConfigError("eval needs exactly one of --ckpt or --oracle")
    model = gset_fixed = None
    if args.ckpt:
        model, gset_fixed = _load_any_checkpoint(args.ckpt)

    lines = ["scene,t_index,view,psnr,ssim"]
    all_psnr, all_ssim = [], []
    for si, sample in enumerate(samples):
        context, targets = _context_split(sample, cfg)
        for ti, t in enumerate(sample.timestamps):
            if args.oracle:
                gset = sample.gt_set(ti)
            else:
                gset = _scene_gaussians(model, gset_fixed, sample, cfg,
                                        t=t, context=context)
            for vi in targets:
                img = render_view(gset.detach(), sample.cameras[vi], render_cfg).image
                target = sample.images[ti, vi]
                p = psnr(img, target)
                s = ssim(img.detach(), target).item()
                all_psnr.append(p)
                all_ssim.append(s)
                lines.append(f"{si},{ti},{vi},{p!r},{s!r}")
    lines.append(f"mean,,,{float(np.mean(all_psnr))!r},{float(np.mean(all_ssim))!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as f:
            f.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_render(args):
    cfg = _run_config(args)
    samples, render_cfg = load_dataset(args.data)
    sample = samples[args.scene]
    model, gset = _load_any_checkpoint(args.ckpt)
    context = ([int(x) for x in args.context.split(",")]
               if args.context else None)
    gset = _scene_gaussians(model, gset, sample, cfg, t=args.t, context=context)
    os.makedirs(args.out, exist_ok=True)
    for vi in (int(x) for x in args.views.split(",")):
        out = render_view(gset.detach(), sample.cameras[vi], render_cfg)
        write_ppm(os.path.join(args.out, f"view_{vi:03d}.ppm"), out.image.data)
    return EXIT_OK


def cmd_tune(args):
    cfg = _run_config(args)
    samples, render_cfg = load_dataset(args.data)
    sample = samples[args.scene]
    model, _, _ = load_model_checkpoint(args.ckpt)
    tune_cfg = cfg.tune_config()
    context, _ = _context_split(sample, cfg)
    cams = [sample.cameras[i] for i in context]
    imgs = sample.context_images(context)
    t = sample.timestamps[0] if model.cfg.n_dynamic else None
    os.makedirs(args.out, exist_ok=True)

    if tune_cfg.target == "tokens":
        bank, history = token_tune(model, imgs, cams, tune_cfg, t=t,
                                   render_cfg=render_cfg)
        model.bank.load_values(bank.copy_values())
        save_model_checkpoint(os.path.join(args.out, "tuned.ckpt"), model)
    else:
        raw0, token_id = model.forward_raw(imgs, cams, t=t)
        best, _, history = gaussian_tune(raw0.detach(), imgs, cams, tune_cfg,
                                         z_offset=model.cfg.z_offset,
                                         render_cfg=render_cfg,
                                         token_id=token_id)
        save_gaussian_checkpoint(os.path.join(args.out, "tuned.ckpt"), best)
    with open(os.path.join(args.out, "tune.csv"), "w") as f:
        f.write(tune_history_csv(history))
    return EXIT_OK


def cmd_export_ply(args):
    cfg = _run_config(args)
    model, gset = _load_any_checkpoint(args.ckpt)
    if gset is None:
        if not args.data:
            raise ConfigError("export-ply from a model checkpoint needs --data")
        samples, _ = load_dataset(args.data)
        gset = _scene_gaussians(model, None, samples[args.scene], cfg, t=args.t)
    export_ply(gset, args.out)
    return EXIT_OK


def cmd_flow(args):
    cfg = _run_config(args)
    samples, _ = load_dataset(args.data)
    sample = samples[args.scene]
    model, _, _ = load_model_checkpoint(args.ckpt)
    timestamps = [float(x) for x in args.timestamps.split(",")]
    context, _ = _context_split(sample, cfg)
    cams = [sample.cameras[i] for i in context]
    imgs = sample.context_images(context)
    rows = flow_rows(model, imgs, cams, timestamps)
    with open(args.out, "w") as f:
        f.write(flow_csv(rows))
    return EXIT_OK


def cmd_gradcheck(args):
    ok, _ = gradcheck_mod.run_all()
    return EXIT_OK if ok else EXIT_NUMERIC


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
    "render": cmd_render, "tune": cmd_tune, "export-ply": cmd_export_ply,
    "flow": cmd_flow, "gradcheck": cmd_gradcheck,
}


def main(argv=None):
    ap = build_parser()
    args = ap.parse_args(argv)
    if args.config_reference:
        sys.stdout.write(config_reference())
        return EXIT_OK
    if not args.command:
        ap.print_help()
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (RuntimeError, FloatingPointError, np.linalg.LinAlgError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, KeyError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
