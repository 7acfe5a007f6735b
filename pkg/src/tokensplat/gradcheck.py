"""Finite-difference verification suites, runnable via the CLI."""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, concatenate, finite_difference, max_rel_error, stack
from .cameras import identity_camera, look_at_camera
from .gaussians import activate, covariance
from .losses import mse_loss, ssim_loss, visibility_loss
from .rasterize import RenderConfig, render

PRIMITIVE_TOL = 1e-6
RASTERIZER_TOL = 1e-4
VISIBILITY_TOL = 1e-5


def _fd_case(name, build, x0, tol, h=1e-5):
    """build(Tensor) -> scalar Tensor; compares backward against central FD."""
    t = Tensor(np.asarray(x0, dtype=np.float64), requires_grad=True)
    build(t).backward()

    def f(x):
        return build(Tensor(np.asarray(x, dtype=np.float64))).item()

    err = max_rel_error(t.grad, finite_difference(f, x0, h=h))
    return {"name": name, "max_rel_error": err, "tol": tol, "passed": err <= tol}


def primitive_cases(seed=0):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    pos = np.abs(x) + 0.5
    w = rng.normal(size=(4, 5))
    wm = rng.normal(size=(3, 5))
    cases = [
        ("add", lambda t: (t + Tensor(y)).sum()),
        ("sub", lambda t: (t - Tensor(y)).sum()),
        ("mul", lambda t: (t * Tensor(y)).sum()),
        ("div", lambda t: (t / Tensor(y + 3.0)).sum()),
        ("neg", lambda t: (-t).sum()),
        ("exp", lambda t: t.exp().sum()),
        ("tanh", lambda t: t.tanh().sum()),
        ("relu", lambda t: (t.relu() * Tensor(y)).sum()),
        ("maximum", lambda t: t.maximum(Tensor(y)).sum()),
        ("minimum", lambda t: t.minimum(Tensor(y)).sum()),
        ("clamp", lambda t: t.clamp(-0.5, 0.5).sum()),
        ("matmul", lambda t: (t.matmul(Tensor(w)) * Tensor(wm)).sum()),
        ("reshape_transpose", lambda t: (t.reshape(4, 3).T * Tensor(y)).sum()),
        ("slice", lambda t: (t[1:, ::2] * 2.0).sum()),
        ("gather", lambda t: t.gather(np.array([2, 0, 2]), axis=0).sum()),
        ("concatenate", lambda t: concatenate([t, t * 2.0], axis=0).sum()),
        ("stack", lambda t: stack([t, t * t], axis=0).sum()),
        ("softmax", lambda t: (t.softmax(axis=-1) * Tensor(y)).sum()),
        ("mean", lambda t: (t.mean(axis=1) * Tensor(y[:, 0])).sum()),
        ("broadcast", lambda t: (t * Tensor(y[0])).sum()),
    ]
    out = [_fd_case(n, b, x, PRIMITIVE_TOL) for n, b in cases]
    out.append(_fd_case("log", lambda t: t.log().sum(), pos, PRIMITIVE_TOL))
    out.append(_fd_case("sqrt", lambda t: t.sqrt().sum(), pos, PRIMITIVE_TOL))
    out.append(_fd_case("pow", lambda t: (t ** 3).sum(), pos, PRIMITIVE_TOL))
    out.append(_fd_case(
        "softmax_cross_entropy",
        lambda t: -(t.reshape(1, 5).softmax()[0, 2].log()),
        rng.normal(size=5), PRIMITIVE_TOL))
    return out


def activation_cases(seed=1):
    rng = np.random.default_rng(seed)
    raw = rng.normal(size=(4, 14)) * 0.5
    wcov = rng.normal(size=(4, 3, 3))

    def build(t):
        gs = activate(t)
        return ((gs.means * gs.means).sum() + gs.colors.sum() + gs.scales.sum()
                + gs.opacities.sum() + (gs.quats * gs.quats * gs.quats).sum())

    def build_cov(t):
        gs = activate(t)
        return (covariance(gs.quats, gs.scales) * Tensor(wcov)).sum()

    return [_fd_case("activate", build, raw, PRIMITIVE_TOL),
            _fd_case("covariance", build_cov, raw, PRIMITIVE_TOL)]


def rasterizer_case(seed=2):
    rng = np.random.default_rng(seed)
    cam = identity_camera(16, 16, focal=16.0)
    raw = rng.normal(size=(4, 14)) * 0.3
    raw[:, 6:9] -= 2.5  # keep splats small
    target = rng.uniform(size=(16, 16, 3))
    cfg = RenderConfig(t_stop=0.0, background=(0.2, 0.3, 0.4))

    def build(t):
        out = render(activate(t), cam, cfg)
        return mse_loss(out.image, target)

    return [_fd_case("rasterizer_raw14", build, raw, RASTERIZER_TOL)]


def visibility_case(seed=3):
    rng = np.random.default_rng(seed)
    mu = rng.normal(size=(8, 3)) * 0.8
    mu[:, 2] += 1.0
    cams = [identity_camera(16, 16, 16.0),
            look_at_camera((0.6, -0.2, 0.1), (0, 0, 1), 16, 16, 16.0)]
    return [_fd_case("visibility_loss",
                     lambda t: visibility_loss(t, cams), mu, VISIBILITY_TOL)]


def ssim_case(seed=4):
    rng = np.random.default_rng(seed)
    a = rng.uniform(size=(12, 12, 3))
    b = rng.uniform(size=(12, 12, 3))
    return [_fd_case("ssim_loss", lambda t: ssim_loss(t, b), a, RASTERIZER_TOL)]


def run_all(report=print):
    results = []
    results += primitive_cases()
    results += activation_cases()
    results += rasterizer_case()
    results += visibility_case()
    results += ssim_case()
    all_ok = True
    for r in results:
        status = "PASS" if r["passed"] else "FAIL"
        report(f"[{status}] {r['name']}: max rel err {r['max_rel_error']:.3e} "
               f"(tol {r['tol']:.0e})")
        all_ok &= r["passed"]
    return all_ok, results
