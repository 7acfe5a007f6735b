import numpy as np
import pytest

from tokensplat.autodiff import Tensor
from tokensplat.network import NetworkConfig, TokenSplatModel, grow_bank
from tokensplat.rasterize import RenderConfig
from tokensplat.scenes import SceneSpec, generate_scene
from tokensplat.serialization import load_model_checkpoint, save_model_checkpoint
from tokensplat.training import (ADAM_EPS, AdamW, TrainConfig, lr_schedule,
                                 metrics_to_csv, train, wd_exempt)

TINY_NET = dict(channels=16, enc_depth=1, dec_depth=1, heads=2, n_static=1,
                d_time=8)


@pytest.fixture(scope="module")
def scene():
    return generate_scene(SceneSpec(seed=0, n_views=6, image_size=(16, 16)))


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(warmup_steps=100, total_steps=100)
    with pytest.raises(ValueError):
        TrainConfig(grad_clip_norm=0.0)


def test_lr_schedule_endpoints():
    cfg = TrainConfig(lr_max=4e-4, lr_min=4e-6, warmup_steps=200, total_steps=2000)
    assert lr_schedule(0, cfg) == 0.0
    assert lr_schedule(200, cfg) == pytest.approx(4e-4)
    # midpoint of the decay: cosine at pi/2
    assert lr_schedule((200 + 2000) // 2, cfg) == pytest.approx((4e-4 + 4e-6) / 2)
    assert lr_schedule(2000, cfg) == pytest.approx(4e-6)


def test_lr_schedule_continuous_at_junction():
    cfg = TrainConfig(warmup_steps=200, total_steps=2000)
    assert lr_schedule(199, cfg) == pytest.approx(lr_schedule(200, cfg), rel=0.01)


def test_lr_schedule_bounds():
    cfg = TrainConfig(warmup_steps=10, total_steps=100)
    with pytest.raises(ValueError):
        lr_schedule(-1, cfg)
    with pytest.raises(ValueError):
        lr_schedule(101, cfg)


def test_wd_exemptions():
    assert wd_exempt("encoder.0.norm1.bias")
    assert wd_exempt("encoder.0.norm1.gain")
    assert wd_exempt("decoder.1.self_attn.temp")
    assert wd_exempt("bank.static")
    assert wd_exempt("bank.dynamic")
    assert not wd_exempt("head.weight")
    assert not wd_exempt("bank.time_proj.weight")


def test_adamw_zero_grad_zero_decay_no_change():
    p = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    opt = AdamW({"w": p})
    opt.step(1e-3)
    assert np.array_equal(p.data, [1.0, 2.0])


def test_adamw_single_step_hand_calculation():
    # [DERIVED] g=1 first step: m_hat = 1, v_hat = 1 -> update = lr/(1+eps)
    p = Tensor(np.array([0.5]), requires_grad=True)
    p.grad = np.array([1.0])
    AdamW({"w": p}).step(1e-2)
    expected = 0.5 - 1e-2 * (1.0 / (1.0 + ADAM_EPS))
    assert p.data[0] == pytest.approx(expected, abs=1e-15)


def test_adamw_gradient_clipping():
    p = Tensor(np.zeros(100), requires_grad=True)
    p.grad = np.full(100, 1.0)  # norm 10
    opt = AdamW({"w": p}, grad_clip_norm=1.0)
    opt.step(1e-3)
    # effective grad scaled by 0.1 -> m = 0.1 * 0.1
    assert opt.m["w"][0] == pytest.approx(0.1 * 0.1)


def test_adamw_weight_decay_exemption():
    pw = Tensor(np.array([1.0]), requires_grad=True)
    pb = Tensor(np.array([1.0]), requires_grad=True)
    pw.grad = np.array([0.0])
    pb.grad = np.array([0.0])
    AdamW({"fc.weight": pw, "fc.bias": pb}, weight_decay=0.05).step(1e-2)
    assert pw.data[0] == pytest.approx(1.0 - 1e-2 * 0.05 * 1.0)
    assert pb.data[0] == 1.0


def test_adamw_skips_nonfinite_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    p.grad = np.array([np.nan])
    opt = AdamW({"w": p})
    assert not opt.step(1e-3)
    assert opt.skipped == 1
    assert p.data[0] == 1.0


def test_loss_decreases_over_200_steps(scene):
    # [DERIVED] smoke-test run on the tiny config
    model = TokenSplatModel(NetworkConfig(**TINY_NET))
    cfg = TrainConfig(total_steps=200, warmup_steps=20, batch_size=1,
                      n_context=2, n_target=1, log_interval=200, seed=0)
    state = train([scene], model, cfg)
    first = state.metrics[0]
    # evaluate on a fixed batch: step-0 loss vs final logged loss
    assert state.metrics[-1]["total"] < first["total"] or len(state.metrics) == 1
    # stronger: rerun the fresh model on the same protocol and compare step-0 total
    fresh = TokenSplatModel(NetworkConfig(**TINY_NET))
    s0 = train([scene], fresh, TrainConfig(total_steps=1, warmup_steps=0,
                                           batch_size=1, n_context=2, n_target=1,
                                           log_interval=1, seed=0))
    assert state.metrics[-1]["total"] < s0.metrics[0]["total"]


def test_resume_reproduces_training_bitwise(scene, tmp_path):
    def fresh():
        return TokenSplatModel(NetworkConfig(**TINY_NET))

    # one 6-step schedule; checkpoint captured mid-run at step 4
    cfg = TrainConfig(total_steps=6, warmup_steps=2, batch_size=1, n_context=2,
                      n_target=1, log_interval=1, ckpt_interval=4, seed=0)
    path = tmp_path / "ck.ckpt"

    def snapshot(st):
        if st.step == 4:
            save_model_checkpoint(path, st.model, cfg, st.step, st.optimizer,
                                  st.rng)

    m_full = fresh()
    train([scene], m_full, cfg, on_checkpoint=snapshot)

    # reload the step-4 snapshot and finish the remaining 2 steps
    m_res, meta, opt_arrays = load_model_checkpoint(path)
    opt = AdamW(m_res.params(), cfg.weight_decay, cfg.grad_clip_norm)
    opt.load_state(opt_arrays)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = meta["rng_state"]
    from tokensplat.training import TrainState
    state = TrainState(meta["step"], m_res, opt, rng)
    train([scene], m_res, cfg, state=state)

    for k, v in m_full.state_arrays().items():
        assert v.tobytes() == m_res.state_arrays()[k].tobytes(), k


def test_nonfinite_losses_abort_after_three(scene):
    model = TokenSplatModel(NetworkConfig(**TINY_NET))
    model.head.weight.data[:] = np.inf
    cfg = TrainConfig(total_steps=10, warmup_steps=1, batch_size=1,
                      n_context=2, n_target=1)
    with pytest.raises((RuntimeError, ValueError)):
        train([scene], model, cfg)


def test_token_growth_preserves_copied_behavior(scene):
    model = TokenSplatModel(NetworkConfig(**TINY_NET))
    grown = grow_bank(model, n_static=4, n_dynamic=0, seed=0)
    images = scene.context_images([0, 3])
    cams = [scene.cameras[0], scene.cameras[3]]
    g_old = model.forward(images, cams)
    g_new = grown.forward(images, cams)
    assert len(g_new) == 4 * 64
    # the first token's Gaussians stay close to the source model's
    # (tokens copied + 0.01-std noise through a near-identity decoder);
    # quaternions are excluded: normalizing a near-zero raw 4-vector is
    # direction-unstable, and the rotation is gauge under isotropic scales
    assert np.abs(g_new.to_matrix()[:64, :10] - g_old.to_matrix()[:64, :10]).max() < 0.05
    from tokensplat.gaussians import covariance
    cov_old = covariance(g_old.quats, g_old.scales).data[:64]
    cov_new = covariance(g_new.quats, g_new.scales).data[:64]
    assert np.abs(cov_new - cov_old).max() < 0.05


def test_metrics_csv_deterministic(scene):
    model = TokenSplatModel(NetworkConfig(**TINY_NET))
    cfg = TrainConfig(total_steps=4, warmup_steps=1, batch_size=1, n_context=2,
                      n_target=1, log_interval=2, seed=1)
    st = train([scene], model, cfg)
    csv1 = metrics_to_csv(st.metrics)
    model2 = TokenSplatModel(NetworkConfig(**TINY_NET))
    st2 = train([scene], model2, cfg)
    assert csv1 == metrics_to_csv(st2.metrics)
    assert csv1.splitlines()[0] == "step,lr,mse,ssim_loss,vis_loss,total,psnr"
