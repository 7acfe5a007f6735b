import numpy as np
import pytest

from tokensplat.autodiff import (ShapeError, Tensor, check_gradients,
                                 concatenate, finite_difference, max_rel_error,
                                 stack, where_mask)


def test_polynomial_derivative():
    x = Tensor(np.array(3.0), requires_grad=True)
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_matmul_shape():
    a = Tensor(np.zeros((2, 3)))
    b = Tensor(np.zeros((3, 4)))
    assert a.matmul(b).shape == (2, 4)


def test_matmul_shape_mismatch_names_op():
    with pytest.raises(ShapeError, match="matmul"):
        Tensor(np.zeros((2, 3))).matmul(Tensor(np.zeros((4, 2))))


def test_add_shape_mismatch_names_shapes():
    with pytest.raises(ShapeError, match=r"add.*\(2, 3\).*\(4,\)"):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros(4))


def test_sum_backward_ones():
    x = Tensor(np.arange(4.0), requires_grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, np.ones(4))


def test_mean_square_backward():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    (x * x).mean().backward()
    assert np.allclose(x.grad, [1.0, 2.0])  # 2x/N


def test_nonscalar_root_rejected():
    x = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        x.backward()


def test_detached_root_rejected():
    with pytest.raises(RuntimeError, match="detached"):
        Tensor(np.array(1.0)).backward()


def test_grad_accumulates_until_zeroed():
    x = Tensor(np.ones(3), requires_grad=True)
    x.sum().backward()
    x.sum().backward()
    assert np.array_equal(x.grad, 2 * np.ones(3))
    x.zero_grad()
    assert x.grad is None


def test_softmax_cross_entropy_gradient():
    # [DERIVED] finite-difference oracle, h=1e-5, 64-bit
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=5)

    def build(t):
        return -(t.reshape(1, 5).softmax()[0, 2].log())

    t = Tensor(x0.copy(), requires_grad=True)
    build(t).backward()
    fd = finite_difference(lambda x: build(Tensor(x)).item(), x0)
    assert max_rel_error(t.grad, fd) <= 1e-6


@pytest.mark.parametrize("name,build", [
    ("div", lambda t: (t / 2.5).sum()),
    ("exp", lambda t: t.exp().sum()),
    ("tanh", lambda t: (t.tanh() * t).sum()),
    ("sqrt", lambda t: (t * t + 1.0).sqrt().sum()),
    ("clamp", lambda t: t.clamp(-0.5, 0.5).sum()),
    ("abs_relu", lambda t: (t.abs() + t.relu() * 2.0).sum()),
    ("pow", lambda t: ((t * t + 1.0) ** 1.5).sum()),
    ("reductions", lambda t: t.mean(axis=0).sum() + t.sum(axis=1, keepdims=True).mean()),
    ("reshape_t", lambda t: (t.reshape(6, 2).T * np.arange(12.0).reshape(2, 6)).sum()),
    ("slice_gather", lambda t: t[1:, ::2].sum() + t.gather(np.array([0, 2]), axis=0).sum()),
    ("softmax", lambda t: (t.softmax(axis=-1) * np.arange(4.0)).sum()),
    ("minmax", lambda t: t.maximum(0.1).sum() + t.minimum(-0.1).sum()),
    ("concat_stack", lambda t: (concatenate([t, t * 2], axis=1).sum()
                                + stack([t, t * t], axis=0).mean())),
])
def test_primitive_gradients(name, build):
    rng = np.random.default_rng(hash(name) % 2**32)
    x0 = rng.normal(size=(3, 4))
    t = Tensor(x0.copy(), requires_grad=True)
    build(t).backward()
    fd = finite_difference(lambda x: build(Tensor(x)).item(), x0)
    assert max_rel_error(t.grad, fd) <= 1e-6, name


def test_broadcast_gradient():
    a = Tensor(np.ones((3, 4)), requires_grad=True)
    b = Tensor(np.arange(4.0), requires_grad=True)
    (a * b).sum().backward()
    assert np.array_equal(a.grad, np.broadcast_to(np.arange(4.0), (3, 4)))
    assert np.array_equal(b.grad, 3 * np.ones(4))


def test_sign_has_zero_gradient():
    x = Tensor(np.array([-2.0, 3.0]), requires_grad=True)
    y = x.sign()
    assert not y.requires_grad
    assert np.array_equal(y.data, [-1.0, 1.0])


def test_relu_gradient_zero_at_zero():
    x = Tensor(np.array([-1.0, 0.0, 1.0]), requires_grad=True)
    x.relu().sum().backward()
    assert np.array_equal(x.grad, [0.0, 0.0, 1.0])


def test_clamp_subgradient_one_at_boundary():
    x = Tensor(np.array([-2.0, -1.0, 0.0, 1.0, 2.0]), requires_grad=True)
    x.clamp(-1.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 1.0, 0.0])


def test_where_mask_routes_gradients():
    mask = np.array([True, False, True])
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    where_mask(mask, a, b).sum().backward()
    assert np.array_equal(a.grad, [1.0, 0.0, 1.0])
    assert np.array_equal(b.grad, [0.0, 1.0, 0.0])


def test_softmax_with_neg_inf_mask_rows():
    logits = np.array([[1.0, -np.inf], [0.5, 0.5]])
    out = Tensor(logits).softmax(axis=-1)
    assert np.allclose(out.data[0], [1.0, 0.0])
    assert np.isfinite(out.data).all()


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(11)
        x = Tensor(rng.normal(size=(5, 5)), requires_grad=True)
        ((x.matmul(x).tanh() * x).sum()).backward()
        return x.grad.copy()

    g1, g2 = run(), run()
    assert g1.tobytes() == g2.tobytes()


def test_check_gradients_contract():
    assert check_gradients(np.array([1.0, 0.0]), np.array([1.0 + 1e-8, 1e-9]))
    assert not check_gradients(np.array([1.1]), np.array([1.0]))
