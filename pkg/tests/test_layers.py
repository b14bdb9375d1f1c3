from __future__ import annotations

import numpy as np
import pytest

from pds.net import layers
from pds.net.layers import (
    Attention,
    Conv2d,
    Conv3d,
    Film,
    ParamLayout,
    avg_pool2,
    avg_pool2_2d,
    avg_pool2_2d_bwd,
    avg_pool2_bwd,
    silu,
    silu_bwd,
    upsample2,
    upsample2_bwd,
)


def _fd_layer(layer, flat, x, fwd, h=1e-6):
    """Central-difference check of parameter and input gradients through the
    smooth loss 0.5 * sum(y^2)."""
    def value(params, inp):
        return 0.5 * float((fwd(params, inp)[0] ** 2).sum())

    y, cache = fwd(flat, x)
    grad = np.zeros_like(flat)
    dx = layer.bwd(flat, grad, y.copy(), cache)

    rng = np.random.default_rng(0)
    worst = 0.0
    for i in rng.choice(flat.size, size=min(20, flat.size), replace=False):
        p = flat.copy(); p[i] += h
        m = flat.copy(); m[i] -= h
        num = (value(p, x) - value(m, x)) / (2 * h)
        worst = max(worst, abs(num - grad[i]) / max(abs(num), abs(grad[i]), 1e-8))
    flat_x = x.reshape(-1)
    for i in rng.choice(flat_x.size, size=min(20, flat_x.size), replace=False):
        p = flat_x.copy(); p[i] += h
        m = flat_x.copy(); m[i] -= h
        num = (value(flat, p.reshape(x.shape)) - value(flat, m.reshape(x.shape))) / (2 * h)
        worst = max(worst, abs(num - dx.reshape(-1)[i]) / max(abs(num), abs(dx.reshape(-1)[i]), 1e-8))
    return worst


def test_silu_values_and_gradient():
    assert silu(np.array([0.0]))[0] == 0.0
    x = np.array([30.0])
    assert silu(x)[0] == pytest.approx(30.0, abs=1e-10)
    x = np.linspace(-3, 3, 13)
    dy = np.ones_like(x)
    h = 1e-6
    num = (silu(x + h) - silu(x - h)) / (2 * h)
    assert np.allclose(silu_bwd(x, dy), num, atol=1e-8)


def test_sigmoid_is_stable_for_large_inputs():
    x = np.array([-800.0, 800.0])
    y = silu(x)
    assert np.isfinite(y).all()
    assert y[0] == pytest.approx(0.0, abs=1e-10)


def test_conv3d_gradients():
    lo = ParamLayout()
    conv = Conv3d(lo, "c", 2, 3)
    flat = lo.init_vector(0)
    x = np.random.default_rng(1).normal(size=(2, 4, 4, 4))
    worst = _fd_layer(conv, flat, x, lambda f, i: conv.fwd(f, i))
    assert worst < 1e-6


def test_conv3d_known_answer():
    # a centered single-tap kernel copies the input and adds the bias
    lo = ParamLayout()
    conv = Conv3d(lo, "c", 1, 1)
    flat = np.zeros(lo.size)
    lo.view(flat, "c.w")[0, 0, 1, 1, 1] = 1.0
    lo.view(flat, "c.b")[0] = 0.25
    x = np.random.default_rng(2).normal(size=(1, 3, 3, 3))
    y, _ = conv.fwd(flat, x)
    assert np.allclose(y, x + 0.25, atol=1e-12)


def test_conv2d_gradients():
    lo = ParamLayout()
    conv = Conv2d(lo, "c", 2, 3)
    flat = lo.init_vector(3)
    x = np.random.default_rng(4).normal(size=(2, 5, 5))
    worst = _fd_layer(conv, flat, x, lambda f, i: conv.fwd(f, i))
    assert worst < 1e-6


def test_film_zero_params_is_identity():
    lo = ParamLayout()
    film = Film(lo, "f", 3, 4)
    flat = np.zeros(lo.size)
    x = np.random.default_rng(5).normal(size=(3, 2, 2, 2))
    emb = np.random.default_rng(6).normal(size=4)
    y, _ = film.fwd(flat, x, emb)
    assert np.array_equal(y, x)


def test_film_gradients():
    lo = ParamLayout()
    film = Film(lo, "f", 3, 4)
    flat = np.random.default_rng(7).normal(0, 0.3, size=lo.size)
    x = np.random.default_rng(8).normal(size=(3, 2, 2, 2))
    emb = np.random.default_rng(9).normal(size=4)
    worst = _fd_layer(film, flat, x, lambda f, i: film.fwd(f, i, emb))
    assert worst < 1e-6


def test_attention_zero_output_projection_is_identity():
    lo = ParamLayout()
    attn = Attention(lo, "a", 4)
    flat = lo.init_vector(10)  # wo and ob start at zero
    x = np.random.default_rng(11).normal(size=(4, 2, 2, 2))
    y, _ = attn.fwd(flat, x)
    assert np.allclose(y, x, atol=1e-12)


def test_attention_gradients():
    lo = ParamLayout()
    attn = Attention(lo, "a", 3)
    rng = np.random.default_rng(12)
    flat = rng.normal(0, 0.5, size=lo.size)
    x = rng.normal(size=(3, 2, 2, 1))
    worst = _fd_layer(attn, flat, x, lambda f, i: attn.fwd(f, i))
    assert worst < 1e-5


def test_attention_softmax_rows_sum_to_one():
    lo = ParamLayout()
    attn = Attention(lo, "a", 3)
    flat = np.random.default_rng(13).normal(0, 0.5, size=lo.size)
    x = np.random.default_rng(14).normal(size=(3, 2, 1, 1))
    _, cache = attn.fwd(flat, x)
    attn_mat = cache[4]
    assert np.allclose(attn_mat.sum(axis=1), 1.0, atol=1e-12)


def test_pool_and_upsample_shapes_and_values():
    x = np.arange(16, dtype=np.float64).reshape(1, 2, 4, 2)
    p = avg_pool2(x)
    assert p.shape == (1, 1, 2, 1)
    assert p[0, 0, 0, 0] == x[0, :, :2, :].mean()
    u = upsample2(p)
    assert u.shape == (1, 2, 4, 2)
    assert np.all(u[0, :, :2, :] == p[0, 0, 0, 0])
    with pytest.raises(ValueError):
        avg_pool2(np.zeros((1, 3, 2, 2)))


def test_pool_is_adjoint_of_its_backward():
    # <pool(x), y> == <x, pool_bwd(y)> makes the pair a valid linear op
    rng = np.random.default_rng(15)
    x = rng.normal(size=(2, 4, 4, 4))
    y = rng.normal(size=(2, 2, 2, 2))
    lhs = float((avg_pool2(x) * y).sum())
    rhs = float((x * avg_pool2_bwd(y)).sum())
    assert abs(lhs - rhs) < 1e-12


def test_upsample_is_adjoint_of_its_backward():
    rng = np.random.default_rng(16)
    x = rng.normal(size=(2, 2, 2, 2))
    y = rng.normal(size=(2, 4, 4, 4))
    lhs = float((upsample2(x) * y).sum())
    rhs = float((x * upsample2_bwd(y)).sum())
    assert abs(lhs - rhs) < 1e-12


def test_pool2d_adjoint():
    rng = np.random.default_rng(17)
    x = rng.normal(size=(3, 4, 6))
    y = rng.normal(size=(3, 2, 3))
    lhs = float((avg_pool2_2d(x) * y).sum())
    rhs = float((x * avg_pool2_2d_bwd(y)).sum())
    assert abs(lhs - rhs) < 1e-12


def test_param_layout_registration():
    lo = ParamLayout()
    lo.add("a", (2, 3), ("zero",))
    lo.add("b", (4,), ("normal", 1.0))
    assert lo.size == 10
    assert lo.names() == ["a", "b"]
    with pytest.raises(ValueError, match="duplicate"):
        lo.add("a", (1,), ("zero",))
    flat = lo.init_vector(0)
    assert np.all(lo.view(flat, "a") == 0.0)
    assert not np.all(lo.view(flat, "b") == 0.0)
    again = lo.init_vector(0)
    assert np.array_equal(flat, again)
    other = lo.init_vector(1)
    assert not np.array_equal(flat, other)


def test_init_vector_seed_key_forms():
    lo = ParamLayout()
    lo.add("w", (8,), ("normal", 1.0))
    assert np.array_equal(lo.init_vector(7), lo.init_vector([7]))
    assert not np.array_equal(lo.init_vector([7]), lo.init_vector([7, 0]))
