"""Finite-difference checks for every hand-written backward pass.

All checks run in float64 with central differences.  The scalar loss is
``sum(output * direction)`` for a fixed random direction, which makes the
analytic gradient a plain backward call with ``gy = direction``.
"""

from __future__ import annotations

import numpy as np
import pytest

from meddeepfake.adapters import CdfaParams, TextAdapterParams, _cdfa_backward_raw, _cdfa_forward_raw
from meddeepfake.backbone import (
    Backbone,
    BlockParams,
    attention_backward,
    attention_forward,
    gelu,
    _gelu_grad,
    layer_norm_backward,
    layer_norm_forward,
    l2_normalize_backward,
    l2_normalize_forward,
    mlp_backward,
    mlp_forward,
)

H = 1e-6  # fine step: everything here is float64


def _fd_input_grad(fn, x, direction, h=H):
    """Central-difference gradient of sum(fn(x) * direction) w.r.t. x."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = np.sum(fn(x) * direction)
        flat[i] = orig - h
        lo = np.sum(fn(x) * direction)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2 * h)
    return grad


def _assert_close(analytic, numeric, tol=1e-7):
    scale = max(np.max(np.abs(numeric)), 1e-8)
    assert np.max(np.abs(analytic - numeric)) / scale < tol


def _rand(rng, *shape):
    return rng.standard_normal(shape)


def test_gelu_gradient(rng):
    x = np.linspace(-4.0, 4.0, 81)
    fd = (gelu(x + H) - gelu(x - H)) / (2 * H)
    _assert_close(_gelu_grad(x), fd)


def test_layer_norm_input_gradient(rng):
    x = _rand(rng, 2, 5, 8)
    gamma = _rand(rng, 8) * 0.5 + 1.0
    beta = _rand(rng, 8) * 0.1
    direction = _rand(rng, 2, 5, 8)
    _, cache = layer_norm_forward(x, gamma, beta, want_cache=True)
    analytic = layer_norm_backward(cache, direction)
    numeric = _fd_input_grad(
        lambda v: layer_norm_forward(v, gamma, beta)[0], x, direction)
    _assert_close(analytic, numeric, tol=1e-6)


def test_l2_normalize_input_gradient(rng):
    x = _rand(rng, 3, 8) + 0.5
    direction = _rand(rng, 3, 8)
    _, cache = l2_normalize_forward(x, want_cache=True)
    analytic = l2_normalize_backward(cache, direction)
    numeric = _fd_input_grad(lambda v: l2_normalize_forward(v)[0], x, direction)
    _assert_close(analytic, numeric, tol=1e-6)


def _random_block(rng, c, m):
    def w(*shape):
        return _rand(rng, *shape) * (shape[0] ** -0.5)
    return BlockParams(
        ln1_gamma=np.ones(c) + 0.1 * _rand(rng, c), ln1_beta=0.1 * _rand(rng, c),
        qkv_weight=w(c, 3 * c), qkv_bias=0.1 * _rand(rng, 3 * c),
        out_weight=w(c, c), out_bias=0.1 * _rand(rng, c),
        ln2_gamma=np.ones(c) + 0.1 * _rand(rng, c), ln2_beta=0.1 * _rand(rng, c),
        fc1_weight=w(c, m), fc1_bias=0.1 * _rand(rng, m),
        fc2_weight=w(m, c), fc2_bias=0.1 * _rand(rng, c),
    )


def test_attention_input_gradient(rng):
    c, heads = 8, 2
    blk = _random_block(rng, c, 2 * c)
    x = _rand(rng, 2, 5, c)
    direction = _rand(rng, 2, 5, c)
    _, cache = attention_forward(x, blk, heads, want_cache=True)
    analytic = attention_backward(cache, direction, blk, heads)
    numeric = _fd_input_grad(
        lambda v: attention_forward(v, blk, heads)[0], x, direction)
    _assert_close(analytic, numeric, tol=1e-6)


def test_mlp_input_gradient(rng):
    c = 6
    blk = _random_block(rng, c, 3 * c)
    x = _rand(rng, 2, 4, c)
    direction = _rand(rng, 2, 4, c)
    _, cache = mlp_forward(x, blk, want_cache=True)
    analytic = mlp_backward(cache, direction, blk)
    numeric = _fd_input_grad(lambda v: mlp_forward(v, blk)[0], x, direction)
    _assert_close(analytic, numeric, tol=1e-6)


# -- adapter parameter gradients ------------------------------------------

def _cdfa_param_check(streams, lambda_on, rng):
    c, grid = 4, (3, 3)
    params = CdfaParams.random(c, seed=17, streams=streams,
                               lambda_on=lambda_on).cast(np.float64)
    values = _rand(rng, 2, grid[0] * grid[1] + 1, c)
    # keep relu inputs away from their kinks at the FD step size
    direction = _rand(rng, *values.shape)

    out, cache = _cdfa_forward_raw(values, grid, params, want_cache=True)
    g_in, grads = _cdfa_backward_raw(cache, direction, params)
    assert set(grads) == set(params.trainable_tensors())

    numeric_in = _fd_input_grad(
        lambda v: _cdfa_forward_raw(v, grid, params)[0], values, direction)
    _assert_close(g_in, numeric_in, tol=1e-6)

    for name in grads:
        tensor = getattr(params, name)
        numeric = _fd_input_grad(
            lambda _t: _cdfa_forward_raw(values, grid, params)[0],
            tensor, direction)
        _assert_close(grads[name], numeric, tol=1e-6)


def test_cdfa_gradients_both_streams(rng):
    _cdfa_param_check("both", "noise", rng)


def test_cdfa_gradients_lambda_on_spatial(rng):
    _cdfa_param_check("both", "spatial", rng)


def test_cdfa_gradients_noise_only(rng):
    _cdfa_param_check("noise", "noise", rng)


def test_cdfa_gradients_spatial_only(rng):
    _cdfa_param_check("spatial", "noise", rng)


def test_text_adapter_gradients(rng):
    c = 6
    params = TextAdapterParams.random(c, seed=3).cast(np.float64)
    x = _rand(rng, 4, c)
    direction = _rand(rng, 4, c)
    _, cache = params.forward(x, want_cache=True)
    g_x, grads = params.backward(cache, direction)

    numeric_x = _fd_input_grad(lambda v: params.forward(v)[0], x, direction)
    _assert_close(g_x, numeric_x, tol=1e-6)
    for name in ("layer1_weight", "layer1_bias", "layer2_weight", "layer2_bias"):
        tensor = getattr(params, name)
        numeric = _fd_input_grad(lambda _t: params.forward(x)[0], tensor, direction)
        _assert_close(grads[name], numeric, tol=1e-6)


# -- assembled backward through the frozen stack ---------------------------

def test_backward_features_spot_check(rng):
    """FD a handful of adapter entries through the whole tiny model."""
    backbone = Backbone.tiny().cast(np.float64)
    from meddeepfake.adapters import AdapterSet
    adapters = AdapterSet.random(backbone.config, seed=5).cast(np.float64)
    images = _rand(rng, 1, 32, 32, 3) * 0.5
    direction = _rand(rng, 1, 32)

    def loss():
        feat, _ = backbone.encode_image(images, adapters=adapters)
        return np.sum(feat * direction)

    feat, cache = backbone.forward_with_cache(images, adapters=adapters)
    grads, _ = backbone.backward_features(cache, direction, adapters=adapters)

    checked = 0
    spots = [(1, "constrained_kernel", (0, 0, 1)), (1, "noise_pointwise", (2, 3)),
             (3, "inception3", (0, 2, 1, 0)), (3, "fusion_scale", (0,)),
             (5, "inception_fuse", (7, 2)), (5, "inception1", (1, 1))]
    h = 1e-6
    for block_idx, name, entry in spots:
        tensor = getattr(adapters.visual[block_idx], name)
        orig = tensor[entry]
        tensor[entry] = orig + h
        hi = loss()
        tensor[entry] = orig - h
        lo = loss()
        tensor[entry] = orig
        fd = (hi - lo) / (2 * h)
        analytic = grads[block_idx][name][entry]
        assert analytic == pytest.approx(fd, rel=1e-5, abs=1e-9)
        checked += 1
    assert checked == len(spots)
