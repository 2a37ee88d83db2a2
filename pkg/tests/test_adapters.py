"""Adapter math against naive per-pixel oracles.

The production code computes both streams with im2col and einsum; every
oracle here is a direct loop over image positions so that an indexing bug
in the fast path cannot hide.
"""

from __future__ import annotations

import numpy as np
import pytest

from meddeepfake.adapters import (
    AdapterSet,
    CdfaParams,
    TextAdapterParams,
    cdfa_forward,
    check_bayar_constraint,
    noise_stream,
    project_bayar_constraint,
    spatial_stream,
    text_adapter_forward,
)
from meddeepfake.backbone import BackboneConfig, TokenSequence
from meddeepfake.errors import CheckpointError, ConfigError


def _token_seq(rng, grid=(4, 4), c=8, b=2) -> TokenSequence:
    h, w = grid
    values = rng.standard_normal((b, h * w + 1, c)).astype(np.float32)
    return TokenSequence(values=values, grid=grid)


def _depthwise_oracle(patches: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Per-channel 5x5 cross-correlation, zero padding, plain loops."""
    b, h, w, c = patches.shape
    pad = np.zeros((b, h + 4, w + 4, c), dtype=np.float64)
    pad[:, 2:2 + h, 2:2 + w, :] = patches
    out = np.zeros((b, h, w, c), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            for dy in range(5):
                for dx in range(5):
                    out[:, y, x, :] += pad[:, y + dy, x + dx, :] * kernel[:, dy, dx]
    return out


def _dense_conv_oracle(patches: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Full KxKxCinxCout cross-correlation, zero padding, plain loops."""
    k = kernel.shape[0]
    p = k // 2
    b, h, w, c = patches.shape
    pad = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=np.float64)
    pad[:, p:p + h, p:p + w, :] = patches
    out = np.zeros((b, h, w, kernel.shape[3]), dtype=np.float64)
    for y in range(h):
        for x in range(w):
            for dy in range(k):
                for dx in range(k):
                    out[:, y, x, :] += pad[:, y + dy, x + dx, :] @ kernel[dy, dx]
    return out


# -- constraint projection -------------------------------------------------

def test_projection_all_ones_kernel():
    out = project_bayar_constraint(np.ones((1, 5, 5), dtype=np.float32))
    assert out[0, 2, 2] == -1.0
    expected = np.full((5, 5), 1.0 / 24.0)
    expected[2, 2] = -1.0
    np.testing.assert_allclose(out[0], expected, atol=1e-7)


def test_projection_satisfies_constraint(rng):
    kernel = rng.normal(0.3, 0.5, size=(16, 5, 5)).astype(np.float32)
    out = project_bayar_constraint(kernel)
    assert out.dtype == np.float32
    assert np.all(out[:, 2, 2] == -1.0)
    off_sums = out.sum(axis=(1, 2)) - out[:, 2, 2]
    np.testing.assert_allclose(off_sums, 1.0, atol=1e-6)
    assert check_bayar_constraint(out)


def test_projection_idempotent(rng):
    kernel = rng.normal(0.5, 0.3, size=(8, 5, 5)).astype(np.float32)
    once = project_bayar_constraint(kernel)
    twice = project_bayar_constraint(once)
    assert np.max(np.abs(twice - once)) < 1e-7


def test_projection_preserves_offcenter_ratios():
    kernel = np.zeros((1, 5, 5), dtype=np.float64)
    kernel[0, 0, 0] = 3.0
    kernel[0, 4, 4] = 1.0
    kernel[0, 2, 2] = 99.0  # center value is irrelevant to the projection
    out = project_bayar_constraint(kernel)
    assert out[0, 0, 0] == pytest.approx(0.75)
    assert out[0, 4, 4] == pytest.approx(0.25)
    assert out[0, 2, 2] == -1.0


def test_projection_per_channel_independent(rng):
    kernel = rng.normal(0.4, 0.2, size=(4, 5, 5)).astype(np.float32)
    stacked = project_bayar_constraint(kernel)
    for ch in range(4):
        alone = project_bayar_constraint(kernel[ch:ch + 1])
        np.testing.assert_array_equal(stacked[ch], alone[0])


def test_projection_degenerate_channel_reinitialized(caplog):
    kernel = np.zeros((2, 5, 5), dtype=np.float32)
    kernel[0] = 0.2  # healthy channel
    kernel[1, 0, 0] = 1.0
    kernel[1, 0, 1] = -1.0  # off-center sum is exactly zero
    with caplog.at_level("WARNING"):
        out = project_bayar_constraint(kernel)
    assert any("near-zero off-center sum" in m for m in caplog.messages)
    assert check_bayar_constraint(out)
    np.testing.assert_allclose(out[1, 0, :3], 1.0 / 24.0, atol=1e-7)
    # the healthy channel is untouched by the rescue path
    assert out[0, 0, 0] == pytest.approx(0.2 / (0.2 * 24.0), abs=1e-7)


def test_projection_preserves_float64():
    out = project_bayar_constraint(np.ones((1, 5, 5), dtype=np.float64))
    assert out.dtype == np.float64


def test_check_bayar_constraint_detects_violations():
    good = project_bayar_constraint(np.ones((1, 5, 5), dtype=np.float32))
    assert check_bayar_constraint(good)
    bad_center = good.copy()
    bad_center[0, 2, 2] = -0.5
    assert not check_bayar_constraint(bad_center)
    bad_sum = good.copy()
    bad_sum[0, 0, 0] += 1e-3
    assert not check_bayar_constraint(bad_sum)
    assert check_bayar_constraint(bad_sum, tol=1e-2)


# -- noise stream ----------------------------------------------------------

def test_noise_stream_matches_loop_oracle(rng):
    params = CdfaParams.random(8, seed=1)
    seq = _token_seq(rng, grid=(4, 4), c=8)
    out = noise_stream(seq, params)
    patches = seq.values[:, 1:, :].reshape(2, 4, 4, 8).astype(np.float64)
    z = _depthwise_oracle(patches, params.constrained_kernel.astype(np.float64))
    r = np.maximum(z, 0.0)
    expected = r.reshape(2, 16, 8) @ params.noise_pointwise.astype(np.float64)
    np.testing.assert_allclose(out.values[:, 1:, :].reshape(2, 16, 8),
                               expected, atol=1e-5)
    np.testing.assert_array_equal(out.values[:, 0, :], 0.0)


def test_noise_stream_constant_input_interior_is_flat():
    # a constrained kernel sums to zero over its window, so constant
    # regions produce (near) zero response away from the padded border
    params = CdfaParams.random(4, seed=2)
    h = w = 9
    values = np.full((1, h * w + 1, 4), 0.8, dtype=np.float32)
    out = noise_stream(TokenSequence(values=values, grid=(h, w)), params)
    grid_out = out.values[0, 1:, :].reshape(h, w, 4)
    assert np.max(np.abs(grid_out[4, 4])) < 1e-5


def test_noise_stream_zero_pointwise_zero_output(rng):
    params = CdfaParams.inert(8, seed=3)
    seq = _token_seq(rng, c=8)
    out = noise_stream(seq, params)
    np.testing.assert_array_equal(out.values, 0.0)


# -- spatial stream --------------------------------------------------------

def test_spatial_stream_matches_loop_oracle(rng):
    params = CdfaParams.random(8, seed=4)
    seq = _token_seq(rng, grid=(4, 4), c=8)
    out = spatial_stream(seq, params)
    patches = seq.values[:, 1:, :].reshape(2, 4, 4, 8).astype(np.float64)
    r = np.maximum(patches, 0.0)
    b1 = r @ params.inception1.astype(np.float64)
    b3 = _dense_conv_oracle(r, params.inception3.astype(np.float64))
    b5 = _dense_conv_oracle(r, params.inception5.astype(np.float64))
    cat = np.concatenate([b1, b3, b5], axis=-1)
    expected = cat @ params.inception_fuse.astype(np.float64)
    np.testing.assert_allclose(out.values[:, 1:, :].reshape(2, 4, 4, 8),
                               expected, atol=1e-5)
    np.testing.assert_array_equal(out.values[:, 0, :], 0.0)


def test_spatial_stream_all_negative_input_is_zero(rng):
    params = CdfaParams.random(8, seed=5)
    seq = _token_seq(rng, c=8)
    seq.values[:, 1:, :] = -np.abs(seq.values[:, 1:, :]) - 0.1
    out = spatial_stream(seq, params)
    np.testing.assert_array_equal(out.values, 0.0)


def test_spatial_center_tap_equals_pointwise_branch(rng):
    # a 3x3 kernel that only uses its center tap is the 1x1 branch
    params = CdfaParams.random(8, seed=6)
    center_only = np.zeros_like(params.inception3)
    center_only[1, 1] = params.inception1
    params.inception3[...] = center_only
    seq = _token_seq(rng, c=8)
    patches = seq.values[:, 1:, :].reshape(2, 4, 4, 8)
    r = np.maximum(patches.astype(np.float64), 0.0)
    b1 = r.reshape(2, 16, 8) @ params.inception1.astype(np.float64)
    b3 = _dense_conv_oracle(r, params.inception3.astype(np.float64)).reshape(2, 16, 8)
    np.testing.assert_allclose(b3, b1, atol=1e-12)


# -- fused forward ---------------------------------------------------------

def test_cdfa_class_token_untouched(rng):
    params = CdfaParams.random(8, seed=7)
    seq = _token_seq(rng, c=8)
    out = cdfa_forward(seq, params)
    np.testing.assert_array_equal(out.values[:, 0, :], 0.0)


def test_cdfa_is_spatial_plus_scaled_noise(rng):
    params = CdfaParams.random(8, seed=8)
    assert params.lambda_on == "noise"
    seq = _token_seq(rng, c=8)
    lam = float(params.fusion_scale[0])
    fused = cdfa_forward(seq, params)
    sp = spatial_stream(seq, params)
    nz = noise_stream(seq, params)
    np.testing.assert_allclose(fused.values, sp.values + lam * nz.values, atol=1e-5)


def test_cdfa_lambda_on_spatial_scales_other_stream(rng):
    base = CdfaParams.random(8, seed=9)
    params = CdfaParams(**{k: v.copy() for k, v in base.tensor_dict().items()},
                        streams="both", lambda_on="spatial")
    seq = _token_seq(rng, c=8)
    lam = float(params.fusion_scale[0])
    fused = cdfa_forward(seq, params)
    sp = spatial_stream(seq, params)
    nz = noise_stream(seq, params)
    np.testing.assert_allclose(fused.values, lam * sp.values + nz.values, atol=1e-5)


def test_cdfa_zero_lambda_drops_noise_stream(rng):
    params = CdfaParams.random(8, seed=10)
    params.fusion_scale[0] = 0.0
    seq = _token_seq(rng, c=8)
    fused = cdfa_forward(seq, params)
    sp = spatial_stream(seq, params)
    np.testing.assert_allclose(fused.values, sp.values, atol=1e-6)


def test_cdfa_single_stream_modes(rng):
    base = CdfaParams.random(8, seed=11)
    seq = _token_seq(rng, c=8)
    lam = float(base.fusion_scale[0])

    noise_only = CdfaParams(**{k: v.copy() for k, v in base.tensor_dict().items()},
                            streams="noise", lambda_on="noise")
    out = cdfa_forward(seq, noise_only)
    np.testing.assert_allclose(out.values, lam * noise_stream(seq, base).values,
                               atol=1e-6)

    spatial_only = CdfaParams(**{k: v.copy() for k, v in base.tensor_dict().items()},
                              streams="spatial", lambda_on="noise")
    out = cdfa_forward(seq, spatial_only)
    # lambda rides the noise stream, which is off; spatial passes unscaled
    np.testing.assert_allclose(out.values, spatial_stream(seq, base).values,
                               atol=1e-6)


def test_cdfa_inert_output_is_exactly_zero(rng):
    params = CdfaParams.inert(8, seed=12)
    out = cdfa_forward(_token_seq(rng, c=8), params)
    np.testing.assert_array_equal(out.values, 0.0)


def test_cdfa_translation_equivariant_in_interior(rng):
    # both streams are stride-1 convolutions, so shifting the input grid
    # shifts the output wherever the receptive field misses the border
    params = CdfaParams.random(4, seed=13)
    h = w = 10
    content = rng.standard_normal((1, 4, 4, 4)).astype(np.float32)
    base = np.zeros((1, h, w, 4), dtype=np.float32)
    base[:, 3:7, 3:7, :] = content
    shifted = np.zeros_like(base)
    shifted[:, 4:8, 3:7, :] = content

    def run(grid_vals):
        values = np.zeros((1, h * w + 1, 4), dtype=np.float32)
        values[:, 1:, :] = grid_vals.reshape(1, h * w, 4)
        out = cdfa_forward(TokenSequence(values=values, grid=(h, w)), params)
        return out.values[:, 1:, :].reshape(1, h, w, 4)

    out_base = run(base)
    out_shift = run(shifted)
    np.testing.assert_allclose(out_shift[:, 4:7, 4:6], out_base[:, 3:6, 4:6],
                               atol=1e-5)


def test_cdfa_wrong_token_count_rejected(rng):
    params = CdfaParams.random(4, seed=14)
    bad = TokenSequence(values=rng.standard_normal((1, 10, 4)).astype(np.float32),
                        grid=(4, 4))
    with pytest.raises(ConfigError, match="token count"):
        cdfa_forward(bad, params)


# -- text adapter ----------------------------------------------------------

def test_text_adapter_inert_is_identity(rng):
    params = TextAdapterParams.inert(8, seed=0)
    x = rng.standard_normal((3, 8)).astype(np.float32)
    np.testing.assert_array_equal(text_adapter_forward(x, params), x)


def test_text_adapter_matches_formula(rng):
    params = TextAdapterParams.random(8, seed=1)
    x = rng.standard_normal((3, 8)).astype(np.float32)
    out = text_adapter_forward(x, params)
    h = np.maximum(x @ params.layer1_weight + params.layer1_bias, 0.0)
    expected = x + h @ params.layer2_weight + params.layer2_bias
    np.testing.assert_allclose(out, expected, atol=1e-6)


def test_text_adapter_rows_independent(rng):
    params = TextAdapterParams.random(8, seed=2)
    x = rng.standard_normal((4, 8)).astype(np.float32)
    batch = text_adapter_forward(x, params)
    for i in range(4):
        row = text_adapter_forward(x[i:i + 1], params)
        np.testing.assert_array_equal(batch[i:i + 1], row)


# -- parameter bookkeeping -------------------------------------------------

def test_trainable_tensors_follow_stream_mode():
    full = set(CdfaParams.random(4, seed=0, streams="both").trainable_tensors())
    assert full == {"constrained_kernel", "noise_pointwise", "inception1",
                    "inception3", "inception5", "inception_fuse", "fusion_scale"}

    noise = set(CdfaParams.random(4, seed=0, streams="noise").trainable_tensors())
    assert noise == {"constrained_kernel", "noise_pointwise", "fusion_scale"}

    spatial = set(CdfaParams.random(4, seed=0, streams="spatial").trainable_tensors())
    # lambda rides the noise stream by default, so it is frozen here
    assert spatial == {"inception1", "inception3", "inception5", "inception_fuse"}

    spatial_lam = set(CdfaParams.random(4, seed=0, streams="spatial",
                                        lambda_on="spatial").trainable_tensors())
    assert "fusion_scale" in spatial_lam


def test_bad_stream_mode_rejected():
    with pytest.raises(ConfigError, match="streams"):
        CdfaParams.random(4, seed=0, streams="sideways")
    with pytest.raises(ConfigError, match="lambda_on"):
        CdfaParams.random(4, seed=0, lambda_on="sideways")


def test_adapter_set_tensor_names(tiny_backbone):
    adapters = AdapterSet.random(tiny_backbone.config, seed=0)
    names = set(adapters.state_tensors())
    assert "adapter.visual.1.constrained_kernel" in names
    assert "adapter.visual.5.fusion_scale" in names
    assert "adapter.text.layer1_weight" in names
    assert len(names) == 3 * 7 + 4

    flat = adapters.trainable_tensors()
    assert "visual.3.inception_fuse" in flat
    assert "text.layer2_bias" in flat
    # live references: mutating the flat view mutates the adapter
    flat["visual.3.inception_fuse"][0, 0] = 123.0
    assert adapters.visual[3].inception_fuse[0, 0] == 123.0


def test_adapter_set_round_trip(tiny_backbone):
    adapters = AdapterSet.random(tiny_backbone.config, seed=3)
    tensors = adapters.state_tensors()
    back = AdapterSet.from_tensors(tensors, source="mem")
    for idx, params in adapters.items():
        for name, value in params.tensor_dict().items():
            np.testing.assert_array_equal(getattr(back.visual[idx], name), value)
    np.testing.assert_array_equal(back.text.layer2_weight, adapters.text.layer2_weight)


def test_adapter_set_from_tensors_missing(tiny_backbone):
    adapters = AdapterSet.random(tiny_backbone.config, seed=3)
    tensors = adapters.state_tensors()
    del tensors["adapter.visual.3.noise_pointwise"]
    with pytest.raises(CheckpointError, match="adapter.visual.3.noise_pointwise"):
        AdapterSet.from_tensors(tensors, source="mem")


def test_project_constraints_inplace(tiny_backbone):
    adapters = AdapterSet.random(tiny_backbone.config, seed=4)
    adapters.visual[1].constrained_kernel[:, 0, 0] += 0.05
    assert not check_bayar_constraint(adapters.visual[1].constrained_kernel)
    adapters.project_constraints()
    for _, params in adapters.items():
        assert check_bayar_constraint(params.constrained_kernel)


def test_adapter_channel_width_mismatch_rejected():
    with pytest.raises(ConfigError, match="width"):
        AdapterSet(visual={1: CdfaParams.inert(8, seed=0)},
                   text=TextAdapterParams.inert(16, seed=0))
