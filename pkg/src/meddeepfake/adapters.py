"""Dual-stream visual adapter and the two-layer text adapter.

The visual adapter reads a transformer block's MLP input, lifts the patch
tokens back onto their 2-D grid, and runs two streams:

    noise:   pointwise( relu( constrained_depthwise_5x5(f) ) )
    spatial: fuse_1x1( concat( conv1x1(r), conv3x3(r), conv5x5(r) ) ),
             r = relu(f)

fused as ``spatial + lambda * noise`` with a learnable scalar.  The class
token bypasses both streams (its adapter output is zero; convolution has
no grid position for it).  Which stream the scalar multiplies is a config
switch (``lambda_on``) because the source material is self-contradictory
on that point; the default scales the noise stream.

The constrained depthwise kernel carries the Bayar constraint per channel
(center -1, off-center sum 1), re-projected after every optimizer step so
the filter stays a predictor-error residual extractor rather than drifting
into a semantic feature.

All convolutions are zero-padded, stride 1, implemented via explicit
patch extraction (im2col) so forward and backward are plain matmuls.
Adapters start inert: both output projections are zero, so an untrained
adapter leaves the frozen backbone's features untouched.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from .backbone import BackboneConfig, TokenSequence
from .errors import CheckpointError, ConfigError

log = logging.getLogger(__name__)

STREAM_MODES = ("both", "spatial", "noise")
LAMBDA_STREAMS = ("noise", "spatial")

_DEGENERATE_OFF_SUM = 1e-8


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


def project_bayar_constraint(kernel: np.ndarray) -> np.ndarray:
    """Project each channel's 5x5 kernel onto the constraint set.

    Off-center weights are rescaled to sum to 1, then the center is set to
    -1.  Channels whose off-center sum is numerically zero cannot be
    rescaled; they are reinitialized to the uniform high-pass kernel
    (every off-center weight 1/24) with a warning.
    """
    kernel = np.asarray(kernel)
    if kernel.ndim != 3 or kernel.shape[1:] != (5, 5):
        raise ConfigError(f"expected a (C, 5, 5) kernel, got shape {kernel.shape}")
    # the division runs in float64 so a float32 kernel re-sums to 1 well
    # within the 1e-6 contract
    out = kernel.astype(np.float64)
    out[:, 2, 2] = 0.0
    off_sum = out.sum(axis=(1, 2))
    bad = np.abs(off_sum) < _DEGENERATE_OFF_SUM
    if np.any(bad):
        log.warning("constraint projection: %d channel(s) with near-zero off-center "
                    "sum, reset to uniform 1/24", int(bad.sum()))
        out[bad] = 1.0 / 24.0
        off_sum = np.where(bad, 1.0, off_sum)
    out /= off_sum[:, None, None]
    out[:, 2, 2] = -1.0
    return out.astype(kernel.dtype)


def check_bayar_constraint(kernel: np.ndarray, tol: float = 1e-6) -> bool:
    center = kernel[:, 2, 2]
    off = kernel.sum(axis=(1, 2)) - center
    return bool(np.all(np.abs(center + 1.0) <= tol) and np.all(np.abs(off - 1.0) <= tol))


# --------------------------------------------------------------------------
# im2col plumbing (zero padding, stride 1, odd kernel)
# --------------------------------------------------------------------------

def _im2col(grid_vals: np.ndarray, k: int) -> np.ndarray:
    """(B, H, W, C) -> (B, H, W, k*k, C) patch neighborhoods."""
    b, h, w, c = grid_vals.shape
    p = k // 2
    padded = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=grid_vals.dtype)
    padded[:, p:p + h, p:p + w, :] = grid_vals
    cols = np.empty((b, h, w, k * k, c), dtype=grid_vals.dtype)
    for dy in range(k):
        for dx in range(k):
            cols[:, :, :, dy * k + dx, :] = padded[:, dy:dy + h, dx:dx + w, :]
    return cols


def _col2im(g_cols: np.ndarray, h: int, w: int, k: int) -> np.ndarray:
    """Adjoint of _im2col: scatter-add neighborhoods back to the grid."""
    b, _, _, _, c = g_cols.shape
    p = k // 2
    padded = np.zeros((b, h + 2 * p, w + 2 * p, c), dtype=g_cols.dtype)
    for dy in range(k):
        for dx in range(k):
            padded[:, dy:dy + h, dx:dx + w, :] += g_cols[:, :, :, dy * k + dx, :]
    return padded[:, p:p + h, p:p + w, :]


def _tokens_to_grid(values: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    b, t, c = values.shape
    h, w = grid
    if t != h * w + 1:
        raise ConfigError(f"token count {t} does not match grid {grid} "
                          f"(expected {h * w + 1} incl. class token)")
    return values[:, 1:, :].reshape(b, h, w, c)


def _grid_to_tokens(patch_out: np.ndarray, like: np.ndarray) -> np.ndarray:
    b, h, w, c = patch_out.shape
    out = np.zeros_like(like)
    out[:, 1:, :] = patch_out.reshape(b, h * w, c)
    return out


# --------------------------------------------------------------------------
# parameter containers
# --------------------------------------------------------------------------

@dataclass
class CdfaParams:
    """One visual adapter's weights.

    ``streams`` restricts the forward pass for ablations ("both",
    "spatial", "noise"); ``lambda_on`` selects which stream the fusion
    scalar multiplies.  Both are behavior switches, not tensors.
    """

    constrained_kernel: np.ndarray      # (C, 5, 5) depthwise, Bayar-constrained
    noise_pointwise: np.ndarray         # (C, C)
    inception1: np.ndarray              # (C, C)
    inception3: np.ndarray              # (3, 3, C, C)
    inception5: np.ndarray              # (5, 5, C, C)
    inception_fuse: np.ndarray          # (3C, C)
    fusion_scale: np.ndarray            # (1,) the learnable lambda
    streams: str = "both"
    lambda_on: str = "noise"

    def __post_init__(self) -> None:
        c = self.constrained_kernel.shape[0]
        expected = {
            "constrained_kernel": (c, 5, 5),
            "noise_pointwise": (c, c),
            "inception1": (c, c),
            "inception3": (3, 3, c, c),
            "inception5": (5, 5, c, c),
            "inception_fuse": (3 * c, c),
            "fusion_scale": (1,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
        if self.streams not in STREAM_MODES:
            raise ConfigError(f"streams must be one of {STREAM_MODES}, got "
                              f"{self.streams!r}")
        if self.lambda_on not in LAMBDA_STREAMS:
            raise ConfigError(f"lambda_on must be one of {LAMBDA_STREAMS}, got "
                              f"{self.lambda_on!r}")
        if not np.all(np.isfinite(self.fusion_scale)):
            raise ConfigError("fusion scale is not finite")

    @property
    def channel_dim(self) -> int:
        return self.constrained_kernel.shape[0]

    @classmethod
    def inert(cls, channel_dim: int, seed: int = 0, streams: str = "both",
              lambda_on: str = "noise") -> "CdfaParams":
        """Default init: zero output projections, constrained random kernel,
        Kaiming inception branches, lambda = 1.  Output is exactly zero."""
        rng = np.random.default_rng(seed)
        c = channel_dim
        # off-center weights start positive so the projection divides by an
        # O(1) sum instead of amplifying a near-cancelling one; float32 then
        # holds the constraint comfortably within 1e-6 during training
        kernel = project_bayar_constraint(
            np.abs(_kaiming_uniform(rng, (c, 5, 5), 25)))
        return cls(
            constrained_kernel=kernel,
            noise_pointwise=np.zeros((c, c), dtype=np.float32),
            inception1=_kaiming_uniform(rng, (c, c), c),
            inception3=_kaiming_uniform(rng, (3, 3, c, c), 9 * c),
            inception5=_kaiming_uniform(rng, (5, 5, c, c), 25 * c),
            inception_fuse=np.zeros((3 * c, c), dtype=np.float32),
            fusion_scale=np.ones(1, dtype=np.float32),
            streams=streams, lambda_on=lambda_on,
        )

    @classmethod
    def random(cls, channel_dim: int, seed: int = 0, streams: str = "both",
               lambda_on: str = "noise") -> "CdfaParams":
        """Every tensor non-trivial (gradient-check fixtures)."""
        rng = np.random.default_rng(seed)
        c = channel_dim
        return cls(
            constrained_kernel=project_bayar_constraint(
                rng.normal(0.3, 0.15, size=(c, 5, 5)).astype(np.float32)),
            noise_pointwise=rng.normal(0.0, 0.2, size=(c, c)).astype(np.float32),
            inception1=rng.normal(0.0, 0.2, size=(c, c)).astype(np.float32),
            inception3=rng.normal(0.0, 0.1, size=(3, 3, c, c)).astype(np.float32),
            inception5=rng.normal(0.0, 0.05, size=(5, 5, c, c)).astype(np.float32),
            inception_fuse=rng.normal(0.0, 0.1, size=(3 * c, c)).astype(np.float32),
            fusion_scale=np.asarray([rng.uniform(0.5, 1.5)], dtype=np.float32),
            streams=streams, lambda_on=lambda_on,
        )

    def tensor_dict(self) -> dict[str, np.ndarray]:
        return {
            "constrained_kernel": self.constrained_kernel,
            "noise_pointwise": self.noise_pointwise,
            "inception1": self.inception1,
            "inception3": self.inception3,
            "inception5": self.inception5,
            "inception_fuse": self.inception_fuse,
            "fusion_scale": self.fusion_scale,
        }

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        """Live parameter references, restricted to the active streams."""
        noise_keys = ["constrained_kernel", "noise_pointwise"]
        spatial_keys = ["inception1", "inception3", "inception5", "inception_fuse"]
        keys: list[str] = []
        if self.streams in ("both", "noise"):
            keys += noise_keys
        if self.streams in ("both", "spatial"):
            keys += spatial_keys
        if self.streams == "both" or self.streams == self.lambda_on:
            keys.append("fusion_scale")
        all_tensors = self.tensor_dict()
        return {k: all_tensors[k] for k in keys}

    def cast(self, dtype) -> "CdfaParams":
        return CdfaParams(
            **{k: np.asarray(v, dtype=dtype) for k, v in self.tensor_dict().items()},
            streams=self.streams, lambda_on=self.lambda_on)

    def copy(self) -> "CdfaParams":
        return CdfaParams(
            **{k: v.copy() for k, v in self.tensor_dict().items()},
            streams=self.streams, lambda_on=self.lambda_on)

    # adapter interface used by the backbone's block loop
    def forward(self, values: np.ndarray, grid: tuple[int, int],
                want_cache: bool = False):
        return _cdfa_forward_raw(values, grid, self, want_cache=want_cache)

    def backward(self, cache, g_out: np.ndarray):
        return _cdfa_backward_raw(cache, g_out, self)


@dataclass
class TextAdapterParams:
    """Two linear layers with a ReLU between and a residual around both."""

    layer1_weight: np.ndarray   # (C, C)
    layer1_bias: np.ndarray     # (C,)
    layer2_weight: np.ndarray   # (C, C)
    layer2_bias: np.ndarray     # (C,)

    def __post_init__(self) -> None:
        c = self.layer1_weight.shape[0]
        expected = {
            "layer1_weight": (c, c), "layer1_bias": (c,),
            "layer2_weight": (c, c), "layer2_bias": (c,),
        }
        for name, shape in expected.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ConfigError(f"{name}: expected shape {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"{name} has non-finite entries")

    @property
    def channel_dim(self) -> int:
        return self.layer1_weight.shape[0]

    @classmethod
    def inert(cls, channel_dim: int, seed: int = 0) -> "TextAdapterParams":
        """Zero second layer: residual identity at init."""
        rng = np.random.default_rng(seed)
        c = channel_dim
        return cls(
            layer1_weight=_kaiming_uniform(rng, (c, c), c),
            layer1_bias=np.zeros(c, dtype=np.float32),
            layer2_weight=np.zeros((c, c), dtype=np.float32),
            layer2_bias=np.zeros(c, dtype=np.float32),
        )

    @classmethod
    def random(cls, channel_dim: int, seed: int = 0) -> "TextAdapterParams":
        rng = np.random.default_rng(seed)
        c = channel_dim
        return cls(
            layer1_weight=rng.normal(0.0, 0.3, size=(c, c)).astype(np.float32),
            layer1_bias=rng.normal(0.0, 0.1, size=c).astype(np.float32),
            layer2_weight=rng.normal(0.0, 0.3, size=(c, c)).astype(np.float32),
            layer2_bias=rng.normal(0.0, 0.1, size=c).astype(np.float32),
        )

    def tensor_dict(self) -> dict[str, np.ndarray]:
        return {
            "layer1_weight": self.layer1_weight, "layer1_bias": self.layer1_bias,
            "layer2_weight": self.layer2_weight, "layer2_bias": self.layer2_bias,
        }

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        return self.tensor_dict()

    def cast(self, dtype) -> "TextAdapterParams":
        return TextAdapterParams(
            **{k: np.asarray(v, dtype=dtype) for k, v in self.tensor_dict().items()})

    def copy(self) -> "TextAdapterParams":
        return TextAdapterParams(
            **{k: v.copy() for k, v in self.tensor_dict().items()})

    def forward(self, x: np.ndarray, want_cache: bool = False):
        """x (..., C) -> x + layer2(relu(layer1(x)))."""
        if x.shape[-1] != self.channel_dim:
            raise ConfigError(f"text adapter expects width {self.channel_dim}, "
                              f"got {x.shape}")
        h = x @ self.layer1_weight + self.layer1_bias
        r = np.maximum(h, 0.0)
        y = x + r @ self.layer2_weight + self.layer2_bias
        cache = (x, h > 0, r) if want_cache else None
        return y, cache

    def backward(self, cache, gy: np.ndarray):
        x, mask, r = cache
        lead = gy.reshape(-1, gy.shape[-1])
        r2 = r.reshape(-1, r.shape[-1])
        g_r = gy @ self.layer2_weight.T
        g_h = g_r * mask
        h2 = g_h.reshape(-1, g_h.shape[-1])
        x2 = x.reshape(-1, x.shape[-1])
        grads = {
            "layer2_weight": r2.T @ lead,
            "layer2_bias": lead.sum(axis=0),
            "layer1_weight": x2.T @ h2,
            "layer1_bias": h2.sum(axis=0),
        }
        g_x = gy + g_h @ self.layer1_weight.T
        return g_x, grads


# --------------------------------------------------------------------------
# stream forwards / backwards on raw token arrays
# --------------------------------------------------------------------------

def _noise_forward(values, grid, params: CdfaParams, want_cache=False):
    patches = _tokens_to_grid(values, grid)
    b, h, w, c = patches.shape
    cols = _im2col(patches, 5)
    kflat = params.constrained_kernel.reshape(c, 25)
    z = np.einsum("bhwkc,ck->bhwc", cols, kflat)
    r = np.maximum(z, 0.0)
    out_p = r.reshape(b, h * w, c) @ params.noise_pointwise
    cache = (cols, z > 0, r) if want_cache else None
    return out_p.reshape(b, h, w, c), cache


def _noise_backward(cache, g_grid, params: CdfaParams):
    cols, mask, r = cache
    b, h, w, c = g_grid.shape
    g_flat = g_grid.reshape(b, h * w, c)
    r_flat = r.reshape(b, h * w, c)
    g_pointwise = np.einsum("bnc,bnd->cd", r_flat, g_flat)
    g_r = (g_flat @ params.noise_pointwise.T).reshape(b, h, w, c)
    g_z = g_r * mask
    g_kernel = np.einsum("bhwc,bhwkc->ck", g_z, cols).reshape(c, 5, 5)
    kflat = params.constrained_kernel.reshape(c, 25)
    g_cols = np.einsum("bhwc,ck->bhwkc", g_z, kflat)
    g_patches = _col2im(g_cols, h, w, 5)
    return g_patches, {"constrained_kernel": g_kernel, "noise_pointwise": g_pointwise}


def _spatial_forward(values, grid, params: CdfaParams, want_cache=False):
    patches = _tokens_to_grid(values, grid)
    b, h, w, c = patches.shape
    r = np.maximum(patches, 0.0)
    r_flat = r.reshape(b, h * w, c)
    b1 = r_flat @ params.inception1
    cols3 = _im2col(r, 3).reshape(b, h * w, 9 * c)
    b3 = cols3 @ params.inception3.reshape(9 * c, c)
    cols5 = _im2col(r, 5).reshape(b, h * w, 25 * c)
    b5 = cols5 @ params.inception5.reshape(25 * c, c)
    cat = np.concatenate([b1, b3, b5], axis=-1)
    out_p = cat @ params.inception_fuse
    cache = (patches > 0, r_flat, cols3, cols5, cat) if want_cache else None
    return out_p.reshape(b, h, w, c), cache


def _spatial_backward(cache, g_grid, params: CdfaParams):
    mask, r_flat, cols3, cols5, cat = cache
    b, h, w, c = g_grid.shape
    g_flat = g_grid.reshape(b, h * w, c)
    g_fuse = np.einsum("bnm,bnc->mc", cat, g_flat)
    g_cat = g_flat @ params.inception_fuse.T
    g_b1, g_b3, g_b5 = g_cat[..., :c], g_cat[..., c:2 * c], g_cat[..., 2 * c:]
    g_w1 = np.einsum("bnc,bnd->cd", r_flat, g_b1)
    g_w3 = np.einsum("bnm,bnc->mc", cols3, g_b3).reshape(3, 3, c, c)
    g_w5 = np.einsum("bnm,bnc->mc", cols5, g_b5).reshape(5, 5, c, c)
    g_r = g_b1 @ params.inception1.T
    g_r = g_r.reshape(b, h, w, c)
    g_r = g_r + _col2im((g_b3 @ params.inception3.reshape(9 * c, c).T)
                        .reshape(b, h, w, 9, c), h, w, 3)
    g_r = g_r + _col2im((g_b5 @ params.inception5.reshape(25 * c, c).T)
                        .reshape(b, h, w, 25, c), h, w, 5)
    g_patches = g_r * mask
    grads = {"inception1": g_w1, "inception3": g_w3, "inception5": g_w5,
             "inception_fuse": g_fuse}
    return g_patches, grads


def _cdfa_forward_raw(values, grid, params: CdfaParams, want_cache=False):
    lam = params.fusion_scale.reshape(())
    noise_p = spatial_p = None
    noise_cache = spatial_cache = None
    if params.streams in ("both", "noise"):
        noise_p, noise_cache = _noise_forward(values, grid, params, want_cache)
    if params.streams in ("both", "spatial"):
        spatial_p, spatial_cache = _spatial_forward(values, grid, params, want_cache)

    def scaled(stream_name, out_p):
        return lam * out_p if params.lambda_on == stream_name else out_p

    if params.streams == "both":
        out_p = scaled("spatial", spatial_p) + scaled("noise", noise_p)
    elif params.streams == "noise":
        out_p = scaled("noise", noise_p)
    else:
        out_p = scaled("spatial", spatial_p)
    out = _grid_to_tokens(out_p, values)
    cache = None
    if want_cache:
        cache = {"noise": noise_cache, "spatial": spatial_cache,
                 "noise_out": noise_p, "spatial_out": spatial_p, "grid": grid}
    return out, cache


def _cdfa_backward_raw(cache, g_out, params: CdfaParams):
    """Returns (gradient w.r.t. input tokens, grads for trainable tensors)."""
    grid = cache["grid"]
    h, w = grid
    b = g_out.shape[0]
    c = g_out.shape[-1]
    g_grid = g_out[:, 1:, :].reshape(b, h, w, c)
    lam = params.fusion_scale.reshape(())

    grads: dict[str, np.ndarray] = {}
    g_patches = np.zeros((b, h, w, c), dtype=g_out.dtype)
    lam_grad = None
    for name, out_p, stream_cache, backward in (
            ("noise", cache["noise_out"], cache["noise"], _noise_backward),
            ("spatial", cache["spatial_out"], cache["spatial"], _spatial_backward)):
        if out_p is None:
            continue
        g_stream = g_grid
        if params.lambda_on == name:
            lam_grad = np.asarray([np.sum(g_grid * out_p)], dtype=g_out.dtype)
            g_stream = lam * g_grid
        g_p, stream_grads = backward(stream_cache, g_stream, params)
        g_patches += g_p
        grads.update(stream_grads)
    if lam_grad is not None and (params.streams == "both"
                                 or params.streams == params.lambda_on):
        grads["fusion_scale"] = lam_grad
    g_in = np.zeros((b, h * w + 1, c), dtype=g_out.dtype)
    g_in[:, 1:, :] = g_patches.reshape(b, h * w, c)
    return g_in, grads


# --------------------------------------------------------------------------
# spec-level ops on TokenSequence
# --------------------------------------------------------------------------

def noise_stream(f: TokenSequence, params: CdfaParams) -> TokenSequence:
    out_p, _ = _noise_forward(f.values, f.grid, params)
    return TokenSequence(values=_grid_to_tokens(out_p, f.values), grid=f.grid)


def spatial_stream(f: TokenSequence, params: CdfaParams) -> TokenSequence:
    out_p, _ = _spatial_forward(f.values, f.grid, params)
    return TokenSequence(values=_grid_to_tokens(out_p, f.values), grid=f.grid)


def cdfa_forward(f: TokenSequence, params: CdfaParams) -> TokenSequence:
    out, _ = _cdfa_forward_raw(f.values, f.grid, params)
    return TokenSequence(values=out, grid=f.grid)


def text_adapter_forward(embedding: np.ndarray, params: TextAdapterParams) -> np.ndarray:
    out, _ = params.forward(np.asarray(embedding))
    return out


# --------------------------------------------------------------------------
# the full trainable set: one visual adapter per injection block + text
# --------------------------------------------------------------------------

ADAPTER_PREFIX = "adapter."


@dataclass
class AdapterSet:
    """Everything that trains: visual adapters keyed by block index, plus
    the text adapter."""

    visual: dict[int, CdfaParams]
    text: TextAdapterParams

    def __post_init__(self) -> None:
        dims = {a.channel_dim for a in self.visual.values()}
        dims.add(self.text.channel_dim)
        if len(dims) != 1:
            raise ConfigError(f"adapter channel widths disagree: {sorted(dims)}")

    @classmethod
    def inert(cls, config: BackboneConfig, seed: int = 0, streams: str = "both",
              lambda_on: str = "noise") -> "AdapterSet":
        visual = {i: CdfaParams.inert(config.channel_dim, seed=seed + i,
                                      streams=streams, lambda_on=lambda_on)
                  for i in config.adapter_block_indices}
        return cls(visual=visual,
                   text=TextAdapterParams.inert(config.channel_dim, seed=seed + 1000))

    @classmethod
    def random(cls, config: BackboneConfig, seed: int = 0, streams: str = "both",
               lambda_on: str = "noise") -> "AdapterSet":
        visual = {i: CdfaParams.random(config.channel_dim, seed=seed + i,
                                       streams=streams, lambda_on=lambda_on)
                  for i in config.adapter_block_indices}
        return cls(visual=visual,
                   text=TextAdapterParams.random(config.channel_dim, seed=seed + 1000))

    def items(self) -> Iterator[tuple[int, CdfaParams]]:
        return iter(sorted(self.visual.items()))

    def __contains__(self, idx: int) -> bool:
        return idx in self.visual

    def __getitem__(self, idx: int) -> CdfaParams:
        return self.visual[idx]

    def trainable_tensors(self) -> dict[str, np.ndarray]:
        """Flat name -> live array map for the optimizer."""
        out: dict[str, np.ndarray] = {}
        for i, adapter in sorted(self.visual.items()):
            for name, arr in adapter.trainable_tensors().items():
                out[f"visual.{i}.{name}"] = arr
        for name, arr in self.text.trainable_tensors().items():
            out[f"text.{name}"] = arr
        return out

    def tensor_dict(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for i, adapter in sorted(self.visual.items()):
            for name, arr in adapter.tensor_dict().items():
                out[f"visual.{i}.{name}"] = arr
        for name, arr in self.text.tensor_dict().items():
            out[f"text.{name}"] = arr
        return out

    def state_tensors(self) -> dict[str, np.ndarray]:
        """Checkpoint view: every tensor under the reserved adapter prefix."""
        return {ADAPTER_PREFIX + k: v for k, v in self.tensor_dict().items()}

    def project_constraints(self) -> None:
        for adapter in self.visual.values():
            adapter.constrained_kernel[...] = project_bayar_constraint(
                adapter.constrained_kernel)

    def cast(self, dtype) -> "AdapterSet":
        return AdapterSet(visual={i: a.cast(dtype) for i, a in self.visual.items()},
                          text=self.text.cast(dtype))

    def copy(self) -> "AdapterSet":
        return AdapterSet(visual={i: a.copy() for i, a in self.visual.items()},
                          text=self.text.copy())

    @classmethod
    def from_tensors(cls, tensors: Mapping[str, np.ndarray], source: str = "checkpoint",
                     streams: str = "both", lambda_on: str = "noise") -> "AdapterSet":
        """Rebuild from checkpoint tensors named ``adapter.visual.{i}.*`` and
        ``adapter.text.*`` (prefix included)."""
        stripped: dict[str, np.ndarray] = {}
        for name, arr in tensors.items():
            if not name.startswith(ADAPTER_PREFIX):
                continue
            stripped[name[len(ADAPTER_PREFIX):]] = arr
        if not stripped:
            raise CheckpointError(f"{source}: no adapter tensors found")
        block_ids = sorted({int(n.split(".")[1]) for n in stripped
                            if n.startswith("visual.")})
        if not block_ids:
            raise CheckpointError(f"{source}: no visual adapter tensors found")
        visual: dict[int, CdfaParams] = {}
        for i in block_ids:
            fields = {}
            for name in ("constrained_kernel", "noise_pointwise", "inception1",
                         "inception3", "inception5", "inception_fuse", "fusion_scale"):
                key = f"visual.{i}.{name}"
                if key not in stripped:
                    raise CheckpointError(f"{source}: missing tensor "
                                          f"{ADAPTER_PREFIX}{key}")
                fields[name] = stripped[key].copy()
            visual[i] = CdfaParams(**fields, streams=streams, lambda_on=lambda_on)
        text_fields = {}
        for name in ("layer1_weight", "layer1_bias", "layer2_weight", "layer2_bias"):
            key = f"text.{name}"
            if key not in stripped:
                raise CheckpointError(f"{source}: missing tensor {ADAPTER_PREFIX}{key}")
            text_fields[name] = stripped[key].copy()
        return cls(visual=visual, text=TextAdapterParams(**text_fields))


def no_weight_decay(name: str) -> bool:
    """Fusion scalars and biases are excluded from weight decay."""
    return name.endswith("fusion_scale") or name.endswith("_bias")
