"""Frozen vision-language encoder pair with adapter injection points.

The visual side is a pre-norm ViT.  Inside block ``i`` the token sequence
follows

    x   = x + attn(ln1(x))
    m   = ln2(x)
    x   = x + mlp(m) + adapter_i(m)        # adapter term only at
                                           # configured injection blocks

so an injected adapter reads the MLP input and its output is summed into
the MLP output.  The image feature is the L2-normalized projection of the
class token after the final layer norm.

The text side is a deterministic byte-level encoder: byte embeddings plus
positional embeddings, mean-pooled, squashed and projected to the shared
channel width.  It only has to be frozen, deterministic, and injective
enough to give the two class prompts distinct directions; gradients never
flow into it (the trainable text adapter sits after it).

Everything is plain numpy.  Forward passes optionally record caches so
the matching ``*_backward`` functions can push loss gradients through
frozen weights into adapter parameters.  Backbone parameter gradients are
never formed; the freeze is structural, not a flag.
"""

from __future__ import annotations

import json
import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import erf

from .errors import CheckpointError, ConfigError
from .tensorio import load_tensors, require_tensor, save_tensors

log = logging.getLogger(__name__)

# python-float constants: numpy scalars would silently upcast float32 activations
_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)

DEFAULT_PROMPTS = ("A real medical image", "A fake medical image")

# Published normalization constants of the large pretrained backbone.
CLIP_IMAGE_MEAN = (0.48145466, 0.4578275, 0.40821073)
CLIP_IMAGE_STD = (0.26862954, 0.26130258, 0.27577711)


@dataclass(frozen=True)
class BackboneConfig:
    """Shape and placement parameters of one encoder variant."""

    n_blocks: int
    channel_dim: int
    patch_grid: tuple[int, int]
    patch_size: int
    input_resolution: int
    n_heads: int
    adapter_block_indices: tuple[int, ...]
    mlp_ratio: int = 4
    logit_scale: float = 100.0
    image_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    image_std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    text_context: int = 77

    def __post_init__(self) -> None:
        h, w = self.patch_grid
        if h * self.patch_size != self.input_resolution or \
                w * self.patch_size != self.input_resolution:
            raise ConfigError(f"patch grid {self.patch_grid} x size {self.patch_size} "
                              f"does not tile resolution {self.input_resolution}")
        if self.channel_dim % self.n_heads != 0:
            raise ConfigError(f"channel_dim {self.channel_dim} not divisible by "
                              f"n_heads {self.n_heads}")
        bad = [i for i in self.adapter_block_indices if not 0 <= i < self.n_blocks]
        if bad:
            raise ConfigError(f"adapter block indices {bad} outside [0, {self.n_blocks})")
        if len(set(self.adapter_block_indices)) != len(self.adapter_block_indices):
            raise ConfigError("duplicate adapter block indices")
        if self.logit_scale <= 0:
            raise ConfigError("logit_scale must be positive")

    @property
    def seq_len(self) -> int:
        h, w = self.patch_grid
        return h * w + 1

    @classmethod
    def tiny(cls) -> "BackboneConfig":
        """In-repo reference backbone: 6 blocks, C=32, 4x4 grid, 32px input."""
        return cls(n_blocks=6, channel_dim=32, patch_grid=(4, 4), patch_size=8,
                   input_resolution=32, n_heads=4, adapter_block_indices=(1, 3, 5))

    @classmethod
    def vit_l_14(cls) -> "BackboneConfig":
        """ViT-L/14 geometry with injection at blocks 7, 15, 23."""
        return cls(n_blocks=24, channel_dim=1024, patch_grid=(16, 16), patch_size=14,
                   input_resolution=224, n_heads=16, adapter_block_indices=(7, 15, 23),
                   image_mean=CLIP_IMAGE_MEAN, image_std=CLIP_IMAGE_STD)

    def to_json(self) -> str:
        return json.dumps({
            "n_blocks": self.n_blocks, "channel_dim": self.channel_dim,
            "patch_grid": list(self.patch_grid), "patch_size": self.patch_size,
            "input_resolution": self.input_resolution, "n_heads": self.n_heads,
            "adapter_block_indices": list(self.adapter_block_indices),
            "mlp_ratio": self.mlp_ratio, "logit_scale": self.logit_scale,
            "image_mean": list(self.image_mean), "image_std": list(self.image_std),
            "text_context": self.text_context,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BackboneConfig":
        obj = json.loads(text)
        return cls(n_blocks=obj["n_blocks"], channel_dim=obj["channel_dim"],
                   patch_grid=tuple(obj["patch_grid"]), patch_size=obj["patch_size"],
                   input_resolution=obj["input_resolution"], n_heads=obj["n_heads"],
                   adapter_block_indices=tuple(obj["adapter_block_indices"]),
                   mlp_ratio=obj["mlp_ratio"], logit_scale=obj["logit_scale"],
                   image_mean=tuple(obj["image_mean"]), image_std=tuple(obj["image_std"]),
                   text_context=obj["text_context"])


@dataclass
class TokenSequence:
    """Per-block activations: (batch, 1 + H*W, C); position 0 is the class token."""

    values: np.ndarray
    grid: tuple[int, int]


@dataclass
class TextClassifier:
    """Prompt-derived classifier: row 0 = real prompt, row 1 = fake prompt."""

    weights: np.ndarray          # (2, C), rows L2-normalized
    prompts: tuple[str, str]


# --------------------------------------------------------------------------
# differentiable primitives (forward returns an optional cache for backward)
# --------------------------------------------------------------------------

def gelu(x: np.ndarray) -> np.ndarray:
    return x * 0.5 * (1.0 + erf(x * _INV_SQRT2))


def _gelu_grad(x: np.ndarray) -> np.ndarray:
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def layer_norm_forward(x, gamma, beta, want_cache=False):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + _LN_EPS)
    xhat = xc * inv
    y = xhat * gamma + beta
    cache = (xhat, inv, gamma) if want_cache else None
    return y, cache


def layer_norm_backward(cache, gy):
    """Gradient w.r.t. the layer-norm input (gamma/beta are frozen)."""
    xhat, inv, gamma = cache
    gh = gy * gamma
    m1 = gh.mean(axis=-1, keepdims=True)
    m2 = (gh * xhat).mean(axis=-1, keepdims=True)
    return inv * (gh - m1 - xhat * m2)


def l2_normalize_forward(x, want_cache=False):
    norm = np.sqrt(np.sum(x * x, axis=-1, keepdims=True))
    y = x / norm
    cache = (y, norm) if want_cache else None
    return y, cache


def l2_normalize_backward(cache, gy):
    y, norm = cache
    return (gy - y * np.sum(gy * y, axis=-1, keepdims=True)) / norm


def _softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass
class BlockParams:
    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    qkv_weight: np.ndarray       # (C, 3C)
    qkv_bias: np.ndarray
    out_weight: np.ndarray       # (C, C)
    out_bias: np.ndarray
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    fc1_weight: np.ndarray       # (C, M)
    fc1_bias: np.ndarray
    fc2_weight: np.ndarray       # (M, C)
    fc2_bias: np.ndarray


def attention_forward(x, blk: BlockParams, n_heads: int, want_cache=False):
    b, t, c = x.shape
    dh = c // n_heads
    qkv = x @ blk.qkv_weight + blk.qkv_bias
    qkv = qkv.reshape(b, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]              # (b, heads, t, dh)
    scale = 1.0 / math.sqrt(dh)
    att = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = att @ v
    y = ctx.transpose(0, 2, 1, 3).reshape(b, t, c) @ blk.out_weight + blk.out_bias
    cache = (q, k, v, att, scale) if want_cache else None
    return y, cache


def attention_backward(cache, gy, blk: BlockParams, n_heads: int):
    q, k, v, att, scale = cache
    b, h, t, dh = q.shape
    c = h * dh
    g_ctx = (gy @ blk.out_weight.T).reshape(b, t, h, dh).transpose(0, 2, 1, 3)
    g_att = g_ctx @ v.transpose(0, 1, 3, 2)
    g_v = att.transpose(0, 1, 3, 2) @ g_ctx
    g_scores = att * (g_att - np.sum(g_att * att, axis=-1, keepdims=True))
    g_q = (g_scores @ k) * scale
    g_k = (g_scores.transpose(0, 1, 3, 2) @ q) * scale
    g_qkv = np.stack([g_q, g_k, g_v], axis=0)     # (3, b, h, t, dh)
    g_qkv = g_qkv.transpose(1, 3, 0, 2, 4).reshape(b, t, 3 * c)
    return g_qkv @ blk.qkv_weight.T


def mlp_forward(x, blk: BlockParams, want_cache=False):
    h = x @ blk.fc1_weight + blk.fc1_bias
    y = gelu(h) @ blk.fc2_weight + blk.fc2_bias
    cache = (h,) if want_cache else None
    return y, cache


def mlp_backward(cache, gy, blk: BlockParams):
    (h,) = cache
    g_act = gy @ blk.fc2_weight.T
    return (g_act * _gelu_grad(h)) @ blk.fc1_weight.T


# --------------------------------------------------------------------------
# backbone
# --------------------------------------------------------------------------

@dataclass
class Backbone:
    """Frozen encoder pair.  All parameter arrays are float32 and immutable
    by convention; training code never receives references to them."""

    config: BackboneConfig
    patch_weight: np.ndarray
    patch_bias: np.ndarray
    class_token: np.ndarray
    pos_embed: np.ndarray
    blocks: list[BlockParams]
    ln_post_gamma: np.ndarray
    ln_post_beta: np.ndarray
    proj: np.ndarray
    text_byte_embed: np.ndarray
    text_pos_embed: np.ndarray
    text_proj_weight: np.ndarray
    text_proj_bias: np.ndarray
    source_tensors: tuple[str, ...] = field(default_factory=tuple)

    # -- construction ------------------------------------------------------

    @classmethod
    def random(cls, config: BackboneConfig, seed: int = 0) -> "Backbone":
        """Deterministic seeded initialization (the reference tiny weights)."""
        rng = np.random.default_rng(seed)
        c = config.channel_dim
        m = config.mlp_ratio * c
        pdim = config.patch_size * config.patch_size * 3

        def normal(shape, std):
            return rng.normal(0.0, std, size=shape).astype(np.float32)

        blocks = []
        for _ in range(config.n_blocks):
            blocks.append(BlockParams(
                ln1_gamma=np.ones(c, dtype=np.float32),
                ln1_beta=np.zeros(c, dtype=np.float32),
                qkv_weight=normal((c, 3 * c), c**-0.5),
                qkv_bias=np.zeros(3 * c, dtype=np.float32),
                out_weight=normal((c, c), c**-0.5),
                out_bias=np.zeros(c, dtype=np.float32),
                ln2_gamma=np.ones(c, dtype=np.float32),
                ln2_beta=np.zeros(c, dtype=np.float32),
                fc1_weight=normal((c, m), c**-0.5),
                fc1_bias=np.zeros(m, dtype=np.float32),
                fc2_weight=normal((m, c), m**-0.5),
                fc2_bias=np.zeros(c, dtype=np.float32),
            ))
        return cls(
            config=config,
            patch_weight=normal((pdim, c), pdim**-0.5),
            patch_bias=np.zeros(c, dtype=np.float32),
            class_token=normal((c,), 0.02),
            pos_embed=normal((config.seq_len, c), 0.01),
            blocks=blocks,
            ln_post_gamma=np.ones(c, dtype=np.float32),
            ln_post_beta=np.zeros(c, dtype=np.float32),
            proj=normal((c, c), c**-0.5),
            text_byte_embed=normal((256, c), 1.0),
            text_pos_embed=normal((config.text_context, c), 0.3),
            text_proj_weight=normal((c, c), c**-0.5),
            text_proj_bias=np.zeros(c, dtype=np.float32),
        )

    @classmethod
    def tiny(cls, seed: int = 0) -> "Backbone":
        return cls.random(BackboneConfig.tiny(), seed=seed)

    def cast(self, dtype) -> "Backbone":
        """Copy with all parameters cast to ``dtype`` (gradient checks run
        the whole graph in float64; float32 values are exactly representable)."""
        def c(a):
            return np.asarray(a, dtype=dtype)
        return Backbone(
            config=self.config,
            patch_weight=c(self.patch_weight), patch_bias=c(self.patch_bias),
            class_token=c(self.class_token), pos_embed=c(self.pos_embed),
            blocks=[BlockParams(**{k: c(v) for k, v in vars(b).items()})
                    for b in self.blocks],
            ln_post_gamma=c(self.ln_post_gamma), ln_post_beta=c(self.ln_post_beta),
            proj=c(self.proj),
            text_byte_embed=c(self.text_byte_embed),
            text_pos_embed=c(self.text_pos_embed),
            text_proj_weight=c(self.text_proj_weight),
            text_proj_bias=c(self.text_proj_bias),
        )

    # -- persistence -------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {
            "visual.patch_embed.weight": self.patch_weight,
            "visual.patch_embed.bias": self.patch_bias,
            "visual.class_token": self.class_token,
            "visual.pos_embed": self.pos_embed,
            "visual.ln_post.gamma": self.ln_post_gamma,
            "visual.ln_post.beta": self.ln_post_beta,
            "visual.proj": self.proj,
            "text.byte_embed": self.text_byte_embed,
            "text.pos_embed": self.text_pos_embed,
            "text.proj_weight": self.text_proj_weight,
            "text.proj_bias": self.text_proj_bias,
            "logit_scale": np.asarray([self.config.logit_scale], dtype=np.float32),
        }
        for i, b in enumerate(self.blocks):
            p = f"visual.blocks.{i}"
            out[f"{p}.ln1.gamma"] = b.ln1_gamma
            out[f"{p}.ln1.beta"] = b.ln1_beta
            out[f"{p}.attn.qkv_weight"] = b.qkv_weight
            out[f"{p}.attn.qkv_bias"] = b.qkv_bias
            out[f"{p}.attn.out_weight"] = b.out_weight
            out[f"{p}.attn.out_bias"] = b.out_bias
            out[f"{p}.ln2.gamma"] = b.ln2_gamma
            out[f"{p}.ln2.beta"] = b.ln2_beta
            out[f"{p}.mlp.fc1_weight"] = b.fc1_weight
            out[f"{p}.mlp.fc1_bias"] = b.fc1_bias
            out[f"{p}.mlp.fc2_weight"] = b.fc2_weight
            out[f"{p}.mlp.fc2_bias"] = b.fc2_bias
        return out

    def state_hash(self) -> str:
        """SHA-256 over the sorted tensor set; the freeze contract witness."""
        h = hashlib.sha256()
        tensors = self.state_tensors()
        for name in sorted(tensors):
            h.update(name.encode("utf-8"))
            h.update(np.ascontiguousarray(tensors[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def save(self, path: str | Path,
             extra_tensors: Mapping[str, np.ndarray] | None = None,
             metadata: Mapping[str, str] | None = None) -> None:
        tensors = dict(self.state_tensors())
        if extra_tensors:
            overlap = set(tensors) & set(extra_tensors)
            if overlap:
                raise CheckpointError(f"extra tensors collide with backbone names: "
                                      f"{sorted(overlap)}")
            tensors.update(extra_tensors)
        meta = {"config": self.config.to_json(), "format": "meddeepfake-checkpoint-v1"}
        if metadata:
            meta.update(metadata)
        save_tensors(path, tensors, metadata=meta)

    @classmethod
    def load(cls, path: str | Path,
             config: BackboneConfig | None = None) -> tuple["Backbone", dict[str, np.ndarray]]:
        """Load a checkpoint; returns (backbone, leftover tensors).

        Leftover tensors are entries outside the backbone namespace
        (adapter and trainer state), handed back to the caller.  Every
        backbone tensor must be present with the exact shape.
        """
        tensors, meta = load_tensors(path)
        if config is None:
            if "config" not in meta:
                raise CheckpointError(f"{path}: no config metadata and none supplied")
            config = BackboneConfig.from_json(meta["config"])
        elif "config" in meta:
            stored = BackboneConfig.from_json(meta["config"])
            if stored != config:
                raise CheckpointError(f"{path}: stored config differs from requested "
                                      f"config\n  stored:    {stored}\n  requested: {config}")
        template = cls.random(config, seed=0)
        expected = template.state_tensors()
        src = str(path)
        loaded: dict[str, np.ndarray] = {}
        for name, ref in expected.items():
            loaded[name] = require_tensor(tensors, name, ref.shape, source=src)
        scale = float(loaded["logit_scale"][0])
        if not np.isclose(scale, config.logit_scale, rtol=1e-5):
            raise CheckpointError(f"{src}: logit_scale {scale} disagrees with config "
                                  f"{config.logit_scale}")
        leftovers = {k: v for k, v in tensors.items() if k not in expected}

        def blk(i: int) -> BlockParams:
            p = f"visual.blocks.{i}"
            return BlockParams(
                ln1_gamma=loaded[f"{p}.ln1.gamma"], ln1_beta=loaded[f"{p}.ln1.beta"],
                qkv_weight=loaded[f"{p}.attn.qkv_weight"],
                qkv_bias=loaded[f"{p}.attn.qkv_bias"],
                out_weight=loaded[f"{p}.attn.out_weight"],
                out_bias=loaded[f"{p}.attn.out_bias"],
                ln2_gamma=loaded[f"{p}.ln2.gamma"], ln2_beta=loaded[f"{p}.ln2.beta"],
                fc1_weight=loaded[f"{p}.mlp.fc1_weight"],
                fc1_bias=loaded[f"{p}.mlp.fc1_bias"],
                fc2_weight=loaded[f"{p}.mlp.fc2_weight"],
                fc2_bias=loaded[f"{p}.mlp.fc2_bias"],
            )

        backbone = cls(
            config=config,
            patch_weight=loaded["visual.patch_embed.weight"],
            patch_bias=loaded["visual.patch_embed.bias"],
            class_token=loaded["visual.class_token"],
            pos_embed=loaded["visual.pos_embed"],
            blocks=[blk(i) for i in range(config.n_blocks)],
            ln_post_gamma=loaded["visual.ln_post.gamma"],
            ln_post_beta=loaded["visual.ln_post.beta"],
            proj=loaded["visual.proj"],
            text_byte_embed=loaded["text.byte_embed"],
            text_pos_embed=loaded["text.pos_embed"],
            text_proj_weight=loaded["text.proj_weight"],
            text_proj_bias=loaded["text.proj_bias"],
            source_tensors=tuple(sorted(loaded)),
        )
        log.info("loaded backbone from %s: %d tensors", path, len(loaded))
        return backbone, leftovers

    # -- visual forward / backward ----------------------------------------

    def _check_adapters(self, adapters) -> None:
        if adapters is None:
            return
        allowed = set(self.config.adapter_block_indices)
        for idx, adapter in adapters.items():
            if idx not in allowed:
                raise ConfigError(f"adapter keyed to block {idx}, but config allows "
                                  f"{sorted(allowed)}")
            if adapter.channel_dim != self.config.channel_dim:
                raise ConfigError(f"adapter at block {idx} has channel dim "
                                  f"{adapter.channel_dim}, backbone has "
                                  f"{self.config.channel_dim}")

    def embed(self, images: np.ndarray) -> np.ndarray:
        """Images (B, R, R, 3) -> token sequences (B, T, C)."""
        b = images.shape[0]
        r = self.config.input_resolution
        if images.shape[1:] != (r, r, 3):
            raise ConfigError(f"expected images of shape (B, {r}, {r}, 3), "
                              f"got {images.shape}")
        h, w = self.config.patch_grid
        ps = self.config.patch_size
        patches = images.reshape(b, h, ps, w, ps, 3).transpose(0, 1, 3, 2, 4, 5)
        patches = patches.reshape(b, h * w, ps * ps * 3)
        x = patches @ self.patch_weight + self.patch_bias
        cls_tok = np.broadcast_to(self.class_token, (b, 1, x.shape[-1]))
        return np.concatenate([cls_tok, x], axis=1) + self.pos_embed

    def run_blocks(self, x: np.ndarray, adapters=None, start: int = 0,
                   stop: int | None = None, want_cache: bool = False,
                   trace: list | None = None):
        """Run transformer blocks [start, stop); returns (tokens, caches)."""
        self._check_adapters(adapters)
        stop = self.config.n_blocks if stop is None else stop
        grid = self.config.patch_grid
        caches = [] if want_cache else None
        for i in range(start, stop):
            blk = self.blocks[i]
            a_in, c_ln1 = layer_norm_forward(x, blk.ln1_gamma, blk.ln1_beta, want_cache)
            attn_out, c_attn = attention_forward(a_in, blk, self.config.n_heads, want_cache)
            x_mid = x + attn_out
            m, c_ln2 = layer_norm_forward(x_mid, blk.ln2_gamma, blk.ln2_beta, want_cache)
            mlp_out, c_mlp = mlp_forward(m, blk, want_cache)
            x = x_mid + mlp_out
            c_ad = None
            if adapters is not None and i in adapters:
                ad_out, c_ad = adapters[i].forward(m, grid, want_cache=want_cache)
                x = x + ad_out
            if want_cache:
                caches.append({"ln1": c_ln1, "attn": c_attn, "ln2": c_ln2,
                               "mlp": c_mlp, "adapter": c_ad, "index": i})
            if trace is not None:
                trace.append(TokenSequence(values=x.copy(), grid=grid))
        return x, caches

    def head(self, x: np.ndarray, want_cache: bool = False):
        """Class-token projection, L2-normalized: (B, T, C) -> (B, C)."""
        cls_tok = x[:, 0, :]
        ln_out, c_ln = layer_norm_forward(cls_tok, self.ln_post_gamma,
                                          self.ln_post_beta, want_cache)
        z = ln_out @ self.proj
        feat, c_l2 = l2_normalize_forward(z, want_cache)
        cache = {"ln": c_ln, "l2": c_l2, "seq_len": x.shape[1]} if want_cache else None
        return feat, cache

    def encode_image(self, images: np.ndarray, adapters=None, trace: bool = False):
        """Full visual forward: returns (features (B, C), block trace or None)."""
        trace_list: list | None = [] if trace else None
        x = self.embed(images)
        x, _ = self.run_blocks(x, adapters=adapters, trace=trace_list)
        feat, _ = self.head(x)
        if not np.all(np.isfinite(feat)):
            raise ConfigError("non-finite image features")
        return feat, trace_list

    def forward_with_cache(self, images: np.ndarray, adapters=None):
        """Training-path forward keeping every cache needed for backward."""
        x = self.embed(images)
        x, block_caches = self.run_blocks(x, adapters=adapters, want_cache=True)
        feat, head_cache = self.head(x, want_cache=True)
        return feat, {"blocks": block_caches, "head": head_cache}

    def backward_features(self, cache, g_feat: np.ndarray, adapters=None,
                          down_to: int = 0):
        """Push feature gradients back through the frozen stack.

        Returns (adapter gradients keyed like ``adapters``, gradient w.r.t.
        the token sequence entering block ``down_to``).  Backbone parameter
        gradients are never formed.
        """
        head_cache = cache["head"]
        g_z = l2_normalize_backward(head_cache["l2"], g_feat)
        g_ln_out = g_z @ self.proj.T
        g_cls = layer_norm_backward(head_cache["ln"], g_ln_out)
        b, c = g_cls.shape
        g_x = np.zeros((b, head_cache["seq_len"], c), dtype=g_cls.dtype)
        g_x[:, 0, :] = g_cls

        adapter_grads: dict[int, dict[str, np.ndarray]] = {}
        for blk_cache in reversed(cache["blocks"]):
            i = blk_cache["index"]
            if i < down_to:
                break
            blk = self.blocks[i]
            g_m = mlp_backward(blk_cache["mlp"], g_x, blk)
            if blk_cache["adapter"] is not None:
                g_m_ad, grads = adapters[i].backward(blk_cache["adapter"], g_x)
                adapter_grads[i] = grads
                g_m = g_m + g_m_ad
            g_x_mid = g_x + layer_norm_backward(blk_cache["ln2"], g_m)
            g_a_in = attention_backward(blk_cache["attn"], g_x_mid, blk,
                                        self.config.n_heads)
            g_x = g_x_mid + layer_norm_backward(blk_cache["ln1"], g_a_in)
        return adapter_grads, g_x

    # -- text side ---------------------------------------------------------

    def encode_text(self, prompt: str) -> np.ndarray:
        """Deterministic prompt embedding (not normalized)."""
        if not prompt:
            raise ConfigError("empty prompt")
        data = prompt.encode("utf-8")[: self.config.text_context]
        idx = np.frombuffer(data, dtype=np.uint8)
        pooled = np.tanh((self.text_byte_embed[idx] +
                          self.text_pos_embed[: len(idx)]).mean(axis=0))
        return pooled @ self.text_proj_weight + self.text_proj_bias

    def prompt_embeddings(self, prompts: Sequence[str]) -> np.ndarray:
        return np.stack([self.encode_text(p) for p in prompts], axis=0)


def build_text_classifier(backbone: Backbone, prompts: Sequence[str] = DEFAULT_PROMPTS,
                          text_adapter=None) -> TextClassifier:
    """Encode the (real, fake) prompt pair into unit-norm classifier rows."""
    if len(prompts) != 2:
        raise ConfigError(f"expected exactly two prompts (real, fake), got {len(prompts)}")
    emb = backbone.prompt_embeddings(prompts)
    if text_adapter is not None:
        emb, _ = text_adapter.forward(emb)
    weights, _ = l2_normalize_forward(emb)
    return TextClassifier(weights=weights.astype(emb.dtype), prompts=(prompts[0], prompts[1]))


def classifier_logits(features: np.ndarray, classifier: TextClassifier,
                      logit_scale: float = 1.0) -> np.ndarray:
    """``logit_scale * features @ weights.T`` with finiteness checks."""
    if not np.all(np.isfinite(features)):
        raise ConfigError("non-finite features in logits")
    if not np.all(np.isfinite(classifier.weights)):
        raise ConfigError("non-finite classifier weights in logits")
    return logit_scale * (features @ classifier.weights.T)
