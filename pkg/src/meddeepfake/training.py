"""Adapter fine-tuning: BCE on the prompt classifier, momentum SGD.

Only the adapter tensors (visual dual-stream adapters plus the text
adapter) are optimized; the backbone is structurally frozen and its
weights never appear in the optimizer state.  After every optimizer step
the constrained depthwise kernels are re-projected onto the Bayar
constraint set.

Determinism contract: all parameters and optimizer state live in float32;
the per-epoch shuffle seed is derived from (root seed, epoch index) so a
run resumed from a checkpoint at epoch k replays the exact same batch
order, and loss history values are rounded to float32 before storage so
a resumed history compares equal to an uninterrupted one.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .adapters import AdapterSet, check_bayar_constraint, no_weight_decay
from .backbone import Backbone, BackboneConfig, DEFAULT_PROMPTS, l2_normalize_forward, \
    l2_normalize_backward
from .errors import CheckpointError, ConfigError, ImageError, ManifestError
from .imaging import load_image, preprocess
from .manifest import DatasetRecord, load_manifest, resolve_image_path
from .seeding import derive_seed

log = logging.getLogger(__name__)

PROB_EPS = 1e-7

BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"
TRAIN_LOG = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    """Optimization recipe; defaults follow the published setup."""

    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 0.005
    seed: int = 0
    prompts: tuple[str, str] = DEFAULT_PROMPTS
    val_fraction: float = 0.1

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.val_fraction < 0.5:
            raise ConfigError(f"val_fraction must be in [0, 0.5), got "
                              f"{self.val_fraction}")
        if len(self.prompts) != 2:
            raise ConfigError("prompts must be a (real, fake) pair")

    def to_json(self) -> str:
        return json.dumps({
            "epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
            "momentum": self.momentum, "weight_decay": self.weight_decay,
            "seed": self.seed, "prompts": list(self.prompts),
            "val_fraction": self.val_fraction,
        }, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TrainConfig":
        obj = json.loads(text)
        return cls(epochs=obj["epochs"], batch_size=obj["batch_size"], lr=obj["lr"],
                   momentum=obj["momentum"], weight_decay=obj["weight_decay"],
                   seed=obj["seed"], prompts=tuple(obj["prompts"]),
                   val_fraction=obj["val_fraction"])


@dataclass
class TrainState:
    """Everything mutable across epochs; the backbone is deliberately absent."""

    adapters: AdapterSet
    velocity: dict[str, np.ndarray]
    epoch: int = 0
    loss_history: list[float] = field(default_factory=list)
    best_val_loss: float = float("inf")
    skipped_steps: int = 0
    skipped_records: int = 0

    @classmethod
    def fresh(cls, adapters: AdapterSet) -> "TrainState":
        velocity = {name: np.zeros_like(arr)
                    for name, arr in adapters.trainable_tensors().items()}
        return cls(adapters=adapters, velocity=velocity)


@dataclass
class TrainResult:
    state: TrainState
    epoch_logs: list[dict]
    best_checkpoint: Path | None = None
    last_checkpoint: Path | None = None
    log_path: Path | None = None


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------

def bce_loss(probs: np.ndarray, labels: np.ndarray) -> float:
    """Mean binary cross-entropy of fake-class probabilities.

    Probabilities are clamped to [eps, 1-eps] before the log so perfect
    predictions stay finite.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.size == 0:
        raise ValueError("empty batch")
    if probs.shape != labels.shape:
        raise ValueError(f"probs shape {probs.shape} != labels shape {labels.shape}")
    if not np.all(np.isin(labels, (0, 1))):
        raise ValueError(f"labels outside {{0, 1}}: {np.unique(labels)}")
    p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    y = labels.astype(np.float64)
    return float(-np.mean(y * np.log(p) + (1.0 - y) * np.log1p(-p)))


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    """Row softmax computed in float64 (logits may be temperature-scaled)."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _loss_and_logit_grad(logits: np.ndarray, labels: np.ndarray):
    """BCE through the 2-way softmax; returns (loss, d loss / d logits).

    The loss value clamps the probability inside the log (a guard against
    -inf); the gradient is the plain softmax-cross-entropy one,
    (p - onehot) / N.  Inside the clamp region the true gradient is zero,
    so this choice only ever adds a vanishing restoring force.
    """
    n = logits.shape[0]
    p = softmax_probabilities(logits)
    loss = bce_loss(p[:, 1], labels)
    onehot = np.zeros_like(p)
    onehot[np.arange(n), labels] = 1.0
    g = ((p - onehot) / n).astype(logits.dtype)
    return loss, g


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------

def sgd_step(state: TrainState, grads: dict[str, np.ndarray],
             config: TrainConfig) -> TrainState:
    """Classic momentum update on the trainable tensors, in place.

    v <- m*v + g + wd*theta ; theta <- theta - lr*v.  Weight decay skips
    fusion scalars and biases.  A non-finite gradient anywhere skips the
    whole step (warned and counted) so one bad batch cannot poison the
    velocity buffers.  Constrained kernels are re-projected afterwards.
    """
    params = state.adapters.trainable_tensors()
    if set(grads) != set(params):
        missing = set(params) - set(grads)
        extra = set(grads) - set(params)
        raise ConfigError(f"gradient keys disagree with trainable tensors "
                          f"(missing {sorted(missing)}, unexpected {sorted(extra)})")
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ConfigError(f"gradient {name}: shape {g.shape} != param "
                              f"{params[name].shape}")
        if not np.all(np.isfinite(g)):
            state.skipped_steps += 1
            log.warning("non-finite gradient for %s; skipping step (%d skipped)",
                        name, state.skipped_steps)
            return state
    lr = np.float32(config.lr)
    m = np.float32(config.momentum)
    wd = np.float32(config.weight_decay)
    for name, theta in params.items():
        g = grads[name].astype(np.float32, copy=False)
        if config.weight_decay and not no_weight_decay(name):
            g = g + wd * theta
        v = state.velocity[name]
        v[...] = m * v + g
        theta[...] = theta - lr * v
    state.adapters.project_constraints()
    return state


# --------------------------------------------------------------------------
# batch plumbing
# --------------------------------------------------------------------------

@dataclass
class _Loaded:
    images: np.ndarray      # (N, R, R, 3) float32, preprocessed
    labels: np.ndarray      # (N,) int
    records: list[DatasetRecord]


def load_split_images(records: list[DatasetRecord], manifest_path: Path,
                      config: BackboneConfig) -> tuple[_Loaded, int]:
    """Decode and preprocess every record, skipping unreadable files."""
    images, labels, kept = [], [], []
    skipped = 0
    for rec in records:
        path = resolve_image_path(rec, manifest_path)
        try:
            img = load_image(path)
        except ImageError as exc:
            skipped += 1
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        images.append(preprocess(img, config.input_resolution,
                                 mean=config.image_mean, std=config.image_std))
        labels.append(rec.label)
        kept.append(rec)
    if not images:
        raise ManifestError(f"{manifest_path}: no readable images")
    return _Loaded(images=np.stack(images).astype(np.float32),
                   labels=np.asarray(labels, dtype=np.int64),
                   records=kept), skipped


def _holdout_split(labels: np.ndarray, fraction: float, seed: int):
    """Deterministic stratified holdout; returns (train_idx, val_idx)."""
    val: list[int] = []
    for cls in (0, 1):
        idx = np.flatnonzero(labels == cls)
        n_val = int(len(idx) * fraction)
        if n_val == 0:
            continue
        rng = np.random.default_rng(derive_seed(seed, "val-holdout", cls))
        picked = rng.permutation(idx)[:n_val]
        val.extend(int(i) for i in picked)
    val_set = set(val)
    train = [i for i in range(len(labels)) if i not in val_set]
    return np.asarray(train, dtype=np.int64), np.asarray(sorted(val_set), dtype=np.int64)


def adapted_classifier_forward(backbone: Backbone, adapters: AdapterSet,
                               prompts, want_cache: bool = False):
    """Prompt embeddings -> text adapter -> row normalization.

    Returns (weights (2, C), cache) where the cache carries what the
    backward pass needs.  The raw prompt embeddings are recomputed here;
    they are frozen, cheap, and deterministic.
    """
    emb = backbone.prompt_embeddings(prompts)
    adapted, t_cache = adapters.text.forward(emb, want_cache=want_cache)
    weights, n_cache = l2_normalize_forward(adapted, want_cache=want_cache)
    cache = (t_cache, n_cache) if want_cache else None
    return weights, cache


def _classifier_backward(adapters: AdapterSet, cache, g_weights):
    t_cache, n_cache = cache
    g_adapted = l2_normalize_backward(n_cache, g_weights)
    _, text_grads = adapters.text.backward(t_cache, g_adapted)
    return text_grads


def batch_loss_and_grads(backbone: Backbone, adapters: AdapterSet,
                         images: np.ndarray, labels: np.ndarray, prompts):
    """One training forward/backward; returns (loss, accuracy, flat grads)."""
    scale = np.float32(backbone.config.logit_scale)
    weights, clf_cache = adapted_classifier_forward(backbone, adapters, prompts,
                                                    want_cache=True)
    feat, cache = backbone.forward_with_cache(images, adapters=adapters)
    logits = scale * (feat @ weights.T)
    loss, g_logits = _loss_and_logit_grad(logits, labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))

    g_feat = scale * (g_logits @ weights)
    g_weights = scale * (g_logits.T @ feat)
    text_grads = _classifier_backward(adapters, clf_cache, g_weights)
    visual_grads, _ = backbone.backward_features(cache, g_feat, adapters=adapters)

    flat = {f"text.{k}": v for k, v in text_grads.items()}
    for i, grads in visual_grads.items():
        for k, v in grads.items():
            flat[f"visual.{i}.{k}"] = v
    return loss, acc, flat


def evaluate_loss(backbone: Backbone, adapters: AdapterSet, images: np.ndarray,
                  labels: np.ndarray, prompts, batch_size: int) -> float:
    """Forward-only mean BCE over a fixed set (validation)."""
    scale = np.float32(backbone.config.logit_scale)
    weights, _ = adapted_classifier_forward(backbone, adapters, prompts)
    losses = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        feat, _ = backbone.encode_image(chunk, adapters=adapters)
        probs = softmax_probabilities(scale * (feat @ weights.T))[:, 1]
        y = labels[start:start + batch_size].astype(np.float64)
        p = np.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
        losses.append(-(y * np.log(p) + (1.0 - y) * np.log1p(-p)))
    return float(np.mean(np.concatenate(losses)))


# --------------------------------------------------------------------------
# checkpoint round trip
# --------------------------------------------------------------------------

def save_train_state(backbone: Backbone, state: TrainState, config: TrainConfig,
                     path: str | Path, streams: str = "both",
                     lambda_on: str = "noise") -> None:
    extra = dict(state.adapters.state_tensors())
    for name, v in state.velocity.items():
        extra[f"train.velocity.{name}"] = v
    extra["train.epoch"] = np.asarray([state.epoch], dtype=np.float32)
    extra["train.loss_history"] = np.asarray(state.loss_history, dtype=np.float32)
    extra["train.best_val"] = np.asarray([state.best_val_loss], dtype=np.float32)
    extra["train.counters"] = np.asarray(
        [state.skipped_steps, state.skipped_records], dtype=np.float32)
    backbone.save(path, extra_tensors=extra,
                  metadata={"train_config": config.to_json(),
                            "streams": streams, "lambda_on": lambda_on})


def load_train_state(path: str | Path, config: BackboneConfig | None = None):
    """Returns (backbone, state, train_config, streams, lambda_on)."""
    backbone, leftovers = Backbone.load(path, config=config)
    _, meta = _peek_metadata(path)
    streams = meta.get("streams", "both")
    lambda_on = meta.get("lambda_on", "noise")
    adapters = AdapterSet.from_tensors(leftovers, source=str(path),
                                       streams=streams, lambda_on=lambda_on)
    state = TrainState.fresh(adapters)
    velocity_prefix = "train.velocity."
    stored_velocity = {k[len(velocity_prefix):]: v for k, v in leftovers.items()
                       if k.startswith(velocity_prefix)}
    if stored_velocity:
        if set(stored_velocity) != set(state.velocity):
            raise CheckpointError(f"{path}: velocity tensors do not match trainable "
                                  f"set (got {sorted(stored_velocity)})")
        for k, v in stored_velocity.items():
            if v.shape != state.velocity[k].shape:
                raise CheckpointError(f"{path}: velocity {k} shape {v.shape} != "
                                      f"{state.velocity[k].shape}")
            state.velocity[k] = v.copy()
    if "train.epoch" in leftovers:
        state.epoch = int(leftovers["train.epoch"][0])
    if "train.loss_history" in leftovers:
        state.loss_history = [float(x) for x in leftovers["train.loss_history"]]
    if "train.best_val" in leftovers:
        state.best_val_loss = float(leftovers["train.best_val"][0])
    if "train.counters" in leftovers:
        state.skipped_steps = int(leftovers["train.counters"][0])
        state.skipped_records = int(leftovers["train.counters"][1])
    train_config = None
    if "train_config" in meta:
        train_config = TrainConfig.from_json(meta["train_config"])
    return backbone, state, train_config, streams, lambda_on


def _peek_metadata(path: str | Path):
    from .tensorio import load_tensors
    return load_tensors(path)


# --------------------------------------------------------------------------
# the training loop
# --------------------------------------------------------------------------

def train(manifest: str | Path, backbone: Backbone, config: TrainConfig,
          out_dir: str | Path | None = None, resume_from: str | Path | None = None,
          streams: str = "both", lambda_on: str = "noise") -> TrainResult:
    """Fine-tune adapters on the manifest's train split.

    Records without a split tag count as train; test records are ignored.
    Writes per-epoch JSONL logs plus best/last checkpoints when ``out_dir``
    is given.  ``resume_from`` restores adapters, velocity, epoch counter
    and history, then continues to ``config.epochs``.
    """
    manifest = Path(manifest)
    records = load_manifest(manifest)
    train_records = [r for r in records if r.split in (None, "train")]
    if not train_records:
        raise ManifestError(f"{manifest}: no train records")

    loaded, skipped = load_split_images(train_records, manifest, backbone.config)
    n_real = int(np.sum(loaded.labels == 0))
    n_fake = int(np.sum(loaded.labels == 1))
    if n_real == 0 or n_fake == 0:
        raise ManifestError(f"{manifest}: train split needs both classes, got "
                            f"{n_real} real / {n_fake} fake")

    train_idx, val_idx = _holdout_split(loaded.labels, config.val_fraction,
                                        config.seed)
    if len(val_idx) == 0:
        log.warning("validation holdout is empty; best checkpoint tracks train loss")

    freeze_hash = backbone.state_hash()

    if resume_from is not None:
        ck_backbone, state, _, ck_streams, ck_lambda = load_train_state(
            resume_from, config=backbone.config)
        if ck_backbone.state_hash() != freeze_hash:
            raise CheckpointError(f"{resume_from}: checkpoint backbone differs from "
                                  f"the supplied one")
        if (ck_streams, ck_lambda) != (streams, lambda_on):
            raise CheckpointError(f"{resume_from}: checkpoint stream modes "
                                  f"({ck_streams}, {ck_lambda}) differ from requested "
                                  f"({streams}, {lambda_on})")
        log.info("resuming from %s at epoch %d", resume_from, state.epoch)
    else:
        adapters = AdapterSet.inert(backbone.config,
                                    seed=derive_seed(config.seed, "adapter-init"),
                                    streams=streams, lambda_on=lambda_on)
        state = TrainState.fresh(adapters)
    state.skipped_records += skipped

    out_path = Path(out_dir) if out_dir is not None else None
    log_path = best_path = last_path = None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)
        log_path = out_path / TRAIN_LOG
        best_path = out_path / BEST_CHECKPOINT
        last_path = out_path / LAST_CHECKPOINT

    epoch_logs: list[dict] = []
    n_train = len(train_idx)
    for epoch in range(state.epoch, config.epochs):
        rng = np.random.default_rng(derive_seed(config.seed, "epoch", epoch))
        order = train_idx[rng.permutation(n_train)]
        total_loss = 0.0
        total_correct = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start:start + config.batch_size]
            loss, acc, grads = batch_loss_and_grads(
                backbone, state.adapters, loaded.images[batch],
                loaded.labels[batch], config.prompts)
            sgd_step(state, grads, config)
            total_loss += loss * len(batch)
            total_correct += acc * len(batch)
        epoch_loss = float(np.float32(total_loss / n_train))
        epoch_acc = total_correct / n_train

        if len(val_idx):
            val_loss = float(np.float32(evaluate_loss(
                backbone, state.adapters, loaded.images[val_idx],
                loaded.labels[val_idx], config.prompts, config.batch_size)))
        else:
            val_loss = epoch_loss

        state.loss_history.append(epoch_loss)
        state.epoch = epoch + 1
        entry = {"epoch": epoch, "loss": epoch_loss, "acc": epoch_acc,
                 "val_loss": val_loss, "timestamp": time.time()}
        epoch_logs.append(entry)
        if log_path is not None:
            with open(log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry) + "\n")
        log.info("epoch %d: loss %.6f acc %.4f val %.6f", epoch, epoch_loss,
                 epoch_acc, val_loss)

        if val_loss < state.best_val_loss:
            state.best_val_loss = val_loss
            if best_path is not None:
                save_train_state(backbone, state, config, best_path,
                                 streams=streams, lambda_on=lambda_on)
        if last_path is not None:
            save_train_state(backbone, state, config, last_path,
                             streams=streams, lambda_on=lambda_on)

        for i, adapter in state.adapters.items():
            if not check_bayar_constraint(adapter.constrained_kernel):
                raise ConfigError(f"constraint violated at epoch boundary, block {i}")

    if backbone.state_hash() != freeze_hash:
        raise ConfigError("backbone weights changed during training; freeze "
                          "contract violated")
    return TrainResult(state=state, epoch_logs=epoch_logs, best_checkpoint=best_path,
                       last_checkpoint=last_path, log_path=log_path)
