"""End-to-end detector: adapted encoder + prompt classifier + optional bank.

A detector owns a frozen backbone, an optional adapter set (None means
zero-shot), the prompt-derived classifier, and an optional retrieval
bank.  It is the "backbone_with_adapters" object the retrieval module
expects: it exposes ``encode_paths`` / ``encode_one`` for bank
construction and insertion, and ``detect_*`` for verdicts.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .adapters import AdapterSet
from .backbone import Backbone, BackboneConfig, DEFAULT_PROMPTS, TextClassifier, \
    build_text_classifier
from .errors import ConfigError, ImageError
from .imaging import load_image, preprocess
from .retrieval import DetectionResult, FeatureBank, blended_logits_batch
from .training import adapted_classifier_forward, load_train_state

log = logging.getLogger(__name__)

_ENCODE_BATCH = 32


@dataclass
class Detector:
    backbone: Backbone
    adapters: AdapterSet | None
    classifier: TextClassifier
    bank: FeatureBank | None = None

    @property
    def config(self) -> BackboneConfig:
        return self.backbone.config

    @classmethod
    def create(cls, backbone: Backbone, adapters: AdapterSet | None = None,
               prompts=DEFAULT_PROMPTS, bank: FeatureBank | None = None) -> "Detector":
        """Build the classifier from prompts, routed through the text adapter
        when one is present."""
        if adapters is not None:
            weights, _ = adapted_classifier_forward(backbone, adapters, prompts)
            classifier = TextClassifier(weights=weights,
                                        prompts=(prompts[0], prompts[1]))
        else:
            classifier = build_text_classifier(backbone, prompts)
        return cls(backbone=backbone, adapters=adapters, classifier=classifier,
                   bank=bank)

    @classmethod
    def zero_shot(cls, backbone: Backbone, prompts=DEFAULT_PROMPTS) -> "Detector":
        """Frozen backbone + prompts only: the no-adapter, no-bank baseline."""
        return cls.create(backbone, adapters=None, prompts=prompts)

    @classmethod
    def from_checkpoint(cls, path: str | Path, config: BackboneConfig | None = None,
                        bank: FeatureBank | None = None) -> "Detector":
        backbone, state, train_config, _, _ = load_train_state(path, config=config)
        prompts = train_config.prompts if train_config is not None else DEFAULT_PROMPTS
        return cls.create(backbone, adapters=state.adapters, prompts=prompts,
                          bank=bank)

    def with_bank(self, bank: FeatureBank | None) -> "Detector":
        return replace(self, bank=bank)

    # -- encoding ----------------------------------------------------------

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        """Preprocessed (N, R, R, 3) batch -> unit-norm (N, C) features."""
        out = []
        for start in range(0, len(images), _ENCODE_BATCH):
            feat, _ = self.backbone.encode_image(images[start:start + _ENCODE_BATCH],
                                                 adapters=self.adapters)
            out.append(feat)
        return np.concatenate(out, axis=0)

    def _preprocess(self, image: np.ndarray) -> np.ndarray:
        cfg = self.config
        return preprocess(image, cfg.input_resolution, mean=cfg.image_mean,
                          std=cfg.image_std)

    def encode_paths(self, paths) -> np.ndarray:
        """Image files -> unit-norm features; raises ImageError on bad files."""
        images = [self._preprocess(load_image(p)) for p in paths]
        if not images:
            return np.zeros((0, self.config.channel_dim), dtype=np.float32)
        return self.encode_images(np.stack(images).astype(np.float32))

    def encode_one(self, image) -> np.ndarray:
        """One path or raw [0,1] HxWxC array -> unit-norm feature vector."""
        if isinstance(image, (str, Path)):
            raw = load_image(image)
        else:
            raw = np.asarray(image, dtype=np.float32)
            if raw.ndim not in (2, 3):
                raise ImageError(f"expected a 2-D or 3-D image array, got shape "
                                 f"{raw.shape}")
        batch = self._preprocess(raw)[None]
        return self.encode_images(batch)[0]

    # -- detection ---------------------------------------------------------

    def detect_features(self, features: np.ndarray) -> list[DetectionResult]:
        bank = self.bank
        if bank is not None and bank.channel_dim != self.config.channel_dim:
            raise ConfigError(f"bank channel dim {bank.channel_dim} does not match "
                              f"backbone {self.config.channel_dim}")
        if bank is None:
            bank = FeatureBank.empty(self.config.channel_dim)
        return blended_logits_batch(features, bank, self.classifier)

    def detect_images(self, images: np.ndarray) -> list[DetectionResult]:
        return self.detect_features(self.encode_images(images))

    def detect_paths(self, paths) -> list[DetectionResult]:
        return self.detect_features(self.encode_paths(paths))

    def detect_one(self, image) -> DetectionResult:
        return self.detect_features(self.encode_one(image)[None])[0]
