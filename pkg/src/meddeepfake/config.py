"""Layered run configuration: defaults <- config file <- CLI flags.

The config file is a single INI document with ``[run]``, ``[train]`` and
``[mfrm]`` sections.  Every knob defaults to the published recipe (epochs
50, batch 32, lr 1e-4, momentum 0.9, weight decay 0.005, alpha 0.1,
beta 10, 16 shots per class) so an empty config reproduces it.  All
randomness fans out from the single ``seed`` via tagged derivation, so
one value replays a whole run.
"""

from __future__ import annotations

import configparser
import json
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

from .adapters import LAMBDA_STREAMS, STREAM_MODES
from .backbone import Backbone, BackboneConfig
from .errors import CheckpointError, ConfigError
from .retrieval import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_SHOTS_PER_CLASS
from .training import TrainConfig

CACHE_DIR_ENV = "MEDDEEPFAKE_CACHE_DIR"


def default_out_dir() -> Path:
    return Path(os.environ.get(CACHE_DIR_ENV, ".")) / "runs"


@dataclass(frozen=True)
class RunConfig:
    """Everything a CLI run needs; serializable for the repro bundle."""

    backbone: str = "tiny"                       # "tiny" or a checkpoint path
    resolution: int | None = None                # None: backbone's own
    adapter_indices: tuple[int, ...] | None = None
    train: TrainConfig = field(default_factory=TrainConfig)
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    shots_per_class: int = DEFAULT_SHOTS_PER_CLASS
    seed: int = 0
    out_dir: Path = field(default_factory=default_out_dir)
    streams: str = "both"
    lambda_on: str = "noise"

    def __post_init__(self) -> None:
        if self.streams not in STREAM_MODES:
            raise ConfigError(f"streams must be one of {STREAM_MODES}, got "
                              f"{self.streams!r}")
        if self.lambda_on not in LAMBDA_STREAMS:
            raise ConfigError(f"lambda_on must be one of {LAMBDA_STREAMS}, got "
                              f"{self.lambda_on!r}")
        if self.shots_per_class < 1:
            raise ConfigError(f"shots_per_class must be >= 1, got "
                              f"{self.shots_per_class}")

    def to_dict(self) -> dict:
        return {
            "backbone": self.backbone,
            "resolution": self.resolution,
            "adapter_indices": list(self.adapter_indices)
            if self.adapter_indices is not None else None,
            "train": json.loads(self.train.to_json()),
            "alpha": self.alpha, "beta": self.beta,
            "shots_per_class": self.shots_per_class,
            "seed": self.seed, "out_dir": str(self.out_dir),
            "streams": self.streams, "lambda_on": self.lambda_on,
        }


def _get(parser: configparser.ConfigParser, section: str, option: str, cast,
         current):
    if not parser.has_option(section, option):
        return current
    raw = parser.get(section, option)
    try:
        return cast(raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"config [{section}] {option} = {raw!r}: {exc}") from exc


def _parse_indices(raw: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in raw.replace(" ", "").split(",") if tok)


_KNOWN_OPTIONS = {
    "run": ("backbone", "resolution", "adapter_indices", "seed", "out_dir",
            "streams", "lambda_on"),
    "train": ("epochs", "batch_size", "lr", "momentum", "weight_decay", "seed",
              "prompt_real", "prompt_fake", "val_fraction"),
    "mfrm": ("alpha", "beta", "shots_per_class"),
}


def _check_known_options(parser: configparser.ConfigParser, path: Path) -> None:
    """A typo in the config file must fail loudly, not train with defaults."""
    for section in parser.sections():
        if section not in _KNOWN_OPTIONS:
            raise ConfigError(f"{path}: unknown section [{section}] "
                              f"(expected {', '.join(_KNOWN_OPTIONS)})")
        allowed = _KNOWN_OPTIONS[section]
        for option in parser.options(section):
            if option not in allowed:
                raise ConfigError(f"{path}: unknown option '{option}' in "
                                  f"[{section}] (expected one of "
                                  f"{', '.join(allowed)})")


def load_run_config(path: str | Path | None = None,
                    overrides: dict | None = None) -> RunConfig:
    """Read the INI file (if any), then apply non-None overrides on top.

    Override keys mirror RunConfig fields plus flattened train fields
    (``epochs``, ``batch_size``, ``lr``, ``momentum``, ``weight_decay``,
    ``val_fraction``, ``prompt_real``, ``prompt_fake``, ``train_seed``).
    """
    cfg = RunConfig()
    train = cfg.train
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        parser = configparser.ConfigParser()
        try:
            parser.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        _check_known_options(parser, path)
        cfg = replace(
            cfg,
            backbone=_get(parser, "run", "backbone", str, cfg.backbone),
            resolution=_get(parser, "run", "resolution", int, cfg.resolution),
            adapter_indices=_get(parser, "run", "adapter_indices", _parse_indices,
                                 cfg.adapter_indices),
            seed=_get(parser, "run", "seed", int, cfg.seed),
            out_dir=Path(_get(parser, "run", "out_dir", str, str(cfg.out_dir))),
            streams=_get(parser, "run", "streams", str, cfg.streams),
            lambda_on=_get(parser, "run", "lambda_on", str, cfg.lambda_on),
            alpha=_get(parser, "mfrm", "alpha", float, cfg.alpha),
            beta=_get(parser, "mfrm", "beta", float, cfg.beta),
            shots_per_class=_get(parser, "mfrm", "shots_per_class", int,
                                 cfg.shots_per_class),
        )
        prompts = (_get(parser, "train", "prompt_real", str, train.prompts[0]),
                   _get(parser, "train", "prompt_fake", str, train.prompts[1]))
        train = TrainConfig(
            epochs=_get(parser, "train", "epochs", int, train.epochs),
            batch_size=_get(parser, "train", "batch_size", int, train.batch_size),
            lr=_get(parser, "train", "lr", float, train.lr),
            momentum=_get(parser, "train", "momentum", float, train.momentum),
            weight_decay=_get(parser, "train", "weight_decay", float,
                              train.weight_decay),
            seed=_get(parser, "train", "seed", int, cfg.seed),
            prompts=prompts,
            val_fraction=_get(parser, "train", "val_fraction", float,
                              train.val_fraction),
        )
        cfg = replace(cfg, train=train)

    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    train_fields = {}
    for key in ("epochs", "batch_size", "lr", "momentum", "weight_decay",
                "val_fraction"):
        if key in overrides:
            train_fields[key] = overrides.pop(key)
    if "train_seed" in overrides:
        train_fields["seed"] = overrides.pop("train_seed")
    prompt_real = overrides.pop("prompt_real", None)
    prompt_fake = overrides.pop("prompt_fake", None)
    run_fields = {}
    for key in ("backbone", "resolution", "seed", "alpha", "beta",
                "shots_per_class", "streams", "lambda_on"):
        if key in overrides:
            run_fields[key] = overrides.pop(key)
    if "adapter_indices" in overrides:
        idx = overrides.pop("adapter_indices")
        run_fields["adapter_indices"] = tuple(idx) if not isinstance(idx, str) \
            else _parse_indices(idx)
    if "out_dir" in overrides:
        run_fields["out_dir"] = Path(overrides.pop("out_dir"))
    if overrides:
        raise ConfigError(f"unknown config overrides: {sorted(overrides)}")

    cfg = replace(cfg, **run_fields)
    train = cfg.train
    prompts = (prompt_real if prompt_real is not None else train.prompts[0],
               prompt_fake if prompt_fake is not None else train.prompts[1])
    seed = train_fields.pop("seed", None)
    train = replace(train, prompts=prompts,
                    seed=seed if seed is not None else cfg.seed,
                    **train_fields)
    return replace(cfg, train=train)


def resolve_backbone(cfg: RunConfig) -> Backbone:
    """Materialize the configured backbone.

    ``tiny`` builds the in-repo reference weights (fixed init seed, so
    checkpoints stay interchangeable across runs).  Anything else is a
    checkpoint path whose stored config must agree with any explicit
    resolution / adapter-index overrides.
    """
    if cfg.backbone == "tiny":
        base = BackboneConfig.tiny()
        bb_config = base
        if cfg.adapter_indices is not None or cfg.resolution is not None:
            raise ConfigError("the tiny backbone has fixed geometry; drop the "
                              "resolution / adapter_indices overrides")
        return Backbone.random(bb_config, seed=0)
    path = Path(cfg.backbone)
    if not path.exists():
        raise CheckpointError(f"backbone checkpoint not found: {path}")
    backbone, _ = Backbone.load(path)
    if cfg.resolution is not None and \
            backbone.config.input_resolution != cfg.resolution:
        raise ConfigError(f"checkpoint resolution "
                          f"{backbone.config.input_resolution} != configured "
                          f"{cfg.resolution}")
    if cfg.adapter_indices is not None and \
            tuple(backbone.config.adapter_block_indices) != tuple(cfg.adapter_indices):
        raise ConfigError(f"checkpoint adapter indices "
                          f"{backbone.config.adapter_block_indices} != configured "
                          f"{tuple(cfg.adapter_indices)}")
    return backbone
