"""Detector for AI-generated medical images.

Two stages: adapter-based fine-tuning of a frozen vision-language
backbone (dual-stream visual adapter plus a two-layer text adapter),
then test-time augmentation with a few-shot forensic retrieval bank
whose affinity-weighted votes blend with the prompt classifier.

The package is import-light: submodules load on first attribute access
so the CLI can pin BLAS thread pools before numpy comes in.  Typical
entry points:

    from meddeepfake import Backbone, Detector, TrainConfig, train
    backbone = Backbone.tiny()
    result = train("manifest.jsonl", backbone, TrainConfig(epochs=20))
    detector = Detector.create(backbone, adapters=result.state.adapters)
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # backbone
    "Backbone": ".backbone", "BackboneConfig": ".backbone",
    "TokenSequence": ".backbone", "TextClassifier": ".backbone",
    "build_text_classifier": ".backbone", "classifier_logits": ".backbone",
    "DEFAULT_PROMPTS": ".backbone",
    # adapters
    "CdfaParams": ".adapters", "TextAdapterParams": ".adapters",
    "AdapterSet": ".adapters", "project_bayar_constraint": ".adapters",
    "noise_stream": ".adapters", "spatial_stream": ".adapters",
    "cdfa_forward": ".adapters", "text_adapter_forward": ".adapters",
    # training
    "TrainConfig": ".training", "TrainState": ".training",
    "TrainResult": ".training", "train": ".training", "bce_loss": ".training",
    "sgd_step": ".training", "save_train_state": ".training",
    "load_train_state": ".training",
    # retrieval
    "FeatureBank": ".retrieval", "DetectionResult": ".retrieval",
    "affinity": ".retrieval", "blended_logits": ".retrieval",
    "build_bank": ".retrieval", "insert_samples": ".retrieval",
    "save_bank": ".retrieval", "load_bank": ".retrieval",
    # detector / metrics / ablation
    "Detector": ".detector",
    "accuracy": ".metrics", "average_precision": ".metrics",
    "evaluate": ".metrics", "EvalOutcome": ".metrics",
    "run_ablation": ".ablation", "AblationReport": ".ablation",
    # data plumbing
    "DatasetRecord": ".manifest", "load_manifest": ".manifest",
    "save_manifest": ".manifest", "assign_splits": ".manifest",
    "load_image": ".imaging", "save_image": ".imaging", "preprocess": ".imaging",
    "generate_toy_corpus": ".toydata",
    "RunConfig": ".config", "load_run_config": ".config",
    "resolve_backbone": ".config",
    "derive_seed": ".seeding",
    "save_tensors": ".tensorio", "load_tensors": ".tensorio",
    # errors
    "MedDeepfakeError": ".errors", "ManifestError": ".errors",
    "ImageError": ".errors", "CheckpointError": ".errors",
    "BankError": ".errors", "ConfigError": ".errors",
}

__all__ = ["__version__"] + sorted(_EXPORTS)


def __getattr__(name: str):
    if name in _EXPORTS:
        value = getattr(import_module(_EXPORTS[name], __name__), name)
        globals()[name] = value
        return value
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
