"""Dataset manifests: one JSON object per line describing one image.

Fields: ``path`` (string, resolved relative to the manifest's directory
when not absolute), ``label`` ("real" | "fake"), ``modality``,
``generator`` (free string such as "real-source"), and an optional
``split`` ("train" | "test").
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ManifestError
from .seeding import derive_seed

log = logging.getLogger(__name__)

LABEL_REAL = 0
LABEL_FAKE = 1
LABEL_NAMES = {LABEL_REAL: "real", LABEL_FAKE: "fake"}
LABEL_VALUES = {"real": LABEL_REAL, "fake": LABEL_FAKE}

MODALITIES = ("ultrasound", "endoscope", "histopathology", "mri", "ct", "xray", "other")
_MODALITY_ALIASES = {
    "x-ray": "xray",
    "endoscopy": "endoscope",
    "ultra-sound": "ultrasound",
    "histology": "histopathology",
}
SPLITS = ("train", "test")


@dataclass(frozen=True)
class DatasetRecord:
    """One image: path, binary label, acquisition modality, generator, split."""

    path: str
    label: int
    modality: str
    generator: str
    split: str | None = None

    def to_json(self) -> dict:
        obj = {
            "path": self.path,
            "label": LABEL_NAMES[self.label],
            "modality": self.modality,
            "generator": self.generator,
        }
        if self.split is not None:
            obj["split"] = self.split
        return obj


def _parse_record(obj: dict, where: str) -> DatasetRecord:
    for field in ("path", "label", "modality", "generator"):
        if field not in obj:
            raise ManifestError(f"{where}: missing field '{field}'")
    path = obj["path"]
    if not isinstance(path, str) or not path:
        raise ManifestError(f"{where}: 'path' must be a non-empty string")
    label = obj["label"]
    if label not in LABEL_VALUES:
        raise ManifestError(f"{where}: label must be 'real' or 'fake', got {label!r}")
    modality = str(obj["modality"]).lower()
    modality = _MODALITY_ALIASES.get(modality, modality)
    if modality not in MODALITIES:
        raise ManifestError(f"{where}: unknown modality {obj['modality']!r} "
                            f"(expected one of {', '.join(MODALITIES)})")
    split = obj.get("split")
    if split is not None and split not in SPLITS:
        raise ManifestError(f"{where}: split must be 'train' or 'test', got {split!r}")
    return DatasetRecord(path=path, label=LABEL_VALUES[label], modality=modality,
                         generator=str(obj["generator"]), split=split)


def load_manifest(path: str | Path) -> list[DatasetRecord]:
    """Read a JSON-Lines manifest, preserving record order.

    Raises :class:`ManifestError` naming the offending line on malformed
    records and on duplicate paths.
    """
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    records: list[DatasetRecord] = []
    seen: set[str] = set()
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            where = f"{path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestError(f"{where}: invalid JSON: {exc}") from exc
            if not isinstance(obj, dict):
                raise ManifestError(f"{where}: expected a JSON object")
            record = _parse_record(obj, where)
            if record.path in seen:
                raise ManifestError(f"{where}: duplicate path {record.path!r}")
            seen.add(record.path)
            records.append(record)
    return records


def save_manifest(records: Iterable[DatasetRecord], path: str | Path) -> Path:
    """Write records as JSON Lines; returns the manifest path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for record in records:
            fh.write(json.dumps(record.to_json(), sort_keys=True) + "\n")
    return path


def resolve_image_path(record: DatasetRecord, manifest_path: str | Path) -> Path:
    """Record paths are relative to the manifest file unless absolute."""
    p = Path(record.path)
    return p if p.is_absolute() else Path(manifest_path).parent / p


def split_counts(records: Iterable[DatasetRecord]) -> dict[tuple[str, str | None], int]:
    """Counts keyed by (label name, split)."""
    counts: dict[tuple[str, str | None], int] = {}
    for r in records:
        key = (LABEL_NAMES[r.label], r.split)
        counts[key] = counts.get(key, 0) + 1
    return counts


def assign_splits(records: list[DatasetRecord], train_fraction: float,
                  seed: int) -> list[DatasetRecord]:
    """Stratified train/test assignment, deterministic in ``seed``.

    Records are grouped by (label, generator); within each group exactly
    ``floor(len * train_fraction)`` go to train, the remainder to test.
    Groups of size < 2 go entirely to train with a warning.  Existing
    split values are overwritten; record order is preserved.
    """
    if not records:
        raise ManifestError("assign_splits: no records")
    if not 0.0 < train_fraction < 1.0:
        raise ManifestError(f"assign_splits: train_fraction must be in (0, 1), "
                            f"got {train_fraction}")
    groups: dict[tuple[int, str], list[int]] = {}
    for idx, r in enumerate(records):
        groups.setdefault((r.label, r.generator), []).append(idx)
    assigned: dict[int, str] = {}
    for (label, generator), indices in groups.items():
        if len(indices) < 2:
            log.warning("split group (label=%s, generator=%s) has %d record(s); "
                        "assigning all to train", LABEL_NAMES[label], generator,
                        len(indices))
            for idx in indices:
                assigned[idx] = "train"
            continue
        rng = np.random.default_rng(derive_seed(seed, "split", label, generator))
        order = rng.permutation(len(indices))
        n_train = int(len(indices) * train_fraction)
        for rank, pos in enumerate(order):
            assigned[indices[pos]] = "train" if rank < n_train else "test"
    return [replace(r, split=assigned[i]) for i, r in enumerate(records)]


def filter_split(records: Iterable[DatasetRecord], split: str) -> list[DatasetRecord]:
    return [r for r in records if r.split == split]
