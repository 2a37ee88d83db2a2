"""Ablation harness: component on/off grid and stream on/off grid.

Two tables mirror the published ablations.  The component table crosses
the visual/text adapters (trained) against the retrieval bank; its
off/off row is the zero-shot prompt baseline.  The stream table keeps the
bank on and varies which adapter stream trains: none (no adapters at
all), spatial only, noise only, both.  The none row therefore coincides
with the component table's adapter-off/bank-on row, as in the source
tables.

Three trainings cover all eight rows (both-streams, spatial-only,
noise-only); each trained encoder gets its own bank so retrieval always
sees features from the encoder it augments.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone
from .detector import Detector
from .errors import CheckpointError
from .manifest import load_manifest, resolve_image_path
from .metrics import overall_metrics
from .retrieval import DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_SHOTS_PER_CLASS, \
    FeatureBank, build_bank
from .training import TrainConfig, train

log = logging.getLogger(__name__)

STREAM_VARIANTS = ("both", "spatial", "noise")


@dataclass
class AblationRow:
    table: str                   # "components" or "streams"
    label: str                   # human-readable row name
    acc: float | None = None
    ap: float | None = None
    n: int = 0
    available: bool = True
    note: str = ""


@dataclass
class AblationReport:
    component_rows: list[AblationRow] = field(default_factory=list)
    stream_rows: list[AblationRow] = field(default_factory=list)

    def _rows(self, table: str) -> list[AblationRow]:
        return self.component_rows if table == "components" else self.stream_rows

    def row(self, table: str, label: str) -> AblationRow:
        for r in self._rows(table):
            if r.label == label:
                return r
        raise KeyError(f"no row {label!r} in {table} table")

    def render_tables(self) -> str:
        def render(title: str, rows: list[AblationRow]) -> str:
            lines = [title, f"{'configuration':<24}{'n':>5}  {'Acc':>7}  {'AP':>7}"]
            lines.append("-" * len(lines[-1]))
            for r in rows:
                if not r.available:
                    lines.append(f"{r.label:<24}{'--':>5}  {'unavailable':>17}")
                    continue
                ap = f"{100 * r.ap:7.1f}" if r.ap is not None else f"{'--':>7}"
                lines.append(f"{r.label:<24}{r.n:>5}  {100 * r.acc:7.1f}  {ap}")
            return "\n".join(lines) + "\n"

        return (render("Core components (adapters x retrieval bank)",
                       self.component_rows)
                + "\n"
                + render("Adapter feature streams (bank on)", self.stream_rows))

    def to_json(self) -> str:
        def dump(rows):
            return [{"label": r.label, "acc": r.acc, "ap": r.ap, "n": r.n,
                     "available": r.available, "note": r.note} for r in rows]
        return json.dumps({"components": dump(self.component_rows),
                           "streams": dump(self.stream_rows)},
                          indent=2, sort_keys=True)


def score_on_test(detector: Detector, manifest: str | Path):
    """(acc, ap, n) of a detector over the manifest's test split."""
    manifest = Path(manifest)
    records = [r for r in load_manifest(manifest) if r.split == "test"]
    if not records:
        records = load_manifest(manifest)
    paths = [resolve_image_path(r, manifest) for r in records]
    labels = np.asarray([r.label for r in records])
    results = detector.detect_features(detector.encode_paths(paths))
    preds = np.asarray([r.predicted_label for r in results])
    scores = np.asarray([r.fake_probability for r in results])
    acc, ap = overall_metrics(scores, preds, labels)
    return acc, ap, len(records)


def _trained_detector(manifest, backbone: Backbone, config: TrainConfig,
                      streams: str, out_dir: Path | None,
                      reuse: bool, train_in_place: bool):
    """Train (or reload) one stream variant; returns a Detector or None."""
    variant_dir = out_dir / streams if out_dir is not None else None
    checkpoint = variant_dir / "best.ckpt" if variant_dir is not None else None
    if checkpoint is not None and checkpoint.exists() and reuse:
        try:
            return Detector.from_checkpoint(checkpoint, config=backbone.config)
        except CheckpointError as exc:
            log.warning("could not reuse %s (%s); retraining", checkpoint, exc)
    if not train_in_place:
        return None
    result = train(manifest, backbone, config, out_dir=variant_dir, streams=streams)
    # Score the best-validation checkpoint, not the final epoch, so a fresh
    # run and a reused-checkpoint run rank the same weights.
    if result.best_checkpoint is not None:
        return Detector.from_checkpoint(result.best_checkpoint,
                                        config=backbone.config)
    return Detector.create(backbone, adapters=result.state.adapters,
                           prompts=config.prompts)


def run_ablation(manifest: str | Path, backbone: Backbone, config: TrainConfig,
                 out_dir: str | Path | None = None,
                 n_per_class: int = DEFAULT_SHOTS_PER_CLASS,
                 alpha: float = DEFAULT_ALPHA, beta: float = DEFAULT_BETA,
                 bank_seed: int = 0, reuse_checkpoints: bool = False,
                 train_in_place: bool = True) -> AblationReport:
    manifest = Path(manifest)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    zero_shot = Detector.zero_shot(backbone, prompts=config.prompts)
    detectors: dict[str, Detector | None] = {"zero-shot": zero_shot}
    for streams in STREAM_VARIANTS:
        detectors[streams] = _trained_detector(manifest, backbone, config, streams,
                                               out_path, reuse_checkpoints,
                                               train_in_place)

    banks: dict[str, FeatureBank | None] = {}
    for name, det in detectors.items():
        banks[name] = None
        if det is not None:
            banks[name] = build_bank(manifest, det, n_per_class=n_per_class,
                                     seed=bank_seed, alpha=alpha, beta=beta)

    report = AblationReport()

    def add(table: str, label: str, base: str, with_bank: bool) -> None:
        rows = (report.component_rows if table == "components"
                else report.stream_rows)
        det = detectors.get(base)
        if det is None:
            rows.append(AblationRow(table=table, label=label, available=False,
                                    note="no trained checkpoint"))
            return
        scored = det.with_bank(banks[base]) if with_bank else det.with_bank(None)
        acc, ap, n = score_on_test(scored, manifest)
        rows.append(AblationRow(table=table, label=label, acc=acc, ap=ap, n=n))

    # component grid, row order matching the published table
    add("components", "adapters off, bank off", "zero-shot", with_bank=False)
    add("components", "adapters on,  bank off", "both", with_bank=False)
    add("components", "adapters off, bank on", "zero-shot", with_bank=True)
    add("components", "adapters on,  bank on", "both", with_bank=True)

    # stream grid (bank on throughout)
    add("streams", "no streams", "zero-shot", with_bank=True)
    add("streams", "spatial only", "spatial", with_bank=True)
    add("streams", "noise only", "noise", with_bank=True)
    add("streams", "spatial + noise", "both", with_bank=True)

    if out_path is not None:
        (out_path / "ablation.txt").write_text(report.render_tables(),
                                               encoding="utf-8")
        (out_path / "ablation.json").write_text(report.to_json(), encoding="utf-8")
    return report
