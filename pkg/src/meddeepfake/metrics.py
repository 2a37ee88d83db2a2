"""Accuracy and average precision, grouped evaluation, report tables.

Fake is the positive class.  Average precision is the plain "precision at
each positive, averaged over positives" estimator on a descending-score
ranking with stable (original-order) tie-breaking, so it is exactly
reproducible by a hand-rolled precision/recall enumeration.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ImageError, ManifestError
from .manifest import load_manifest, resolve_image_path

log = logging.getLogger(__name__)

GROUP_FIELDS = ("modality", "generator")


def accuracy(predictions, labels) -> float:
    """Fraction of exact matches."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ValueError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if predictions.size == 0:
        raise ValueError("empty prediction list")
    return float(np.mean(predictions == labels))


def average_precision(scores, labels) -> float:
    """AP with fake (label 1) as positive; stable tie-breaking.

    Rank by descending score, keeping original order among equal scores;
    AP = sum over positive ranks k of precision@k, divided by the number
    of positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"length mismatch: {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise ValueError("empty score list")
    n_pos = int(np.sum(labels == 1))
    if n_pos == 0:
        raise ValueError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order]
    hits = np.cumsum(ranked == 1)
    ranks = np.arange(1, len(ranked) + 1)
    precision_at = hits / ranks
    return float(np.sum(precision_at[ranked == 1]) / n_pos)


@dataclass
class GroupMetrics:
    n: int
    n_real: int
    n_fake: int
    acc: float
    ap: float | None      # None when the group has no positives


@dataclass
class EvalOutcome:
    """Per-sample scores plus per-group and mean aggregates."""

    group_by: str
    samples: list[dict] = field(default_factory=list)
    groups: dict[str, GroupMetrics] = field(default_factory=dict)
    mean_acc: float = float("nan")
    mean_ap: float = float("nan")
    skipped: int = 0

    def to_json(self) -> str:
        payload = {
            "group_by": self.group_by,
            "groups": {name: {"n": g.n, "n_real": g.n_real, "n_fake": g.n_fake,
                              "acc": g.acc, "ap": g.ap}
                       for name, g in self.groups.items()},
            "mean_acc": self.mean_acc,
            "mean_ap": self.mean_ap,
            "skipped": self.skipped,
            "samples": self.samples,
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def render_table(self) -> str:
        """One Acc/AP row across groups, percentages with one decimal."""
        names = list(self.groups)
        headers = [self.group_by] + names + ["mean"]

        def cell(acc: float, ap: float | None) -> str:
            if ap is None:
                return f"{100 * acc:.1f}/--"
            return f"{100 * acc:.1f}/{100 * ap:.1f}"

        row = ["Acc/AP"] + [cell(self.groups[n].acc, self.groups[n].ap)
                            for n in names]
        row.append(cell(self.mean_acc,
                        None if np.isnan(self.mean_ap) else self.mean_ap))
        widths = [max(len(h), len(r)) for h, r in zip(headers, row)]
        head = "  ".join(h.ljust(w) for h, w in zip(headers, widths))
        line = "  ".join(r.ljust(w) for r, w in zip(row, widths))
        return head + "\n" + "-" * len(head) + "\n" + line + "\n"


def overall_metrics(scores, predictions, labels) -> tuple[float, float | None]:
    """(accuracy, average precision or None if no positives)."""
    acc = accuracy(predictions, labels)
    ap = None
    if np.any(np.asarray(labels) == 1):
        ap = average_precision(scores, labels)
    return acc, ap


def evaluate(manifest: str | Path, detector, group_by: str = "modality") -> EvalOutcome:
    """Score every test record, aggregate per group, compute macro means.

    Records tagged ``test`` are used; if the manifest has none, every
    record is evaluated (with a warning).  Unreadable images are skipped
    and counted.  Groups that end up empty are omitted with a warning;
    groups without positives report accuracy only.
    """
    if group_by not in GROUP_FIELDS:
        raise ValueError(f"group_by must be one of {GROUP_FIELDS}, got {group_by!r}")
    manifest = Path(manifest)
    records = load_manifest(manifest)
    test_records = [r for r in records if r.split == "test"]
    if not test_records:
        log.warning("%s: no records tagged test; evaluating all %d records",
                    manifest, len(records))
        test_records = records
    if not test_records:
        raise ManifestError(f"{manifest}: nothing to evaluate")

    outcome = EvalOutcome(group_by=group_by)
    kept: list = []
    features = []
    for rec in test_records:
        path = resolve_image_path(rec, manifest)
        try:
            features.append(detector.encode_one(path))
        except ImageError as exc:
            outcome.skipped += 1
            log.warning("skipping unreadable image %s: %s", path, exc)
            continue
        kept.append(rec)
    if not kept:
        raise ManifestError(f"{manifest}: no readable test images")

    results = detector.detect_features(np.stack(features))
    for rec, res in zip(kept, results):
        outcome.samples.append({
            "path": rec.path, "label": rec.label, "score": res.fake_probability,
            "predicted": res.predicted_label, "modality": rec.modality,
            "generator": rec.generator, "used_bank": res.used_bank,
        })

    group_names = sorted({s[group_by] for s in outcome.samples})
    accs, aps = [], []
    for name in group_names:
        members = [s for s in outcome.samples if s[group_by] == name]
        if not members:
            log.warning("group %s is empty; omitted", name)
            continue
        labels = np.asarray([s["label"] for s in members])
        preds = np.asarray([s["predicted"] for s in members])
        scores = np.asarray([s["score"] for s in members])
        acc, ap = overall_metrics(scores, preds, labels)
        outcome.groups[name] = GroupMetrics(
            n=len(members), n_real=int(np.sum(labels == 0)),
            n_fake=int(np.sum(labels == 1)), acc=acc, ap=ap)
        accs.append(acc)
        if ap is not None:
            aps.append(ap)
    outcome.mean_acc = float(np.mean(accs)) if accs else float("nan")
    outcome.mean_ap = float(np.mean(aps)) if aps else float("nan")
    return outcome
