"""Accuracy, average precision, and grouped evaluation."""

from __future__ import annotations

import json
import math

import numpy as np
import pytest

from meddeepfake.errors import ManifestError
from meddeepfake.imaging import save_image
from meddeepfake.manifest import DatasetRecord, save_manifest
from meddeepfake.metrics import accuracy, average_precision, evaluate, overall_metrics
from meddeepfake.retrieval import DetectionResult


def _ap_oracle(scores, labels):
    """Precision/recall enumeration with explicit stable sorting."""
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    n_pos = sum(1 for l in labels if l == 1)
    hits = 0
    total = 0.0
    for rank, idx in enumerate(order, start=1):
        if labels[idx] == 1:
            hits += 1
            total += hits / rank
    return total / n_pos


# -- accuracy --------------------------------------------------------------

def test_accuracy_basic():
    assert accuracy([0, 1, 1, 0], [0, 1, 0, 0]) == 0.75
    assert accuracy([1], [1]) == 1.0


def test_accuracy_validation():
    with pytest.raises(ValueError, match="empty"):
        accuracy([], [])
    with pytest.raises(ValueError, match="mismatch"):
        accuracy([0, 1], [0])


# -- average precision -----------------------------------------------------

def test_ap_perfect_ranking():
    assert average_precision([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0


def test_ap_known_value_five_sixths():
    ap = average_precision([0.9, 0.8, 0.7], [1, 0, 1])
    assert ap == pytest.approx(5.0 / 6.0, abs=1e-12)


def test_ap_worst_ranking():
    # single positive ranked last among four
    ap = average_precision([0.1, 0.8, 0.7, 0.6], [1, 0, 0, 0])
    assert ap == pytest.approx(0.25, abs=1e-12)


def test_ap_matches_enumeration_oracle(rng):
    for trial in range(30):
        n = int(rng.integers(2, 40))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() == 0:
            labels[int(rng.integers(0, n))] = 1
        scores = np.round(rng.random(n), 2)  # rounding forces ties
        fast = average_precision(scores, labels)
        slow = _ap_oracle(scores.tolist(), labels.tolist())
        assert fast == pytest.approx(slow, abs=1e-12), f"trial {trial}"


def test_ap_invariant_under_monotone_transform(rng):
    scores = rng.random(25)
    labels = rng.integers(0, 2, size=25)
    labels[0] = 1
    base = average_precision(scores, labels)
    assert average_precision(3.0 * scores + 2.0, labels) == pytest.approx(base)
    assert average_precision(1.0 / (1.0 + np.exp(-scores)), labels) == \
        pytest.approx(base)


def test_ap_ties_break_by_original_order():
    # all scores equal: the ranking is the input order itself
    labels = [1, 0, 0, 1]
    ap = average_precision([0.5, 0.5, 0.5, 0.5], labels)
    assert ap == pytest.approx((1.0 / 1 + 2.0 / 4) / 2, abs=1e-12)
    # moving the positives to the front changes the result accordingly
    ap_front = average_precision([0.5, 0.5, 0.5, 0.5], [1, 1, 0, 0])
    assert ap_front == 1.0


def test_ap_validation():
    with pytest.raises(ValueError, match="empty"):
        average_precision([], [])
    with pytest.raises(ValueError, match="positive"):
        average_precision([0.5, 0.4], [0, 0])
    with pytest.raises(ValueError, match="mismatch"):
        average_precision([0.5], [0, 1])


def test_overall_metrics_handles_no_positives():
    acc, ap = overall_metrics([0.1, 0.2], [0, 0], [0, 0])
    assert acc == 1.0
    assert ap is None


# -- grouped evaluation ----------------------------------------------------

class _FixedDetector:
    """Detector stub driven by a path -> fake-probability table."""

    def __init__(self, prob_for_path):
        self.prob_for_path = prob_for_path

    def encode_one(self, path):
        # the "feature" is just the probability looked up by file name
        from meddeepfake.errors import ImageError
        name = str(path).rsplit("/", 1)[-1]
        if name not in self.prob_for_path:
            raise ImageError(f"{path}: cannot decode image")
        return np.asarray([self.prob_for_path[name]], dtype=np.float32)

    def detect_features(self, features):
        out = []
        for p in features[:, 0]:
            p = float(p)
            z = math.log(p / (1 - p))
            out.append(DetectionResult(
                logits=np.asarray([0.0, z]), fake_probability=p,
                predicted_label=1 if z > 0 else 0, used_bank=False))
        return out


def _write_corpus(tmp_path, specs):
    """specs: list of (name, label, modality, generator, split)."""
    records = []
    for name, label, modality, generator, split in specs:
        save_image(np.full((8, 8, 3), 0.5), tmp_path / name)
        records.append(DatasetRecord(name, label, modality, generator, split))
    return save_manifest(records, tmp_path / "m.jsonl")


def test_evaluate_perfect_detector(tmp_path):
    manifest = _write_corpus(tmp_path, [
        ("r1.png", 0, "mri", "real-source", "test"),
        ("r2.png", 0, "ct", "real-source", "test"),
        ("f1.png", 1, "mri", "gan-a", "test"),
        ("f2.png", 1, "ct", "gan-a", "test"),
    ])
    det = _FixedDetector({"r1.png": 0.1, "r2.png": 0.2, "f1.png": 0.9,
                          "f2.png": 0.8})
    outcome = evaluate(manifest, det, group_by="modality")
    assert set(outcome.groups) == {"mri", "ct"}
    for g in outcome.groups.values():
        assert g.acc == 1.0
        assert g.ap == 1.0
        assert g.n == 2
    assert outcome.mean_acc == 1.0
    assert outcome.mean_ap == 1.0
    assert outcome.skipped == 0


def test_evaluate_inverted_detector(tmp_path):
    manifest = _write_corpus(tmp_path, [
        ("r1.png", 0, "mri", "real-source", "test"),
        ("f1.png", 1, "mri", "gan-a", "test"),
    ])
    det = _FixedDetector({"r1.png": 0.9, "f1.png": 0.1})
    outcome = evaluate(manifest, det)
    assert outcome.groups["mri"].acc == 0.0
    assert outcome.groups["mri"].ap == pytest.approx(0.5)


def test_evaluate_group_by_generator_singleclass_groups(tmp_path):
    manifest = _write_corpus(tmp_path, [
        ("r1.png", 0, "mri", "real-source", "test"),
        ("r2.png", 0, "mri", "real-source", "test"),
        ("f1.png", 1, "mri", "gan-a", "test"),
        ("f2.png", 1, "mri", "gan-b", "test"),
    ])
    det = _FixedDetector({"r1.png": 0.1, "r2.png": 0.3, "f1.png": 0.9,
                          "f2.png": 0.7})
    outcome = evaluate(manifest, det, group_by="generator")
    assert set(outcome.groups) == {"real-source", "gan-a", "gan-b"}
    # the all-real group has no positives: accuracy only
    assert outcome.groups["real-source"].ap is None
    assert outcome.groups["real-source"].acc == 1.0
    assert outcome.groups["gan-a"].ap == 1.0
    # macro means: AP average skips the AP-less group
    assert outcome.mean_ap == pytest.approx(1.0)
    assert outcome.mean_acc == pytest.approx(1.0)


def test_evaluate_skips_unreadable_and_counts(tmp_path, caplog):
    manifest = _write_corpus(tmp_path, [
        ("r1.png", 0, "mri", "real-source", "test"),
        ("gone.png", 1, "mri", "gan-a", "test"),
        ("f1.png", 1, "mri", "gan-a", "test"),
    ])
    det = _FixedDetector({"r1.png": 0.1, "f1.png": 0.9})  # gone.png unknown
    with caplog.at_level("WARNING"):
        outcome = evaluate(manifest, det)
    assert outcome.skipped == 1
    assert outcome.groups["mri"].n == 2


def test_evaluate_falls_back_to_all_records(tmp_path, caplog):
    manifest = _write_corpus(tmp_path, [
        ("r1.png", 0, "mri", "real-source", None),
        ("f1.png", 1, "mri", "gan-a", None),
    ])
    det = _FixedDetector({"r1.png": 0.1, "f1.png": 0.9})
    with caplog.at_level("WARNING"):
        outcome = evaluate(manifest, det)
    assert any("no records tagged test" in m for m in caplog.messages)
    assert outcome.groups["mri"].n == 2


def test_evaluate_rejects_bad_group_field(tmp_path):
    manifest = _write_corpus(tmp_path, [("r1.png", 0, "mri", "g", "test")])
    with pytest.raises(ValueError, match="group_by"):
        evaluate(manifest, _FixedDetector({}), group_by="split")


def test_evaluate_all_unreadable(tmp_path):
    manifest = _write_corpus(tmp_path, [("r1.png", 0, "mri", "g", "test")])
    with pytest.raises(ManifestError, match="no readable"):
        evaluate(manifest, _FixedDetector({}))


def test_render_table_and_json(tmp_path):
    manifest = _write_corpus(tmp_path, [
        ("r1.png", 0, "mri", "real-source", "test"),
        ("f1.png", 1, "mri", "gan-a", "test"),
        ("r2.png", 0, "ct", "real-source", "test"),
    ])
    det = _FixedDetector({"r1.png": 0.1, "f1.png": 0.9, "r2.png": 0.2})
    outcome = evaluate(manifest, det)
    table = outcome.render_table()
    assert "Acc/AP" in table
    assert "mri" in table and "ct" in table
    assert "100.0/100.0" in table   # mri group: perfect
    assert "100.0/--" in table      # ct group: no positives

    payload = json.loads(outcome.to_json())
    assert payload["group_by"] == "modality"
    assert payload["groups"]["ct"]["ap"] is None
    assert payload["groups"]["mri"]["acc"] == 1.0
    assert len(payload["samples"]) == 3
