"""Procedural corpus: determinism, pairing, and class separability."""

from __future__ import annotations

import numpy as np
import pytest

from meddeepfake.errors import ManifestError
from meddeepfake.imaging import load_image
from meddeepfake.manifest import load_manifest, resolve_image_path, split_counts
from meddeepfake.toydata import (
    ARTIFACT_FAMILIES,
    artifact_pattern,
    generate_toy_corpus,
    highfreq_energy,
    inject_artifact,
    smooth_texture,
)


def test_smooth_texture_range_and_shape():
    tex = smooth_texture(np.random.default_rng(0), 32)
    assert tex.shape == (32, 32)
    assert tex.min() >= 0.1 - 1e-9 and tex.max() <= 0.9 + 1e-9


def test_artifact_patterns_zero_mean_high_frequency():
    for family in ARTIFACT_FAMILIES:
        pat = artifact_pattern(family, 30)
        assert abs(pat.mean()) < 1e-9
        # pixel-scale structure: far more Laplacian energy than any texture
        assert highfreq_energy(pat) > 1.0
    with pytest.raises(ManifestError, match="family"):
        artifact_pattern("plaid", 30)


def test_families_are_distinct():
    a = artifact_pattern("checker", 24)
    b = artifact_pattern("stripe", 24)
    assert not np.array_equal(a, b)


def test_inject_artifact_raises_highfreq_energy():
    rng = np.random.default_rng(3)
    tex = smooth_texture(rng, 32)
    fake = inject_artifact(tex, "checker", amplitude=0.1, rng=rng)
    assert fake.shape == tex.shape
    assert fake.min() >= 0.02 and fake.max() <= 0.98
    assert highfreq_energy(fake) > 4.0 * highfreq_energy(tex)


def test_corpus_layout_and_splits(toy_corpus):
    records = load_manifest(toy_corpus)
    assert len(records) == 48
    counts = split_counts(records)
    assert counts[("real", "train")] == 16
    assert counts[("fake", "train")] == 16
    assert counts[("real", "test")] == 8
    assert counts[("fake", "test")] == 8
    for r in records:
        assert resolve_image_path(r, toy_corpus).is_file()
        assert r.generator in ("real-source", "toy-checker")


def test_corpus_pairs_share_texture(toy_corpus):
    # fake i is real i plus a small perturbation, so the pair stays close
    records = load_manifest(toy_corpus)
    real = {r.path.split("_")[-1]: r for r in records if r.label == 0}
    fake = {r.path.split("_")[-1]: r for r in records if r.label == 1}
    assert real.keys() == fake.keys()
    key = sorted(real)[0]
    a = load_image(resolve_image_path(real[key], toy_corpus))
    b = load_image(resolve_image_path(fake[key], toy_corpus))
    assert np.max(np.abs(a - b)) < 0.35


def test_corpus_classes_separable_by_highfreq(toy_corpus):
    records = load_manifest(toy_corpus)
    energies = {0: [], 1: []}
    for r in records:
        energies[r.label].append(highfreq_energy(load_image(resolve_image_path(r, toy_corpus))))
    assert min(energies[1]) > max(energies[0])


def test_corpus_deterministic(tmp_path):
    m1 = generate_toy_corpus(3, seed=11, out_dir=tmp_path / "a")
    m2 = generate_toy_corpus(3, seed=11, out_dir=tmp_path / "b")
    assert m1.read_text() == m2.read_text()
    for rec in load_manifest(m1):
        p1 = resolve_image_path(rec, m1)
        p2 = resolve_image_path(rec, m2)
        assert p1.read_bytes() == p2.read_bytes()
    m3 = generate_toy_corpus(3, seed=12, out_dir=tmp_path / "c")
    rec = load_manifest(m3)[0]
    assert resolve_image_path(rec, m3).read_bytes() != \
        resolve_image_path(rec, m1).read_bytes()


def test_corpus_stripe_family(tmp_path):
    manifest = generate_toy_corpus(2, seed=5, out_dir=tmp_path, family="stripe")
    records = load_manifest(manifest)
    assert {r.generator for r in records} == {"real-source", "toy-stripe"}


def test_corpus_rejects_tiny_or_unknown(tmp_path):
    with pytest.raises(ManifestError):
        generate_toy_corpus(1, seed=0, out_dir=tmp_path)
    with pytest.raises(ManifestError):
        generate_toy_corpus(4, seed=0, out_dir=tmp_path, family="plaid")
