"""Procedural desk-scale forensic corpus.

"Real" images are smooth band-limited textures (a few low-frequency
gratings plus a soft blob).  "Fake" images are the same textures with a
low-amplitude high-frequency artifact injected: a pixel-level
checkerboard or diagonal stripe pattern under a smooth envelope, plus a
little broadband noise.  The two classes are separable by high-frequency
energy, which stands in for generator forgery traces.

Artifact families exist so that a detector trained on one family can be
confronted with an unseen one ("checker" vs "stripe").
"""

from __future__ import annotations

import logging
from pathlib import Path

import numpy as np

from .errors import ManifestError
from .imaging import save_image
from .manifest import DatasetRecord, assign_splits, save_manifest
from .seeding import derive_seed

log = logging.getLogger(__name__)

ARTIFACT_FAMILIES = ("checker", "stripe")
REAL_GENERATOR = "real-source"


def smooth_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Band-limited grayscale texture in roughly [0.1, 0.9], shape (size, size)."""
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    tex = np.zeros((size, size), dtype=np.float64)
    for _ in range(3):
        period = rng.uniform(0.4 * size, 1.2 * size)
        angle = rng.uniform(0.0, np.pi)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        proj = xx * np.cos(angle) + yy * np.sin(angle)
        tex += rng.uniform(0.5, 1.0) * np.sin(2.0 * np.pi * proj / period + phase)
    cy, cx = rng.uniform(0.2 * size, 0.8 * size, size=2)
    sigma = rng.uniform(0.25 * size, 0.6 * size)
    tex += rng.uniform(0.5, 1.5) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
    lo, hi = tex.min(), tex.max()
    return (0.1 + 0.8 * (tex - lo) / (hi - lo + 1e-12)).astype(np.float64)


def artifact_pattern(family: str, size: int) -> np.ndarray:
    """Zero-mean +-1 high-frequency pattern for one artifact family."""
    yy, xx = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    if family == "checker":
        return np.where((xx + yy) % 2 == 0, 1.0, -1.0)
    if family == "stripe":
        # diagonal stripes, period 3: a different band and orientation
        return np.where((xx - yy) % 3 == 0, 1.0, -0.5)
    raise ManifestError(f"unknown artifact family {family!r} "
                        f"(expected one of {', '.join(ARTIFACT_FAMILIES)})")


def inject_artifact(texture: np.ndarray, family: str, amplitude: float,
                    rng: np.random.Generator) -> np.ndarray:
    """Add the family pattern under a smooth envelope plus faint noise."""
    size = texture.shape[0]
    yy, xx = np.meshgrid(np.arange(size, dtype=np.float64),
                         np.arange(size, dtype=np.float64), indexing="ij")
    angle = rng.uniform(0.0, np.pi)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    wave = np.sin(2.0 * np.pi * (xx * np.cos(angle) + yy * np.sin(angle)) / size + phase)
    envelope = 0.7 + 0.3 * wave
    pattern = artifact_pattern(family, size)
    noise = rng.uniform(-1.0, 1.0, size=texture.shape)
    fake = texture + amplitude * pattern * envelope + (amplitude / 3.0) * noise
    return np.clip(fake, 0.02, 0.98)


def highfreq_energy(image: np.ndarray) -> float:
    """Mean squared 4-neighbour Laplacian over the interior (grayscale)."""
    gray = np.asarray(image, dtype=np.float64)
    if gray.ndim == 3:
        gray = gray.mean(axis=2)
    lap = (4.0 * gray[1:-1, 1:-1] - gray[:-2, 1:-1] - gray[2:, 1:-1]
           - gray[1:-1, :-2] - gray[1:-1, 2:])
    return float(np.mean(lap**2))


def generate_toy_corpus(n_per_class: int, seed: int, out_dir: str | Path,
                        family: str = "checker", image_size: int = 32,
                        amplitude: float = 0.10, train_fraction: float = 2.0 / 3.0,
                        modality: str = "other") -> Path:
    """Write ``2 * n_per_class`` PNGs plus a split-assigned manifest.

    Fake image i shares its base texture with real image i, so the classes
    differ only in the injected artifact.  Deterministic for a fixed seed
    (byte-identical images).  Returns the manifest path.
    """
    if n_per_class < 2:
        raise ManifestError(f"generate_toy_corpus: n_per_class must be >= 2, "
                            f"got {n_per_class}")
    if family not in ARTIFACT_FAMILIES:
        raise ManifestError(f"unknown artifact family {family!r} "
                            f"(expected one of {', '.join(ARTIFACT_FAMILIES)})")
    out_dir = Path(out_dir)
    records: list[DatasetRecord] = []
    for i in range(n_per_class):
        tex_rng = np.random.default_rng(derive_seed(seed, "toy-texture", family, i))
        texture = smooth_texture(tex_rng, image_size)

        real_rel = f"real/real_{i:04d}.png"
        save_image(texture, out_dir / real_rel)
        records.append(DatasetRecord(path=real_rel, label=0, modality=modality,
                                     generator=REAL_GENERATOR))

        art_rng = np.random.default_rng(derive_seed(seed, "toy-artifact", family, i))
        fake = inject_artifact(texture, family, amplitude, art_rng)
        fake_rel = f"fake/fake_{family}_{i:04d}.png"
        save_image(fake, out_dir / fake_rel)
        records.append(DatasetRecord(path=fake_rel, label=1, modality=modality,
                                     generator=f"toy-{family}"))

    records = assign_splits(records, train_fraction, seed=derive_seed(seed, "toy-split"))
    manifest_path = save_manifest(records, out_dir / "manifest.jsonl")
    log.info("toy corpus (%s) written to %s: %d real + %d fake", family, out_dir,
             n_per_class, n_per_class)
    return manifest_path
