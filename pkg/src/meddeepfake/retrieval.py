"""Few-shot forensic retrieval bank for test-time augmentation.

A bank is a pair of aligned matrices: L2-normalized feature keys from the
adapted encoder and one-hot label values.  A query feature is scored by

    affinity a_j = exp(-alpha * (1 - cos(query, key_j)))
    logits      = beta * (a @ values) + query @ classifier_weights.T

so retrieval evidence is blended with the prompt classifier (whose term
runs at temperature 1; beta calibrates the blend).  The bank is built
once from a handful of train samples, never trained, and supports online
insertion of newly labeled samples at test time.

Banks are immutable values: insertion returns a new bank and readers can
never observe a partial update.  Persistence is a little-endian binary
format (magic ``MFRM``) that round-trips bit-exactly.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import BankError, ImageError
from .manifest import LABEL_NAMES, load_manifest, resolve_image_path
from .seeding import derive_seed

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 10.0
DEFAULT_SHOTS_PER_CLASS = 16

_BANK_MAGIC = b"MFRM"
_BANK_VERSION = 1
_NORM_TOL = 1e-3


@dataclass(frozen=True)
class FeatureBank:
    """Immutable key/value store: unit-norm feature rows against one-hot labels."""

    keys: np.ndarray                 # (N, C) float32, rows L2-normalized
    values: np.ndarray               # (N, 2) float32, one-hot rows
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    provenance: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if self.keys.ndim != 2:
            raise BankError(f"keys must be 2-D, got shape {self.keys.shape}")
        n = self.keys.shape[0]
        if self.values.shape != (n, 2):
            raise BankError(f"values shape {self.values.shape} does not match "
                            f"{n} keys")
        if len(self.provenance) != n:
            raise BankError(f"provenance length {len(self.provenance)} does not "
                            f"match {n} rows")
        if n:
            norms = np.linalg.norm(self.keys, axis=1)
            worst = float(np.max(np.abs(norms - 1.0)))
            if worst > 1e-6:
                raise BankError(f"key rows must be unit-norm (worst deviation "
                                f"{worst:.2e})")
            one_hot = (np.all(np.isin(self.values, (0.0, 1.0)))
                       and np.all(self.values.sum(axis=1) == 1.0))
            if not one_hot:
                raise BankError("value rows must be one-hot (1,0) or (0,1)")
        if not (np.isfinite(self.alpha) and np.isfinite(self.beta)):
            raise BankError("alpha and beta must be finite")

    @property
    def n_rows(self) -> int:
        return self.keys.shape[0]

    @property
    def channel_dim(self) -> int:
        return self.keys.shape[1]

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.values, axis=1) if self.n_rows else \
            np.zeros(0, dtype=np.int64)

    def class_counts(self) -> tuple[int, int]:
        labels = self.labels
        return int(np.sum(labels == 0)), int(np.sum(labels == 1))

    @classmethod
    def empty(cls, channel_dim: int, alpha: float = DEFAULT_ALPHA,
              beta: float = DEFAULT_BETA) -> "FeatureBank":
        return cls(keys=np.zeros((0, channel_dim), dtype=np.float32),
                   values=np.zeros((0, 2), dtype=np.float32),
                   alpha=alpha, beta=beta, provenance=())


@dataclass(frozen=True)
class DetectionResult:
    """One sample's verdict: blended logits, fake probability, label."""

    logits: np.ndarray               # (2,) [real, fake]
    fake_probability: float
    predicted_label: int             # 0 real, 1 fake; ties resolve to real
    used_bank: bool

    @property
    def predicted_name(self) -> str:
        return LABEL_NAMES[self.predicted_label]


def _check_query(query: np.ndarray, bank: FeatureBank) -> np.ndarray:
    query = np.asarray(query)
    if query.ndim == 1:
        query = query[None, :]
    if query.shape[1] != bank.channel_dim:
        raise BankError(f"query width {query.shape[1]} does not match bank "
                        f"channel dim {bank.channel_dim}")
    norms = np.linalg.norm(query, axis=1)
    worst = float(np.max(np.abs(norms - 1.0))) if query.size else 0.0
    if worst > _NORM_TOL:
        raise BankError(f"query must be unit-norm (worst deviation {worst:.2e}); "
                        f"normalize before calling")
    return query


def affinity(query: np.ndarray, bank: FeatureBank) -> np.ndarray:
    """exp(-alpha * (1 - cosine)) against every key; shape (N,) for one query."""
    single = np.asarray(query).ndim == 1
    q = _check_query(query, bank)
    cos = q @ bank.keys.T
    out = np.exp(-bank.alpha * (1.0 - cos))
    return out[0] if single else out


def _blend(q: np.ndarray, bank: FeatureBank, weights: np.ndarray) -> np.ndarray:
    """(B, C) queries -> (B, 2) blended logits."""
    logits = q @ weights.T
    if bank.n_rows:
        aff = np.exp(-bank.alpha * (1.0 - q @ bank.keys.T))
        logits = bank.beta * (aff @ bank.values) + logits
    return logits


def _to_result(row: np.ndarray, used_bank: bool) -> DetectionResult:
    z = np.asarray(row, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise BankError(f"non-finite detection logits: {row}")
    e = np.exp(z - z.max())
    fake_p = float(e[1] / e.sum())
    predicted = 1 if z[1] > z[0] else 0
    return DetectionResult(logits=row.copy(), fake_probability=fake_p,
                           predicted_label=predicted, used_bank=used_bank)


def blended_logits(query: np.ndarray, bank: FeatureBank, classifier) -> DetectionResult:
    """Score one unit-norm query against bank plus prompt classifier.

    With an empty bank the result is the classifier term alone and
    ``used_bank`` is False (the no-new-samples fallback).
    """
    q = _check_query(query, bank)
    row = _blend(q, bank, classifier.weights)[0]
    return _to_result(row, used_bank=bank.n_rows > 0)


def blended_logits_batch(queries: np.ndarray, bank: FeatureBank,
                         classifier) -> list[DetectionResult]:
    q = _check_query(queries, bank)
    rows = _blend(q, bank, classifier.weights)
    used = bank.n_rows > 0
    return [_to_result(rows[i], used_bank=used) for i in range(rows.shape[0])]


# --------------------------------------------------------------------------
# construction and insertion
# --------------------------------------------------------------------------

def _one_hot(labels: np.ndarray) -> np.ndarray:
    out = np.zeros((len(labels), 2), dtype=np.float32)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def build_bank(manifest: str | Path, encoder, n_per_class: int = DEFAULT_SHOTS_PER_CLASS,
               seed: int = 0, alpha: float = DEFAULT_ALPHA,
               beta: float = DEFAULT_BETA) -> FeatureBank:
    """Sample n real + n fake train records, encode them as bank keys.

    ``encoder`` is anything with ``encode_paths(paths) -> (N, C) unit
    features`` (the adapted detector provides it).  Sampling is uniform
    with a derived per-class seed, so the same seed reproduces the same
    bank bit-for-bit.
    """
    if n_per_class < 1:
        raise BankError(f"n_per_class must be >= 1, got {n_per_class}")
    manifest = Path(manifest)
    records = [r for r in load_manifest(manifest) if r.split in (None, "train")]
    pools = {0: [r for r in records if r.label == 0],
             1: [r for r in records if r.label == 1]}
    for label, pool in pools.items():
        if len(pool) < n_per_class:
            raise BankError(f"{manifest}: need {n_per_class} {LABEL_NAMES[label]} "
                            f"train samples for the bank, have {len(pool)}")
    chosen: list = []
    for label in (0, 1):
        rng = np.random.default_rng(derive_seed(seed, "bank-sample", label))
        idx = rng.choice(len(pools[label]), size=n_per_class, replace=False)
        chosen.extend(pools[label][i] for i in idx)
    paths = [resolve_image_path(r, manifest) for r in chosen]
    keys = np.asarray(encoder.encode_paths(paths), dtype=np.float32)
    labels = np.asarray([r.label for r in chosen])
    return FeatureBank(keys=keys, values=_one_hot(labels), alpha=alpha, beta=beta,
                       provenance=tuple(str(p) for p in paths))


def insert_samples(bank: FeatureBank, new_records, encoder) -> FeatureBank:
    """Append newly labeled samples; returns a new bank (no retraining).

    ``new_records`` is a list of (image, label) where image is a path or
    an already-loaded array accepted by ``encoder.encode_one``.  Unreadable
    images are skipped with a warning.
    """
    keys, labels, names = [], [], []
    for image, label in new_records:
        if label not in (0, 1):
            raise BankError(f"insertion label must be 0 or 1, got {label!r}")
        try:
            feat = encoder.encode_one(image)
        except ImageError as exc:
            log.warning("skipping insertion of %s: %s", image, exc)
            continue
        keys.append(np.asarray(feat, dtype=np.float32))
        labels.append(int(label))
        names.append(str(image) if isinstance(image, (str, Path))
                     else f"inserted-array-{len(names)}")
    if not keys:
        return bank
    new_keys = np.concatenate([bank.keys, np.stack(keys)], axis=0)
    new_values = np.concatenate([bank.values, _one_hot(np.asarray(labels))], axis=0)
    return FeatureBank(keys=new_keys, values=new_values, alpha=bank.alpha,
                       beta=bank.beta, provenance=bank.provenance + tuple(names))


# --------------------------------------------------------------------------
# persistence: magic, version, counts, alpha/beta, keys, labels, provenance
# --------------------------------------------------------------------------

def save_bank(bank: FeatureBank, path: str | Path) -> None:
    path = Path(path)
    blob = bytearray()
    blob += _BANK_MAGIC
    blob += struct.pack("<H", _BANK_VERSION)
    blob += struct.pack("<II", bank.n_rows, bank.channel_dim)
    blob += struct.pack("<dd", bank.alpha, bank.beta)
    blob += np.ascontiguousarray(bank.keys, dtype="<f4").tobytes()
    blob += bank.labels.astype(np.uint8).tobytes()
    for name in bank.provenance:
        data = name.encode("utf-8")
        blob += struct.pack("<I", len(data))
        blob += data
    path.write_bytes(bytes(blob))


def load_bank(path: str | Path) -> FeatureBank:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise BankError(f"cannot read bank {path}: {exc}") from exc
    view = memoryview(blob)
    if len(view) < 26:
        raise BankError(f"{path}: truncated bank file ({len(view)} bytes)")
    if bytes(view[:4]) != _BANK_MAGIC:
        raise BankError(f"{path}: not a feature bank (bad magic {bytes(view[:4])!r})")
    (version,) = struct.unpack_from("<H", view, 4)
    if version != _BANK_VERSION:
        raise BankError(f"{path}: unsupported bank version {version} "
                        f"(expected {_BANK_VERSION})")
    n_rows, channel_dim = struct.unpack_from("<II", view, 6)
    alpha, beta = struct.unpack_from("<dd", view, 14)
    offset = 30
    key_bytes = n_rows * channel_dim * 4
    if len(view) < offset + key_bytes + n_rows:
        raise BankError(f"{path}: truncated bank file (expected at least "
                        f"{offset + key_bytes + n_rows} bytes, have {len(view)})")
    keys = np.frombuffer(view, dtype="<f4", count=n_rows * channel_dim,
                         offset=offset).reshape(n_rows, channel_dim).copy()
    offset += key_bytes
    labels = np.frombuffer(view, dtype=np.uint8, count=n_rows, offset=offset)
    if n_rows and not np.all(np.isin(labels, (0, 1))):
        raise BankError(f"{path}: corrupt label byte outside {{0, 1}}")
    values = _one_hot(labels.astype(np.int64))
    offset += n_rows
    provenance = []
    for i in range(n_rows):
        if len(view) < offset + 4:
            raise BankError(f"{path}: truncated provenance entry {i}")
        (length,) = struct.unpack_from("<I", view, offset)
        offset += 4
        if len(view) < offset + length:
            raise BankError(f"{path}: truncated provenance entry {i}")
        provenance.append(bytes(view[offset:offset + length]).decode("utf-8"))
        offset += length
    if offset != len(view):
        raise BankError(f"{path}: {len(view) - offset} trailing bytes after "
                        f"provenance")
    return FeatureBank(keys=keys, values=values, alpha=alpha, beta=beta,
                       provenance=tuple(provenance))
