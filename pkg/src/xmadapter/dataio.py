"""Embedding-bundle file format, synthetic bundles, and few-shot sampling.

An embedding bundle packages everything the engine needs about one dataset:
precomputed image features for a training pool and a test set, integer
labels, one text feature per class, and a frozen zero-shot classifier whose
columns live in feature space.

Binary layout (XMAB format, version 1), all integers little-endian:

    magic            4 bytes  b"XMAB"
    version          u16
    feature_dim      u32      C
    num_classes      u32      N
    num_train        u32
    num_test         u32
    class names      N x (u32 byte length + UTF-8 bytes)
    train_features   num_train * C  f32
    test_features    num_test  * C  f32
    text_features    N * C          f32
    zeroshot_weights C * N          f32
    train_labels     num_train      u32
    test_labels      num_test       u32

Feature payloads are stored in 32-bit floats; the engine promotes to 64-bit
at compute boundaries. A save/load round trip is byte-exact.

An optional JSON sidecar (``<path>.json``) records provenance (encoder name,
dataset name, free-form notes). It is informational only and never read back
by the engine.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import (
    BadMagicError,
    InsufficientSamplesError,
    LabelRangeError,
    MissingClassError,
    ShapeError,
    TruncatedFileError,
    UnsupportedVersionError,
    ZeroFeatureRowError,
)

BUNDLE_MAGIC = b"XMAB"
BUNDLE_VERSION = 1

SIDECAR_SCHEMA = "xmadapter-bundle-provenance/1"


@dataclass
class EmbeddingBundle:
    """In-memory form of an XMAB file. Arrays keep their f32 storage dtype."""

    feature_dim: int
    num_classes: int
    class_names: list[str]
    train_features: np.ndarray  # [num_train, C] f32
    train_labels: np.ndarray    # [num_train] int64
    test_features: np.ndarray   # [num_test, C] f32
    test_labels: np.ndarray     # [num_test] int64
    text_features: np.ndarray   # [N, C] f32
    zeroshot_weights: np.ndarray  # [C, N] f32

    @property
    def num_train(self) -> int:
        return self.train_features.shape[0]

    @property
    def num_test(self) -> int:
        return self.test_features.shape[0]

    def validate(self) -> None:
        """Check every structural invariant; raise a specific error if broken."""
        c, n = self.feature_dim, self.num_classes
        if len(self.class_names) != n:
            raise ShapeError(
                f"expected {n} class names, got {len(self.class_names)}"
            )
        shapes = {
            "train_features": (self.train_features, (None, c)),
            "test_features": (self.test_features, (None, c)),
            "text_features": (self.text_features, (n, c)),
            "zeroshot_weights": (self.zeroshot_weights, (c, n)),
        }
        for name, (arr, want) in shapes.items():
            if arr.ndim != 2:
                raise ShapeError(f"{name} must be 2-D, got {arr.shape}")
            if want[0] is not None and arr.shape[0] != want[0]:
                raise ShapeError(f"{name} rows: expected {want[0]}, got {arr.shape[0]}")
            if arr.shape[1] != want[1]:
                raise ShapeError(f"{name} cols: expected {want[1]}, got {arr.shape[1]}")
        if self.train_labels.shape != (self.num_train,):
            raise ShapeError("train_labels length does not match train_features")
        if self.test_labels.shape != (self.num_test,):
            raise ShapeError("test_labels length does not match test_features")

        for name, labels in (("train", self.train_labels), ("test", self.test_labels)):
            if labels.size and (labels.min() < 0 or labels.max() >= n):
                raise LabelRangeError(
                    f"{name} label {int(labels[(labels < 0) | (labels >= n)][0])} "
                    f"outside [0, {n})"
                )
        present = np.unique(self.train_labels)
        if present.size != n:
            missing = sorted(set(range(n)) - set(int(v) for v in present))
            raise MissingClassError(f"classes with no training example: {missing}")

        for name, arr in (
            ("train_features", self.train_features),
            ("test_features", self.test_features),
            ("text_features", self.text_features),
        ):
            norms = np.linalg.norm(arr.astype(np.float64), axis=1)
            if np.any(norms == 0.0):
                row = int(np.argmax(norms == 0.0))
                raise ZeroFeatureRowError(f"{name} row {row} is all zeros")


@dataclass(frozen=True)
class FewShotSplit:
    """Indices of a K-shot subset of a bundle's training pool."""

    shot_count: int
    selected_indices: np.ndarray  # [N, K] int64, row c = class c's picks
    seed: int

    def validate(self, bundle: EmbeddingBundle) -> None:
        n, k = self.selected_indices.shape
        if n != bundle.num_classes or k != self.shot_count:
            raise ShapeError(
                f"split shape {self.selected_indices.shape} does not match "
                f"(num_classes={bundle.num_classes}, k={self.shot_count})"
            )
        for c in range(n):
            idx = self.selected_indices[c]
            if len(set(idx.tolist())) != k:
                raise ShapeError(f"class {c}: duplicate indices in split")
            if np.any(bundle.train_labels[idx] != c):
                raise ShapeError(f"class {c}: split index with wrong label")


def _write_exact(fh, data: bytes) -> None:
    fh.write(data)


def _read_exact(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedFileError(f"file ended while reading {what}")
    return data


def save_bundle(bundle: EmbeddingBundle, path, provenance: dict | None = None) -> None:
    """Serialize to XMAB. Writes atomically (temp file + rename)."""
    bundle.validate()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        _write_exact(fh, BUNDLE_MAGIC)
        _write_exact(fh, struct.pack("<H", BUNDLE_VERSION))
        _write_exact(
            fh,
            struct.pack(
                "<IIII",
                bundle.feature_dim,
                bundle.num_classes,
                bundle.num_train,
                bundle.num_test,
            ),
        )
        for name in bundle.class_names:
            raw = name.encode("utf-8")
            _write_exact(fh, struct.pack("<I", len(raw)))
            _write_exact(fh, raw)
        for arr in (
            bundle.train_features,
            bundle.test_features,
            bundle.text_features,
            bundle.zeroshot_weights,
        ):
            _write_exact(fh, np.ascontiguousarray(arr, dtype="<f4").tobytes())
        for labels in (bundle.train_labels, bundle.test_labels):
            _write_exact(fh, np.ascontiguousarray(labels, dtype="<u4").tobytes())
    os.replace(tmp, path)
    if provenance is not None:
        sidecar = {"schema": SIDECAR_SCHEMA, **provenance}
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(sidecar, fh, indent=2, sort_keys=True)
            fh.write("\n")


def load_bundle(path) -> EmbeddingBundle:
    """Parse an XMAB file, validating the header, payload size and invariants."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != BUNDLE_MAGIC:
            raise BadMagicError(f"bad magic {magic!r}, expected {BUNDLE_MAGIC!r}")
        (version,) = struct.unpack("<H", _read_exact(fh, 2, "version"))
        if version != BUNDLE_VERSION:
            raise UnsupportedVersionError(f"unsupported bundle version {version}")
        c, n, num_train, num_test = struct.unpack(
            "<IIII", _read_exact(fh, 16, "header counts")
        )
        names = []
        for i in range(n):
            (length,) = struct.unpack("<I", _read_exact(fh, 4, f"name {i} length"))
            names.append(_read_exact(fh, length, f"name {i}").decode("utf-8"))

        def read_f32(rows: int, cols: int, what: str) -> np.ndarray:
            raw = _read_exact(fh, rows * cols * 4, what)
            return np.frombuffer(raw, dtype="<f4").reshape(rows, cols)

        train_features = read_f32(num_train, c, "train_features")
        test_features = read_f32(num_test, c, "test_features")
        text_features = read_f32(n, c, "text_features")
        zeroshot_weights = read_f32(c, n, "zeroshot_weights")
        train_labels = np.frombuffer(
            _read_exact(fh, num_train * 4, "train_labels"), dtype="<u4"
        ).astype(np.int64)
        test_labels = np.frombuffer(
            _read_exact(fh, num_test * 4, "test_labels"), dtype="<u4"
        ).astype(np.int64)
        trailing = fh.read(1)
        if trailing:
            raise TruncatedFileError("trailing bytes after declared payload")

    bundle = EmbeddingBundle(
        feature_dim=c,
        num_classes=n,
        class_names=names,
        train_features=train_features,
        train_labels=train_labels,
        test_features=test_features,
        test_labels=test_labels,
        text_features=text_features,
        zeroshot_weights=zeroshot_weights,
    )
    bundle.validate()
    return bundle


def sample_few_shot(bundle: EmbeddingBundle, k: int, seed: int) -> FewShotSplit:
    """Draw k distinct training indices per class, deterministically.

    Uses a PCG64 generator seeded with ``seed``; classes are drawn in
    ascending id order, so the same seed always yields the same split.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.Generator(np.random.PCG64(seed))
    picks = np.empty((bundle.num_classes, k), dtype=np.int64)
    for c in range(bundle.num_classes):
        pool = np.flatnonzero(bundle.train_labels == c)
        if pool.size < k:
            raise InsufficientSamplesError(
                f"class {c} ({bundle.class_names[c]!r}) has {pool.size} "
                f"training examples, need {k}"
            )
        picks[c] = rng.choice(pool, size=k, replace=False)
    return FewShotSplit(shot_count=k, selected_indices=picks, seed=seed)


def gather_split(bundle: EmbeddingBundle, split: FewShotSplit):
    """Features and labels of a split in class-major order: [NK, C], [NK]."""
    idx = split.selected_indices.reshape(-1)
    return (
        bundle.train_features[idx].astype(np.float64),
        bundle.train_labels[idx].copy(),
    )


def generate_synthetic(
    num_classes: int,
    shots: int,
    feature_dim: int,
    test_per_class: int,
    class_separation: float,
    modality_noise: float,
    seed: int,
) -> EmbeddingBundle:
    """Build a synthetic bundle of unit-sphere Gaussian class clusters.

    Each class gets a random unit centroid. An image feature is
    ``normalize(class_separation * centroid + g)`` with g standard normal,
    so larger separation means tighter clusters (at 0 the features carry no
    class signal at all). Text features are the centroids perturbed by
    ``modality_noise`` and renormalized, which makes the text side carry its
    own, independent error. The zero-shot classifier columns are the clean
    centroids.
    """
    if num_classes < 1 or shots < 1 or test_per_class < 1:
        raise ValueError("num_classes, shots and test_per_class must be >= 1")
    if feature_dim < 2:
        raise ValueError(f"feature_dim must be >= 2, got {feature_dim}")

    rng = np.random.Generator(np.random.PCG64(seed))
    centroids = rng.standard_normal((num_classes, feature_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)

    def cluster_samples(per_class: int) -> tuple[np.ndarray, np.ndarray]:
        feats = np.empty((num_classes * per_class, feature_dim))
        labels = np.repeat(np.arange(num_classes), per_class)
        for c in range(num_classes):
            noise = rng.standard_normal((per_class, feature_dim))
            raw = class_separation * centroids[c] + noise
            feats[c * per_class : (c + 1) * per_class] = raw / np.linalg.norm(
                raw, axis=1, keepdims=True
            )
        return feats, labels

    train_features, train_labels = cluster_samples(shots)
    test_features, test_labels = cluster_samples(test_per_class)

    text = centroids + modality_noise * rng.standard_normal(centroids.shape)
    text /= np.linalg.norm(text, axis=1, keepdims=True)

    bundle = EmbeddingBundle(
        feature_dim=feature_dim,
        num_classes=num_classes,
        class_names=[f"class_{c}" for c in range(num_classes)],
        train_features=train_features.astype(np.float32),
        train_labels=train_labels.astype(np.int64),
        test_features=test_features.astype(np.float32),
        test_labels=test_labels.astype(np.int64),
        text_features=text.astype(np.float32),
        zeroshot_weights=centroids.T.astype(np.float32),
    )
    bundle.validate()
    return bundle
