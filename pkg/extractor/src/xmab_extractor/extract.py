"""The extraction pipeline: walk an image folder, encode, write XMAB."""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np

from .encoders import get_encoder
from .manifest import ExtractionManifest, ManifestError
from .writer import write_bundle

IMAGE_EXTENSIONS = {".png", ".jpg", ".jpeg", ".bmp", ".gif", ".webp", ".tiff"}


class EmptyClassError(ManifestError):
    """A class directory yielded no usable image."""


@dataclass
class ExtractionResult:
    output_path: str
    class_names: list[str]
    num_train: int
    num_test: int
    skipped: list[str]


def _image_paths(class_dir: str) -> list[str]:
    names = sorted(
        entry
        for entry in os.listdir(class_dir)
        if os.path.splitext(entry)[1].lower() in IMAGE_EXTENSIONS
    )
    return [os.path.join(class_dir, name) for name in names]


def _split_train_test(count: int, fraction: float) -> tuple[range, range]:
    """Deterministic tail holdout. Classes too small to split reuse every
    image on both sides so the bundle always carries a test payload."""
    holdout = int(count * fraction)
    if holdout == 0 or holdout == count:
        return range(count), range(count)
    return range(count - holdout), range(count - holdout, count)


def extract(manifest: ExtractionManifest) -> ExtractionResult:
    """Encode the dataset and write the bundle plus a provenance sidecar.

    Unreadable images are skipped with a warning; a class with no readable
    image at all is a hard error. Re-running the same manifest produces a
    byte-identical bundle.
    """
    encoder = get_encoder(manifest.encoder)
    class_names = manifest.resolve_class_names()

    train_rows, train_labels = [], []
    test_rows, test_labels = [], []
    skipped: list[str] = []

    for label, name in enumerate(class_names):
        class_dir = os.path.join(manifest.dataset_root, name)
        features = []
        for path in _image_paths(class_dir):
            try:
                features.append(encoder.encode_image(path))
            except OSError as exc:
                warnings.warn(f"skipping unreadable image {path}: {exc}")
                skipped.append(path)
        if not features:
            raise EmptyClassError(f"class {name!r} has no readable image")
        train_idx, test_idx = _split_train_test(
            len(features), manifest.test_fraction
        )
        for i in train_idx:
            train_rows.append(features[i])
            train_labels.append(label)
        for i in test_idx:
            test_rows.append(features[i])
            test_labels.append(label)

    text_rows = []
    for name in class_names:
        prompts = [t.replace("[CLS]", name) for t in manifest.prompt_templates]
        embeddings = np.stack([encoder.encode_text(p) for p in prompts])
        mean = embeddings.mean(axis=0)
        text_rows.append(mean / np.linalg.norm(mean))
    text_features = np.stack(text_rows)

    write_bundle(
        manifest.output_path,
        class_names,
        np.stack(train_rows).astype(np.float32),
        np.asarray(train_labels, dtype=np.int64),
        np.stack(test_rows).astype(np.float32),
        np.asarray(test_labels, dtype=np.int64),
        text_features.astype(np.float32),
        text_features.T.astype(np.float32),
        provenance={
            "encoder": encoder.name,
            "dataset": os.path.basename(os.path.abspath(manifest.dataset_root)),
            "prompt_templates": manifest.prompt_templates,
            "skipped_images": len(skipped),
        },
    )
    return ExtractionResult(
        output_path=manifest.output_path,
        class_names=class_names,
        num_train=len(train_rows),
        num_test=len(test_rows),
        skipped=skipped,
    )
