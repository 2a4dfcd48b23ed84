"""XMAB bundle writer.

Implements the format independently so this package stays decoupled from
the consuming engine (the byte layout is the shared contract):

    magic "XMAB" | version u16 | feature_dim u32 | num_classes u32
    num_train u32 | num_test u32
    per class: u32 name byte-length + UTF-8 name
    train_features, test_features, text_features, zeroshot_weights as <f4
    train_labels, test_labels as <u4

All integers and floats little-endian.
"""

from __future__ import annotations

import json
import os
import struct

import numpy as np

MAGIC = b"XMAB"
VERSION = 1

SIDECAR_SCHEMA = "xmadapter-bundle-provenance/1"


def write_bundle(
    path,
    class_names: list[str],
    train_features: np.ndarray,
    train_labels: np.ndarray,
    test_features: np.ndarray,
    test_labels: np.ndarray,
    text_features: np.ndarray,
    zeroshot_weights: np.ndarray,
    provenance: dict | None = None,
) -> None:
    """Serialize one bundle atomically; optionally write a JSON sidecar."""
    feature_dim = train_features.shape[1]
    num_classes = len(class_names)
    if text_features.shape != (num_classes, feature_dim):
        raise ValueError(
            f"text_features shape {text_features.shape}, expected "
            f"({num_classes}, {feature_dim})"
        )
    if zeroshot_weights.shape != (feature_dim, num_classes):
        raise ValueError(
            f"zeroshot_weights shape {zeroshot_weights.shape}, expected "
            f"({feature_dim}, {num_classes})"
        )

    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<H", VERSION))
        fh.write(
            struct.pack(
                "<IIII",
                feature_dim,
                num_classes,
                train_features.shape[0],
                test_features.shape[0],
            )
        )
        for name in class_names:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
        for tensor in (train_features, test_features, text_features,
                       zeroshot_weights):
            fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())
        for labels in (train_labels, test_labels):
            fh.write(np.ascontiguousarray(labels, dtype="<u4").tobytes())
    os.replace(tmp, path)

    if provenance is not None:
        with open(f"{path}.json", "w", encoding="utf-8") as fh:
            json.dump(
                {"schema": SIDECAR_SCHEMA, **provenance},
                fh,
                indent=2,
                sort_keys=True,
            )
            fh.write("\n")
