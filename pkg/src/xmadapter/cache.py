"""Key-value cache construction and the learnable projection heads.

The cache memorizes the few-shot training set: one row per training sample,
keyed by its (unit-normalized) image feature and valued by the one-hot of
its label. The text side enters through two small affine heads that map
class-text features and query image features into a shared low-dimensional
space where their similarity is measured.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import linalg
from .dataio import EmbeddingBundle, FewShotSplit
from .errors import ShapeError


@dataclass
class ProjectionNet:
    """Affine map to the shared space, optionally with one tanh hidden layer.

    Single layer: out = x @ weight + bias, weight [in, out].
    Two layer:    out = tanh(x @ hidden_weight + hidden_bias) @ weight + bias.
    """

    weight: np.ndarray
    bias: np.ndarray
    hidden_weight: np.ndarray | None = None
    hidden_bias: np.ndarray | None = None

    @property
    def in_dim(self) -> int:
        if self.hidden_weight is not None:
            return self.hidden_weight.shape[0]
        return self.weight.shape[0]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[1]

    def is_finite(self) -> bool:
        tensors = [self.weight, self.bias]
        if self.hidden_weight is not None:
            tensors += [self.hidden_weight, self.hidden_bias]
        return all(np.all(np.isfinite(t)) for t in tensors)


def init_projection(
    in_dim: int,
    out_dim: int,
    rng: np.random.Generator,
    std: float = 0.02,
    hidden_dim: int | None = None,
) -> ProjectionNet:
    """Weights from N(0, std^2), biases zero."""
    if hidden_dim is None:
        return ProjectionNet(
            weight=rng.normal(0.0, std, size=(in_dim, out_dim)),
            bias=np.zeros(out_dim),
        )
    return ProjectionNet(
        weight=rng.normal(0.0, std, size=(hidden_dim, out_dim)),
        bias=np.zeros(out_dim),
        hidden_weight=rng.normal(0.0, std, size=(in_dim, hidden_dim)),
        hidden_bias=np.zeros(hidden_dim),
    )


def projection_forward(net: ProjectionNet, x: np.ndarray) -> np.ndarray:
    """Apply the net to rows of x: [B, in] -> [B, out]."""
    x = linalg.as_matrix(x, "projection input")
    if x.shape[1] != net.in_dim:
        raise ShapeError(
            f"projection expects input dim {net.in_dim}, got {x.shape[1]}"
        )
    if net.hidden_weight is not None:
        x = np.tanh(linalg.matmul(x, net.hidden_weight) + net.hidden_bias)
    return linalg.matmul(x, net.weight) + net.bias


@dataclass
class CacheModel:
    """Few-shot memory: image keys, one-hot values, and per-entry class ids."""

    image_keys: np.ndarray   # [NK, C] f64, unit rows at construction
    values: np.ndarray       # [NK, N] f64 one-hot
    entry_labels: np.ndarray  # [NK] int64

    @property
    def num_entries(self) -> int:
        return self.image_keys.shape[0]

    @property
    def num_classes(self) -> int:
        return self.values.shape[1]

    def validate(self) -> None:
        nk = self.num_entries
        if self.values.shape[0] != nk or self.entry_labels.shape != (nk,):
            raise ShapeError("cache keys/values/labels row counts differ")
        ones = np.sum(self.values == 1.0, axis=1)
        zeros = np.sum(self.values == 0.0, axis=1)
        if np.any(ones != 1) or np.any(zeros != self.num_classes - 1):
            raise ShapeError("cache values must be one-hot rows")
        hot = np.argmax(self.values, axis=1)
        if np.any(hot != self.entry_labels):
            raise ShapeError("cache values disagree with entry_labels")


def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def build_cache(bundle: EmbeddingBundle, split: FewShotSplit) -> CacheModel:
    """Assemble the cache from a split, class-major (class 0's shots first)."""
    split.validate(bundle)
    idx = split.selected_indices.reshape(-1)
    keys = linalg.l2_normalize_rows(bundle.train_features[idx].astype(np.float64))
    labels = bundle.train_labels[idx].copy()
    cache = CacheModel(
        image_keys=keys,
        values=one_hot(labels, bundle.num_classes),
        entry_labels=labels,
    )
    cache.validate()
    return cache


def text_entry_keys(
    meta_net: ProjectionNet, bundle: EmbeddingBundle, cache: CacheModel
) -> np.ndarray:
    """Per-entry text keys: project the [N, C] class-text features to the
    shared space, then replicate row ``label[i]`` for cache entry i -> [NK, D].
    """
    projected = projection_forward(meta_net, bundle.text_features.astype(np.float64))
    return projected[cache.entry_labels]


def project_queries(img2txt: ProjectionNet, image_features: np.ndarray) -> np.ndarray:
    """Map query image features into the shared space: [B, C] -> [B, D]."""
    return projection_forward(img2txt, image_features)
