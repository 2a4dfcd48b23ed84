"""Inference pipeline: bimodal affinities, fusion, cache logits, blending.

A query is scored in two ways. The image path compares it against every
cache key by cosine similarity; the text path compares its projection
against per-entry text keys in the shared space. The two affinity matrices
are mixed by a convex coefficient gamma, aggregated against the one-hot
values, sharpened into cache logits, and finally blended with the frozen
zero-shot classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import linalg
from .cache import CacheModel, ProjectionNet, project_queries, text_entry_keys
from .dataio import EmbeddingBundle
from .errors import ShapeError

PHI_ORDERS = ("post_aggregate", "pre_aggregate")


@dataclass(frozen=True)
class HyperParams:
    """Scalar knobs of the pipeline plus engine behavior flags.

    gamma mixes image vs text affinity, alpha blends cache logits with the
    zero-shot prior, beta sharpens affinity into logits, d is the shared
    projection dimension. ``phi_order`` selects whether the exponential
    sharpening applies after aggregating affinity against the values
    (default) or before.
    """

    gamma: float = 0.7
    alpha: float = 1.2
    beta: float = 3.5
    d: int = 256
    learn_gamma: bool = False
    hidden_dim: int | None = None
    phi_order: str = "post_aggregate"
    mask_self: bool = False
    raw_log_ce: bool = False
    ce_class_scale: bool = False

    def __post_init__(self):
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must be in [0, 1], got {self.gamma}")
        if self.alpha < 0.0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if self.beta <= 0.0:
            raise ValueError(f"beta must be > 0, got {self.beta}")
        if self.d < 1:
            raise ValueError(f"d must be >= 1, got {self.d}")
        if self.phi_order not in PHI_ORDERS:
            raise ValueError(f"phi_order must be one of {PHI_ORDERS}")

    def with_overrides(self, **kwargs) -> "HyperParams":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class AffinityPair:
    """Image and text affinity matrices plus their gamma-fused combination."""

    image_affinity: np.ndarray  # [B, NK]
    text_affinity: np.ndarray   # [B, NK]
    fused: np.ndarray           # [B, NK]


@dataclass(frozen=True)
class Logits:
    """Cache logits, zero-shot logits, and their alpha-weighted blend."""

    cache_logits: np.ndarray     # [B, N]
    zeroshot_logits: np.ndarray  # [B, N]
    blended: np.ndarray          # [B, N]


def image_affinity(query_features: np.ndarray, cache: CacheModel) -> np.ndarray:
    """Cosine of every query row against every cache key: [B, NK].

    Keys are re-normalized here so the output stays a true cosine even after
    training has moved them off the unit sphere.
    """
    return linalg.cosine_rows(query_features, cache.image_keys)


def text_affinity(
    meta_net: ProjectionNet,
    img2txt: ProjectionNet,
    bundle: EmbeddingBundle,
    cache: CacheModel,
    query_features: np.ndarray,
) -> np.ndarray:
    """Cosine between projected queries and per-entry text keys: [B, NK]."""
    queries = linalg.l2_normalize_rows(linalg.as_matrix(query_features, "queries"))
    projected = project_queries(img2txt, queries)
    keys = text_entry_keys(meta_net, bundle, cache)
    return linalg.cosine_rows(projected, keys)


def fuse(a_image: np.ndarray, a_text: np.ndarray, gamma: float) -> np.ndarray:
    """Convex combination gamma * image + (1 - gamma) * text."""
    if a_image.shape != a_text.shape:
        raise ShapeError(
            f"fuse: affinity shapes differ, {a_image.shape} vs {a_text.shape}"
        )
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must be in [0, 1], got {gamma}")
    linalg.count_macs_explicit(2 * a_image.size)
    return gamma * a_image + (1.0 - gamma) * a_text


def cache_logits(
    a: np.ndarray,
    values: np.ndarray,
    beta: float,
    phi_order: str = "post_aggregate",
) -> np.ndarray:
    """Turn fused affinity into per-class cache evidence: [B, N].

    post_aggregate: exp(-beta * (1 - A @ V)), the sharpening applied to the
    aggregated per-class affinity mass. pre_aggregate: exp(-beta * (1 - A))
    @ V, sharpening each entry before aggregation.
    """
    if beta <= 0.0:
        raise ValueError(f"beta must be > 0, got {beta}")
    if a.shape[1] != values.shape[0]:
        raise ShapeError(
            f"cache_logits: affinity cols {a.shape[1]} != values rows {values.shape[0]}"
        )
    if phi_order == "post_aggregate":
        aggregated = linalg.matmul(a, values)
        linalg.count_macs_explicit(aggregated.size)
        return np.exp(-beta * (1.0 - aggregated))
    if phi_order == "pre_aggregate":
        sharpened = np.exp(-beta * (1.0 - a))
        linalg.count_macs_explicit(a.size)
        return linalg.matmul(sharpened, values)
    raise ValueError(f"phi_order must be one of {PHI_ORDERS}")


def blend(
    cache_logits_matrix: np.ndarray,
    query_features: np.ndarray,
    zeroshot_weights: np.ndarray,
    alpha: float,
) -> np.ndarray:
    """alpha * cache logits + normalized queries @ zero-shot weights."""
    if alpha < 0.0:
        raise ValueError(f"alpha must be >= 0, got {alpha}")
    queries = linalg.l2_normalize_rows(linalg.as_matrix(query_features, "queries"))
    zeroshot = linalg.matmul(queries, np.asarray(zeroshot_weights, dtype=np.float64))
    if cache_logits_matrix.shape != zeroshot.shape:
        raise ShapeError(
            f"blend: cache logits {cache_logits_matrix.shape} vs "
            f"zero-shot {zeroshot.shape}"
        )
    linalg.count_macs_explicit(cache_logits_matrix.size)
    return alpha * cache_logits_matrix + zeroshot


@dataclass
class InferenceState:
    """Query-independent precomputation, reusable across batches.

    Normalized cache keys and normalized per-entry text keys are fixed for
    frozen parameters, so they are computed once here and only the
    query-dependent arithmetic runs per batch.
    """

    norm_keys: np.ndarray        # [NK, C]
    norm_text_keys: np.ndarray | None  # [NK, D], None when gamma == 1
    values: np.ndarray           # [NK, N]
    zeroshot_weights: np.ndarray  # [C, N]
    img2txt: ProjectionNet | None
    gamma: float
    alpha: float
    beta: float
    phi_order: str


def effective_gamma(hyper: HyperParams, gamma_logit: float | None) -> float:
    """Fixed gamma, or sigmoid of the trained logit when gamma is learned."""
    if hyper.learn_gamma and gamma_logit is not None:
        return float(linalg.sigmoid(float(gamma_logit)))
    return hyper.gamma


def prepare_inference(
    bundle: EmbeddingBundle,
    cache: CacheModel,
    nets: tuple[ProjectionNet, ProjectionNet],
    hyper: HyperParams,
    gamma_logit: float | None = None,
) -> InferenceState:
    meta_net, img2txt = nets
    gamma = effective_gamma(hyper, gamma_logit)
    norm_text_keys = None
    if gamma < 1.0:
        norm_text_keys = linalg.l2_normalize_rows(
            text_entry_keys(meta_net, bundle, cache)
        )
    return InferenceState(
        norm_keys=linalg.l2_normalize_rows(cache.image_keys),
        norm_text_keys=norm_text_keys,
        values=cache.values,
        zeroshot_weights=np.asarray(bundle.zeroshot_weights, dtype=np.float64),
        img2txt=img2txt if gamma < 1.0 else None,
        gamma=gamma,
        alpha=hyper.alpha,
        beta=hyper.beta,
        phi_order=hyper.phi_order,
    )


def infer_logits(state: InferenceState, query_features: np.ndarray) -> Logits:
    """Run the query-dependent part of the pipeline for a batch."""
    queries = linalg.l2_normalize_rows(linalg.as_matrix(query_features, "queries"))
    a_image = linalg.matmul(queries, state.norm_keys.T)
    if state.norm_text_keys is not None:
        projected = linalg.l2_normalize_rows(
            project_queries(state.img2txt, queries)
        )
        a_text = linalg.matmul(projected, state.norm_text_keys.T)
        fused = fuse(a_image, a_text, state.gamma)
    else:
        fused = a_image
    cache_l = cache_logits(fused, state.values, state.beta, state.phi_order)
    zeroshot = linalg.matmul(queries, state.zeroshot_weights)
    linalg.count_macs_explicit(cache_l.size)
    blended = state.alpha * cache_l + zeroshot
    return Logits(cache_logits=cache_l, zeroshot_logits=zeroshot, blended=blended)


def compute_affinities(
    bundle: EmbeddingBundle,
    cache: CacheModel,
    nets: tuple[ProjectionNet, ProjectionNet],
    gamma: float,
    query_features: np.ndarray,
) -> AffinityPair:
    """Full affinity pair for a batch (both modalities always computed)."""
    meta_net, img2txt = nets
    a_image = image_affinity(query_features, cache)
    a_text = text_affinity(meta_net, img2txt, bundle, cache, query_features)
    return AffinityPair(
        image_affinity=a_image,
        text_affinity=a_text,
        fused=fuse(a_image, a_text, gamma),
    )


def predict(
    bundle: EmbeddingBundle,
    cache: CacheModel,
    nets: tuple[ProjectionNet, ProjectionNet],
    hyper: HyperParams,
    query_features: np.ndarray,
    gamma_logit: float | None = None,
) -> np.ndarray:
    """Class ids for a batch of queries; ties go to the lowest class id."""
    state = prepare_inference(bundle, cache, nets, hyper, gamma_logit)
    logits = infer_logits(state, query_features)
    return np.argmax(logits.blended, axis=1)
