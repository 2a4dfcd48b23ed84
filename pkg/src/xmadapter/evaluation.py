"""Accuracy evaluation, hyperparameter sweeps, and efficiency accounting.

Sweeps mirror the two ablation styles: the fusion coefficient gamma changes
the training loss, so its sweep retrains per cell by default; alpha and
beta only reshape inference logits, so their sweep reuses one trained model
unless per-cell retraining is requested. Every emitted table records the
values held fixed so 1-D slices stay interpretable.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .adapter import HyperParams, infer_logits, prepare_inference
from .dataio import EmbeddingBundle, FewShotSplit
from .errors import EvaluationError
from .training import AdapterParams, train


def evaluate(
    params: AdapterParams,
    bundle: EmbeddingBundle,
    hyper: HyperParams,
    split_of: str = "test",
) -> float:
    """Fraction of correct argmax predictions on the chosen bundle split."""
    if split_of == "test":
        features, labels = bundle.test_features, bundle.test_labels
    elif split_of == "train":
        features, labels = bundle.train_features, bundle.train_labels
    else:
        raise ValueError(f"split_of must be 'test' or 'train', got {split_of!r}")
    if features.shape[0] == 0:
        raise EvaluationError(f"{split_of} split is empty")
    state = prepare_inference(
        bundle,
        params.cache,
        (params.meta_net, params.img2txt),
        hyper,
        gamma_logit=params.gamma_logit_value(),
    )
    logits = infer_logits(state, features.astype(np.float64))
    predictions = np.argmax(logits.blended, axis=1)
    return float(np.mean(predictions == labels))


def derive_cell_seed(base_seed: int, cell_index: int) -> int:
    """Deterministic per-cell seed so sweep cells are independent jobs."""
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=(cell_index,))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class SweepTable:
    """Grid-search result matrix with its provenance."""

    axis_names: list[str]
    grid: list[tuple]          # one tuple of axis values per cell
    accuracies: list[float]
    held_fixed: dict
    best_cell: tuple = field(init=False)
    best_accuracy: float = field(init=False)

    def __post_init__(self):
        if len(self.grid) != len(self.accuracies):
            raise ValueError("grid and accuracies differ in length")
        if not self.grid:
            raise ValueError("sweep table has no cells")
        # Ties break toward the smallest grid value: scan cells in sorted
        # order and keep the first strict maximum.
        order = sorted(range(len(self.grid)), key=lambda i: self.grid[i])
        best = order[0]
        for i in order[1:]:
            if self.accuracies[i] > self.accuracies[best]:
                best = i
        self.best_cell = self.grid[best]
        self.best_accuracy = self.accuracies[best]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*self.axis_names, "accuracy"])
        for values, acc in zip(self.grid, self.accuracies):
            writer.writerow([*[repr(v) for v in values], repr(acc)])
        return buf.getvalue()

    def to_json(self) -> str:
        payload = {
            "axes": self.axis_names,
            "held_fixed": self.held_fixed,
            "cells": [
                {"values": list(values), "accuracy": acc}
                for values, acc in zip(self.grid, self.accuracies)
            ],
            "best": {"values": list(self.best_cell), "accuracy": self.best_accuracy},
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    def to_gnuplot(self) -> str:
        """Whitespace-separated data block; 2-D grids insert the blank line
        gnuplot expects between scan lines of the first axis."""
        lines = [f"# {' '.join(self.axis_names)} accuracy"]
        previous_first = None
        for values, acc in zip(self.grid, self.accuracies):
            if (
                len(values) > 1
                and previous_first is not None
                and values[0] != previous_first
            ):
                lines.append("")
            previous_first = values[0]
            lines.append(" ".join(repr(v) for v in values) + f" {acc!r}")
        return "\n".join(lines) + "\n"


def _train_and_score(args) -> float:
    bundle, split, hyper, epochs, batch_size, seed, base_lr = args
    params, _ = train(
        bundle, split, hyper,
        epochs=epochs, batch_size=batch_size, seed=seed, base_lr=base_lr,
    )
    return evaluate(params, bundle, hyper)


def sweep_gamma(
    bundle: EmbeddingBundle,
    split: FewShotSplit,
    hyper_base: HyperParams,
    grid: list[float],
    epochs: int = 20,
    batch_size: int = 32,
    base_seed: int = 0,
    base_lr: float = 1e-3,
    retrain_per_cell: bool = True,
    params: AdapterParams | None = None,
    jobs: int = 1,
) -> SweepTable:
    """Accuracy per fusion coefficient.

    gamma enters the training loss, so each cell retrains with a seed
    derived from (base_seed, cell index) unless ``retrain_per_cell`` is off,
    in which case a caller-supplied trained model is re-evaluated.
    """
    cells = [(float(g),) for g in grid]
    if retrain_per_cell:
        work = [
            (
                bundle,
                split,
                hyper_base.with_overrides(gamma=g),
                epochs,
                batch_size,
                derive_cell_seed(base_seed, i),
                base_lr,
            )
            for i, (g,) in enumerate(cells)
        ]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                accuracies = list(pool.map(_train_and_score, work))
        else:
            accuracies = [_train_and_score(w) for w in work]
    else:
        if params is None:
            raise ValueError("retrain_per_cell=False requires trained params")
        accuracies = [
            evaluate(params, bundle, hyper_base.with_overrides(gamma=g))
            for (g,) in cells
        ]
    return SweepTable(
        axis_names=["gamma"],
        grid=cells,
        accuracies=accuracies,
        held_fixed={
            "alpha": hyper_base.alpha,
            "beta": hyper_base.beta,
            "epochs": epochs,
            "batch_size": batch_size,
            "base_seed": base_seed,
            "retrain_per_cell": retrain_per_cell,
        },
    )


def sweep_alpha_beta(
    bundle: EmbeddingBundle,
    split: FewShotSplit,
    hyper_base: HyperParams,
    alpha_grid: list[float],
    beta_grid: list[float],
    epochs: int = 20,
    batch_size: int = 32,
    base_seed: int = 0,
    base_lr: float = 1e-3,
    retrain_per_cell: bool = False,
    params: AdapterParams | None = None,
    jobs: int = 1,
) -> SweepTable:
    """Accuracy over the (alpha, beta) cross product.

    Both coefficients only reshape the inference blend, so by default one
    model is trained at the base hyperparameters and every cell re-evaluates
    it. Pass a 1-element grid for either axis to get a 1-D slice.
    """
    cells = [(float(a), float(b)) for a in alpha_grid for b in beta_grid]
    if retrain_per_cell:
        work = [
            (
                bundle,
                split,
                hyper_base.with_overrides(alpha=a, beta=b),
                epochs,
                batch_size,
                derive_cell_seed(base_seed, i),
                base_lr,
            )
            for i, (a, b) in enumerate(cells)
        ]
        if jobs > 1:
            from concurrent.futures import ProcessPoolExecutor

            with ProcessPoolExecutor(max_workers=jobs) as pool:
                accuracies = list(pool.map(_train_and_score, work))
        else:
            accuracies = [_train_and_score(w) for w in work]
    else:
        if params is None:
            params, _ = train(
                bundle, split, hyper_base,
                epochs=epochs, batch_size=batch_size, seed=base_seed,
                base_lr=base_lr,
            )
        accuracies = [
            evaluate(params, bundle, hyper_base.with_overrides(alpha=a, beta=b))
            for (a, b) in cells
        ]
    return SweepTable(
        axis_names=["alpha", "beta"],
        grid=cells,
        accuracies=accuracies,
        held_fixed={
            "gamma": hyper_base.gamma,
            "epochs": epochs,
            "batch_size": batch_size,
            "base_seed": base_seed,
            "retrain_per_cell": retrain_per_cell,
        },
    )


def _shot_cell(args) -> float:
    bundle, k, hyper, epochs, batch_size, seed, base_lr = args
    from .dataio import sample_few_shot

    split = sample_few_shot(bundle, k, seed)
    params, _ = train(
        bundle, split, hyper,
        epochs=epochs, batch_size=batch_size, seed=seed, base_lr=base_lr,
    )
    return evaluate(params, bundle, hyper)


def shot_curve(
    bundle: EmbeddingBundle,
    hyper: HyperParams,
    shots_grid: list[int],
    epochs: int = 20,
    batch_size: int = 32,
    base_seed: int = 0,
    base_lr: float = 1e-3,
    jobs: int = 1,
) -> SweepTable:
    """Accuracy as a function of the shot count.

    Each cell draws its own split and trains from scratch with a seed
    derived from (base_seed, cell index).
    """
    cells = [(int(k),) for k in shots_grid]
    work = [
        (bundle, k, hyper, epochs, batch_size, derive_cell_seed(base_seed, i),
         base_lr)
        for i, (k,) in enumerate(cells)
    ]
    if jobs > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            accuracies = list(pool.map(_shot_cell, work))
    else:
        accuracies = [_shot_cell(w) for w in work]
    return SweepTable(
        axis_names=["shots"],
        grid=cells,
        accuracies=accuracies,
        held_fixed={
            "gamma": hyper.gamma,
            "alpha": hyper.alpha,
            "beta": hyper.beta,
            "epochs": epochs,
            "batch_size": batch_size,
            "base_seed": base_seed,
        },
    )


def cross_domain_eval(
    params: AdapterParams,
    source_bundle: EmbeddingBundle,
    target_bundles: list[EmbeddingBundle],
    hyper: HyperParams,
) -> dict:
    """Evaluate frozen params on shifted-domain bundles sharing the classes.

    Returns per-target accuracies plus their mean. Every target must match
    the source's class count and feature dimension.
    """
    if not target_bundles:
        raise EvaluationError("cross-domain evaluation needs at least one target")
    for i, target in enumerate(target_bundles):
        if target.num_classes != source_bundle.num_classes:
            raise EvaluationError(
                f"target {i}: {target.num_classes} classes, "
                f"source has {source_bundle.num_classes}"
            )
        if target.feature_dim != source_bundle.feature_dim:
            raise EvaluationError(
                f"target {i}: feature_dim {target.feature_dim}, "
                f"source has {source_bundle.feature_dim}"
            )
    accuracies = [evaluate(params, target, hyper) for target in target_bundles]
    return {
        "per_target": accuracies,
        "average": float(np.mean(accuracies)),
    }


# ---------------------------------------------------------------------------
# Efficiency accounting
# ---------------------------------------------------------------------------


def count_parameters(
    nk: int,
    feature_dim: int,
    d: int,
    hidden_dim: int | None = None,
    learn_gamma: bool = False,
) -> dict:
    """Analytic trainable-parameter counts from the tensor shapes."""
    cache = nk * feature_dim
    if hidden_dim is None:
        per_net = feature_dim * d + d
    else:
        per_net = feature_dim * hidden_dim + hidden_dim + hidden_dim * d + d
    projections = 2 * per_net
    gamma = 1 if learn_gamma else 0
    return {
        "cache": cache,
        "projections": projections,
        "gamma": gamma,
        "total": cache + projections + gamma,
    }


def params_parameter_count(params: AdapterParams) -> dict:
    """Parameter counts read off an actual parameter set."""
    nk, c = params.cache.image_keys.shape
    hidden = (
        params.meta_net.hidden_weight.shape[1]
        if params.meta_net.hidden_weight is not None
        else None
    )
    return count_parameters(
        nk,
        c,
        params.meta_net.out_dim,
        hidden_dim=hidden,
        learn_gamma=params.gamma_logit is not None,
    )


def forward_mac_count(
    nk: int,
    feature_dim: int,
    num_classes: int,
    d: int,
    hidden_dim: int | None = None,
    phi_order: str = "post_aggregate",
) -> int:
    """Multiply-adds for one query through the full bimodal pipeline.

    Assumes the query-independent work (normalizing cache keys, projecting
    and normalizing the per-entry text keys) is precomputed and shared
    across queries, and 0 < gamma < 1 so both modalities run. Conventions: a
    length-L dot product costs L, row normalization costs 2L (squared norm
    plus the scaling pass), the fusion costs 2 per entry, and each
    exponential sharpening or residual blend entry costs 1.
    """
    c, n = feature_dim, num_classes
    total = 2 * c            # normalize the query
    total += nk * c          # image affinity against NK keys
    if hidden_dim is None:
        total += c * d       # project the query
    else:
        total += c * hidden_dim + hidden_dim * d
    total += 2 * d           # normalize the projection
    total += nk * d          # text affinity against NK text keys
    total += 2 * nk          # fuse the two affinities
    if phi_order == "post_aggregate":
        total += nk * n      # aggregate against one-hot values
        total += n           # sharpen the aggregate
    else:
        total += nk          # sharpen each affinity entry
        total += nk * n      # aggregate
    total += c * n           # zero-shot logits
    total += n               # residual blend
    return total


@dataclass
class EfficiencyReport:
    parameter_counts: dict
    macs_per_query: int
    seconds_per_epoch: float | None
    seconds_per_1k_queries: float | None

    def to_json(self) -> str:
        return json.dumps(
            {
                "parameter_counts": self.parameter_counts,
                "macs_per_query": self.macs_per_query,
                "seconds_per_epoch": self.seconds_per_epoch,
                "seconds_per_1k_queries": self.seconds_per_1k_queries,
            },
            indent=2,
            sort_keys=True,
        )


def measured_macs_per_query(
    params: AdapterParams,
    bundle: EmbeddingBundle,
    hyper: HyperParams,
    num_queries: int = 8,
) -> int:
    """Instrumented multiply-add count per query, averaged over a batch."""
    state = prepare_inference(
        bundle,
        params.cache,
        (params.meta_net, params.img2txt),
        hyper,
        gamma_logit=params.gamma_logit_value(),
    )
    queries = bundle.test_features[:num_queries].astype(np.float64)
    with linalg.counting_macs() as counter:
        infer_logits(state, queries)
    if counter.macs % queries.shape[0]:
        raise AssertionError("instrumented count not divisible by batch size")
    return counter.macs // queries.shape[0]


def efficiency_report(
    params: AdapterParams,
    hyper: HyperParams,
    bundle: EmbeddingBundle | None = None,
    split: FewShotSplit | None = None,
) -> EfficiencyReport:
    """Parameter and multiply-add accounting, plus optional wall-clock timings.

    Timings run only when a bundle (and, for the per-epoch number, a split)
    is supplied; they are informational and never asserted.
    """
    nk, c = params.cache.image_keys.shape
    n = params.cache.num_classes
    hidden = (
        params.meta_net.hidden_weight.shape[1]
        if params.meta_net.hidden_weight is not None
        else None
    )
    counts = params_parameter_count(params)
    macs = forward_mac_count(
        nk, c, n, params.meta_net.out_dim,
        hidden_dim=hidden, phi_order=hyper.phi_order,
    )

    seconds_per_epoch = None
    seconds_per_1k = None
    if bundle is not None:
        state = prepare_inference(
            bundle,
            params.cache,
            (params.meta_net, params.img2txt),
            hyper,
            gamma_logit=params.gamma_logit_value(),
        )
        queries = bundle.test_features.astype(np.float64)
        start = time.perf_counter()
        infer_logits(state, queries)
        elapsed = time.perf_counter() - start
        seconds_per_1k = 1000.0 * elapsed / max(1, queries.shape[0])
        if split is not None:
            start = time.perf_counter()
            train(bundle, split, hyper, epochs=1, batch_size=32, seed=0)
            seconds_per_epoch = time.perf_counter() - start
    return EfficiencyReport(
        parameter_counts=counts,
        macs_per_query=macs,
        seconds_per_epoch=seconds_per_epoch,
        seconds_per_1k_queries=seconds_per_1k,
    )
