"""Hard-example-weighted training of the adapter parameters.

Trainable set: the cache keys plus the two projection heads (and optionally
a logit reparameterizing gamma). Values, class-text features, and the
zero-shot classifier stay frozen. Each batch is scored by how much its
image and text affinities disagree; samples where the modalities disagree
get a larger weight in the cross-entropy loss. The weights themselves are
treated as constants in the backward pass (no gradient flows through the
mining score).

Gradients are derived by hand for this fixed graph; there is no tape. Every
formula is audited against central finite differences in the test suite.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .adapter import HyperParams, effective_gamma
from .cache import CacheModel, ProjectionNet, build_cache, init_projection, one_hot
from .dataio import EmbeddingBundle, FewShotSplit, gather_split
from .errors import ShapeError, TrainingDivergenceError

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

# Divergence guard: any parameter beyond this magnitude aborts training.
PARAM_MAGNITUDE_LIMIT = 1e6

CHECKPOINT_MAGIC = b"XMCK"
CHECKPOINT_VERSION = 1

_PHI_CODES = {"post_aggregate": 0, "pre_aggregate": 1}
_PHI_NAMES = {v: k for k, v in _PHI_CODES.items()}


@dataclass
class AdapterParams:
    """All trainable tensors plus the frozen cache values they act on."""

    cache: CacheModel           # image_keys is the trainable tensor
    meta_net: ProjectionNet
    img2txt: ProjectionNet
    gamma_logit: np.ndarray | None = None  # shape-() array when gamma is learned

    def named_tensors(self) -> dict[str, np.ndarray]:
        out = {"cache_keys": self.cache.image_keys}
        for prefix, net in (("meta", self.meta_net), ("img2txt", self.img2txt)):
            if net.hidden_weight is not None:
                out[f"{prefix}_hidden_weight"] = net.hidden_weight
                out[f"{prefix}_hidden_bias"] = net.hidden_bias
            out[f"{prefix}_weight"] = net.weight
            out[f"{prefix}_bias"] = net.bias
        if self.gamma_logit is not None:
            out["gamma_logit"] = self.gamma_logit
        return out

    def all_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.named_tensors().values())

    def gamma_logit_value(self) -> float | None:
        return None if self.gamma_logit is None else float(self.gamma_logit)


def init_params(
    bundle: EmbeddingBundle,
    split: FewShotSplit,
    hyper: HyperParams,
    rng: np.random.Generator,
) -> AdapterParams:
    """Cache from the split; projection heads from N(0, 0.02^2); gamma logit
    placed so that sigmoid(logit) equals the configured gamma."""
    cache = build_cache(bundle, split)
    c = bundle.feature_dim
    meta = init_projection(c, hyper.d, rng, hidden_dim=hyper.hidden_dim)
    img2txt = init_projection(c, hyper.d, rng, hidden_dim=hyper.hidden_dim)
    gamma_logit = None
    if hyper.learn_gamma:
        g = min(max(hyper.gamma, 1e-6), 1.0 - 1e-6)
        gamma_logit = np.array(math.log(g / (1.0 - g)))
    return AdapterParams(
        cache=cache, meta_net=meta, img2txt=img2txt, gamma_logit=gamma_logit
    )


def hard_example_weights(a_image: np.ndarray, a_text: np.ndarray) -> np.ndarray:
    """Per-sample weight: mean over cache entries of sigmoid(|a_img - a_txt|).

    Always in [0.5, 1): equal affinities give exactly 0.5, and the sigmoid
    never reaches 1 for finite disagreement.
    """
    if a_image.shape != a_text.shape:
        raise ShapeError(
            f"hard_example_weights: shapes {a_image.shape} vs {a_text.shape}"
        )
    return linalg.sigmoid(np.abs(a_image - a_text)).mean(axis=1)


def weighted_ce_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
    raw_log_ce: bool = False,
    class_scale: bool = False,
) -> float:
    """Mean over the batch of per-sample cross entropy times its weight.

    Logits pass through a row softmax before the log unless ``raw_log_ce``
    asks for the unnormalized (and numerically fragile) variant.
    ``class_scale`` divides each sample's loss by the class count.
    """
    logits = linalg.as_matrix(logits, "logits")
    if not np.all(np.isfinite(logits)):
        raise ValueError("weighted_ce_loss: non-finite logits")
    b, n = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (b,) or (labels.size and (labels.min() < 0 or labels.max() >= n)):
        raise ValueError("weighted_ce_loss: labels out of range or mis-shaped")
    if raw_log_ce:
        with np.errstate(divide="ignore", invalid="ignore"):
            ce = -np.log(logits[np.arange(b), labels])
    else:
        ce = _log_softmax_ce(logits, labels)
    if class_scale:
        ce = ce / n
    return float(np.mean(np.asarray(weights) * ce))


def _log_softmax_ce(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Per-sample -log softmax(logits)[label] via logsumexp.

    Stays finite for any finite logits, unlike log of an underflowed
    probability.
    """
    rows = np.arange(logits.shape[0])
    shifted = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=1))
    return lse - shifted[rows, labels]


@dataclass
class BatchStats:
    """Per-batch summary returned alongside gradients."""

    loss: float
    raw_ce: float
    weight_mean: float
    correct: int
    size: int


def _projection_with_hidden(net: ProjectionNet, x: np.ndarray):
    """Forward keeping the hidden activation for the backward pass."""
    if net.hidden_weight is not None:
        hidden = np.tanh(x @ net.hidden_weight + net.hidden_bias)
        return hidden @ net.weight + net.bias, hidden
    return x @ net.weight + net.bias, None


def _projection_grads(
    net: ProjectionNet,
    x: np.ndarray,
    hidden: np.ndarray | None,
    grad_out: np.ndarray,
    prefix: str,
    grads: dict,
) -> None:
    """Accumulate gradients of an affine (or tanh-hidden) head into grads."""
    if net.hidden_weight is None:
        grads[f"{prefix}_weight"] = x.T @ grad_out
        grads[f"{prefix}_bias"] = grad_out.sum(axis=0)
        return
    grads[f"{prefix}_weight"] = hidden.T @ grad_out
    grads[f"{prefix}_bias"] = grad_out.sum(axis=0)
    grad_hidden = (grad_out @ net.weight.T) * (1.0 - hidden**2)
    grads[f"{prefix}_hidden_weight"] = x.T @ grad_hidden
    grads[f"{prefix}_hidden_bias"] = grad_hidden.sum(axis=0)


@dataclass
class _Forward:
    """Intermediates of one training forward pass."""

    queries: np.ndarray
    keys_norm: np.ndarray
    a_image: np.ndarray
    text_proj: np.ndarray
    meta_hidden: np.ndarray | None
    query_proj: np.ndarray
    i2t_hidden: np.ndarray | None
    entry_keys: np.ndarray
    a_text: np.ndarray
    gamma: float
    fused: np.ndarray
    aggregated: np.ndarray | None
    sharpened: np.ndarray | None
    cache_l: np.ndarray
    logits: np.ndarray
    probs: np.ndarray | None
    weights: np.ndarray


def _forward(
    params: AdapterParams,
    bundle: EmbeddingBundle,
    features: np.ndarray,
    hyper: HyperParams,
    self_columns: np.ndarray | None,
) -> _Forward:
    queries = linalg.l2_normalize_rows(np.asarray(features, dtype=np.float64))
    keys_norm = linalg.l2_normalize_rows(params.cache.image_keys)
    a_image = queries @ keys_norm.T

    text = bundle.text_features.astype(np.float64)
    text_proj, meta_hidden = _projection_with_hidden(params.meta_net, text)
    entry_keys = text_proj[params.cache.entry_labels]
    query_proj, i2t_hidden = _projection_with_hidden(params.img2txt, queries)
    a_text = linalg.l2_normalize_rows(query_proj) @ linalg.l2_normalize_rows(
        entry_keys
    ).T

    gamma = effective_gamma(hyper, params.gamma_logit_value())
    fused = gamma * a_image + (1.0 - gamma) * a_text
    if hyper.mask_self and self_columns is not None:
        fused[np.arange(fused.shape[0]), self_columns] = 0.0

    if hyper.phi_order == "post_aggregate":
        aggregated = fused @ params.cache.values
        cache_l = np.exp(-hyper.beta * (1.0 - aggregated))
        sharpened = None
    else:
        sharpened = np.exp(-hyper.beta * (1.0 - fused))
        cache_l = sharpened @ params.cache.values
        aggregated = None

    zeroshot = queries @ bundle.zeroshot_weights.astype(np.float64)
    logits = hyper.alpha * cache_l + zeroshot

    probs = None if hyper.raw_log_ce else linalg.softmax_rows(logits)
    weights = hard_example_weights(a_image, a_text)
    return _Forward(
        queries=queries,
        keys_norm=keys_norm,
        a_image=a_image,
        text_proj=text_proj,
        meta_hidden=meta_hidden,
        query_proj=query_proj,
        i2t_hidden=i2t_hidden,
        entry_keys=entry_keys,
        a_text=a_text,
        gamma=gamma,
        fused=fused,
        aggregated=aggregated,
        sharpened=sharpened,
        cache_l=cache_l,
        logits=logits,
        probs=probs,
        weights=weights,
    )


def loss_only(
    params: AdapterParams,
    bundle: EmbeddingBundle,
    features: np.ndarray,
    labels: np.ndarray,
    hyper: HyperParams,
    self_columns: np.ndarray | None = None,
    override_weights: np.ndarray | None = None,
) -> float:
    """Scalar training loss for the batch.

    ``override_weights`` pins the hard-example weights to given values;
    finite-difference audits use it because the backward pass deliberately
    treats the mining score as a constant.
    """
    fwd = _forward(params, bundle, features, hyper, self_columns)
    weights = fwd.weights if override_weights is None else override_weights
    return weighted_ce_loss(
        fwd.logits,
        labels,
        weights,
        raw_log_ce=hyper.raw_log_ce,
        class_scale=hyper.ce_class_scale,
    )


def backward(
    params: AdapterParams,
    bundle: EmbeddingBundle,
    features: np.ndarray,
    labels: np.ndarray,
    hyper: HyperParams,
    self_columns: np.ndarray | None = None,
) -> tuple[BatchStats, dict[str, np.ndarray]]:
    """Forward pass plus exact gradients of the weighted loss.

    Hard-example weights enter the loss as constants: perturbing a parameter
    moves the cross entropy but not the mining score.
    """
    fwd = _forward(params, bundle, features, hyper, self_columns)
    b, n = fwd.logits.shape
    labels = np.asarray(labels)

    ce_scale = (1.0 / n) if hyper.ce_class_scale else 1.0
    if hyper.raw_log_ce:
        with np.errstate(divide="ignore", invalid="ignore"):
            ce = -np.log(fwd.logits[np.arange(b), labels])
        grad_logits = np.zeros_like(fwd.logits)
        grad_logits[np.arange(b), labels] = -1.0 / fwd.logits[np.arange(b), labels]
    else:
        ce = _log_softmax_ce(fwd.logits, labels)
        grad_logits = fwd.probs.copy()
        grad_logits[np.arange(b), labels] -= 1.0
    ce = ce * ce_scale
    loss = float(np.mean(fwd.weights * ce))
    grad_logits *= (fwd.weights * ce_scale / b)[:, None]

    grads: dict[str, np.ndarray] = {}
    grad_cache_l = hyper.alpha * grad_logits
    if hyper.phi_order == "post_aggregate":
        grad_agg = grad_cache_l * fwd.cache_l * hyper.beta
        grad_fused = grad_agg @ params.cache.values.T
    else:
        grad_sharp = grad_cache_l @ params.cache.values.T
        grad_fused = grad_sharp * fwd.sharpened * hyper.beta
    if hyper.mask_self and self_columns is not None:
        grad_fused[np.arange(b), self_columns] = 0.0

    grad_a_image = fwd.gamma * grad_fused
    grad_a_text = (1.0 - fwd.gamma) * grad_fused

    if params.gamma_logit is not None:
        grad_gamma = float(np.sum(grad_fused * (fwd.a_image - fwd.a_text)))
        grads["gamma_logit"] = np.array(
            grad_gamma * fwd.gamma * (1.0 - fwd.gamma)
        )

    grad_keys_norm = grad_a_image.T @ fwd.queries
    grads["cache_keys"] = linalg.l2_normalize_rows_vjp(
        grad_keys_norm, params.cache.image_keys
    )

    grad_query_proj, grad_entry_keys = linalg.cosine_rows_vjp(
        grad_a_text, fwd.query_proj, fwd.entry_keys
    )
    grad_text_proj = np.zeros_like(fwd.text_proj)
    np.add.at(grad_text_proj, params.cache.entry_labels, grad_entry_keys)

    _projection_grads(
        params.img2txt, fwd.queries, fwd.i2t_hidden, grad_query_proj,
        "img2txt", grads,
    )
    _projection_grads(
        params.meta_net,
        bundle.text_features.astype(np.float64),
        fwd.meta_hidden,
        grad_text_proj,
        "meta",
        grads,
    )

    predictions = np.argmax(fwd.logits, axis=1)
    stats = BatchStats(
        loss=loss,
        raw_ce=float(np.mean(ce)),
        weight_mean=float(np.mean(fwd.weights)),
        correct=int(np.sum(predictions == labels)),
        size=b,
    )
    return stats, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    """Adam moments plus the learning-rate schedule position."""

    base_lr: float
    learning_rate: float
    step: int = 0
    first_moments: dict[str, np.ndarray] = field(default_factory=dict)
    second_moments: dict[str, np.ndarray] = field(default_factory=dict)


def cosine_lr(base_lr: float, t: int, t_max: int) -> float:
    """Cosine decay: base_lr * 0.5 * (1 + cos(pi * t / t_max)); zero at t_max."""
    if t_max <= 0:
        return base_lr
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * t / t_max))


def adam_step(
    params: AdapterParams,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
) -> tuple[AdapterParams, OptimizerState]:
    """One in-place Adam update at ``state.learning_rate``."""
    state.step += 1
    t = state.step
    bias1 = 1.0 - ADAM_BETA1**t
    bias2 = 1.0 - ADAM_BETA2**t
    tensors = params.named_tensors()
    for name, grad in grads.items():
        param = tensors[name]
        if param.shape != grad.shape:
            raise ShapeError(f"adam_step: {name} grad shape {grad.shape} "
                             f"!= param shape {param.shape}")
        m = state.first_moments.setdefault(name, np.zeros_like(param))
        v = state.second_moments.setdefault(name, np.zeros_like(param))
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * grad
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * grad**2
        update = state.learning_rate * (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        param -= update
    return params, state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    weighted_loss: float
    raw_ce: float
    train_accuracy: float
    weight_mean: float
    learning_rate: float


@dataclass
class TrainReport:
    """Per-epoch statistics plus the run configuration for reproducibility."""

    epochs: list[EpochRecord]
    final_test_accuracy: float | None
    config: dict
    seed: int

    def to_json(self) -> str:
        payload = {
            "seed": self.seed,
            "config": self.config,
            "final_test_accuracy": self.final_test_accuracy,
            "epochs": [vars(e) for e in self.epochs],
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def _config_echo(hyper: HyperParams, epochs, batch_size, base_lr, shots) -> dict:
    return {
        "gamma": hyper.gamma,
        "alpha": hyper.alpha,
        "beta": hyper.beta,
        "d": hyper.d,
        "learn_gamma": hyper.learn_gamma,
        "hidden_dim": hyper.hidden_dim,
        "phi_order": hyper.phi_order,
        "mask_self": hyper.mask_self,
        "raw_log_ce": hyper.raw_log_ce,
        "ce_class_scale": hyper.ce_class_scale,
        "epochs": epochs,
        "batch_size": batch_size,
        "learning_rate": base_lr,
        "shots": shots,
    }


def train(
    bundle: EmbeddingBundle,
    split: FewShotSplit,
    hyper: HyperParams,
    epochs: int = 20,
    batch_size: int = 32,
    seed: int = 0,
    base_lr: float = 1e-3,
    checkpoint_path=None,
    checkpoint_dtype: str = "f32",
) -> tuple[AdapterParams, TrainReport]:
    """Full training run, deterministic given the seed.

    One PCG64 generator drives both initialization and epoch shuffles, so
    identical (bundle, split, hyper, epochs, batch_size, seed) reproduce the
    run bit for bit. Aborts with ``TrainingDivergenceError`` on non-finite
    loss or runaway parameters.
    """
    if epochs < 0 or batch_size < 1:
        raise ValueError("epochs must be >= 0 and batch_size >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    params = init_params(bundle, split, hyper, rng)
    features_all, labels_all = gather_split(bundle, split)
    nk = features_all.shape[0]

    state = OptimizerState(base_lr=base_lr, learning_rate=base_lr)
    records: list[EpochRecord] = []
    for epoch in range(epochs):
        state.learning_rate = (
            cosine_lr(base_lr, epoch, epochs - 1) if epochs > 1 else base_lr
        )
        order = rng.permutation(nk)
        loss_sum = ce_sum = weight_sum = 0.0
        correct = 0
        for start in range(0, nk, batch_size):
            rows = order[start : start + batch_size]
            self_cols = rows if hyper.mask_self else None
            stats, grads = backward(
                params,
                bundle,
                features_all[rows],
                labels_all[rows],
                hyper,
                self_columns=self_cols,
            )
            step_index = state.step
            if not math.isfinite(stats.loss):
                raise TrainingDivergenceError(
                    f"non-finite loss {stats.loss}", epoch, step_index
                )
            adam_step(params, grads, state)
            if not params.all_finite() or any(
                np.max(np.abs(t)) > PARAM_MAGNITUDE_LIMIT
                for t in params.named_tensors().values()
            ):
                raise TrainingDivergenceError(
                    "parameter magnitude exceeded limit", epoch, step_index
                )
            loss_sum += stats.loss * stats.size
            ce_sum += stats.raw_ce * stats.size
            weight_sum += stats.weight_mean * stats.size
            correct += stats.correct
        records.append(
            EpochRecord(
                epoch=epoch,
                weighted_loss=loss_sum / nk,
                raw_ce=ce_sum / nk,
                train_accuracy=correct / nk,
                weight_mean=weight_sum / nk,
                learning_rate=state.learning_rate,
            )
        )

    final_test_accuracy = None
    if bundle.num_test > 0:
        from .adapter import predict

        preds = predict(
            bundle,
            params.cache,
            (params.meta_net, params.img2txt),
            hyper,
            bundle.test_features.astype(np.float64),
            gamma_logit=params.gamma_logit_value(),
        )
        final_test_accuracy = float(np.mean(preds == bundle.test_labels))

    report = TrainReport(
        epochs=records,
        final_test_accuracy=final_test_accuracy,
        config=_config_echo(hyper, epochs, batch_size, base_lr, split.shot_count),
        seed=seed,
    )
    if checkpoint_path is not None:
        save_checkpoint(params, hyper, checkpoint_path, dtype=checkpoint_dtype)
    return params, report


# ---------------------------------------------------------------------------
# Checkpoints (XMCK container: header, hyperparameter echo, tensors)
# ---------------------------------------------------------------------------

_DTYPE_CODES = {"f32": 0, "f64": 1}
_DTYPE = {0: "<f4", 1: "<f8"}


def _net_tensors(net: ProjectionNet):
    if net.hidden_weight is not None:
        return [net.hidden_weight, net.hidden_bias, net.weight, net.bias]
    return [net.weight, net.bias]


def save_checkpoint(
    params: AdapterParams, hyper: HyperParams, path, dtype: str = "f32"
) -> None:
    """Write params + hyperparameters atomically. dtype: "f32" or "f64"."""
    if dtype not in _DTYPE_CODES:
        raise ValueError(f"checkpoint dtype must be f32 or f64, got {dtype}")
    code = _DTYPE_CODES[dtype]
    np_dtype = _DTYPE[code]
    cache = params.cache
    nk, c = cache.image_keys.shape
    n = cache.num_classes
    hidden = hyper.hidden_dim or 0
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(struct.pack("<B", code))
        fh.write(struct.pack("<ddd", hyper.gamma, hyper.alpha, hyper.beta))
        fh.write(struct.pack("<I", hyper.d))
        fh.write(
            struct.pack(
                "<BBBBB",
                int(hyper.learn_gamma),
                _PHI_CODES[hyper.phi_order],
                int(hyper.mask_self),
                int(hyper.raw_log_ce),
                int(hyper.ce_class_scale),
            )
        )
        fh.write(struct.pack("<I", hidden))
        if params.gamma_logit is not None:
            fh.write(struct.pack("<Bd", 1, float(params.gamma_logit)))
        else:
            fh.write(struct.pack("<B", 0))
        fh.write(struct.pack("<III", nk, c, n))
        fh.write(np.ascontiguousarray(cache.entry_labels, dtype="<u4").tobytes())
        for tensor in [cache.image_keys] + _net_tensors(params.meta_net) + _net_tensors(
            params.img2txt
        ):
            fh.write(np.ascontiguousarray(tensor, dtype=np_dtype).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[AdapterParams, HyperParams]:
    """Read an XMCK file back into params + hyperparameters."""
    from .errors import BadMagicError, TruncatedFileError, UnsupportedVersionError

    with open(path, "rb") as fh:
        def need(nbytes: int, what: str) -> bytes:
            data = fh.read(nbytes)
            if len(data) != nbytes:
                raise TruncatedFileError(f"checkpoint ended while reading {what}")
            return data

        if need(4, "magic") != CHECKPOINT_MAGIC:
            raise BadMagicError("not an XMCK checkpoint")
        (version,) = struct.unpack("<H", need(2, "version"))
        if version != CHECKPOINT_VERSION:
            raise UnsupportedVersionError(f"unsupported checkpoint version {version}")
        (code,) = struct.unpack("<B", need(1, "dtype"))
        np_dtype = _DTYPE[code]
        gamma, alpha, beta = struct.unpack("<ddd", need(24, "hyperparameters"))
        (d,) = struct.unpack("<I", need(4, "d"))
        learn_gamma, phi, mask_self, raw_log_ce, ce_class_scale = struct.unpack(
            "<BBBBB", need(5, "flags")
        )
        (hidden,) = struct.unpack("<I", need(4, "hidden_dim"))
        (has_gl,) = struct.unpack("<B", need(1, "gamma_logit flag"))
        gamma_logit = None
        if has_gl:
            gamma_logit = np.array(struct.unpack("<d", need(8, "gamma_logit"))[0])
        nk, c, n = struct.unpack("<III", need(12, "dims"))
        entry_labels = np.frombuffer(
            need(nk * 4, "entry_labels"), dtype="<u4"
        ).astype(np.int64)

        itemsize = 4 if code == 0 else 8

        def tensor(shape, what):
            count = int(np.prod(shape))
            raw = need(count * itemsize, what)
            return np.frombuffer(raw, dtype=np_dtype).astype(np.float64).reshape(shape)

        keys = tensor((nk, c), "cache_keys")

        def read_net(prefix):
            if hidden:
                hw = tensor((c, hidden), f"{prefix} hidden weight")
                hb = tensor((hidden,), f"{prefix} hidden bias")
                w = tensor((hidden, d), f"{prefix} weight")
                b = tensor((d,), f"{prefix} bias")
                return ProjectionNet(
                    weight=w, bias=b, hidden_weight=hw, hidden_bias=hb
                )
            w = tensor((c, d), f"{prefix} weight")
            b = tensor((d,), f"{prefix} bias")
            return ProjectionNet(weight=w, bias=b)

        meta = read_net("meta")
        img2txt = read_net("img2txt")
        if fh.read(1):
            raise TruncatedFileError("trailing bytes after checkpoint payload")

    hyper = HyperParams(
        gamma=gamma,
        alpha=alpha,
        beta=beta,
        d=d,
        learn_gamma=bool(learn_gamma),
        hidden_dim=hidden or None,
        phi_order=_PHI_NAMES[phi],
        mask_self=bool(mask_self),
        raw_log_ce=bool(raw_log_ce),
        ce_class_scale=bool(ce_class_scale),
    )
    cache = CacheModel(
        image_keys=keys,
        values=one_hot(entry_labels, n),
        entry_labels=entry_labels,
    )
    return (
        AdapterParams(
            cache=cache, meta_net=meta, img2txt=img2txt, gamma_logit=gamma_logit
        ),
        hyper,
    )
