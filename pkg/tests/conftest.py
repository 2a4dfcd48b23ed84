"""Shared helpers: parameter flattening and the finite-difference gradient
audit used by both the unit tests and the acceptance suite."""

import numpy as np

from xmadapter import dataio, training


def flatten_params(params):
    tensors = params.named_tensors()
    names = sorted(tensors)
    return names, np.concatenate([tensors[n].reshape(-1) for n in names])


def set_flat_params(params, names, vector):
    tensors = params.named_tensors()
    offset = 0
    for name in names:
        t = tensors[name]
        t.reshape(-1)[:] = vector[offset : offset + t.size]
        offset += t.size


def gradient_check(hyper, seed=3, h=1e-5, num_classes=4, shots=2, dim=8):
    """Max relative error between analytic and central-difference gradients.

    The finite-difference side freezes the hard-example weights at their
    base-point values, matching the backward pass's detachment of the mining
    score. Returns (per-tensor relative errors, worst error).
    """
    bundle = dataio.generate_synthetic(
        num_classes, shots, dim, 4,
        class_separation=2.0, modality_noise=0.3, seed=seed,
    )
    split = dataio.sample_few_shot(bundle, shots, seed=seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    params = training.init_params(bundle, split, hyper, rng)
    features, labels = dataio.gather_split(bundle, split)
    self_cols = np.arange(features.shape[0]) if hyper.mask_self else None

    _, grads = training.backward(
        params, bundle, features, labels, hyper, self_columns=self_cols
    )
    base = training._forward(params, bundle, features, hyper, self_cols)
    frozen_weights = base.weights.copy()

    names, x0 = flatten_params(params)
    tensors = params.named_tensors()

    def loss_at(vector):
        set_flat_params(params, names, vector)
        return training.loss_only(
            params, bundle, features, labels, hyper,
            self_columns=self_cols, override_weights=frozen_weights,
        )

    errors = {}
    offset = 0
    for name in names:
        size = tensors[name].size
        analytic = np.atleast_1d(grads[name]).reshape(-1)
        numeric = np.zeros(size)
        for i in range(size):
            v = x0.copy()
            v[offset + i] += h
            fplus = loss_at(v)
            v[offset + i] -= 2 * h
            fminus = loss_at(v)
            numeric[i] = (fplus - fminus) / (2 * h)
        scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-12)
        errors[name] = float(np.max(np.abs(analytic - numeric)) / scale)
        offset += size
    set_flat_params(params, names, x0)
    return errors, max(errors.values())
