"""Image/text encoders producing aligned fixed-width embeddings.

Two encoders are registered:

``lite``
    A deterministic, dependency-light stand-in for environments without any
    pretrained vision-language checkpoint: downsampled pixel values (images)
    or byte-trigram histograms (text) pushed through one fixed, seeded
    random projection and L2-normalized. Not semantically meaningful, but
    stable byte-for-byte across runs, which is what the format tests and
    smoke pipelines need.

``clip-vit-b32``
    The openai/clip-vit-base-patch32 checkpoint via transformers, when the
    weights are available locally. Loading is attempted lazily so the lite
    path works fully offline.
"""

from __future__ import annotations

import hashlib

import numpy as np
from PIL import Image


class EncoderUnavailableError(RuntimeError):
    """The requested encoder cannot run in this environment."""


def _seeded_projection(tag: str, rows: int, cols: int) -> np.ndarray:
    """Fixed Gaussian projection; the seed derives from a stable hash of the
    tag, so every process builds the identical matrix."""
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.Generator(np.random.PCG64(seed))
    return rng.standard_normal((rows, cols)) / np.sqrt(rows)


class LiteEncoder:
    """Deterministic offline encoder (no pretrained weights involved)."""

    name = "lite"
    feature_dim = 256

    _side = 16          # images are resampled to _side x _side RGB
    _text_bins = 768    # byte-trigram histogram width
    _raw_dim = _side * _side * 3  # == _text_bins, shared projection input

    def __init__(self):
        # The +1 slot carries a constant bias so no embedding can be the
        # zero vector (an all-black image would otherwise produce one).
        self._projection = _seeded_projection(
            "xmab-lite-encoder/1", self._raw_dim + 1, self.feature_dim
        )

    def _project(self, raw: np.ndarray) -> np.ndarray:
        with_bias = np.concatenate([raw, [1.0]])
        out = with_bias @ self._projection
        return out / np.linalg.norm(out)

    def encode_image(self, path) -> np.ndarray:
        with Image.open(path) as img:
            rgb = img.convert("RGB").resize(
                (self._side, self._side), Image.BILINEAR
            )
        raw = np.asarray(rgb, dtype=np.float64).reshape(-1) / 255.0
        return self._project(raw)

    def encode_text(self, text: str) -> np.ndarray:
        data = text.encode("utf-8")
        histogram = np.zeros(self._text_bins)
        padded = b"\x00" + data + b"\x00"
        for i in range(len(padded) - 2):
            trigram = padded[i : i + 3]
            bin_index = int.from_bytes(
                hashlib.blake2b(trigram, digest_size=4).digest(), "little"
            ) % self._text_bins
            histogram[bin_index] += 1.0
        if histogram.sum() > 0:
            histogram = np.sqrt(histogram / histogram.sum())
        return self._project(histogram)


class ClipEncoder:
    """openai/clip-vit-base-patch32 through transformers (needs local weights)."""

    name = "clip-vit-b32"
    feature_dim = 512

    _checkpoint = "openai/clip-vit-base-patch32"

    def __init__(self):
        try:
            import torch  # noqa: F401
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise EncoderUnavailableError(
                f"transformers/torch not importable: {exc}"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(self._checkpoint)
            self._processor = CLIPProcessor.from_pretrained(self._checkpoint)
        except Exception as exc:
            raise EncoderUnavailableError(
                f"could not load {self._checkpoint} (no local weights and no "
                f"hub access?): {exc}"
            ) from exc
        self._model.eval()

    def encode_image(self, path) -> np.ndarray:
        import torch

        with Image.open(path) as img:
            inputs = self._processor(
                images=img.convert("RGB"), return_tensors="pt"
            )
        with torch.no_grad():
            features = self._model.get_image_features(**inputs)[0]
        out = features.double().numpy()
        return out / np.linalg.norm(out)

    def encode_text(self, text: str) -> np.ndarray:
        import torch

        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            features = self._model.get_text_features(**inputs)[0]
        out = features.double().numpy()
        return out / np.linalg.norm(out)


_REGISTRY = {
    LiteEncoder.name: LiteEncoder,
    ClipEncoder.name: ClipEncoder,
}


def get_encoder(name: str):
    if name not in _REGISTRY:
        raise EncoderUnavailableError(
            f"unknown encoder {name!r}; available: {sorted(_REGISTRY)}"
        )
    return _REGISTRY[name]()
