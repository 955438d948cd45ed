"""Per-pixel semantic decoding: rendered features -> class probabilities.

The decoder is a per-pixel affine map (a 1x1 convolution) followed by a
softmax, the minimal model that restores the low-dimensional blended
features to K_sem class scores. Softmax is computed in log space with
max subtraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SemanticDecoder:
    weight: np.ndarray  # (K_sem, N_sem)
    bias: np.ndarray  # (K_sem,)

    def __post_init__(self) -> None:
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ValueError("decoder weight/bias shapes inconsistent")

    @property
    def k_sem(self) -> int:
        return self.weight.shape[0]

    @property
    def n_sem(self) -> int:
        return self.weight.shape[1]

    def copy(self) -> "SemanticDecoder":
        return SemanticDecoder(self.weight.copy(), self.bias.copy())


def init_decoder(k_sem: int, n_sem: int, seed: int) -> SemanticDecoder:
    """Uniform(-a, a) weights with a = sqrt(6 / (N_sem + K_sem)), zero bias."""
    if k_sem < 2:
        raise ValueError("k_sem must be >= 2")
    if not 0 < n_sem < k_sem:
        raise ValueError("need 0 < n_sem < k_sem")
    rng = np.random.default_rng(seed)
    a = np.sqrt(6.0 / (n_sem + k_sem))
    weight = rng.uniform(-a, a, size=(k_sem, n_sem)).astype(np.float32)
    return SemanticDecoder(weight=weight, bias=np.zeros(k_sem, dtype=np.float32))


def _softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def decode_labels(
    features: np.ndarray, decoder: SemanticDecoder
) -> tuple[np.ndarray, np.ndarray]:
    """Softmax class probabilities and argmax labels of a feature map.

    features is (H, W, N_sem); returns probs (H, W, K_sem) and int32
    labels (argmax, lowest index on ties).
    """
    if features.shape[-1] != decoder.n_sem:
        raise ValueError("feature depth does not match the decoder")
    logits = features @ decoder.weight.astype(features.dtype).T + decoder.bias.astype(
        features.dtype
    )
    probs = _softmax(logits)
    labels = np.argmax(probs, axis=-1).astype(np.int32)
    return probs, labels


def decoder_backward(
    features: np.ndarray, decoder: SemanticDecoder, d_probs: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Adjoints of decode_labels: returns (d_features, d_weight, d_bias).

    d_features has the feature-map shape and feeds the renderer backward
    as the per-pixel feature adjoint grid.
    """
    probs, _ = decode_labels(features, decoder)
    # softmax vjp: dlogits = p * (g - sum(g * p))
    inner = np.sum(d_probs * probs, axis=-1, keepdims=True)
    d_logits = probs * (d_probs - inner)
    d_features = d_logits @ decoder.weight.astype(features.dtype)
    flat_dl = d_logits.reshape(-1, decoder.k_sem)
    flat_f = features.reshape(-1, decoder.n_sem)
    d_weight = flat_dl.T @ flat_f
    d_bias = flat_dl.sum(axis=0)
    return d_features, d_weight, d_bias
