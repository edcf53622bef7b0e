"""Perplexity-based activation sparsity, measured per receptive field.

Given a layer's pre-activation tensor, each spatial position holds one
activation vector across the layer's channels. The vector is softmax
normalised, its entropy exponentiated into a perplexity in [1, D], and the
rescaled score folded into a sparsity value s = 1 - perplexity/D in
[0, 1 - 1/D]. Everything here computes in float64 regardless of the engine
dtype; all functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DataError
from .nn import Conv2D


@dataclass(frozen=True)
class ReceptiveFieldGrid:
    """Spatial layout of a layer's output: rows x cols positions, each with
    one activation vector of length ``channels``."""
    rows: int
    cols: int
    channels: int

    @property
    def count(self) -> int:
        return self.rows * self.cols

    def linear_index(self, row: int, col: int) -> int:
        return row * self.cols + col


@dataclass(frozen=True)
class NasValue:
    """Per-position sparsity quintuple."""
    probabilities: np.ndarray
    entropy: float
    perplexity: float
    score: float
    sparsity: float


@dataclass(frozen=True)
class LayerNasSnapshot:
    """Sparsity of one layer on one probe batch: the per-position grid of the
    designated heatmap sample plus min/median/max pooled over every position
    of every sample."""
    layer: str
    grid: np.ndarray
    minimum: float
    median: float
    maximum: float
    channels: int


def receptive_field_vectors(pre_activation: np.ndarray):
    """Rearrange a pre-activation tensor into per-position activation vectors.

    [B, D, M, N] becomes [B, M*N, D] with linear index k = m * N + n;
    [B, D] (a fully connected layer) becomes [B, 1, D]. Returns the vectors
    and the grid metadata.
    """
    if pre_activation.ndim == 2:
        b, d = pre_activation.shape
        grid = ReceptiveFieldGrid(1, 1, d)
        vectors = pre_activation.reshape(b, 1, d)
    elif pre_activation.ndim == 4:
        b, d, m, n = pre_activation.shape
        grid = ReceptiveFieldGrid(m, n, d)
        vectors = pre_activation.transpose(0, 2, 3, 1).reshape(b, m * n, d)
    else:
        raise ConfigurationError(
            f"expected [B, D] or [B, D, M, N] pre-activation, got {pre_activation.shape}")
    if grid.channels < 2:
        raise ConfigurationError(
            f"sparsity is undefined for {grid.channels} channel(s); need D >= 2")
    return vectors, grid


def scatter_field_vectors(vectors: np.ndarray, grid: ReceptiveFieldGrid) -> np.ndarray:
    """Inverse of receptive_field_vectors: [B, R, D] back to [B, D, M, N]."""
    b = vectors.shape[0]
    return vectors.reshape(b, grid.rows, grid.cols, grid.channels).transpose(0, 3, 1, 2)


def _softmax_entropy(vectors: np.ndarray):
    """Stabilised softmax and entropy along the last axis, in float64.

    Probabilities that underflow to zero contribute nothing to the entropy
    (the p ln p -> 0 limit).
    """
    v = np.asarray(vectors, dtype=np.float64)
    z = v - v.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    plogp = np.where(p > 0.0, p * np.log(np.where(p > 0.0, p, 1.0)), 0.0)
    entropy = -plogp.sum(axis=-1)
    return p, entropy


def perplexity_values(vectors: np.ndarray) -> np.ndarray:
    """Perplexity e^H of each activation vector; shape drops the channel axis."""
    _, entropy = _softmax_entropy(vectors)
    return np.exp(entropy)


def sparsity_values(vectors: np.ndarray) -> np.ndarray:
    """Sparsity 1 - perplexity/D of each activation vector."""
    d = vectors.shape[-1]
    if d < 2:
        raise ConfigurationError(f"sparsity is undefined for {d} channel(s); need D >= 2")
    return 1.0 - perplexity_values(vectors) / d


def nas_of_vector(a: np.ndarray, context: str = "activation vector") -> NasValue:
    """Full sparsity quintuple for a single activation vector."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 1 or a.shape[0] < 2:
        raise ConfigurationError(
            f"{context}: need a 1D vector with D >= 2 entries, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{context}: non-finite entries in {a}")
    d = a.shape[0]
    p, entropy = _softmax_entropy(a)
    perplexity = float(np.exp(entropy))
    score = perplexity / d
    return NasValue(probabilities=p, entropy=float(entropy),
                    perplexity=perplexity, score=score, sparsity=1.0 - score)


def layer_nas(pre_activation: np.ndarray, layer: str = "",
              heatmap_sample: int = 0) -> LayerNasSnapshot:
    """Sparsity snapshot of one layer over a probe batch.

    Aggregates pool every position of every sample into one population; the
    retained grid belongs to ``heatmap_sample``.
    """
    if not np.all(np.isfinite(pre_activation)):
        raise DataError(f"layer {layer!r}: non-finite pre-activation values")
    vectors, grid = receptive_field_vectors(pre_activation)
    if not 0 <= heatmap_sample < vectors.shape[0]:
        raise ConfigurationError(
            f"heatmap sample {heatmap_sample} out of range for batch {vectors.shape[0]}")
    s = sparsity_values(vectors)
    return LayerNasSnapshot(
        layer=layer,
        grid=s[heatmap_sample].reshape(grid.rows, grid.cols),
        minimum=float(s.min()),
        median=float(np.median(s)),
        maximum=float(s.max()),
        channels=grid.channels,
    )


def patch_gather_conv2d(x: np.ndarray, layer: Conv2D) -> np.ndarray:
    """Independent convolution oracle: gathers each receptive field as a
    patch and evaluates the filter inner products one by one. Deliberately
    naive; used only to cross-check the engine's im2col path.
    """
    if x.ndim != 4 or x.shape[1] != layer.in_channels:
        raise ConfigurationError(
            f"oracle expects [B, {layer.in_channels}, H, W], got {x.shape}")
    b, c, h, w = x.shape
    oh, ow = layer.output_hw(h, w)
    kh, kw = layer.kernel_size
    sh, sw = layer.stride
    ph, pw = layer.padding
    padded = np.zeros((b, c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    padded[:, :, ph:ph + h, pw:pw + w] = x
    weights = layer.weights.astype(np.float64)
    bias = layer.bias.astype(np.float64) if layer.bias is not None else None
    out = np.zeros((b, layer.out_channels, oh, ow), dtype=np.float64)
    for bi in range(b):
        for m in range(oh):
            for n in range(ow):
                patch = padded[bi, :, m * sh:m * sh + kh, n * sw:n * sw + kw]
                for d in range(layer.out_channels):
                    acc = float(np.sum(weights[d] * patch))
                    if bias is not None:
                        acc += float(bias[d])
                    out[bi, d, m, n] = acc
    return out
