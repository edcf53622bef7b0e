"""Differentiable activity penalty rewarding dense (high-perplexity) activations.

The penalty on a tagged layer is -coeff * sum over receptive fields of the
field's perplexity, averaged over the minibatch so batch size does not
rescale it. Under the default one-over-r rule coeff = 1/r for a layer with r
receptive fields, which bounds each layer's contribution to [-D, -1].

The gradient w.r.t. a pre-activation component a_j of one field is

    coeff/B * perplexity * p_j * (ln p_j + H)

which vanishes exactly on uniform fields (entropy is stationary at its
maximum). It is injected into the engine's reverse pass at the measurement
point, so it chains into the weights of the tagged layer and everything
before it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError
from .metrics import _softmax_entropy, receptive_field_vectors


@dataclass(frozen=True)
class RegularizerConfig:
    """Per-layer coefficient selection: the one-over-r rule (default) or a
    fixed mapping from layer name to coefficient."""
    rule: str = "one_over_r"
    coefficients: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.rule not in ("one_over_r", "fixed"):
            raise ConfigurationError(f"unknown coefficient rule {self.rule!r}")
        for name, lam in self.coefficients.items():
            if lam < 0:
                raise ConfigurationError(f"coefficient for {name!r} must be >= 0, got {lam}")

    def resolve(self, field_counts: dict[str, int]) -> dict[str, float]:
        """Coefficient per tagged layer given each layer's receptive-field count."""
        if self.rule == "one_over_r":
            return {name: 1.0 / r for name, r in field_counts.items()}
        missing = set(field_counts) - set(self.coefficients)
        if missing:
            raise ConfigurationError(f"no fixed coefficient for layers {sorted(missing)}")
        return {name: float(self.coefficients[name]) for name in field_counts}


@dataclass(frozen=True)
class PenaltyTerm:
    total: float
    per_layer: dict[str, float]


@dataclass(frozen=True)
class FilterCorrelationReport:
    """Pairwise cosine similarity between a conv layer's flattened filters.
    Diagnostic only; high values signal the identical-filter collapse mode."""
    max_similarity: float
    mean_similarity: float

    def flags_collapse(self, threshold: float = 0.99) -> bool:
        return self.max_similarity >= threshold


def nas_penalty(pre_activations: dict[str, np.ndarray],
                coefficients: dict[str, float]) -> PenaltyTerm:
    """Total penalty over the tagged layers for one minibatch."""
    per_layer: dict[str, float] = {}
    total = 0.0
    for name, pre in pre_activations.items():
        lam = coefficients[name]
        if lam < 0:
            raise ConfigurationError(f"coefficient for {name!r} must be >= 0, got {lam}")
        vectors, _ = receptive_field_vectors(pre)
        _, entropy = _softmax_entropy(vectors)
        contribution = -lam * float(np.exp(entropy).sum(axis=1).mean())
        per_layer[name] = contribution
        total += contribution
    return PenaltyTerm(total=total, per_layer=per_layer)


def nas_penalty_gradient(pre_activation: np.ndarray, coefficient: float) -> np.ndarray:
    """Analytic gradient of the layer's penalty contribution w.r.t. its
    pre-activation tensor (batch-mean factor included). Same shape and dtype
    as the input."""
    if coefficient < 0:
        raise ConfigurationError(f"coefficient must be >= 0, got {coefficient}")
    vectors, grid = receptive_field_vectors(pre_activation)
    batch = vectors.shape[0]
    p, entropy = _softmax_entropy(vectors)
    perplexity = np.exp(entropy)
    logp = np.log(np.where(p > 0.0, p, 1.0))
    inner = np.where(p > 0.0, p * (logp + entropy[..., None]), 0.0)
    # a uniform field sits exactly at the entropy maximum; zero the rounding
    # residue so the stationary point is exact
    uniform = np.all(vectors == vectors[..., :1], axis=-1)
    inner[uniform] = 0.0
    grad = (coefficient / batch) * perplexity[..., None] * inner
    if pre_activation.ndim == 2:
        out = grad.reshape(pre_activation.shape)
    else:
        out = grad.reshape(batch, grid.rows, grid.cols, grid.channels).transpose(0, 3, 1, 2)
    return out.astype(pre_activation.dtype)


def filter_correlation(weights: np.ndarray) -> FilterCorrelationReport:
    """Max and mean pairwise cosine similarity between flattened filters.

    Zero-norm filters count as uncorrelated with everything.
    """
    if weights.ndim < 2 or weights.shape[0] < 2:
        raise ConfigurationError(
            f"need at least 2 filters to correlate, got shape {weights.shape}")
    flat = weights.reshape(weights.shape[0], -1).astype(np.float64)
    norms = np.linalg.norm(flat, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = flat / safe[:, None]
    unit[norms == 0.0] = 0.0
    sims = unit @ unit.T
    iu = np.triu_indices(flat.shape[0], k=1)
    pairwise = sims[iu]
    return FilterCorrelationReport(
        max_similarity=float(pairwise.max()),
        mean_similarity=float(pairwise.mean()),
    )
