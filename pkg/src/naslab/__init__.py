"""naslab: a convolutional-network training lab that measures, visualises,
and regularises perplexity-based neural activation sparsity."""

__version__ = "0.1.0"

from .errors import (AlignmentError, ConfigurationError, DataError, FormatError,
                     InsufficientDataError, NaslabError, StateError)
from .metrics import (LayerNasSnapshot, NasValue, ReceptiveFieldGrid, layer_nas,
                      nas_of_vector, patch_gather_conv2d, receptive_field_vectors,
                      sparsity_values)
from .regularizer import (FilterCorrelationReport, PenaltyTerm, RegularizerConfig,
                          filter_correlation, nas_penalty, nas_penalty_gradient)

__all__ = [
    "AlignmentError", "ConfigurationError", "DataError", "FormatError",
    "InsufficientDataError", "NaslabError", "StateError",
    "LayerNasSnapshot", "NasValue", "ReceptiveFieldGrid", "layer_nas",
    "nas_of_vector", "patch_gather_conv2d", "receptive_field_vectors",
    "sparsity_values",
    "FilterCorrelationReport", "PenaltyTerm", "RegularizerConfig",
    "filter_correlation", "nas_penalty", "nas_penalty_gradient",
    "__version__",
]
