"""Speaker embeddings with a Gaussian-constrained training objective.

Modules:

- ``numkit``: dense linear algebra and stable primitives
- ``corpus``: synthetic corpora, feature archives and trial lists
- ``network``: TDNN x-vector / d-vector forward and backward passes
- ``loss``: cross entropy, the Gaussian constraint and full-info replacement
- ``trainer``: mini-batch training, diagnostics and gradient checks
- ``backend``: LDA, two-covariance PLDA and cosine scoring
- ``metrics``: DET sweep, EER and minDCF
- ``cli``: the ``gembed`` command
"""

from . import backend, corpus, errors, io, loss, metrics, network, numkit, trainer
from .errors import (
    ConfigError,
    DiagnosticError,
    EvaluationError,
    FormatError,
    GembedError,
    InputError,
    NumericalError,
    TrainingError,
)

__version__ = "0.1.0"

__all__ = [
    "backend", "corpus", "errors", "io", "loss", "metrics", "network", "numkit", "trainer",
    "ConfigError", "DiagnosticError", "EvaluationError", "FormatError", "GembedError",
    "InputError", "NumericalError", "TrainingError",
]
