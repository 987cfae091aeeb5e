"""Supervised dictionary learning across several modalities.

Joint sparse coding of several modalities with a row-sparse prior, and
stochastic training of the dictionaries and per-modality classifiers through
the sparse-coding solution.
"""

from .errors import MTDLError, NumericalError, ValidationError
from .model import (ClassifierBank, Head, Hyperparams, MultimodalDictionary, MultimodalSample, Prior,
                    SparseCodeMatrix, normalize_sample, validate_dictionary)
from .sparse_coding import EncodeProblem, EncodeResult, SolverOptions, joint_encode, kkt_residual
from .training import init_model, supervised_fit, unsupervised_fit

__all__ = [
    "ClassifierBank", "EncodeProblem", "EncodeResult", "Head", "Hyperparams", "MTDLError",
    "MultimodalDictionary", "MultimodalSample", "NumericalError", "Prior", "SolverOptions",
    "SparseCodeMatrix", "ValidationError", "init_model", "joint_encode", "kkt_residual",
    "normalize_sample", "supervised_fit", "unsupervised_fit", "validate_dictionary",
]
__version__ = "0.1.0"
