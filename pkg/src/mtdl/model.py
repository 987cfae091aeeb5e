"""Domain types: samples, dictionaries, code matrices, classifier banks and
hyperparameters.

Conventions used throughout the package:

* a multimodal dictionary is a tuple of ``S`` arrays ``D[s]`` of shape
  ``(n_s, d)``; all modalities share the atom count ``d``;
* a sparse code matrix ``A`` has shape ``(d, S)``: column ``s`` is the code of
  modality ``s`` and row ``j`` collects the coefficients of atom ``j`` across
  modalities;
* multiclass labels are 1-based class indices, binary labels are -1/+1.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ConstantVector, InvalidProblem, ValidationError

ATOM_NORM_SLACK = 1e-12


class Prior(str, Enum):
    L12 = "l12"
    L11 = "l11"
    MIXED = "mixed"


class Head(str, Enum):
    LOGISTIC = "logistic"
    SOFTMAX = "softmax"
    QUADRATIC = "quadratic"


def _frozen(a, ndim=None, name="array"):
    arr = np.array(a, dtype=np.float64, copy=True)
    if ndim is not None and arr.ndim != ndim:
        raise ValidationError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


def normalize_sample(x) -> np.ndarray:
    """Center ``x`` and scale it to unit Euclidean norm.

    Raises
    ------
    ConstantVector
        If the centered vector has norm below ``1e-12``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size < 2:
        raise ValidationError("normalize_sample expects a vector of length >= 2")
    centered = x - x.mean()
    nrm = np.linalg.norm(centered)
    if nrm < 1e-12:
        raise ConstantVector("vector is constant; cannot normalize")
    return centered / nrm


def normalize_columns(X) -> np.ndarray:
    """Column-wise :func:`normalize_sample` for an ``(n, N)`` feature matrix."""
    X = np.asarray(X, dtype=np.float64)
    centered = X - X.mean(axis=0, keepdims=True)
    nrm = np.linalg.norm(centered, axis=0)
    if np.any(nrm < 1e-12):
        bad = int(np.flatnonzero(nrm < 1e-12)[0])
        raise ConstantVector(f"column {bad} is constant; cannot normalize")
    return centered / nrm


@dataclass(frozen=True)
class MultimodalSample:
    features: tuple
    label: Optional[int] = None

    def __post_init__(self):
        feats = tuple(_frozen(f, 1, "feature vector") for f in self.features)
        if not feats:
            raise ValidationError("a sample needs at least one modality")
        for f in feats:
            if not np.all(np.isfinite(f)):
                raise ValidationError("features must be finite")
        object.__setattr__(self, "features", feats)

    @property
    def n_modalities(self) -> int:
        return len(self.features)

    @property
    def dims(self) -> tuple:
        return tuple(f.shape[0] for f in self.features)

    def normalized(self) -> "MultimodalSample":
        return MultimodalSample(tuple(normalize_sample(f) for f in self.features), self.label)

    def check_dims(self, dims: Sequence[int]) -> None:
        if tuple(dims) != self.dims:
            raise ValidationError(f"sample dims {self.dims} do not match expected {tuple(dims)}")


@dataclass(frozen=True)
class MultimodalDictionary:
    """One dense ``(n_s, d)`` dictionary per modality."""

    dicts: tuple

    def __post_init__(self):
        mats = tuple(_frozen(D, 2, "dictionary") for D in self.dicts)
        if not mats:
            raise ValidationError("a dictionary needs at least one modality")
        object.__setattr__(self, "dicts", mats)

    @property
    def n_modalities(self) -> int:
        return len(self.dicts)

    @property
    def n_atoms(self) -> int:
        return self.dicts[0].shape[1]

    @property
    def dims(self) -> tuple:
        return tuple(D.shape[0] for D in self.dicts)

    def __getitem__(self, s) -> np.ndarray:
        return self.dicts[s]

    def __len__(self) -> int:
        return len(self.dicts)

    def __iter__(self):
        return iter(self.dicts)

    def atom_norms(self) -> list:
        return [np.linalg.norm(D, axis=0) for D in self.dicts]


def validate_dictionary(D: MultimodalDictionary) -> list:
    """Return human-readable problems with ``D``; an empty list means valid.

    Checks that all modalities share the atom count and that every atom lies
    in the unit ball (up to ``1e-12``).
    """
    report = []
    counts = [M.shape[1] for M in D.dicts]
    if len(set(counts)) > 1:
        report.append(f"shape mismatch: atom counts per modality {counts}")
    for s, M in enumerate(D.dicts):
        if not np.all(np.isfinite(M)):
            report.append(f"modality {s}: non-finite entries")
        norms = np.linalg.norm(M, axis=0)
        for k in np.flatnonzero(norms > 1.0 + ATOM_NORM_SLACK):
            report.append(f"modality {s} atom {k}: norm {norms[k]:.12g} > 1")
    return report


@dataclass(frozen=True)
class SparseCodeMatrix:
    """Code matrix ``A`` of shape ``(d, S)``."""

    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, 2, "code matrix"))

    @property
    def shape(self) -> tuple:
        return self.values.shape

    def column(self, s) -> np.ndarray:
        return self.values[:, s]

    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.values, axis=1)

    def active_rows(self, tol: float = 1e-6) -> np.ndarray:
        return np.flatnonzero(self.row_norms() > tol)


@dataclass(frozen=True)
class ClassifierBank:
    """Per-modality linear classifiers sharing one loss head.

    ``weights[s]`` is ``(K, d)`` for the softmax/quadratic heads and ``(1, d)``
    for the binary logistic head.
    """

    weights: tuple
    head: Head
    nu: float = 1e-8

    def __post_init__(self):
        ws = tuple(_frozen(W, 2, "classifier") for W in self.weights)
        if len({W.shape for W in ws}) != 1:
            raise ValidationError("all classifiers in a bank must share a shape")
        head = Head(self.head)
        if head is Head.LOGISTIC and ws[0].shape[0] != 1:
            raise ValidationError("logistic head expects (1, d) weights")
        if self.nu < 0:
            raise ValidationError("nu must be nonnegative")
        object.__setattr__(self, "weights", ws)
        object.__setattr__(self, "head", head)

    @property
    def n_classes(self) -> int:
        return 2 if self.head is Head.LOGISTIC else self.weights[0].shape[0]


@dataclass(frozen=True)
class Hyperparams:
    lambda1: float = 0.01
    lambda1_l11: float = 0.0
    lambda2: float = 0.0
    nu: float = 1e-8
    rho: float = 1.0
    t0: Optional[float] = None  # steps; None -> (epochs / 10) * steps_per_epoch
    epochs: int = 20
    batch_size: int = 100
    active_tol: float = 1e-6
    admm_tol: float = 1e-8
    admm_max_iter: int = 2000
    seed: int = 0

    def __post_init__(self):
        if min(self.lambda1, self.lambda1_l11, self.lambda2, self.nu) < 0:
            raise InvalidProblem("regularization parameters must be nonnegative")
        if self.rho < 0:
            raise InvalidProblem("rho must be nonnegative")
        if self.t0 is not None and self.t0 < 1:
            raise InvalidProblem("t0 must be >= 1")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidProblem("epochs and batch_size must be >= 1")
        if self.active_tol <= 0 or self.admm_tol <= 0 or self.admm_max_iter < 1:
            raise InvalidProblem("solver tolerances must be positive")

    def check_prior(self, prior) -> Prior:
        prior = Prior(prior)
        if prior is Prior.L12 and self.lambda1 <= 0:
            raise InvalidProblem("l12 prior requires lambda1 > 0")
        if prior is Prior.L11 and self.lambda1_l11 <= 0:
            raise InvalidProblem("l11 prior requires lambda1_l11 > 0")
        if prior is Prior.MIXED and (self.lambda1 <= 0 or self.lambda1_l11 <= 0):
            raise InvalidProblem("mixed prior requires lambda1 > 0 and lambda1_l11 > 0")
        return prior
