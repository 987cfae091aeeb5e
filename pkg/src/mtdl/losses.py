"""Classification losses on sparse codes and the fused decision rules.

Each loss returns its value together with the gradients in the classifier
weights and in the code, which is what the implicit-differentiation step
needs.  No intercepts are modelled.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, log_expit, logsumexp, softmax

from .errors import ValidationError
from .model import ClassifierBank, Head, SparseCodeMatrix


@dataclass(frozen=True)
class LossEval:
    value: float
    grad_w: np.ndarray
    grad_alpha: np.ndarray


def logistic_loss(y, w, alpha) -> LossEval:
    """``log(1 + exp(-y w.alpha))`` for ``y`` in {-1, +1}."""
    if y not in (-1, 1):
        raise ValidationError("logistic loss needs y in {-1, +1}")
    w = np.asarray(w, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    flat_w = w.reshape(-1)
    if flat_w.shape != alpha.shape:
        raise ValidationError("w and alpha shapes disagree")
    m = y * (flat_w @ alpha)
    value = -float(log_expit(m))
    coef = -y * float(expit(-m))
    return LossEval(value, (coef * alpha).reshape(w.shape), coef * flat_w)


def softmax_loss(y, W, alpha) -> LossEval:
    """Cross-entropy of ``softmax(W alpha)`` against class ``y`` in 1..K."""
    W = np.asarray(W, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    K = W.shape[0]
    if not 1 <= y <= K:
        raise ValidationError(f"class {y} outside 1..{K}")
    z = W @ alpha
    value = float(logsumexp(z) - z[y - 1])
    p = softmax(z)
    p[y - 1] -= 1.0
    return LossEval(value, np.outer(p, alpha), W.T @ p)


def indicator(y, K) -> np.ndarray:
    if not 1 <= y <= K:
        raise ValidationError(f"class {y} outside 1..{K}")
    q = np.zeros(K)
    q[y - 1] = 1.0
    return q


def quadratic_loss(y_vec, W, alpha) -> LossEval:
    """``0.5 * ||y_vec - W alpha||^2`` with ``y_vec`` a one-hot vector."""
    y_vec = np.asarray(y_vec, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if np.count_nonzero(y_vec == 1.0) != 1 or np.count_nonzero(y_vec) != 1:
        raise ValidationError("y_vec must be a one-hot indicator")
    r = W @ alpha - y_vec
    return LossEval(0.5 * float(r @ r), np.outer(r, alpha), W.T @ r)


def head_loss(head, y, W, alpha) -> LossEval:
    """Dispatch on ``head`` with a label in the dataset convention."""
    head = Head(head)
    if head is Head.LOGISTIC:
        return logistic_loss(y, W, alpha)
    if head is Head.SOFTMAX:
        return softmax_loss(y, W, alpha)
    return quadratic_loss(indicator(y, W.shape[0]), W, alpha)


def head_loss_batch(head, y, W, A) -> tuple:
    """Vectorized losses for one modality.

    ``y`` has shape ``(N,)``, ``A`` holds codes as rows ``(N, d)``. Returns
    ``(values (N,), grad_scores (N, K))`` where ``grad_scores`` is the
    derivative with respect to ``W @ a``; weight and code gradients follow as
    ``outer(gs, a)`` and ``W.T @ gs``.
    """
    head = Head(head)
    Z = A @ W.T
    y = np.asarray(y)
    if head is Head.LOGISTIC:
        m = y * Z[:, 0]
        vals = -log_expit(m)
        gs = (-y * expit(-m))[:, None]
    elif head is Head.SOFTMAX:
        idx = np.arange(len(y)), y - 1
        vals = logsumexp(Z, axis=1) - Z[idx]
        gs = softmax(Z, axis=1)
        gs[idx] -= 1.0
    else:
        Q = np.zeros_like(Z)
        Q[np.arange(len(y)), y - 1] = 1.0
        gs = Z - Q
        vals = 0.5 * np.einsum("ij,ij->i", gs, gs)
    return vals, gs


def modality_scores(bank: ClassifierBank, codes) -> np.ndarray:
    """``Z[s] = W_s @ a_s`` stacked as ``(S, K_out)``."""
    A = codes.values if isinstance(codes, SparseCodeMatrix) else np.asarray(codes)
    if A.shape[1] != len(bank.weights):
        raise ValidationError("code matrix column count must equal the number of modalities")
    return np.stack([W @ A[:, s] for s, W in enumerate(bank.weights)])


def decide_scores(head, Z) -> int:
    """Fused decision from per-modality scores ``Z`` of shape ``(S, K_out)``.

    Ties go to +1 for the binary head and to the smallest class otherwise.
    """
    head = Head(head)
    if head is Head.LOGISTIC:
        return 1 if Z[:, 0].sum() >= 0 else -1
    if head is Head.SOFTMAX:
        fused = softmax(Z, axis=1).sum(axis=0)
        return int(np.argmax(fused)) + 1
    K = Z.shape[1]
    dist = ((np.eye(K)[:, None, :] - Z[None, :, :]) ** 2).sum(axis=(1, 2))
    return int(np.argmin(dist)) + 1


def decide(head, bank: ClassifierBank, codes) -> int:
    head = Head(head)
    if head is not bank.head:
        raise ValidationError(f"bank head {bank.head.value} does not match {head.value}")
    return decide_scores(head, modality_scores(bank, codes))


def decide_batch(bank: ClassifierBank, codes) -> np.ndarray:
    """Decisions for codes of shape ``(N, d, S)``."""
    Z = np.stack([codes[:, :, s] @ W.T for s, W in enumerate(bank.weights)], axis=1)
    head = bank.head
    if head is Head.LOGISTIC:
        return np.where(Z[:, :, 0].sum(axis=1) >= 0, 1, -1)
    if head is Head.SOFTMAX:
        return np.argmax(softmax(Z, axis=2).sum(axis=1), axis=1) + 1
    K = Z.shape[2]
    dist = ((np.eye(K)[None, :, None, :] - Z[:, None, :, :]) ** 2).sum(axis=(2, 3))
    return np.argmin(dist, axis=1) + 1
