"""Gradients of the supervised objective through the sparse-coding solution.

The codes ``A*`` depend on the dictionaries only through the stationarity
conditions on the active rows, which are smooth as long as the active set
does not change.  Differentiating them implicitly gives the sensitivity
vector ``beta`` from one symmetric linear solve per sample.

Index convention: an entry ``(j, s)`` of a ``(d, S)`` code matrix maps to the
flat index ``j * S + s`` (row-major), so ``beta[s::S]`` is the length-``d``
block that multiplies modality ``s`` and the active columns of ``Dhat`` come
grouped atom-major, modality-minor.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg as sla

from .errors import DegenerateRow, EmptyActiveSet, RankDeficient, ValidationError
from .losses import head_loss, head_loss_batch
from .model import ClassifierBank, Prior, SparseCodeMatrix

RCOND_LIMIT = 1e-13


def _values(A):
    return A.values if isinstance(A, SparseCodeMatrix) else np.asarray(A, dtype=np.float64)


def expanded_indices(active, S) -> np.ndarray:
    """Flat indices ``{j*S + s}`` of all entries in the active rows."""
    active = np.asarray(active, dtype=int)
    return (active[:, None] * S + np.arange(S)[None, :]).reshape(-1)


def modality_indices(s, d, S) -> np.ndarray:
    """Positions ``s, s+S, ..., s+(d-1)S`` of modality ``s`` in a flat code."""
    return s + S * np.arange(d)


@dataclass
class GradientWorkspace:
    n_atoms: int
    n_modalities: int
    active: np.ndarray
    upsilon: np.ndarray
    psi: Optional[np.ndarray]  # None for the l12 prior
    dhat: np.ndarray
    delta: np.ndarray
    g: np.ndarray
    beta: Optional[np.ndarray] = None


def build_dhat(dictionary, active) -> np.ndarray:
    """Stack ``blkdiag(d_j^1, ..., d_j^S)`` for each active atom ``j``.

    Rows follow the modalities in order (``n = sum n_s``).
    """
    active = np.asarray(active, dtype=int)
    if active.size == 0:
        raise EmptyActiveSet("no active atoms")
    dicts = list(dictionary)
    S = len(dicts)
    d = dicts[0].shape[1]
    if active.min() < 0 or active.max() >= d:
        raise ValidationError("active index out of range")
    offsets = np.concatenate([[0], np.cumsum([D.shape[0] for D in dicts])])
    out = np.zeros((offsets[-1], active.size * S))
    for s, D in enumerate(dicts):
        out[offsets[s]:offsets[s + 1], s::S] = D[:, active]
    return out


def build_delta(A, active, tol: float = 1e-6) -> np.ndarray:
    """Block-diagonal curvature of the row norms on the active rows."""
    A = _values(A)
    S = A.shape[1]
    active = np.asarray(active, dtype=int)
    blocks = []
    for j in active:
        a = A[j]
        r = np.linalg.norm(a)
        if r <= tol:
            raise DegenerateRow(f"row {j} has norm {r:.3g} <= {tol:.3g}")
        blocks.append(np.eye(S) / r - np.outer(a, a) / r**3)
    if not blocks:
        return np.zeros((0, 0))
    return sla.block_diag(*blocks)


def code_loss_gradient(head, y, bank: ClassifierBank, A) -> tuple:
    """Per-modality loss evaluations and ``G[:, s] = d l_s / d alpha_s``."""
    A = _values(A)
    evals = [head_loss(head, y, W, A[:, s]) for s, W in enumerate(bank.weights)]
    G = np.stack([e.grad_alpha for e in evals], axis=1)
    return evals, G


def build_workspace(dictionary, A, G, prior=Prior.L12, tol: float = 1e-6) -> GradientWorkspace:
    """Assemble ``Dhat``, ``Delta`` and ``g`` for one encoded sample.

    ``G`` is the ``(d, S)`` loss gradient with respect to the codes.
    """
    A = _values(A)
    d, S = A.shape
    active = np.flatnonzero(np.linalg.norm(A, axis=1) > tol)
    prior = Prior(prior)
    if active.size == 0:
        empty = np.zeros(0, dtype=int)
        n = sum(D.shape[0] for D in dictionary)
        return GradientWorkspace(d, S, active, empty, None if prior is Prior.L12 else empty,
                                 np.zeros((n, 0)), np.zeros((0, 0)), np.zeros(0))
    g = np.asarray(G, dtype=np.float64)[active].reshape(-1)
    if prior is Prior.L12:
        psi = None
        upsilon = expanded_indices(active, S)
    else:
        psi = np.flatnonzero(A[active].reshape(-1) != 0)
        upsilon = expanded_indices(active, S)[psi]
    return GradientWorkspace(d, S, active, upsilon, psi, build_dhat(dictionary, active),
                             build_delta(A, active, tol), g)


def _spd_solve(M, rhs):
    try:
        c, low = sla.cho_factor(M, lower=True, check_finite=False)
    except sla.LinAlgError:
        raise RankDeficient("system matrix is not positive definite; use lambda2 > 0") from None
    diag = np.abs(np.diag(c))
    if diag.min() <= np.sqrt(RCOND_LIMIT) * diag.max():
        raise RankDeficient("system matrix is numerically singular; use lambda2 > 0")
    return sla.cho_solve((c, low), rhs, check_finite=False)


def system_matrix(ws: GradientWorkspace, lambda1: float, lambda2: float) -> np.ndarray:
    M = ws.dhat.T @ ws.dhat + lambda1 * ws.delta
    M[np.diag_indices_from(M)] += lambda2
    if ws.psi is not None:
        M = M[np.ix_(ws.psi, ws.psi)]
    return M


def solve_beta(ws: GradientWorkspace, lambda1: float, lambda2: float) -> np.ndarray:
    """Solve for the sensitivity vector; returns a length ``d*S`` array.

    ``lambda1`` is the group penalty actually applied (zero for the l11
    prior). Raises :class:`RankDeficient` when the system is singular.
    """
    beta = np.zeros(ws.n_atoms * ws.n_modalities)
    if len(ws.active) == 0:
        ws.beta = beta
        return beta
    M = system_matrix(ws, lambda1, lambda2)
    rhs = ws.g if ws.psi is None else ws.g[ws.psi]
    if M.size:
        beta[ws.upsilon] = _spd_solve(M, rhs)
    ws.beta = beta
    return beta


def dictionary_gradient(sample_features, A, beta, dictionary) -> list:
    """Per-modality ``(x_s - D_s a_s) b_s^T - D_s b_s a_s^T`` with ``b_s = beta[s::S]``."""
    A = _values(A)
    d, S = A.shape
    beta = np.asarray(beta, dtype=np.float64)
    out = []
    for s, D in enumerate(dictionary):
        b = beta[modality_indices(s, d, S)]
        a = A[:, s]
        x = np.asarray(sample_features[s], dtype=np.float64)
        out.append(np.outer(x - D @ a, b) - np.outer(D @ b, a))
    return out


def classifier_gradient(loss_evals, nu: float, bank: ClassifierBank) -> list:
    """Loss gradient plus the ridge term ``nu * W_s`` for each modality."""
    return [np.asarray(e.grad_w).reshape(W.shape) + nu * W
            for e, W in zip(loss_evals, bank.weights)]


def sample_gradients(features, A, y, dictionary, bank: ClassifierBank, lam_group: float,
                     lam2: float, prior=Prior.L12, tol: float = 1e-6) -> dict:
    """End-to-end gradients for one encoded sample (no ridge term on ``W``)."""
    A = _values(A)
    evals, G = code_loss_gradient(bank.head, y, bank, A)
    ws = build_workspace(dictionary, A, G, prior, tol)
    beta = solve_beta(ws, lam_group, lam2)
    return {
        "loss": sum(e.value for e in evals),
        "grad_D": dictionary_gradient(features, A, beta, dictionary),
        "grad_W": [np.asarray(e.grad_w).reshape(W.shape) for e, W in zip(evals, bank.weights)],
        "workspace": ws,
    }


def batch_gradients(cache, X, codes, y, bank: ClassifierBank, lam_group: float, lam2: float,
                    prior=Prior.L12, tol: float = 1e-6) -> dict:
    """Mini-batch averaged gradients (without the ridge term on ``W``).

    ``X[s]`` is ``(N, n_s)``, ``codes`` is ``(N, d, S)``. ``Dhat^T Dhat`` is
    read off the cached Gram matrices instead of being formed explicitly.
    """
    prior = Prior(prior)
    N, d, S = codes.shape
    losses = np.zeros(N)
    GA = np.zeros_like(codes)
    grad_W = []
    for s, W in enumerate(bank.weights):
        vals, gs = head_loss_batch(bank.head, y, W, codes[:, :, s])
        losses += vals
        GA[:, :, s] = gs @ W
        grad_W.append(gs.T @ codes[:, :, s] / N)

    betas = np.zeros((N, d, S))
    n_active = np.zeros(N, dtype=int)
    for i in range(N):
        Ai = codes[i]
        act = np.flatnonzero(np.linalg.norm(Ai, axis=1) > tol)
        n_active[i] = act.size
        if act.size == 0:
            continue
        m = act.size * S
        M = np.zeros((m, m))
        for s in range(S):
            M[s::S, s::S] = cache.G[s][np.ix_(act, act)]
        if lam_group > 0:
            M += lam_group * build_delta(Ai, act, tol)
        M[np.diag_indices(m)] += lam2
        g = GA[i][act].reshape(-1)
        if prior is not Prior.L12:
            psi = np.flatnonzero(Ai[act].reshape(-1) != 0)
            sol = np.zeros(m)
            if psi.size:
                sol[psi] = _spd_solve(M[np.ix_(psi, psi)], g[psi])
        else:
            sol = _spd_solve(M, g)
        betas[i][act] = sol.reshape(act.size, S)

    grad_D = []
    for s, (Xs, D) in enumerate(zip(X, cache.D)):
        Acs = codes[:, :, s]
        Bs = betas[:, :, s]
        R = Xs - Acs @ D.T
        grad_D.append((R.T @ Bs - D @ (Bs.T @ Acs)) / N)
    return {"losses": losses, "grad_D": grad_D, "grad_W": grad_W, "n_active": n_active}
