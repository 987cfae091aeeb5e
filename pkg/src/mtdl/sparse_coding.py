"""Joint sparse coding under the l12, l11 and mixed l12+l11 priors.

Every problem solved here has the form::

    min_A  1/2 sum_s ||x_s - D_s a_s||^2 + lam_group * sum_j ||A[j, :]||
           + lam_l1 * sum_{j,s} |A[j, s]| + lam2/2 * ||A||_F^2

The solver is ADMM on the splitting ``A = Z``: the smooth part is handled by
a linear solve that reuses one eigendecomposition of each Gram matrix
``D_s^T D_s`` (so the penalty parameter can adapt without refactorizing), and
``Z`` takes the proximal step of the penalty.  Samples are solved as a
vectorized batch.  Once ADMM has identified the support, a few Newton steps on
the smooth restricted problem bring the optimality residual to machine
precision.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import InvalidProblem, NonFinite, ValidationError
from .model import (
    MultimodalDictionary,
    MultimodalSample,
    Prior,
    SparseCodeMatrix,
)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EncodeProblem:
    sample: MultimodalSample
    dictionary: MultimodalDictionary
    prior: Prior = Prior.L12
    lambda1: float = 0.0
    lambda1_l11: float = 0.0
    lambda2: float = 0.0

    def __post_init__(self):
        prior = Prior(self.prior)
        object.__setattr__(self, "prior", prior)
        if min(self.lambda1, self.lambda1_l11, self.lambda2) < 0:
            raise InvalidProblem("penalties must be nonnegative")
        if prior is Prior.L12 and self.lambda1 <= 0:
            raise InvalidProblem("l12 prior requires lambda1 > 0")
        if prior is Prior.L11 and self.lambda1_l11 <= 0:
            raise InvalidProblem("l11 prior requires lambda1_l11 > 0")
        if prior is Prior.MIXED and (self.lambda1 <= 0 or self.lambda1_l11 <= 0):
            raise InvalidProblem("mixed prior requires lambda1 > 0 and lambda1_l11 > 0")
        self.sample.check_dims(self.dictionary.dims)

    @property
    def penalties(self) -> tuple:
        """``(lam_group, lam_l1, lam2)`` actually applied for this prior."""
        return prior_penalties(self.prior, self.lambda1, self.lambda1_l11, self.lambda2)


def prior_penalties(prior, lambda1, lambda1_l11, lambda2) -> tuple:
    prior = Prior(prior)
    if prior is Prior.L12:
        return float(lambda1), 0.0, float(lambda2)
    if prior is Prior.L11:
        return 0.0, float(lambda1_l11), float(lambda2)
    return float(lambda1), float(lambda1_l11), float(lambda2)


@dataclass(frozen=True)
class SolverOptions:
    rho: float = 1.0
    abs_tol: float = 1e-8
    rel_tol: float = 1e-8
    max_iter: int = 2000
    adapt_rho: bool = True
    balance_ratio: float = 10.0
    balance_factor: float = 2.0
    polish: bool = True


@dataclass(frozen=True)
class EncodeResult:
    codes: SparseCodeMatrix
    objective: float
    kkt_residual: float
    iterations: int
    converged: bool


class GramCache:
    """Eigendecompositions of ``D_s^T D_s`` for one dictionary state.

    Read-only after construction; share it across every sample encoded with
    the same dictionary.
    """

    def __init__(self, dictionary):
        if not isinstance(dictionary, MultimodalDictionary):
            dictionary = MultimodalDictionary(tuple(dictionary))
        self.dictionary = dictionary
        self.D = dictionary.dicts
        if not all(np.all(np.isfinite(D)) for D in self.D):
            raise NonFinite("dictionary has non-finite entries")
        self.G = tuple(D.T @ D for D in self.D)
        self.eig = tuple(np.linalg.eigh(G) for G in self.G)

    @property
    def n_atoms(self) -> int:
        return self.dictionary.n_atoms

    @property
    def n_modalities(self) -> int:
        return self.dictionary.n_modalities

    def correlations(self, X) -> np.ndarray:
        """``B[i, :, s] = D_s^T x_s`` for a batch ``X[s]`` of shape ``(N, n_s)``."""
        return np.stack([Xs @ D for Xs, D in zip(X, self.D)], axis=-1)

    def gram_apply(self, A) -> np.ndarray:
        """``[G_s a_s]_s`` for codes of shape ``(N, d, S)``."""
        out = np.empty_like(A)
        for s, G in enumerate(self.G):
            out[:, :, s] = A[:, :, s] @ G
        return out


def soft_threshold(v, t):
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def prox_penalty(V, lam_group, lam_l1, step):
    """Proximal map of ``step * (lam_group*l12 + lam_l1*l11)`` on ``(N, d, S)``.

    ``step`` broadcasts per sample. Entrywise shrinkage followed by row
    shrinkage is the exact prox of the sparse-group penalty.
    """
    step = np.asarray(step, dtype=np.float64).reshape(-1, 1, 1)
    Z = soft_threshold(V, lam_l1 * step) if lam_l1 > 0 else V.copy()
    if lam_group > 0:
        nrm = np.linalg.norm(Z, axis=2, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(nrm > 0, np.maximum(1.0 - lam_group * step / nrm, 0.0), 0.0)
        Z = Z * scale
    return Z


def _as_batch(X):
    return [np.atleast_2d(np.asarray(Xs, dtype=np.float64)) for Xs in X]


def objective_batch(cache, X, A, lam_group, lam_l1, lam2) -> np.ndarray:
    fit = np.zeros(A.shape[0])
    for s, (Xs, D) in enumerate(zip(X, cache.D)):
        R = Xs - A[:, :, s] @ D.T
        fit += 0.5 * np.einsum("ij,ij->i", R, R)
    pen = lam_group * np.linalg.norm(A, axis=2).sum(axis=1)
    pen += lam_l1 * np.abs(A).sum(axis=(1, 2))
    pen += 0.5 * lam2 * np.einsum("ijk,ijk->i", A, A)
    return fit + pen


def kkt_rows(B, GA, A, lam_group, lam_l1, lam2) -> np.ndarray:
    """Per-row distance from the stationarity residual to the subdifferential.

    ``B`` holds ``D_s^T x_s`` and ``GA`` holds ``D_s^T D_s a_s``; both
    ``(N, d, S)``. Returns an ``(N, d)`` array.
    """
    R = B - GA - lam2 * A
    rown = np.linalg.norm(A, axis=2)
    active = rown > 0
    nz = A != 0
    safe = np.where(active, rown, 1.0)[:, :, None]
    target = lam_group * A / safe + lam_l1 * np.sign(A)
    diff = np.where(nz, R - target, np.maximum(np.abs(R) - lam_l1, 0.0))
    act_res = np.linalg.norm(diff, axis=2)
    inact_res = np.maximum(np.linalg.norm(soft_threshold(R, lam_l1), axis=2) - lam_group, 0.0)
    return np.where(active, act_res, inact_res)


def kkt_batch(cache, B, A, lam_group, lam_l1, lam2) -> np.ndarray:
    rows = kkt_rows(B, cache.gram_apply(A), A, lam_group, lam_l1, lam2)
    return rows.max(axis=1) if rows.shape[1] else np.zeros(rows.shape[0])


def _newton_polish(A, b, G, lam_group, lam_l1, lam2, max_iter=30):
    """Newton on the smooth problem restricted to the support of ``A``.

    ``A`` is one ``(d, S)`` code matrix, ``b`` the matching ``D_s^T x_s``.
    Returns the refined matrix, or ``None`` when the support cannot be held
    (a row collapses or a sign flips), in which case the caller keeps the
    ADMM iterate.
    """
    d, S = A.shape
    rows = np.flatnonzero(np.linalg.norm(A, axis=1) > 0)
    if rows.size == 0:
        return A
    if lam_l1 > 0:
        mask = A[rows] != 0
    else:
        mask = np.ones((rows.size, S), dtype=bool)
    sub_r, sub_s = np.nonzero(mask)
    jj = rows[sub_r]
    sign = np.sign(A[jj, sub_s])
    m = jj.size

    # Hessian of the quadratic part on the free entries (constant).
    Hq = np.zeros((m, m))
    same_s = sub_s[:, None] == sub_s[None, :]
    for s in range(S):
        sel = np.flatnonzero(sub_s == s)
        Hq[np.ix_(sel, sel)] = G[s][np.ix_(jj[sel], jj[sel])]
    Hq[np.diag_indices(m)] += lam2
    same_row = sub_r[:, None] == sub_r[None, :]

    def full(v):
        out = np.zeros_like(A)
        out[jj, sub_s] = v
        return out

    def value(v):
        M = full(v)
        quad = 0.0
        for s in range(S):
            quad += 0.5 * M[:, s] @ G[s] @ M[:, s] - b[:, s] @ M[:, s]
        return (quad + lam_group * np.linalg.norm(M, axis=1).sum()
                + lam_l1 * np.abs(v).sum() + 0.5 * lam2 * v @ v)

    v = A[jj, sub_s].copy()
    f = value(v)
    for _ in range(max_iter):
        M = full(v)
        rn = np.linalg.norm(M[rows], axis=1)[sub_r]
        GA = np.empty(m)
        for s in range(S):
            sel = sub_s == s
            GA[sel] = (G[s] @ M[:, s])[jj[sel]]
        grad = GA - b[jj, sub_s] + lam2 * v + lam_group * v / rn + lam_l1 * sign
        H = Hq.copy()
        if lam_group > 0:
            outer = np.outer(v, v) / (rn[:, None] ** 3)
            H += lam_group * np.where(same_row, np.eye(m) / rn[:, None] - outer, 0.0)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while t > 1e-10:
            cand = v - t * step
            if lam_l1 > 0 and np.any(np.sign(cand) != sign):
                t *= 0.5
                continue
            crn = np.linalg.norm(full(cand)[rows], axis=1)
            if np.any(crn <= 0):
                t *= 0.5
                continue
            fc = value(cand)
            if fc <= f + 1e-4 * t * (-grad @ step) + 1e-15 * abs(f):
                break
            t *= 0.5
        else:
            return None
        done = np.max(np.abs(cand - v)) <= 1e-15 * max(1.0, np.max(np.abs(v)))
        v, f = cand, fc
        if done or np.max(np.abs(grad)) < 1e-15:
            break
    return full(v)


def encode_batch(
    X,
    cache,
    lam_group: float,
    lam_l1: float = 0.0,
    lam2: float = 0.0,
    opts: Optional[SolverOptions] = None,
    init=None,
    kkt_tol: Optional[float] = None,
):
    """Solve one joint sparse coding problem per row of ``X[s]``.

    Parameters
    ----------
    X : sequence of arrays
        ``X[s]`` has shape ``(N, n_s)``.
    cache : GramCache or MultimodalDictionary
    lam_group, lam_l1, lam2 : float
        Penalty weights as applied (see :func:`prior_penalties`).
    opts : SolverOptions, optional
    init : array, optional
        Warm start of shape ``(N, d, S)``.
    kkt_tol : float, optional
        Residual required to flag a sample converged; defaults to
        ``opts.abs_tol``.

    Returns
    -------
    dict
        ``codes`` ``(N, d, S)``, ``objective``, ``kkt``, ``iterations`` and
        ``converged`` arrays of length ``N``.
    """
    opts = opts or SolverOptions()
    if not isinstance(cache, GramCache):
        cache = GramCache(cache)
    X = _as_batch(X)
    if len(X) != cache.n_modalities:
        raise ValidationError("number of modalities differs from the dictionary")
    for Xs, D in zip(X, cache.D):
        if Xs.shape[1] != D.shape[0]:
            raise ValidationError(f"feature dim {Xs.shape[1]} != dictionary rows {D.shape[0]}")
    if not all(np.all(np.isfinite(Xs)) for Xs in X):
        raise NonFinite("input features are not finite")
    if min(lam_group, lam_l1, lam2) < 0:
        raise InvalidProblem("penalties must be nonnegative")
    kkt_tol = opts.abs_tol if kkt_tol is None else kkt_tol

    N = X[0].shape[0]
    d, S = cache.n_atoms, cache.n_modalities
    B = cache.correlations(X)
    BV = [B[:, :, s] @ cache.eig[s][1] for s in range(S)]

    rho = np.full(N, float(opts.rho))
    if init is None:
        Z = np.zeros((N, d, S))
        U = np.zeros((N, d, S))
    else:
        Z = np.array(init, dtype=np.float64).reshape(N, d, S)
        U = (B - cache.gram_apply(Z) - lam2 * Z) / rho[:, None, None]
    A = Z.copy()
    iters = np.zeros(N, dtype=int)
    scale = np.sqrt(d * S)

    # A = 0 is optimal exactly when it satisfies the optimality conditions;
    # settle those samples up front instead of iterating to roundoff.
    zero_ok = kkt_batch(cache, B, np.zeros((N, d, S)), lam_group, lam_l1, lam2) == 0.0
    A[zero_ok] = Z[zero_ok] = 0.0
    admm_done = zero_ok.copy()
    live = np.flatnonzero(~zero_ok)
    for it in range(1, opts.max_iter + 1):
        if live.size == 0:
            break
        r_ = rho[live]
        Zl, Ul = Z[live], U[live]
        Al = np.empty_like(Zl)
        for s in range(S):
            w, V = cache.eig[s]
            rhs = BV[s][live] + r_[:, None] * ((Zl[:, :, s] - Ul[:, :, s]) @ V)
            Al[:, :, s] = (rhs / (w[None, :] + lam2 + r_[:, None])) @ V.T
        Znew = prox_penalty(Al + Ul, lam_group, lam_l1, 1.0 / r_)
        Ul = Ul + Al - Znew
        r_norm = np.linalg.norm((Al - Znew).reshape(len(live), -1), axis=1)
        s_norm = r_ * np.linalg.norm((Znew - Zl).reshape(len(live), -1), axis=1)
        eps_p = opts.abs_tol * scale + opts.rel_tol * np.maximum(
            np.linalg.norm(Al.reshape(len(live), -1), axis=1),
            np.linalg.norm(Znew.reshape(len(live), -1), axis=1))
        eps_d = opts.abs_tol * scale + opts.rel_tol * r_ * np.linalg.norm(
            Ul.reshape(len(live), -1), axis=1)
        if not (np.all(np.isfinite(Al)) and np.all(np.isfinite(Znew))):
            raise NonFinite("ADMM produced non-finite iterates")

        A[live], Z[live] = Al, Znew
        iters[live] = it
        done = (r_norm <= eps_p) & (s_norm <= eps_d)

        if opts.adapt_rho:
            up = r_norm > opts.balance_ratio * s_norm
            down = s_norm > opts.balance_ratio * r_norm
            f = np.where(up, opts.balance_factor, np.where(down, 1.0 / opts.balance_factor, 1.0))
            f = np.where(done, 1.0, f)
            rho[live] = r_ * f
            Ul = Ul / f[:, None, None]
        U[live] = Ul

        admm_done[live[done]] = True
        live = live[~done]
        if live.size == 0:
            break

    codes = Z
    kkt = kkt_batch(cache, B, codes, lam_group, lam_l1, lam2)
    if opts.polish:
        for i in np.flatnonzero(kkt > 0.01 * kkt_tol):
            refined = _newton_polish(codes[i], B[i], cache.G, lam_group, lam_l1, lam2)
            if refined is None:
                continue
            k_ref = kkt_batch(cache, B[i:i + 1], refined[None], lam_group, lam_l1, lam2)[0]
            if k_ref < kkt[i]:
                codes[i], kkt[i] = refined, k_ref
    obj = objective_batch(cache, X, codes, lam_group, lam_l1, lam2)
    converged = kkt <= kkt_tol
    n_bad = int(np.sum(~converged))
    if n_bad:
        log.debug("%d of %d encodings not converged (max kkt %.3g)", n_bad, N, kkt.max())
    return {
        "codes": codes,
        "objective": obj,
        "kkt": kkt,
        "iterations": iters,
        "converged": converged,
        "admm_converged": admm_done,
    }


def joint_encode(problem: EncodeProblem, opts: Optional[SolverOptions] = None, init=None) -> EncodeResult:
    """Solve a single :class:`EncodeProblem`.

    Non-convergence is reported through ``converged=False`` rather than
    raised; non-finite data raises :class:`~mtdl.errors.NonFinite`.
    """
    g, l1, l2 = problem.penalties
    X = [f[None, :] for f in problem.sample.features]
    out = encode_batch(X, GramCache(problem.dictionary), g, l1, l2, opts,
                       init=None if init is None else np.asarray(init)[None])
    return EncodeResult(
        codes=SparseCodeMatrix(out["codes"][0]),
        objective=float(out["objective"][0]),
        kkt_residual=float(out["kkt"][0]),
        iterations=int(out["iterations"][0]),
        converged=bool(out["converged"][0]),
    )


def active_rows(A, tol: float = 1e-6) -> np.ndarray:
    """Sorted indices of rows of ``A`` whose Euclidean norm exceeds ``tol``."""
    if tol <= 0:
        raise ValidationError("tol must be positive")
    if isinstance(A, SparseCodeMatrix):
        A = A.values
    return np.flatnonzero(np.linalg.norm(np.asarray(A), axis=1) > tol)


def kkt_residual(A, problem: EncodeProblem) -> float:
    """Optimality residual of ``A`` for ``problem``; zero iff ``A`` is optimal."""
    if isinstance(A, SparseCodeMatrix):
        A = A.values
    cache = GramCache(problem.dictionary)
    X = [f[None, :] for f in problem.sample.features]
    B = cache.correlations(X)
    return float(kkt_batch(cache, B, np.asarray(A, dtype=np.float64)[None], *problem.penalties)[0])


def objective_value(A, problem: EncodeProblem) -> float:
    if isinstance(A, SparseCodeMatrix):
        A = A.values
    cache = GramCache(problem.dictionary)
    X = [f[None, :] for f in problem.sample.features]
    return float(objective_batch(cache, X, np.asarray(A, dtype=np.float64)[None], *problem.penalties)[0])


def zero_threshold(sample, dictionary) -> float:
    """Smallest group penalty for which the l12 solution is exactly zero."""
    feats = sample.features if isinstance(sample, MultimodalSample) else sample
    C = np.stack([D.T @ x for D, x in zip(dictionary, feats)], axis=1)
    return float(np.linalg.norm(C, axis=1).max()) if C.size else 0.0
