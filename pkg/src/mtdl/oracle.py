"""Reference implementations used to certify the main solver and gradients.

The solvers here share no numerical code with :mod:`mtdl.sparse_coding`,
and the finite-difference path shares none with :mod:`mtdl.taskgrad`:

* :func:`reference_encode` runs ISTA with backtracking on the stacked
  group-lasso form ``min 1/2||x'' - D'' a||^2 + penalty(a)`` where ``D''``
  appends ``sqrt(lam2) I`` under the block-diagonal atom matrix;
* :func:`bruteforce_encode` enumerates every row support and solves the
  smooth restricted problem on each (reweighted fixed point, then Newton);
* :func:`fd_gradient` differentiates the end-to-end loss by central
  differences, re-encoding at every perturbed dictionary (each re-encoding
  is certified by its optimality residual);
* :func:`single_modal_gradient` is the classical one-modality task-driven
  gradient, used to cross-check the multimodal formula at ``S = 1``.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidProblem, MaxIterations, TooLarge, TransitionPoint, ValidationError
from .losses import head_loss
from .model import (
    ClassifierBank,
    Head,
    MultimodalDictionary,
    MultimodalSample,
    Prior,
    SparseCodeMatrix,
    normalize_sample,
)
from .sparse_coding import (
    EncodeProblem,
    EncodeResult,
    SolverOptions,
    GramCache,
    _newton_polish,
    encode_batch,
    kkt_rows,
    prior_penalties,
    zero_threshold,
)
from . import taskgrad


@dataclass
class Check:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)


@dataclass
class OracleReport:
    reference_objective: Optional[float] = None
    main_objective: Optional[float] = None
    discrepancy: Optional[float] = None
    checks: list = field(default_factory=list)
    notes: list = field(default_factory=list)

    def add(self, name, value, tol) -> Check:
        c = Check(name, abs(float(value)), float(tol))
        self.checks.append(c)
        return c

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def to_text(self) -> str:
        lines = []
        if self.reference_objective is not None:
            lines.append(f"reference_objective = {self.reference_objective:.16g}")
        if self.main_objective is not None:
            lines.append(f"main_objective = {self.main_objective:.16g}")
        if self.discrepancy is not None:
            lines.append(f"discrepancy = {self.discrepancy:.3e}")
        for c in self.checks:
            lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: {c.value:.3e} (tol {c.tol:.1e})")
        lines.extend(f"# {n}" for n in self.notes)
        lines.append(f"overall = {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


# ---------------------------------------------------------------------------
# group-lasso reformulation

def stacked_system(problem: EncodeProblem):
    """Build ``(x'', D'')``; the unknown is ``vec(A^T)`` (atom-major)."""
    dicts = problem.dictionary.dicts
    S = len(dicts)
    d = dicts[0].shape[1]
    n = sum(D.shape[0] for D in dicts)
    lam2 = problem.penalties[2]
    Dp = np.zeros((n, d * S))
    row = 0
    for s, D in enumerate(dicts):
        for j in range(d):
            Dp[row:row + D.shape[0], j * S + s] = D[:, j]
        row += D.shape[0]
    xp = np.concatenate(problem.sample.features)
    Dpp = np.vstack([Dp, np.sqrt(lam2) * np.eye(d * S)])
    xpp = np.concatenate([xp, np.zeros(d * S)])
    return xpp, Dpp


def _group_prox(v, S, t_group, t_l1):
    out = np.empty_like(v)
    for j in range(0, v.size, S):
        blk = v[j:j + S]
        blk = np.sign(blk) * np.maximum(np.abs(blk) - t_l1, 0.0)
        nrm = np.sqrt(np.sum(blk * blk))
        out[j:j + S] = 0.0 if nrm <= t_group else blk * (1.0 - t_group / nrm)
    return out


def _stacked_value(a, xpp, Dpp, S, lam_group, lam_l1):
    r = xpp - Dpp @ a
    groups = a.reshape(-1, S)
    return 0.5 * r @ r + lam_group * np.sqrt((groups**2).sum(axis=1)).sum() + lam_l1 * np.abs(a).sum()


def _stacked_kkt(a, xpp, Dpp, S, lam_group, lam_l1):
    c = Dpp.T @ (xpp - Dpp @ a)
    worst = 0.0
    for j in range(0, a.size, S):
        aj, cj = a[j:j + S], c[j:j + S]
        nrm = np.sqrt(aj @ aj)
        if nrm == 0:
            shrunk = np.sign(cj) * np.maximum(np.abs(cj) - lam_l1, 0.0)
            res = max(0.0, np.sqrt(shrunk @ shrunk) - lam_group)
        else:
            diff = np.empty(S)
            for k in range(S):
                if aj[k] != 0:
                    diff[k] = cj[k] - lam_group * aj[k] / nrm - lam_l1 * np.sign(aj[k])
                else:
                    diff[k] = max(0.0, abs(cj[k]) - lam_l1)
            res = np.sqrt(diff @ diff)
        worst = max(worst, res)
    return worst


def reference_encode(problem: EncodeProblem, tol: float = 1e-12, max_iter: int = 200000,
                     raise_on_max_iter: bool = True) -> EncodeResult:
    """Proximal gradient (ISTA, backtracking) on the stacked group lasso.

    Stops when the iterate change scaled by the step is below ``tol`` and the
    problem's own optimality residual is below ``100 * tol``.
    """
    lam_group, lam_l1, _ = problem.penalties
    xpp, Dpp = stacked_system(problem)
    S = problem.dictionary.n_modalities
    d = problem.dictionary.n_atoms
    a = np.zeros(d * S)
    L = 1e-3
    it = 0
    converged = False
    kkt = np.inf
    for it in range(1, max_iter + 1):
        grad = Dpp.T @ (Dpp @ a - xpp)
        while True:
            cand = _group_prox(a - grad / L, S, lam_group / L, lam_l1 / L)
            diff = cand - a
            # quadratic smooth part: the sufficient-decrease test is exact in this form
            Ddiff = Dpp @ diff
            if Ddiff @ Ddiff <= L * (diff @ diff):
                break
            L *= 2.0
        a = cand
        if L * np.sqrt(diff @ diff) <= tol:
            kkt = _stacked_kkt(a, xpp, Dpp, S, lam_group, lam_l1)
            if kkt <= 100 * tol:
                converged = True
                break
    if not converged:
        kkt = _stacked_kkt(a, xpp, Dpp, S, lam_group, lam_l1)
        if raise_on_max_iter:
            raise MaxIterations(f"ISTA did not reach tolerance in {max_iter} iterations (kkt {kkt:.3g})")
    fa = _stacked_value(a, xpp, Dpp, S, lam_group, lam_l1)
    return EncodeResult(SparseCodeMatrix(a.reshape(d, S)), float(fa), float(kkt), it, converged)


# ---------------------------------------------------------------------------
# support enumeration

def _restricted_solve(xp, Dp, rows, S, lam_group, lam2, max_mm=2000):
    """Minimize the l12 objective over codes supported on ``rows``.

    Majorize-minimize on the row norms (``||a|| <= (||a||^2 / r + r) / 2``)
    followed by Newton refinement. Returns the flat restricted vector if an
    interior stationary point (all rows nonzero) is found, else ``None``.
    """
    cols = (np.asarray(rows)[:, None] * S + np.arange(S)).reshape(-1)
    Dr = Dp[:, cols]
    m = cols.size
    H0 = Dr.T @ Dr + lam2 * np.eye(m)
    c0 = Dr.T @ xp

    def norms(v):
        return np.sqrt((v.reshape(-1, S) ** 2).sum(axis=1))

    def gradient(v, nr):
        return H0 @ v - c0 + lam_group * (v.reshape(-1, S) / nr[:, None]).reshape(-1)

    r = norms(np.linalg.solve(H0, c0))
    r[r == 0] = 1.0
    v = None
    for _ in range(max_mm):
        v = np.linalg.solve(H0 + lam_group * np.diag(np.repeat(1.0 / r, S)), c0)
        nr = norms(v)
        if np.any(nr <= 1e-13):
            return None
        if np.max(np.abs(nr - r)) <= 1e-10 * np.max(nr):
            r = nr
            break
        r = nr
    for _ in range(20):
        nr = norms(v)
        grad = gradient(v, nr)
        if np.max(np.abs(grad)) <= 1e-13:
            break
        H = H0.copy()
        blocks = v.reshape(-1, S)
        for k in range(len(rows)):
            sl = slice(k * S, (k + 1) * S)
            H[sl, sl] += lam_group * (np.eye(S) / nr[k] - np.outer(blocks[k], blocks[k]) / nr[k] ** 3)
        cand = v - np.linalg.solve(H, grad)
        cn = norms(cand)
        if np.any(cn <= 0.5 * nr):
            break
        cgrad = gradient(cand, cn)
        if np.max(np.abs(cgrad)) >= np.max(np.abs(grad)):
            break
        v = cand
    nr = norms(v)
    if np.any(nr <= 1e-13):
        return None
    return v if np.max(np.abs(gradient(v, nr))) <= 1e-9 else None


def bruteforce_encode(problem: EncodeProblem, max_d: int = 8) -> EncodeResult:
    """Global l12 optimum by exhausting all ``2**d`` row supports."""
    if Prior(problem.prior) is not Prior.L12:
        raise InvalidProblem("support enumeration is implemented for the l12 prior")
    d = problem.dictionary.n_atoms
    S = problem.dictionary.n_modalities
    if d > max_d or max_d > 8:
        raise TooLarge(f"d = {d} exceeds the enumeration limit {min(max_d, 8)}")
    lam_group, _, lam2 = problem.penalties
    if lam2 <= 0:
        raise InvalidProblem("support enumeration requires lambda2 > 0")
    xpp, Dpp = stacked_system(problem)
    n = sum(problem.dictionary.dims)
    xp, Dp = xpp[:n], Dpp[:n]
    best_v = np.zeros(d * S)
    best_f = 0.5 * xp @ xp
    for k in range(1, d + 1):
        for rows in itertools.combinations(range(d), k):
            v = _restricted_solve(xp, Dp, rows, S, lam_group, lam2)
            if v is None:
                continue
            full = np.zeros(d * S)
            cols = (np.asarray(rows)[:, None] * S + np.arange(S)).reshape(-1)
            full[cols] = v
            f = _stacked_value(full, xpp, Dpp, S, lam_group, 0.0)
            if f < best_f:
                best_f, best_v = f, full
    kkt = _stacked_kkt(best_v, xpp, Dpp, S, lam_group, 0.0)
    return EncodeResult(SparseCodeMatrix(best_v.reshape(d, S)), float(best_f), float(kkt),
                        2 ** d, True)


# ---------------------------------------------------------------------------
# finite differences

@dataclass
class GradInstance:
    """Everything needed to evaluate the end-to-end supervised loss."""

    features: tuple
    label: int
    dictionary: MultimodalDictionary
    bank: ClassifierBank
    prior: Prior
    lambda1: float
    lambda1_l11: float
    lambda2: float

    @property
    def penalties(self):
        return prior_penalties(self.prior, self.lambda1, self.lambda1_l11, self.lambda2)


def _support_signature(A):
    return (A != 0).tobytes()


def _encode_at(features, dicts, pens, warm, kkt_tol=1e-12):
    """Encode one sample for dictionary matrices ``dicts``.

    Tries a Newton refinement of ``warm`` first and accepts it only with a
    global optimality certificate; otherwise runs the full ADMM solver.
    """
    B = np.stack([D.T @ x for D, x in zip(dicts, features)], axis=1)
    G = [D.T @ D for D in dicts]
    if warm is not None:
        cand = _newton_polish(warm, B, G, *pens)
        if cand is not None:
            GA = np.stack([G[s] @ cand[:, s] for s in range(len(G))], axis=1)
            if kkt_rows(B[None], GA[None], cand[None], *pens).max() <= kkt_tol:
                return cand
    cache = GramCache(MultimodalDictionary(tuple(dicts)))
    out = encode_batch([x[None] for x in features], cache, *pens,
                       opts=SolverOptions(abs_tol=1e-13, rel_tol=1e-13, max_iter=20000),
                       init=None if warm is None else warm[None])
    return out["codes"][0]


def end_to_end_loss(inst: GradInstance, dicts=None, weights=None, warm=None):
    """``(sum_s l_s, codes)`` at the given (possibly perturbed) parameters."""
    dicts = inst.dictionary.dicts if dicts is None else dicts
    weights = inst.bank.weights if weights is None else weights
    A = _encode_at(inst.features, dicts, inst.penalties, warm)
    total = sum(head_loss(inst.bank.head, inst.label, W, A[:, s]).value
                for s, W in enumerate(weights))
    return total, A


def fd_gradient(target: str, inst: GradInstance, eps: float = 1e-5, base_codes=None):
    """Central-difference gradient of the end-to-end loss.

    ``target`` is ``"dictionary"`` (list of ``(n_s, d)`` arrays; the codes are
    re-solved at every probe) or ``"classifier"`` (list of weight arrays,
    including the ``nu/2 ||W||^2`` term). Raises :class:`TransitionPoint` if a
    probe changes the support of the codes.
    """
    if not 1e-7 <= eps <= 1e-4:
        raise ValidationError("eps must lie in [1e-7, 1e-4]")
    if base_codes is None:
        _, base_codes = end_to_end_loss(inst)
    sig = _support_signature(base_codes)
    if target == "dictionary":
        dicts = [np.array(D) for D in inst.dictionary.dicts]
        out = []
        for s, D in enumerate(dicts):
            grad = np.zeros_like(D)
            for idx in np.ndindex(*D.shape):
                vals = []
                for sgn in (1.0, -1.0):
                    pert = [M if k != s else M.copy() for k, M in enumerate(dicts)]
                    pert[s][idx] += sgn * eps
                    f, A = end_to_end_loss(inst, dicts=pert, warm=base_codes)
                    if _support_signature(A) != sig:
                        raise TransitionPoint(f"support changed when perturbing D[{s}]{idx}")
                    vals.append(f)
                grad[idx] = (vals[0] - vals[1]) / (2 * eps)
            out.append(grad)
        return out
    if target == "classifier":
        nu = inst.bank.nu
        weights = [np.array(W) for W in inst.bank.weights]
        A = base_codes

        def obj(ws):
            return sum(head_loss(inst.bank.head, inst.label, W, A[:, s]).value + 0.5 * nu * np.sum(W * W)
                       for s, W in enumerate(ws))

        out = []
        for s, W in enumerate(weights):
            grad = np.zeros_like(W)
            for idx in np.ndindex(*W.shape):
                up = [M.copy() for M in weights]
                dn = [M.copy() for M in weights]
                up[s][idx] += eps
                dn[s][idx] -= eps
                grad[idx] = (obj(up) - obj(dn)) / (2 * eps)
            out.append(grad)
        return out
    raise ValidationError(f"unknown target {target!r}")


def single_modal_gradient(x, D, alpha, grad_alpha, lam2, tol=1e-6):
    """One-modality task-driven dictionary gradient.

    ``beta`` solves ``(D_L^T D_L + lam2 I) beta_L = grad_alpha_L`` on the
    support ``L`` and is zero elsewhere; the gradient is
    ``(x - D alpha) beta^T - D beta alpha^T``.
    """
    x = np.asarray(x, dtype=np.float64)
    D = np.asarray(D, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    support = np.flatnonzero(np.abs(alpha) > tol)
    beta = np.zeros_like(alpha)
    if support.size:
        DL = D[:, support]
        beta[support] = np.linalg.solve(DL.T @ DL + lam2 * np.eye(support.size), grad_alpha[support])
    return np.outer(x - D @ alpha, beta) - np.outer(D @ beta, alpha)


def relative_error(a, b, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)`` over lists of arrays."""
    a = np.concatenate([np.ravel(m) for m in a])
    b = np.concatenate([np.ravel(m) for m in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


# ---------------------------------------------------------------------------
# randomized suites

def random_dictionary(rng, dims, d) -> MultimodalDictionary:
    mats = []
    for n in dims:
        M = rng.standard_normal((n, d))
        mats.append(M / np.linalg.norm(M, axis=0))
    return MultimodalDictionary(tuple(mats))


def random_sample(rng, dictionary, n_used=2, noise=0.3) -> MultimodalSample:
    """Normalized sample mixing a few shared atoms with Gaussian noise."""
    d = dictionary.n_atoms
    used = rng.choice(d, size=min(n_used, d), replace=False)
    feats = []
    for D in dictionary:
        x = D[:, used] @ (rng.uniform(0.5, 1.5, used.size) * rng.choice([-1, 1], used.size))
        x = x + noise * rng.standard_normal(D.shape[0])
        feats.append(normalize_sample(x))
    return MultimodalSample(tuple(feats))


def transition_margin(A, features, dicts, pens) -> float:
    """Distance of the solution from the nearest support change.

    Small values mean a tiny perturbation may activate or deactivate a row
    (or, with an l1 term, an entry).
    """
    lam_group, lam_l1, lam2 = pens
    B = np.stack([D.T @ x for D, x in zip(dicts, features)], axis=1)
    GA = np.stack([D.T @ (D @ A[:, s]) for s, D in enumerate(dicts)], axis=1)
    R = B - GA - lam2 * A
    margins = [np.inf]
    for j in range(A.shape[0]):
        nrm = np.linalg.norm(A[j])
        if nrm == 0:
            shrunk = np.sign(R[j]) * np.maximum(np.abs(R[j]) - lam_l1, 0.0)
            margins.append(lam_group - np.linalg.norm(shrunk) if lam_group > 0 else
                           lam_l1 - np.max(np.abs(R[j])))
        else:
            nz = A[j] != 0
            margins.append(np.min(np.abs(A[j][nz])))
            if lam_l1 > 0 and np.any(~nz):
                margins.append(lam_l1 - np.max(np.abs(R[j][~nz])))
    return float(min(margins))


def random_grad_instance(rng, head, prior, S=None, margin=1e-3, max_tries=200) -> tuple:
    """Draw a non-transition instance; returns ``(instance, codes)``."""
    for _ in range(max_tries):
        S_ = S if S is not None else int(rng.integers(1, 4))
        dims = tuple(int(v) for v in rng.integers(4, 17, size=S_))
        d = int(rng.integers(4, 13))
        K = 2 if Head(head) is Head.LOGISTIC else int(rng.integers(2, 6))
        dictionary = random_dictionary(rng, dims, d)
        sample = random_sample(rng, dictionary, n_used=int(rng.integers(1, 4)))
        lmax = zero_threshold(sample, dictionary)
        lam1 = float(rng.uniform(0.15, 0.6) * lmax)
        lam_l1 = float(rng.uniform(0.05, 0.3) * lam1) if Prior(prior) is Prior.MIXED else 0.0
        lam2 = float(rng.uniform(0.05, 0.5))
        nu = float(10 ** rng.uniform(-4, -1))
        rows = 1 if Head(head) is Head.LOGISTIC else K
        bank = ClassifierBank(tuple(rng.standard_normal((rows, d)) for _ in range(S_)), head, nu)
        label = int(rng.choice([-1, 1])) if Head(head) is Head.LOGISTIC else int(rng.integers(1, K + 1))
        inst = GradInstance(sample.features, label, dictionary, bank, Prior(prior), lam1, lam_l1, lam2)
        _, A = end_to_end_loss(inst)
        if not np.any(A):
            continue
        if transition_margin(A, inst.features, dictionary.dicts, inst.penalties) < margin:
            continue
        return inst, A
    raise TransitionPoint("could not draw a non-transition instance")


def check_gradients(inst: GradInstance, A, eps: float = 1e-5) -> tuple:
    """Relative errors (dictionary, classifier) of the implicit gradients."""
    lam_group, _, lam2 = inst.penalties
    res = taskgrad.sample_gradients(inst.features, A, inst.label, inst.dictionary, inst.bank,
                                    lam_group, lam2, inst.prior)
    fd_D = fd_gradient("dictionary", inst, eps, base_codes=A)
    fd_W = fd_gradient("classifier", inst, eps, base_codes=A)
    evals = [head_loss(inst.bank.head, inst.label, W, A[:, s]) for s, W in enumerate(inst.bank.weights)]
    an_W = taskgrad.classifier_gradient(evals, inst.bank.nu, inst.bank)
    return relative_error(res["grad_D"], fd_D), relative_error(an_W, fd_W)


def gradcheck_suite(n_instances: int = 100, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4,
                    heads=tuple(Head), priors=(Prior.L12, Prior.MIXED)) -> OracleReport:
    """Randomized verification of the implicit dictionary and classifier gradients."""
    rng = np.random.default_rng(seed)
    report = OracleReport()
    combos = list(itertools.product(heads, priors))
    worst_D = worst_W = 0.0
    rejected = 0
    t_start = time.perf_counter()
    done = 0
    while done < n_instances:
        head, prior = combos[done % len(combos)]
        inst, A = random_grad_instance(rng, head, prior)
        try:
            eD, eW = check_gradients(inst, A, eps)
        except TransitionPoint:
            rejected += 1
            continue
        worst_D, worst_W = max(worst_D, eD), max(worst_W, eW)
        done += 1
    report.add("max relative error, dictionary gradient", worst_D, tol)
    report.add("max relative error, classifier gradient", worst_W, tol)
    report.notes.append(f"instances = {n_instances}, seed = {seed}, eps = {eps:g}, "
                        f"rejected at transition points = {rejected}")
    report.notes.append(f"elapsed = {time.perf_counter() - t_start:.2f} s")
    return report


def random_encode_problem(rng, prior=Prior.L12, max_d=12) -> EncodeProblem:
    S = int(rng.integers(1, 4))
    dims = tuple(int(v) for v in rng.integers(4, 17, size=S))
    d = int(rng.integers(2, max_d + 1))
    dictionary = random_dictionary(rng, dims, d)
    sample = random_sample(rng, dictionary, n_used=int(rng.integers(1, 4)))
    lmax = zero_threshold(sample, dictionary)
    lam1 = float(rng.uniform(0.05, 0.9) * lmax)
    lam_l1 = float(rng.uniform(0.02, 0.5) * lam1)
    lam2 = float(rng.uniform(0.01, 0.5))
    prior = Prior(prior)
    if prior is Prior.L11:
        return EncodeProblem(sample, dictionary, prior, 0.0, lam_l1, lam2)
    return EncodeProblem(sample, dictionary, prior, lam1, lam_l1 if prior is Prior.MIXED else 0.0, lam2)
