"""Unsupervised and task-driven training loops.

Data enter as ``X``, a sequence of ``(N, n_s)`` arrays (one row per sample)
and ``y``, an ``(N,)`` label array.  All randomness comes from the seed in
:class:`~mtdl.model.Hyperparams`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import NamedTuple, Optional

import numpy as np
from scipy import optimize

from .errors import InsufficientData, NonFinite, RankDeficient, ValidationError
from .losses import head_loss_batch
from .model import ClassifierBank, Head, Hyperparams, MultimodalDictionary, Prior
from .sparse_coding import GramCache, SolverOptions, encode_batch, prior_penalties
from .taskgrad import batch_gradients

log = logging.getLogger(__name__)

# Atoms within this distance of the unit sphere are treated as feasible so that
# projecting an already-projected dictionary is an exact no-op.
PROJECTION_SLACK = 1e-15
RANK_BUMP_LAMBDA2 = 1e-6


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    step: int
    objective: float
    mean_kkt: float
    mean_active: float
    median_objective: float = float("nan")


@dataclass
class TrainState:
    dictionary: MultimodalDictionary
    bank: ClassifierBank
    epoch: int = 0
    step: int = 0
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    history: list = field(default_factory=list)
    lambda2: float = 0.0


class UnsupervisedResult(NamedTuple):
    dictionary: MultimodalDictionary
    history: list


def project_dictionary(D):
    """Rescale atoms of norm above one back onto the unit sphere."""
    wrap = isinstance(D, MultimodalDictionary)
    out = []
    for M in (D.dicts if wrap else D):
        M = np.array(M, dtype=np.float64)
        nrm = np.linalg.norm(M, axis=0)
        over = nrm > 1.0 + PROJECTION_SLACK
        M[:, over] /= nrm[over]
        out.append(M)
    return MultimodalDictionary(tuple(out)) if wrap else out


def project_classifier(W):
    """The classifier set is the whole space; projection is the identity."""
    return W


def learning_rate(t, rho, t0) -> float:
    """``min(rho, rho * t0 / t)``: constant for ``t <= t0``, then ``1/t`` decay."""
    if t < 1:
        raise ValidationError("step counter starts at 1")
    return min(rho, rho * t0 / t)


def default_t0(hp: Hyperparams, steps_per_epoch: int) -> float:
    if hp.t0 is not None:
        return float(hp.t0)
    return max(1.0, hp.epochs / 10.0 * steps_per_epoch)


def lambda1_grid(prior=Prior.L12) -> list:
    """Cross-validation grid for the sparsity weights.

    For the l12 prior: ``0.01 + 0.005 k`` for integer ``k`` in [-3, 3], keeping
    only the positive values.
    """
    if Prior(prior) is Prior.L12:
        grid = [round(0.01 + 0.005 * k, 10) for k in range(-3, 4)]
        return [v for v in grid if v > 0]
    return [0.0001, 0.0005, 0.001, 0.005, 0.01, 0.05]


def nu_grid() -> list:
    return [10.0 ** -k for k in range(2, 10)]


def _check_data(X, y=None):
    X = [np.asarray(Xs, dtype=np.float64) for Xs in X]
    N = X[0].shape[0]
    if N == 0:
        raise InsufficientData("no training samples")
    if any(Xs.shape[0] != N for Xs in X):
        raise ValidationError("modalities disagree on the number of samples")
    if y is not None and len(y) != N:
        raise ValidationError("labels and features disagree on the number of samples")
    return X, N


def _batches(rng, N, batch_size):
    perm = rng.permutation(N)
    size = min(batch_size, N)
    return [perm[k:k + size] for k in range(0, N, size)]


def _solver_opts(hp: Hyperparams) -> SolverOptions:
    return SolverOptions(abs_tol=hp.admm_tol, rel_tol=hp.admm_tol, max_iter=hp.admm_max_iter)


def seed_dictionary(X, d, rng, y=None) -> MultimodalDictionary:
    """Atoms drawn from ``d`` distinct training samples (class-balanced when
    labels are given and ``d`` is a multiple of the class count)."""
    X, N = _check_data(X)
    if d > N:
        raise InsufficientData(f"cannot seed {d} atoms from {N} samples")
    idx = None
    if y is not None:
        classes = np.unique(y)
        per = d // len(classes)
        if per * len(classes) == d and all(np.sum(y == c) >= per for c in classes):
            idx = np.concatenate([rng.choice(np.flatnonzero(y == c), per, replace=False)
                                  for c in classes])
    if idx is None:
        idx = rng.choice(N, d, replace=False)
    mats = []
    for Xs in X:
        M = Xs[idx].T.copy()
        nrm = np.linalg.norm(M, axis=0)
        M[:, nrm > 0] /= nrm[nrm > 0]
        mats.append(M)
    return MultimodalDictionary(tuple(mats))


def reconstruction_gradient(X, codes, mats) -> list:
    """Fixed-code gradient ``-(x_s - D_s a_s) a_s^T`` averaged over a batch.

    ``X[s]`` is ``(N, n_s)`` and ``codes`` is ``(N, d, S)``.
    """
    N = codes.shape[0]
    out = []
    for s, (Xs, D) in enumerate(zip(X, mats)):
        R = Xs - codes[:, :, s] @ D.T
        out.append(-(R.T @ codes[:, :, s]) / N)
    return out


def unsupervised_fit(X, hp: Hyperparams, prior=Prior.L12, init: Optional[MultimodalDictionary] = None,
                     n_atoms: Optional[int] = None, y=None, rng=None, on_step=None) -> UnsupervisedResult:
    """Projected SGD on the expected joint sparse-coding cost.

    The gradient in each ``D_s`` treats the codes as fixed:
    ``-(x_s - D_s a_s) a_s^T``, averaged over the mini-batch.
    ``on_step(t, rate, dicts)`` is called after every projected step.
    """
    X, N = _check_data(X)
    prior = hp.check_prior(prior)
    rng = np.random.default_rng(hp.seed) if rng is None else rng
    if init is None:
        if n_atoms is None:
            raise ValidationError("give either an initial dictionary or n_atoms")
        init = seed_dictionary(X, n_atoms, rng, y)
    pens = prior_penalties(prior, hp.lambda1, hp.lambda1_l11, hp.lambda2)
    opts = _solver_opts(hp)
    mats = [np.array(D) for D in init.dicts]
    steps_per_epoch = -(-N // min(hp.batch_size, N))
    t0 = default_t0(hp, steps_per_epoch)
    history = []
    t = 0
    for epoch in range(1, hp.epochs + 1):
        objs, kkts, acts = [], [], []
        for idx in _batches(rng, N, hp.batch_size):
            t += 1
            cache = GramCache(MultimodalDictionary(tuple(mats)))
            Xb = [Xs[idx] for Xs in X]
            out = encode_batch(Xb, cache, *pens, opts=opts)
            A = out["codes"]
            objs.append(out["objective"].mean())
            kkts.append(out["kkt"].mean())
            acts.append((np.linalg.norm(A, axis=2) > hp.active_tol).sum(axis=1).mean())
            rate = learning_rate(t, hp.rho, t0)
            grads = reconstruction_gradient(Xb, A, mats)
            mats = project_dictionary([D - rate * g for D, g in zip(mats, grads)])
            if not all(np.all(np.isfinite(M)) for M in mats):
                raise NonFinite(f"dictionary became non-finite at epoch {epoch}, step {t}")
            if on_step is not None:
                on_step(t, rate, mats)
        history.append(EpochRecord(epoch, t, float(np.mean(objs)), float(np.mean(kkts)), float(np.mean(acts)),
                                   float(np.median(objs))))
        log.info("unsupervised epoch %d: cost %.6g", epoch, history[-1].objective)
    return UnsupervisedResult(MultimodalDictionary(tuple(mats)), history)


def encode_dataset(X, dictionary, hp: Hyperparams, prior=Prior.L12, lambda2=None, chunk: int = 500):
    """Codes ``(N, d, S)`` and optimality residuals for every sample in ``X``."""
    X, N = _check_data(X)
    lam2 = hp.lambda2 if lambda2 is None else lambda2
    pens = prior_penalties(prior, hp.lambda1, hp.lambda1_l11, lam2)
    cache = GramCache(dictionary)
    codes, kkt = [], []
    for k in range(0, N, chunk):
        out = encode_batch([Xs[k:k + chunk] for Xs in X], cache, *pens, opts=_solver_opts(hp))
        codes.append(out["codes"])
        kkt.append(out["kkt"])
    return np.concatenate(codes), np.concatenate(kkt)


def _head_rows(head, y):
    head = Head(head)
    if head is Head.LOGISTIC:
        if not set(np.unique(y)) <= {-1, 1}:
            raise ValidationError("logistic head needs labels in {-1, +1}")
        return 1
    if np.min(y) < 1:
        raise ValidationError("multiclass labels are 1-based")
    return int(np.max(y))


def fit_classifiers(codes, y, head, nu: float, n_classes: Optional[int] = None, tol: float = 1e-8,
                    max_iter: int = 2000) -> ClassifierBank:
    """Minimize the mean loss plus ``nu/2 ||W_s||^2`` over the classifiers only.

    Closed form for the quadratic head; L-BFGS for the others.
    """
    head = Head(head)
    y = np.asarray(y)
    N, d, S = codes.shape
    rows = _head_rows(head, y) if n_classes is None or head is Head.LOGISTIC else n_classes
    weights = []
    for s in range(S):
        A = codes[:, :, s]
        if head is Head.QUADRATIC:
            Q = np.zeros((N, rows))
            Q[np.arange(N), y - 1] = 1.0
            M = A.T @ A / N + nu * np.eye(d)
            W = np.linalg.solve(M, A.T @ Q / N).T
        else:
            def fun(w, A=A):
                W = w.reshape(rows, d)
                vals, gs = head_loss_batch(head, y, W, A)
                f = vals.mean() + 0.5 * nu * w @ w
                g = (gs.T @ A / N).reshape(-1) + nu * w
                return f, g

            res = optimize.minimize(fun, np.zeros(rows * d), jac=True, method="L-BFGS-B",
                                    options={"gtol": tol, "ftol": 0.0, "maxiter": max_iter})
            W = res.x.reshape(rows, d)
        weights.append(W)
    return ClassifierBank(tuple(weights), head, nu)


def init_model(X, y, hp: Hyperparams, head, prior=Prior.L12, n_atoms: Optional[int] = None,
               unsupervised_hp: Optional[Hyperparams] = None) -> TrainState:
    """Unsupervised dictionaries followed by a convex fit of the classifiers."""
    X, N = _check_data(X, y)
    y = np.asarray(y)
    n_atoms = n_atoms if n_atoms is not None else min(N, 2 * _head_rows(head, y))
    if n_atoms > N:
        raise InsufficientData(f"{n_atoms} atoms need at least as many training samples (have {N})")
    rng = np.random.default_rng(hp.seed)
    uhp = unsupervised_hp or hp
    udl = unsupervised_fit(X, uhp, prior, n_atoms=n_atoms, y=y, rng=rng)
    codes, _ = encode_dataset(X, udl.dictionary, hp, prior)
    n_classes = None if Head(head) is Head.LOGISTIC else _head_rows(head, y)
    bank = fit_classifiers(codes, y, head, hp.nu, n_classes)
    return TrainState(udl.dictionary, bank, rng=rng, history=[], lambda2=hp.lambda2)


def batch_objective(losses, bank: ClassifierBank) -> float:
    return float(np.mean(losses) + 0.5 * bank.nu * sum(np.sum(W * W) for W in bank.weights))


def supervised_fit(state: TrainState, X, y, hp: Hyperparams, prior=Prior.L12, on_step=None) -> TrainState:
    """Task-driven projected SGD over dictionaries and classifiers.

    Each step encodes a mini-batch, computes per-sample implicit gradients,
    averages them and takes one projected step on every ``W_s`` and ``D_s``
    with rate ``min(rho, rho t0 / t)``, ``t`` counting steps. When the
    sensitivity system is singular with ``lambda2 = 0`` the ridge weight is
    raised to ``1e-6`` for the rest of the run. ``on_step(t, rate, dicts,
    weights)`` is called after every projected step.
    """
    X, N = _check_data(X, y)
    y = np.asarray(y)
    prior = hp.check_prior(prior)
    steps_per_epoch = -(-N // min(hp.batch_size, N))
    t0 = default_t0(hp, steps_per_epoch)
    opts = _solver_opts(hp)
    mats = [np.array(D) for D in state.dictionary.dicts]
    weights = [np.array(W) for W in state.bank.weights]
    head, nu = state.bank.head, state.bank.nu
    lam2 = state.lambda2 if state.lambda2 else hp.lambda2
    rng = state.rng
    history = list(state.history)
    t = state.step
    for _ in range(hp.epochs):
        epoch = state.epoch + 1
        objs, kkts, acts = [], [], []
        for idx in _batches(rng, N, hp.batch_size):
            t += 1
            cache = GramCache(MultimodalDictionary(tuple(mats)))
            bank = ClassifierBank(tuple(weights), head, nu)
            Xb = [Xs[idx] for Xs in X]
            while True:
                pens = prior_penalties(prior, hp.lambda1, hp.lambda1_l11, lam2)
                out = encode_batch(Xb, cache, *pens, opts=opts)
                try:
                    grads = batch_gradients(cache, Xb, out["codes"], y[idx], bank, pens[0], lam2,
                                            prior, hp.active_tol)
                    break
                except RankDeficient:
                    if lam2 >= RANK_BUMP_LAMBDA2:
                        raise
                    log.warning("singular sensitivity system at step %d; lambda2 -> %g", t, RANK_BUMP_LAMBDA2)
                    lam2 = RANK_BUMP_LAMBDA2
            objs.append(batch_objective(grads["losses"], bank))
            kkts.append(out["kkt"].mean())
            acts.append(grads["n_active"].mean())
            rate = learning_rate(t, hp.rho, t0)
            weights = [project_classifier(W - rate * (gW + nu * W)) for W, gW in zip(weights, grads["grad_W"])]
            mats = project_dictionary([D - rate * gD for D, gD in zip(mats, grads["grad_D"])])
            if not (all(np.all(np.isfinite(M)) for M in mats) and all(np.all(np.isfinite(W)) for W in weights)):
                raise NonFinite(f"parameters became non-finite at epoch {epoch}, step {t} (rate {rate:.3g})")
            if on_step is not None:
                on_step(t, rate, mats, weights)
        rec = EpochRecord(epoch, t, float(np.mean(objs)), float(np.mean(kkts)), float(np.mean(acts)),
                          float(np.median(objs)))
        history.append(rec)
        log.info("supervised epoch %d: objective %.6g, mean |active| %.2f", epoch, rec.objective, rec.mean_active)
        state = replace(state, epoch=epoch, step=t)
    return TrainState(MultimodalDictionary(tuple(mats)), ClassifierBank(tuple(weights), head, nu),
                      epoch=state.epoch, step=t, rng=rng, history=history, lambda2=lam2)
