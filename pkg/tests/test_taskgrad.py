import numpy as np
import pytest

from mtdl.errors import DegenerateRow, EmptyActiveSet, RankDeficient
from mtdl.losses import head_loss
from mtdl.model import ClassifierBank, Head, MultimodalDictionary, Prior
from mtdl.oracle import random_grad_instance, single_modal_gradient
from mtdl.sparse_coding import GramCache
from mtdl.taskgrad import (batch_gradients, build_delta, build_dhat, build_workspace, classifier_gradient,
                           code_loss_gradient, dictionary_gradient, expanded_indices, modality_indices,
                           sample_gradients, solve_beta, system_matrix)


def test_index_maps():
    assert expanded_indices([0, 2], 3).tolist() == [0, 1, 2, 6, 7, 8]
    assert modality_indices(1, 4, 3).tolist() == [1, 4, 7, 10]


def test_index_map_agrees_with_row_major_flattening(rng):
    A = rng.standard_normal((5, 3))
    flat = A.reshape(-1)
    for s in range(3):
        np.testing.assert_array_equal(flat[modality_indices(s, 5, 3)], A[:, s])
    for j in range(5):
        np.testing.assert_array_equal(flat[expanded_indices([j], 3)], A[j])


def test_dhat_single_modality_is_active_columns(rng):
    D = rng.standard_normal((6, 5))
    np.testing.assert_array_equal(build_dhat([D], [1, 3]), D[:, [1, 3]])


def test_dhat_block_structure(rng):
    D1, D2 = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    H = build_dhat([D1, D2], [2])
    assert H.shape == (9, 2)
    np.testing.assert_allclose(H.T @ H, np.diag([D1[:, 2] @ D1[:, 2], D2[:, 2] @ D2[:, 2]]))


def test_dhat_gram_matches_blockwise(rng):
    dicts = [rng.standard_normal((n, 6)) for n in (4, 5, 3)]
    act = np.array([0, 2, 5])
    H = build_dhat(dicts, act)
    M = np.zeros((9, 9))
    for s, D in enumerate(dicts):
        M[s::3, s::3] = D[:, act].T @ D[:, act]
    np.testing.assert_allclose(H.T @ H, M, atol=1e-12)
    norms = [np.linalg.norm(dicts[s][:, j]) for j in act for s in range(3)]
    np.testing.assert_allclose(np.linalg.norm(H, axis=0), norms)


def test_dhat_rejects_empty_set(rng):
    with pytest.raises(EmptyActiveSet):
        build_dhat([np.eye(3)], [])


def test_delta_examples(rng):
    assert not build_delta(rng.standard_normal((4, 1)) + 2, [0, 1, 2, 3]).any()
    np.testing.assert_allclose(build_delta(np.array([[1.0, 0.0]]), [0]), [[0, 0], [0, 1]])
    a = rng.standard_normal((1, 4))
    Dj = build_delta(a, [0])
    np.testing.assert_allclose(Dj @ a[0], 0, atol=1e-12)
    w = np.linalg.eigvalsh(Dj)
    assert w.min() > -1e-12 and w.max() <= 1 / np.linalg.norm(a) + 1e-12


def test_delta_degenerate_row():
    with pytest.raises(DegenerateRow):
        build_delta(np.array([[1e-8, 0.0]]), [0])


def test_beta_scalar_system():
    ws = build_workspace([np.array([[1.0], [0.0]])], np.array([[0.7]]), np.array([[0.3]]))
    beta = solve_beta(ws, 0.5, 0.2)
    assert beta[0] == pytest.approx(0.3 / 1.2)


def test_beta_zero_gradient(rng):
    inst, A = random_grad_instance(rng, Head.SOFTMAX, Prior.L12)
    ws = build_workspace(inst.dictionary, A, np.zeros_like(A))
    assert not solve_beta(ws, inst.lambda1, inst.lambda2).any()


@pytest.mark.parametrize("prior", [Prior.L12, Prior.MIXED])
def test_beta_solves_system(rng, prior):
    for _ in range(10):
        inst, A = random_grad_instance(rng, Head.QUADRATIC, prior)
        _, G = code_loss_gradient(inst.bank.head, inst.label, inst.bank, A)
        ws = build_workspace(inst.dictionary, A, G, prior)
        beta = solve_beta(ws, inst.lambda1, 0.1)
        M = system_matrix(ws, inst.lambda1, 0.1)
        rhs = ws.g if ws.psi is None else ws.g[ws.psi]
        assert np.linalg.norm(M @ beta[ws.upsilon] - rhs) <= 1e-10
        mask = np.ones(beta.size, dtype=bool)
        mask[ws.upsilon] = False
        assert not beta[mask].any()
        np.testing.assert_allclose(M, M.T, atol=1e-12)
        assert np.linalg.eigvalsh(M).min() > 0
        if prior is Prior.MIXED:
            assert ws.psi.size == ws.upsilon.size


def test_rank_deficient_without_ridge():
    D = np.array([[1.0, 1.0], [0.0, 0.0]]) / 1.0
    A = np.array([[0.4], [0.4]])
    ws = build_workspace([D], A, np.ones((2, 1)))
    with pytest.raises(RankDeficient):
        solve_beta(ws, 0.1, 0.0)
    assert np.all(np.isfinite(solve_beta(ws, 0.1, 1e-6)))


def test_dictionary_gradient_zero_beta(rng):
    dicts = [rng.standard_normal((4, 3)), rng.standard_normal((5, 3))]
    grads = dictionary_gradient([rng.standard_normal(4), rng.standard_normal(5)], rng.standard_normal((3, 2)),
                                np.zeros(6), dicts)
    assert all(not g.any() for g in grads)


def test_zero_codes_give_zero_dictionary_gradient(rng):
    dicts = MultimodalDictionary((rng.standard_normal((4, 3)),))
    bank = ClassifierBank((rng.standard_normal((3, 3)),), Head.SOFTMAX, 0.01)
    out = sample_gradients([rng.standard_normal(4)], np.zeros((3, 1)), 2, dicts, bank, 0.5, 0.0)
    assert not out["grad_D"][0].any()


def test_classifier_gradient_examples(rng):
    W = np.eye(3)
    a = np.array([0.0, 1.0, 0.0])
    bank = ClassifierBank((W,), Head.QUADRATIC, 0.0)
    ev = [head_loss(Head.QUADRATIC, 2, W, a)]
    assert not classifier_gradient(ev, 0.0, bank)[0].any()
    bank0 = ClassifierBank((np.zeros((3, 4)),), Head.SOFTMAX, 0.5)
    ev = [head_loss(Head.SOFTMAX, 1, bank0.weights[0], rng.standard_normal(4))]
    np.testing.assert_array_equal(classifier_gradient(ev, 0.5, bank0)[0], ev[0].grad_w)


def test_classifier_gradient_finite_differences(rng):
    W = rng.standard_normal((3, 4))
    a = rng.standard_normal(4)
    nu = 0.3
    bank = ClassifierBank((W,), Head.SOFTMAX, nu)
    g = classifier_gradient([head_loss(Head.SOFTMAX, 2, W, a)], nu, bank)[0]
    f = lambda M: head_loss(Head.SOFTMAX, 2, M, a).value + 0.5 * nu * np.sum(M * M)
    fd = np.zeros_like(W)
    for idx in np.ndindex(*W.shape):
        E = np.zeros_like(W)
        E[idx] = 1e-6
        fd[idx] = (f(W + E) - f(W - E)) / 2e-6
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


@pytest.mark.parametrize("head", list(Head))
def test_single_modality_reduces_to_elastic_net_gradient(rng, head):
    for _ in range(5):
        inst, A = random_grad_instance(rng, head, Prior.L12, S=1)
        out = sample_gradients(inst.features, A, inst.label, inst.dictionary, inst.bank,
                               inst.lambda1, inst.lambda2, Prior.L12)
        _, G = code_loss_gradient(head, inst.label, inst.bank, A)
        ref = single_modal_gradient(inst.features[0], inst.dictionary[0], A[:, 0], G[:, 0], inst.lambda2)
        np.testing.assert_allclose(out["grad_D"][0], ref, atol=1e-12)


@pytest.mark.parametrize("prior", [Prior.L12, Prior.MIXED])
def test_batch_gradients_average_sample_gradients(rng, prior):
    inst, A = random_grad_instance(rng, Head.SOFTMAX, prior, S=2)
    # reuse the dictionary and bank; draw a few more samples against them
    from mtdl.oracle import random_sample
    from mtdl.sparse_coding import encode_batch
    samples = [inst.features] + [random_sample(rng, inst.dictionary).features for _ in range(4)]
    X = [np.stack([f[s] for f in samples]) for s in range(2)]
    cache = GramCache(inst.dictionary)
    g, l1, l2 = inst.penalties
    codes = encode_batch(X, cache, g, l1, l2)["codes"]
    y = np.array([inst.label] * 5)
    out = batch_gradients(cache, X, codes, y, inst.bank, g, l2, prior)
    gD = [np.zeros_like(D) for D in inst.dictionary]
    gW = [np.zeros_like(W) for W in inst.bank.weights]
    for i in range(5):
        r = sample_gradients([x[i] for x in X], codes[i], int(y[i]), inst.dictionary, inst.bank, g, l2, prior)
        gD = [a + b / 5 for a, b in zip(gD, r["grad_D"])]
        gW = [a + b / 5 for a, b in zip(gW, r["grad_W"])]
    for a, b in zip(out["grad_D"] + out["grad_W"], gD + gW):
        np.testing.assert_allclose(a, b, atol=1e-12)
