import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from smokeseg.prototypes import (
    EmptyClassError,
    PrototypeBank,
    batch_contrastive_loss,
    contrastive_loss,
    sinkhorn_assign,
    trunc_normal,
)
from smokeseg.tensor import Tensor, backward


def sinkhorn_oracle(P, X, eps, iters):
    """Step-by-step re-execution of the assignment recipe in plain numpy.

    Kept deliberately independent of the library code path: in-place
    array ops, no graph, one statement per normalization step.
    """
    M = (X @ P).T  # (K, N) similarity scores
    M = np.exp(M / eps)
    M /= M.sum()
    K, N = M.shape
    for _ in range(iters):
        M /= M.sum(axis=1, keepdims=True)
        M /= K
        M /= M.sum(axis=0, keepdims=True)
        M /= N
    M *= N
    return M


def unit_rows(rng, n, dim):
    x = rng.standard_normal((n, dim))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


@pytest.mark.parametrize("k", [1, 2, 3, 5])
@pytest.mark.parametrize("n", [1, 7, 64])
def test_sinkhorn_grid_contract(k, n):
    rng = np.random.default_rng((k, n))
    for _ in range(3):
        P = unit_rows(rng, k, 16).T  # (dim, K) unit columns
        X = unit_rows(rng, n, 16)
        M = sinkhorn_assign(P, X, eps=0.05, iters=3).data
        assert M.shape == (k, n)
        assert M.min() >= 0.0
        np.testing.assert_allclose(M.sum(axis=0), 1.0, rtol=0, atol=1e-6)
        np.testing.assert_allclose(M, sinkhorn_oracle(P, X, 0.05, 3), rtol=0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 6), st.integers(1, 20), st.integers(1, 6), st.randoms(use_true_random=False))
def test_sinkhorn_invariants_any_problem(k, n, iters, pyrng):
    # column simplex and total mass hold for any well-scaled scores
    rng = np.random.default_rng(pyrng.getrandbits(64))
    P = unit_rows(rng, k, 5).T
    X = unit_rows(rng, n, 5)
    M = sinkhorn_assign(P, X, eps=0.05, iters=iters).data
    assert M.min() >= 0.0
    np.testing.assert_allclose(M.sum(axis=0), 1.0, rtol=0, atol=1e-6)
    assert abs(M.sum() - n) <= n * 1e-6


def test_sinkhorn_k1_all_ones():
    # one prototype takes all the mass, every column sums to 1
    rng = np.random.default_rng(3)
    for n in (1, 7, 64):
        X = unit_rows(rng, n, 8)
        P = unit_rows(rng, 1, 8).T
        M = sinkhorn_assign(P, X, eps=0.05, iters=3).data
        np.testing.assert_allclose(M, np.ones((1, n)), rtol=0, atol=1e-12)


def test_sinkhorn_fixed_scores_example():
    # scores [[0,1,0],[1,0,1]] realized with P = I and X = scores^T
    P = np.eye(2)
    X = np.array([[0.0, 1.0], [1.0, 0.0], [0.0, 1.0]])
    M = sinkhorn_assign(P, X, eps=0.05, iters=3).data
    expected = sinkhorn_oracle(P, X, 0.05, 3)
    np.testing.assert_allclose(M, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(M.sum(axis=0), 1.0, rtol=0, atol=1e-6)
    # the two identical columns must come out identical
    np.testing.assert_array_equal(M[:, 0], M[:, 2])


def test_sinkhorn_permutation_equivariant():
    rng = np.random.default_rng(4)
    P = unit_rows(rng, 5, 12).T
    X = unit_rows(rng, 9, 12)
    perm = rng.permutation(5)
    M = sinkhorn_assign(P, X, eps=0.05, iters=3).data
    M_perm = sinkhorn_assign(P[:, perm], X, eps=0.05, iters=3).data
    np.testing.assert_allclose(M_perm, M[perm], rtol=0, atol=1e-12)


def test_sinkhorn_errors():
    P = np.eye(2)
    with pytest.raises(EmptyClassError):
        sinkhorn_assign(P, np.zeros((0, 2)), eps=0.05, iters=3)
    with pytest.raises(ValueError, match="eps"):
        sinkhorn_assign(P, np.eye(2), eps=0.0, iters=3)


def test_trunc_normal_bounds():
    rng = np.random.default_rng(5)
    out = trunc_normal(rng, (4000,), std=0.02)
    assert np.abs(out).max() <= 0.04
    assert np.abs(out).mean() > 0.0


def test_bank_init_contract():
    bank = PrototypeBank(C=2, K=3, d=4, dim=10, rng=np.random.default_rng(6))
    assert bank.p.shape == (2, 3, 4, 10)
    assert np.isfinite(bank.p).all()
    np.testing.assert_allclose(bank.norms(), 1.0, rtol=0, atol=1e-12)
    with pytest.raises(ValueError, match="K"):
        PrototypeBank(C=2, K=0, d=4, dim=10)
    with pytest.raises(ValueError, match="mu"):
        PrototypeBank(C=2, K=3, d=4, dim=10, mu=1.0)


def test_band_flat_layout_classes_outermost():
    bank = PrototypeBank(C=2, K=3, d=2, dim=5, rng=np.random.default_rng(7))
    flat = bank.band_flat(1)
    for c in range(2):
        for k in range(3):
            np.testing.assert_array_equal(flat[c * 3 + k], bank.p[c, k, 1])


def test_update_fixed_point_bitwise():
    # ibar == p must leave p untouched, before and after any renorm
    bank = PrototypeBank(C=1, K=1, d=1, dim=4, mu=0.999, rng=np.random.default_rng(8))
    for p0 in (np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.6, 0.8, 0.0, 0.0])):
        bank.p[0, 0, 0] = p0
        feats = np.tile(p0, (4, 1))
        bank.update(0, 0, np.ones((1, 4)), feats)
        np.testing.assert_array_equal(bank.p[0, 0, 0], p0)


def test_update_arithmetic_example():
    # p=[1,0], ibar=[0,1], mu=0.9 -> [0.9, 0.1] before renorm, /sqrt(0.82) after
    bank = PrototypeBank(C=1, K=1, d=1, dim=2, mu=0.9, rng=np.random.default_rng(9))
    bank.p[0, 0, 0] = np.array([1.0, 0.0])
    bank.update(0, 0, np.ones((1, 1)), np.array([[0.0, 1.0]]))
    got = bank.p[0, 0, 0]
    pre = np.array([0.9, 0.1])
    np.testing.assert_allclose(got, pre / np.linalg.norm(pre), rtol=0, atol=1e-15)
    np.testing.assert_allclose(got, [0.9939, 0.1104], rtol=0, atol=1e-4)


def test_update_follows_hard_assignment():
    rng = np.random.default_rng(10)
    bank = PrototypeBank(C=1, K=2, d=1, dim=6, mu=0.999, rng=rng)
    old = bank.p.copy()
    feats = unit_rows(rng, 3, 6)
    assign = np.array([[0.9, 0.2, 0.8], [0.1, 0.8, 0.2]])
    bank.update(0, 0, assign, feats)
    # re-derive with the convex-combination form of the update
    for k, rows in ((0, [0, 2]), (1, [1])):
        ibar = feats[rows].mean(axis=0)
        ibar /= np.linalg.norm(ibar)
        want = 0.999 * old[0, k, 0] + 0.001 * ibar
        want /= np.linalg.norm(want)
        np.testing.assert_allclose(bank.p[0, k, 0], want, rtol=0, atol=1e-12)


def test_update_skips_unassigned_prototypes():
    rng = np.random.default_rng(11)
    bank = PrototypeBank(C=1, K=3, d=1, dim=6, mu=0.999, rng=rng)
    old = bank.p.copy()
    feats = unit_rows(rng, 4, 6)
    assign = np.zeros((3, 4))
    assign[0] = 1.0  # every pixel argmaxes to prototype 0
    bank.update(0, 0, assign, feats)
    assert not np.array_equal(bank.p[0, 0, 0], old[0, 0, 0])
    np.testing.assert_array_equal(bank.p[0, 1, 0], old[0, 1, 0])
    np.testing.assert_array_equal(bank.p[0, 2, 0], old[0, 2, 0])


def test_update_shape_mismatch():
    bank = PrototypeBank(C=1, K=2, d=1, dim=4, rng=np.random.default_rng(12))
    with pytest.raises(ValueError, match="assignment shape"):
        bank.update(0, 0, np.ones((3, 2)), unit_rows(np.random.default_rng(0), 2, 4))


def test_norms_hold_over_10000_updates():
    rng = np.random.default_rng(13)
    bank = PrototypeBank(C=2, K=3, d=2, dim=8, mu=0.999, rng=rng)
    for _ in range(10000):
        c = int(rng.integers(2))
        b = int(rng.integers(2))
        feats = unit_rows(rng, 5, 8)
        assign = rng.uniform(0.0, 1.0, (3, 5))
        bank.update(c, b, assign, feats)
    norms = bank.norms()
    assert np.isfinite(bank.p).all()
    np.testing.assert_allclose(norms, 1.0, rtol=0, atol=1e-6)


def test_contrastive_equal_similarities_ln6():
    # C=2, K=3: positive + 5 negatives, all dots equal -> ln 6
    x = np.array([1.0, 0.0, 0.0, 0.0])
    others = np.array(
        [
            [0.0, 1.0, 0.0, 0.0],
            [0.0, -1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 0.0],
            [0.0, 0.0, -1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0],
        ]
    )
    positive = np.array([0.0, 0.0, 0.0, -1.0])
    loss = contrastive_loss(x, positive, others, tau=0.1)
    assert abs(float(loss.data) - np.log(6.0)) < 1e-9

    protos = np.concatenate([positive[None], others], axis=0)
    batch = batch_contrastive_loss(x[None], protos, [0], tau=0.1)
    assert abs(float(batch.data) - np.log(6.0)) < 1e-9


def test_contrastive_opposed_prototypes_tiny_loss():
    # x.p+ = 1, x.p- = -1, tau = 0.1 -> -log(e^10 / (e^10 + e^-10)) = log1p(e^-20)
    x = np.array([1.0, 0.0])
    loss = float(contrastive_loss(x, x.copy(), (-x)[None], tau=0.1).data)
    assert abs(loss - np.log1p(np.exp(-20.0))) < 1e-12
    assert abs(loss - 2.0612e-9) < 1e-12


def test_contrastive_empty_negatives_zero():
    x = np.array([1.0, 0.0])
    assert float(contrastive_loss(x, x.copy(), None, tau=0.1).data) == 0.0
    assert float(contrastive_loss(x, x.copy(), np.zeros((0, 2)), tau=0.1).data) == 0.0


def test_contrastive_decreasing_in_positive_similarity():
    x = np.array([1.0, 0.0])
    negatives = np.array([[0.0, 1.0]])
    losses = []
    for theta in np.linspace(1.2, 0.0, 9):
        pos = np.array([np.cos(theta), np.sin(theta)])
        losses.append(float(contrastive_loss(x, pos, negatives, tau=0.1).data))
    assert np.all(np.diff(losses) < 0.0)


def test_batch_matches_per_pixel_mean():
    rng = np.random.default_rng(14)
    feats = unit_rows(rng, 6, 8)
    protos = unit_rows(rng, 6, 8)  # C=2, K=3 flattened
    pos_idx = rng.integers(0, 6, size=6)
    batch = float(batch_contrastive_loss(feats, protos, pos_idx, tau=0.1).data)
    per_pixel = []
    for i in range(6):
        pos = protos[pos_idx[i]]
        neg = np.delete(protos, int(pos_idx[i]), axis=0)
        per_pixel.append(float(contrastive_loss(feats[i], pos, neg, tau=0.1).data))
    assert abs(batch - np.mean(per_pixel)) < 1e-12


def test_batch_contrastive_gradient_matches_fd():
    rng = np.random.default_rng(15)
    feats = unit_rows(rng, 3, 5)
    protos = unit_rows(rng, 4, 5)
    pos_idx = [0, 2, 3]

    t = Tensor(feats, requires_grad=True)
    backward(batch_contrastive_loss(t, protos, pos_idx, tau=0.1))
    h = 1e-5
    for i, j in ((0, 0), (1, 3), (2, 4)):
        bump = feats.copy()
        bump[i, j] += h
        hi = float(batch_contrastive_loss(bump, protos, pos_idx, tau=0.1).data)
        bump[i, j] -= 2 * h
        lo = float(batch_contrastive_loss(bump, protos, pos_idx, tau=0.1).data)
        num = (hi - lo) / (2 * h)
        assert abs(num - t.grad[i, j]) < 1e-4 * max(abs(num), abs(t.grad[i, j]), 1e-7)
