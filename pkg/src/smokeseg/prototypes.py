"""Band-level prototypes: Sinkhorn matching, momentum updates, contrastive loss.

Each (class, band) pair owns K unit-norm prototype vectors of dimension
D/d.  Pixels are matched to prototypes by entropy-regularized optimal
transport (Sinkhorn-Knopp over the cosine-similarity matrix), prototypes
track the assigned pixels by an exponential moving average, and a
contrastive loss pulls each pixel toward its assigned prototype within the
band while pushing it from the band's other prototypes.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor


class EmptyClassError(ValueError):
    """A class has no pixels in the batch; skip its assignment, update, and loss."""


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) with draws beyond two standard deviations rejected."""
    out = rng.standard_normal(shape) * std
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum())) * std
        bad = np.abs(out) > 2.0 * std
    return out


def sinkhorn_assign(P, X, eps, iters):
    """Assignment matrix M (K x N) from prototypes P (dim x K) and features X (N x dim).

    M = exp(P^T X / eps) scaled to unit total mass, then `iters` rounds of
    row-normalize, divide by K, column-normalize, divide by N, and a final
    multiply by N so every column sums to 1.  Differentiable in P and X.
    """
    P = as_tensor(P)
    X = as_tensor(X)
    n = X.shape[0]
    if n == 0:
        raise EmptyClassError("no pixels to assign")
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    k = P.shape[1]
    scores = T.transpose(T.matmul(X, P), (1, 0))  # (K, N)
    M = T.exp(scores / eps)
    total = M.sum(axis=(0, 1), keepdims=True)
    M = M / T.broadcast_to(total, M.shape)
    for _ in range(iters):
        rows = M.sum(axis=1, keepdims=True)
        M = M / T.broadcast_to(rows, M.shape)
        M = M / float(k)
        cols = M.sum(axis=0, keepdims=True)
        M = M / T.broadcast_to(cols, M.shape)
        M = M / float(n)
    return M * float(n)


def contrastive_loss(pixel, positive, negatives, tau):
    """-log softmax score of the positive prototype among positive + negatives.

    All similarity logits are divided by the temperature tau.  With no
    negatives the loss is defined as 0.
    """
    pixel = as_tensor(pixel)
    positive = as_tensor(positive)
    if negatives is None or (hasattr(negatives, "shape") and negatives.shape[0] == 0) or (
        isinstance(negatives, (list, tuple)) and len(negatives) == 0
    ):
        return Tensor(0.0)
    negatives = as_tensor(negatives)
    col = T.reshape(pixel, (pixel.size, 1))
    s_pos = T.matmul(T.reshape(positive, (1, positive.size)), col)  # (1,1)
    s_neg = T.matmul(negatives, col)  # (M,1)
    logits = T.transpose(T.concat([s_pos, s_neg], axis=0), (1, 0)) / tau  # (1, 1+M)
    logp = T.log_softmax(logits, axis=-1)
    return T.reshape(T.neg(T.narrow(logp, 1, 0, 1)), ())


def batch_contrastive_loss(feats, protos, pos_idx, tau):
    """Mean contrastive loss over N pixels of one band.

    feats: (N, dim) unit-norm pixel embeddings; protos: (C*K, dim) the
    band's full prototype list; pos_idx[i] indexes each pixel's assigned
    prototype.  Every other prototype of the band acts as a negative, which
    makes the per-pixel loss -log_softmax(sims/tau)[pos].
    """
    feats = as_tensor(feats)
    protos = as_tensor(protos)
    n, _ = feats.shape
    sims = T.matmul(feats, T.transpose(protos, (1, 0)))  # (N, C*K)
    logp = T.log_softmax(sims / tau, axis=-1)
    onehot = np.zeros(sims.shape)
    onehot[np.arange(n), np.asarray(pos_idx, dtype=np.intp)] = 1.0
    picked = T.mul(logp, Tensor(onehot)).sum()
    return T.neg(picked) / float(n)


class PrototypeBank:
    """K unit-norm prototypes per (class, band); EMA-updated, outside the gradient path by default."""

    def __init__(self, C, K, d, dim, mu=0.999, rng=None):
        if K < 1:
            raise ValueError(f"K must be >= 1, got {K}")
        if not 0.0 <= mu < 1.0:
            raise ValueError(f"mu must be in [0, 1), got {mu}")
        self.C = C
        self.K = K
        self.d = d
        self.dim = dim
        self.mu = mu
        if rng is None:
            rng = np.random.default_rng(0)
        p = trunc_normal(rng, (C, K, d, dim))
        p /= np.linalg.norm(p, axis=-1, keepdims=True)
        self.p = p

    def band(self, b):
        """(C, K, dim) prototype block of band b."""
        return self.p[:, :, b, :]

    def band_flat(self, b):
        """(C*K, dim) prototype list of band b, classes outermost."""
        return self.p[:, :, b, :].reshape(self.C * self.K, self.dim)

    def assign(self, c, b, feats, eps, iters):
        """Sinkhorn assignment of (N, dim) unit features to band b's class-c prototypes."""
        if feats.shape[0] == 0:
            raise EmptyClassError(f"class {c} has no pixels in this batch")
        P = self.p[c, :, b, :].T  # (dim, K)
        return sinkhorn_assign(P, feats, eps, iters).data

    def update(self, c, b, assign, feats):
        """EMA step toward the mean of hard-assigned pixels (Sinkhorn column argmax).

        p <- p + (1-mu) * (ibar - p), then renormalized; algebraically
        mu*p + (1-mu)*ibar, written so that ibar == p moves p by exactly
        zero.  Prototypes with no assigned pixels keep their value bitwise,
        and a zero-length mean (cancelling features) is skipped too.
        """
        if assign.shape != (self.K, feats.shape[0]):
            raise ValueError(f"assignment shape {assign.shape} does not match K={self.K}, N={feats.shape[0]}")
        hard = np.argmax(assign, axis=0)
        one_minus_mu = 1.0 - self.mu
        for k in range(self.K):
            sel = feats[hard == k]
            if sel.shape[0] == 0:
                continue
            ibar = sel.mean(axis=0)
            norm = np.linalg.norm(ibar)
            if norm == 0.0:
                continue
            ibar = ibar / norm
            p = self.p[c, k, b]
            cand = p + one_minus_mu * (ibar - p)
            if np.array_equal(cand, p):
                continue
            self.p[c, k, b] = cand / np.linalg.norm(cand)

    def renormalize(self):
        """Force unit norms; used after gradient-mode optimizer steps."""
        self.p /= np.linalg.norm(self.p, axis=-1, keepdims=True) + 1e-12

    def norms(self):
        return np.linalg.norm(self.p, axis=-1)
