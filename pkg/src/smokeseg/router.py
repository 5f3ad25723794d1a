"""Dual-level routing: per-band prototype aggregation, then band weighting.

Stage one (prototype router) looks at a pixel's band features next to the
band's C*K prototypes and softmax-combines the K prototypes of each class
into one aggregated prototype per (class, band).  Stage two (feature
router) looks at the full per-pixel feature vector next to the aggregated
prototypes of all bands and emits a d-way simplex of band weights, which
are replicated D/d times and multiplied into the band-isolated features.
Both gates are single affine maps shared across pixels and bands.
"""

import numpy as np

from . import tensor as T
from .tensor import Tensor, as_tensor


class AffineGate:
    """One affine layer; callers softmax the logits."""

    def __init__(self, in_dim, out_dim, rng):
        w = rng.standard_normal((in_dim, out_dim)) * 0.02
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(out_dim), requires_grad=True)

    @classmethod
    def from_tensors(cls, w, b):
        gate = cls.__new__(cls)
        gate.w = w
        gate.b = b
        return gate

    def __call__(self, x):
        n = x.shape[0]
        out_dim = self.w.shape[1]
        logits = T.matmul(x, self.w)
        return logits + T.broadcast_to(T.reshape(self.b, (1, out_dim)), (n, out_dim))

    def params(self, prefix):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


def proto_route(x_band, band_protos, gate, C, K):
    """Aggregate band b's K prototypes per class, weighted per pixel.

    x_band: (N, D/d); band_protos: (C, K, D/d) tensor or array.  Returns
    (alpha, p_agg) with alpha (N, C, K) softmaxed over K and p_agg a list
    of C tensors (N, D/d), p_agg[c] = sum_k alpha[:,c,k] * p[c,k].
    """
    band_protos = as_tensor(band_protos)
    n, per = x_band.shape
    flat = T.reshape(band_protos, (1, C * K * per))
    gate_in = T.concat([x_band, T.broadcast_to(flat, (n, C * K * per))], axis=1)
    logits = T.reshape(gate(gate_in), (n, C, K))
    alpha = T.softmax(logits, axis=-1)
    p_agg = []
    for c in range(C):
        a_c = T.reshape(T.narrow(alpha, 1, c, 1), (n, K))
        p_c = T.reshape(T.narrow(band_protos, 0, c, 1), (K, per))
        p_agg.append(T.matmul(a_c, p_c))
    return alpha, p_agg


def feature_route(x_indi, p_concat, gate):
    """Band-importance simplex beta (N, d) from the full feature vector.

    p_concat (N, C*D) may be None for the prototype-free ablation, in which
    case the gate sees x_indi alone.
    """
    gate_in = x_indi if p_concat is None else T.concat([x_indi, p_concat], axis=1)
    return T.softmax(gate(gate_in), axis=-1)


def apply_band_weights(beta, x_indi, d):
    """x_MoP = Repeat(beta, D/d) * x_indi: each band weight scales its D/d channels."""
    n, dd = x_indi.shape
    if dd % d != 0:
        raise ValueError(f"feature dim {dd} not divisible by band count {d}")
    per = dd // d
    rep = T.reshape(T.broadcast_to(T.reshape(beta, (n, d, 1)), (n, d, per)), (n, dd))
    return T.mul(rep, x_indi)


def dual_route(x_indi, bank_protos, proto_gate, feature_gate, d, C, K):
    """Full two-stage routing of flat features (N, D) -> (N, D).

    bank_protos: (C, K, d, D/d) tensor or array.  Returns (x_mop, beta,
    alphas) where alphas[b] is band b's (N, C, K) aggregation weights.
    """
    bank_protos = as_tensor(bank_protos)
    n, dd = x_indi.shape
    per = dd // d
    alphas = []
    agg_by_class = [[] for _ in range(C)]
    for b in range(d):
        x_band = T.narrow(x_indi, 1, b * per, per)
        band_protos = T.reshape(T.narrow(bank_protos, 2, b, 1), (C, K, per))
        alpha, p_agg = proto_route(x_band, band_protos, proto_gate, C, K)
        alphas.append(alpha)
        for c in range(C):
            agg_by_class[c].append(p_agg[c])
    # classes outermost, bands ascending within each class
    p_concat = T.concat([T.concat(parts, axis=1) for parts in agg_by_class], axis=1)
    beta = feature_route(x_indi, p_concat, feature_gate)
    return apply_band_weights(beta, x_indi, d), beta, alphas
