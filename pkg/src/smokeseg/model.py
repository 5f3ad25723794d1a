"""Model assembly: branch fusion, decode head, and the loss stack.

Four operating modes cover the ablation ladder:

  common_only      just the band-mixing encoder
  band_split       common + band-isolated branch, plain average fusion
  feature_router   band_split + learned band weights on the isolated branch
  full             feature_router + prototype bank informing the band weights

Ground-truth masks enter only through the loss helpers; `forward` takes the
cube alone, so inference cannot read labels by construction.
"""

from collections import OrderedDict

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .encoder import Encoder, EncoderConfig, flatten_map
from .prototypes import PrototypeBank
from .router import AffineGate, dual_route, feature_route, apply_band_weights

CLASSES = 2
PROB_CLAMP = 1e-7


def fuse(x_com, x_mop):
    """Elementwise average of the two branches."""
    if x_com.shape != x_mop.shape:
        raise ValueError(f"fuse: shape mismatch {x_com.shape} vs {x_mop.shape}")
    return (x_com + x_mop) / 2.0


def bce_loss(prob, gt):
    """Mean binary cross-entropy of smoke probabilities against {0,1} labels.

    Probabilities are clamped to [1e-7, 1-1e-7] before the logs.
    """
    if prob.shape != gt.shape:
        raise ValueError(f"bce: shape mismatch {prob.shape} vs {tuple(gt.shape)}")
    y = Tensor(np.asarray(gt, dtype=np.float64))
    p = T.clip(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)
    ll = y * T.log(p) + (1.0 - y) * T.log(1.0 - p)
    return T.neg(ll.mean())


def total_loss(ce, lp, lam):
    """ce + lam * lp."""
    if lam < 0:
        raise ValueError(f"lambda must be >= 0, got {lam}")
    return ce + T.mul(lp, lam) if isinstance(lp, Tensor) else ce + lam * lp


class DecodeHead:
    """1x1 convolution from D channels to the 2 class logits, applied on flat pixels."""

    def __init__(self, D, rng):
        self.w = Tensor(rng.standard_normal((D, CLASSES)) * 0.02, requires_grad=True)
        self.b = Tensor(np.zeros(CLASSES), requires_grad=True)

    def __call__(self, flat):
        n = flat.shape[0]
        logits = T.matmul(flat, self.w)
        return logits + T.broadcast_to(T.reshape(self.b, (1, CLASSES)), (n, CLASSES))

    def params(self, prefix):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class SmokeModel:
    def __init__(self, d, D, K=3, mode="full", mu=0.999, proto_update="momentum", seed=0):
        if mode not in ("full", "feature_router", "band_split", "common_only"):
            raise ValueError(f"unknown mode {mode!r}")
        self.d = d
        self.D = D
        self.K = K
        self.C = CLASSES
        self.mode = mode
        self.proto_update = proto_update
        rng = np.random.default_rng(seed)
        cfg = EncoderConfig(d=d, D=D)
        self.enc_cfg = cfg
        self.stride = cfg.total_stride

        self.common = Encoder(cfg, groups=1, rng=rng)
        self.indi = Encoder(cfg, groups=d, rng=rng) if mode != "common_only" else None
        self.bank = (
            PrototypeBank(self.C, K, d, D // d, mu=mu, rng=rng) if mode == "full" else None
        )
        if mode == "full":
            per = D // d
            self.proto_gate = AffineGate((1 + self.C * K) * per, self.C * K, rng)
            self.feature_gate = AffineGate((1 + self.C) * D, d, rng)
        elif mode == "feature_router":
            self.proto_gate = None
            self.feature_gate = AffineGate(D, d, rng)
        else:
            self.proto_gate = None
            self.feature_gate = None
        self.head = DecodeHead(D, rng)

    def params(self):
        """Learnable tensors by name; prototypes appear only in gradient mode."""
        out = OrderedDict()
        parts = [("common", self.common)]
        if self.indi is not None:
            parts.append(("indi", self.indi))
        for name, enc in parts:
            for key, p in enc.params(name):
                out[key] = p
        if self.proto_gate is not None:
            for key, p in self.proto_gate.params("proto_gate"):
                out[key] = p
        if self.feature_gate is not None:
            for key, p in self.feature_gate.params("feature_gate"):
                out[key] = p
        for key, p in self.head.params("head"):
            out[key] = p
        if self.bank is not None and self.proto_update == "gradient":
            out["bank.p"] = self._bank_tensor()
        return out

    def _bank_tensor(self):
        if not hasattr(self, "_bank_param"):
            self._bank_param = Tensor(self.bank.p, requires_grad=True)
        return self._bank_param

    def forward(self, x):
        """Cube batch (B,h,w,d) -> dict with flat logits, smoke probability, and routing internals.

        Takes no labels: the prototype bank is read, never updated, here.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x)
        b, h, w, _ = x.shape
        x_com = flatten_map(self.common(x))
        out = {"B": b, "h": h, "w": w}
        beta = None
        x_indi = None
        if self.mode == "common_only":
            fused = x_com
        else:
            x_indi = flatten_map(self.indi(x))
            if self.mode == "band_split":
                fused = fuse(x_com, x_indi)
            elif self.mode == "feature_router":
                beta = feature_route(x_indi, None, self.feature_gate)
                fused = fuse(x_com, apply_band_weights(beta, x_indi, self.d))
            else:
                protos = (
                    self._bank_tensor()
                    if self.proto_update == "gradient"
                    else Tensor(self.bank.p)
                )
                x_mop, beta, alphas = dual_route(
                    x_indi, protos, self.proto_gate, self.feature_gate, self.d, self.C, self.K
                )
                out["alphas"] = alphas
                fused = fuse(x_com, x_mop)
        logits = self.head(fused)
        prob = T.narrow(T.softmax(logits, axis=-1), 1, 1, 1)
        n = logits.shape[0]
        out["logits"] = logits
        out["prob"] = T.reshape(prob, (n,))
        out["x_indi"] = x_indi
        out["beta"] = beta
        out["H"], out["W"] = self._feature_extent(h, w)
        return out

    def _feature_extent(self, h, w):
        hh, ww = h, w
        for s in self.enc_cfg.stage_strides:
            hh = (hh + 2 - 3) // s + 1
            ww = (ww + 2 - 3) // s + 1
        return hh, ww

    def predict_mask(self, x):
        """Hard smoke mask at input resolution (nearest-neighbor upsampling)."""
        out = self.forward(x)
        b, h, w = out["B"], out["h"], out["w"]
        hh, ww = out["H"], out["W"]
        prob = out["prob"].data.reshape(b, hh, ww)
        hard = (prob > 0.5).astype(np.uint8)
        up = np.repeat(np.repeat(hard, self.stride, axis=1), self.stride, axis=2)
        if up.shape[1] < h or up.shape[2] < w:
            raise ValueError(f"upsampled mask {up.shape[1:]}, smaller than input {(h, w)}")
        return up[:, :h, :w]

    def sync_prototypes(self):
        """Copy gradient-mode prototype parameters back into the bank and renormalize."""
        if self.bank is not None and self.proto_update == "gradient":
            self.bank.p = self._bank_param.data
            self.bank.renormalize()
            self._bank_param.data = self.bank.p


def downsample_labels(masks, hh, ww, stride):
    """Nearest-neighbor label reduction to the (hh, ww) feature grid (block-center sample)."""
    masks = np.asarray(masks)
    _, h, w = masks.shape
    ri = np.minimum(np.arange(hh) * stride + stride // 2, h - 1)
    ci = np.minimum(np.arange(ww) * stride + stride // 2, w - 1)
    return masks[:, ri[:, None], ci[None, :]]
