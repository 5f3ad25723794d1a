"""Dual-branch convolutional encoders.

Both branches share one four-stage architecture: a strided 3x3 embedding
conv per stage followed by pre-norm residual blocks.  The individual branch
runs every conv and every normalization with channel groups equal to the
band count, so band b's output channels are a function of band b's input
alone; the common branch is the same stack with groups=1 and mixes bands
freely.  Stage widths grow as (1, 2, 5, 8) channels per band and the final
1x1 projection lifts them to D/d per band, which reproduces the
(25, 50, 125, 200) -> 250 plan at d=25.
"""

import dataclasses

import numpy as np

from . import tensor as T
from .tensor import Tensor

STAGE_MULTS = (1, 2, 5, 8)


@dataclasses.dataclass
class EncoderConfig:
    d: int
    D: int = 250
    stage_depths: tuple = (2, 2, 2, 2)
    stage_strides: tuple = (2, 2, 1, 1)

    def __post_init__(self):
        if self.d < 1:
            raise ValueError(f"band count must be >= 1, got {self.d}")
        if self.D % self.d != 0:
            raise ValueError(f"feature dim {self.D} not divisible by band count {self.d}")
        if len(self.stage_depths) != len(STAGE_MULTS) or len(self.stage_strides) != len(STAGE_MULTS):
            raise ValueError("expected one depth and one stride per stage")

    @property
    def stage_channels(self):
        return tuple(m * self.d for m in STAGE_MULTS)

    @property
    def total_stride(self):
        s = 1
        for st in self.stage_strides:
            s *= st
        return s


def he_normal(rng, shape, fan_in):
    return rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)


class Conv2d:
    def __init__(self, cin, cout, k, groups=1, stride=1, rng=None, zero_init=False):
        if cin % groups or cout % groups:
            raise ValueError(f"channels ({cin}->{cout}) not divisible by groups {groups}")
        self.groups = groups
        self.stride = stride
        self.padding = k // 2
        shape = (k, k, cin // groups, cout)
        if zero_init:
            w = np.zeros(shape)
        else:
            w = he_normal(rng, shape, k * k * (cin // groups))
        self.w = Tensor(w, requires_grad=True)
        self.b = Tensor(np.zeros(cout), requires_grad=True)

    def __call__(self, x):
        return T.grouped_conv2d(
            x, self.w, self.b, groups=self.groups, stride=self.stride, padding=self.padding
        )

    def params(self, prefix):
        yield prefix + ".w", self.w
        yield prefix + ".b", self.b


class BlockNorm:
    """Normalization over (H, W, channel-block) with per-channel affine.

    One block per band in the individual branch (statistics never cross a
    band boundary), a single block in the common branch.  Statistics span
    the spatial extent, so one-channel blocks stay well-conditioned.
    """

    def __init__(self, channels, blocks, eps=1e-5):
        if channels % blocks:
            raise ValueError(f"{channels} channels not divisible into {blocks} blocks")
        self.blocks = blocks
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.shift = Tensor(np.zeros(channels), requires_grad=True)

    @classmethod
    def from_tensors(cls, gamma, shift, blocks, eps=1e-5):
        norm = cls.__new__(cls)
        norm.blocks = blocks
        norm.eps = eps
        norm.gamma = gamma
        norm.shift = shift
        return norm

    def __call__(self, x):
        b, h, w, c = x.shape
        cb = c // self.blocks
        xr = T.reshape(x, (b, h, w, self.blocks, cb))
        m = xr.mean(axis=(1, 2, 4), keepdims=True)
        centered = xr - T.broadcast_to(m, xr.shape)
        var = (centered * centered).mean(axis=(1, 2, 4), keepdims=True)
        scale = T.broadcast_to(T.sqrt(var + self.eps), xr.shape)
        normed = centered / scale
        g = T.broadcast_to(T.reshape(self.gamma, (1, 1, 1, self.blocks, cb)), xr.shape)
        s = T.broadcast_to(T.reshape(self.shift, (1, 1, 1, self.blocks, cb)), xr.shape)
        return T.reshape(normed * g + s, (b, h, w, c))

    def params(self, prefix):
        yield prefix + ".gamma", self.gamma
        yield prefix + ".shift", self.shift


class ResidualBlock:
    """x + proj(gelu(conv3x3(norm(x)))), channel-preserving; proj starts at zero so the block opens as identity."""

    def __init__(self, channels, groups, rng):
        self.norm = BlockNorm(channels, groups)
        self.conv = Conv2d(channels, channels, 3, groups=groups, rng=rng)
        self.proj = Conv2d(channels, channels, 1, groups=groups, rng=rng, zero_init=True)

    def __call__(self, x):
        return x + self.proj(T.gelu(self.conv(self.norm(x))))

    def params(self, prefix):
        yield from self.norm.params(prefix + ".norm")
        yield from self.conv.params(prefix + ".conv")
        yield from self.proj.params(prefix + ".proj")


class Encoder:
    def __init__(self, cfg: EncoderConfig, groups, rng):
        if groups not in (1, cfg.d):
            raise ValueError(f"groups must be 1 (common) or d={cfg.d} (individual), got {groups}")
        self.cfg = cfg
        self.groups = groups
        self.stages = []
        cin = cfg.d
        for cout, depth, stride in zip(cfg.stage_channels, cfg.stage_depths, cfg.stage_strides):
            embed = Conv2d(cin, cout, 3, groups=groups, stride=stride, rng=rng)
            blocks = [ResidualBlock(cout, groups, rng) for _ in range(depth)]
            self.stages.append((embed, blocks))
            cin = cout
        self.final_norm = BlockNorm(cin, groups)
        self.proj = Conv2d(cin, cfg.D, 1, groups=groups, rng=rng)

    def __call__(self, x):
        """(B,h,w,d) -> (B, h/s, w/s, D) for total stride s."""
        if x.shape[-1] != self.cfg.d:
            raise ValueError(f"expected {self.cfg.d} bands, got {x.shape[-1]}")
        for embed, blocks in self.stages:
            x = embed(x)
            for blk in blocks:
                x = blk(x)
        return self.proj(self.final_norm(x))

    def params(self, prefix):
        for i, (embed, blocks) in enumerate(self.stages):
            yield from embed.params(f"{prefix}.stage{i}.embed")
            for j, blk in enumerate(blocks):
                yield from blk.params(f"{prefix}.stage{i}.block{j}")
        yield from self.final_norm.params(prefix + ".final_norm")
        yield from self.proj.params(prefix + ".proj")


def flatten_map(fm):
    """(B,H,W,D) feature map -> (B*H*W, D) matrix, pixels in (b, row, col) order."""
    b, h, w, dd = fm.shape
    return T.reshape(fm, (b * h * w, dd))


def band_view(flat, b, d):
    """Columns [b*D/d, (b+1)*D/d) of the flat matrix: band b's channels."""
    n, dd = flat.shape
    per = dd // d
    return T.narrow(flat, 1, b * per, per)


def unflatten_map(flat, b, h, w):
    n, dd = flat.shape
    if n != b * h * w:
        raise ValueError(f"cannot fold {n} rows into {b}x{h}x{w}")
    return T.reshape(flat, (b, h, w, dd))
