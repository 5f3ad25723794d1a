"""Bit-exact file formats, synthetic planted-signal data, annotation consensus.

Formats:
  HSC1  hyperspectral cube: magic `HSC1`, u32le h, w, d, then h*w*d f32le
        values in band-major (band, row, col) order.
  PGM   binary masks: P5, maxval 255, pixel 255 <-> 1 and 0 <-> 0; any other
        value is rejected on read.
  MOPC  checkpoints: magic `MOPC`, u32le version, then repeated records of
        u32le name length, name bytes, u32le ndim, u32le extents, f32le data,
        until end of file.
"""

import dataclasses
import struct
from collections import OrderedDict

import numpy as np

_HSC_MAGIC = b"HSC1"
_CKPT_MAGIC = b"MOPC"
CKPT_VERSION = 1
_MAX_EXTENT = 2**31


class FormatError(ValueError):
    pass


# ---------------------------------------------------------------------------
# HSC1 cubes


def write_cube(path, cube):
    """Store a (d, h, w) float32 cube with values in [0, 1]."""
    cube = np.asarray(cube, dtype=np.float32)
    if cube.ndim != 3:
        raise FormatError(f"cube must be 3-d (band, row, col), got shape {cube.shape}")
    d, h, w = cube.shape
    if min(d, h, w) < 1:
        raise FormatError(f"cube extents must be >= 1, got {cube.shape}")
    if max(d, h, w) >= _MAX_EXTENT:
        raise FormatError(f"cube extent overflow: {cube.shape}")
    if not np.all(np.isfinite(cube)):
        raise FormatError("cube contains non-finite values")
    if cube.min() < 0.0 or cube.max() > 1.0:
        raise FormatError(f"cube values outside [0, 1]: min {cube.min()}, max {cube.max()}")
    with open(path, "wb") as fh:
        fh.write(_HSC_MAGIC)
        fh.write(struct.pack("<III", h, w, d))
        fh.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def read_cube(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _HSC_MAGIC:
        raise FormatError(f"{path}: not an HSC1 file")
    if len(blob) < 16:
        raise FormatError(f"{path}: truncated HSC1 header")
    h, w, d = struct.unpack("<III", blob[4:16])
    if min(h, w, d) < 1 or max(h, w, d) >= _MAX_EXTENT:
        raise FormatError(f"{path}: bad extents {(h, w, d)}")
    expect = 16 + 4 * h * w * d
    if len(blob) != expect:
        raise FormatError(f"{path}: expected {expect} bytes, found {len(blob)}")
    cube = np.frombuffer(blob, dtype="<f4", offset=16).reshape(d, h, w).copy()
    if not np.all(np.isfinite(cube)):
        raise FormatError(f"{path}: cube contains non-finite values")
    if cube.min() < 0.0 or cube.max() > 1.0:
        raise FormatError(f"{path}: cube values outside [0, 1]")
    return cube


# ---------------------------------------------------------------------------
# P5 PGM masks


def write_mask(path, mask):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise FormatError(f"mask must be 2-d, got shape {mask.shape}")
    vals = np.unique(mask)
    if not np.all(np.isin(vals, (0, 1))):
        raise FormatError(f"mask values must be 0/1, got {vals}")
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write((mask.astype(np.uint8) * 255).tobytes())


def _pgm_tokens(blob):
    """Header tokens of a PGM, skipping whitespace and # comments."""
    i = 0
    tokens = []
    while len(tokens) < 4 and i < len(blob):
        c = blob[i : i + 1]
        if c.isspace():
            i += 1
        elif c == b"#":
            while i < len(blob) and blob[i : i + 1] != b"\n":
                i += 1
        else:
            j = i
            while j < len(blob) and not blob[j : j + 1].isspace():
                j += 1
            tokens.append(blob[i:j])
            i = j
    return tokens, i + 1  # payload starts after the single whitespace ending maxval


def read_mask(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, offset = _pgm_tokens(blob)
    if len(tokens) != 4 or tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary (P5) PGM")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if maxval != 255:
        raise FormatError(f"{path}: expected maxval 255, got {maxval}")
    if min(h, w) < 1:
        raise FormatError(f"{path}: bad extents {(h, w)}")
    payload = blob[offset : offset + h * w]
    if len(payload) != h * w:
        raise FormatError(f"{path}: expected {h * w} pixels, found {len(payload)}")
    img = np.frombuffer(payload, dtype=np.uint8).reshape(h, w)
    bad = ~np.isin(img, (0, 255))
    if bad.any():
        raise FormatError(f"{path}: non-binary mask (pixel value {int(img[bad][0])})")
    return (img == 255).astype(np.uint8)


def write_band_mean_pgm(path, cube):
    """8-bit grayscale preview: arithmetic mean across all spectral bands."""
    cube = np.asarray(cube)
    gray = np.clip(np.rint(cube.mean(axis=0) * 255.0), 0, 255).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


# ---------------------------------------------------------------------------
# MOPC checkpoints


def save_checkpoint(path, tensors):
    """Write an ordered name -> array mapping as float32."""
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f4")
            enc = name.encode("utf-8")
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: not a MOPC checkpoint")
    if len(blob) < 8:
        raise FormatError(f"{path}: truncated checkpoint header")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    tensors = OrderedDict()
    i = 8
    while i < len(blob):
        if i + 4 > len(blob):
            raise FormatError(f"{path}: truncated tensor record")
        (name_len,) = struct.unpack("<I", blob[i : i + 4])
        i += 4
        if name_len == 0 or i + name_len > len(blob):
            raise FormatError(f"{path}: truncated tensor name")
        name = blob[i : i + name_len].decode("utf-8")
        i += name_len
        if i + 4 > len(blob):
            raise FormatError(f"{path}: truncated tensor rank")
        (ndim,) = struct.unpack("<I", blob[i : i + 4])
        i += 4
        if ndim > 8 or i + 4 * ndim > len(blob):
            raise FormatError(f"{path}: bad tensor rank {ndim}")
        shape = struct.unpack(f"<{ndim}I", blob[i : i + 4 * ndim])
        i += 4 * ndim
        count = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        if i + 4 * count > len(blob):
            raise FormatError(f"{path}: truncated tensor data for {name!r}")
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=i).reshape(shape).copy()
        i += 4 * count
        tensors[name] = arr
    return tensors


# ---------------------------------------------------------------------------
# synthetic planted-signal data


@dataclasses.dataclass
class SynthSpec:
    h: int = 64
    w: int = 64
    d: int = 8
    informative: tuple = (2, 5)
    blob_count: tuple = (1, 2)
    blob_radius: tuple = (12.0, 20.0)
    blob_opacity: tuple = (0.25, 0.40)
    background: tuple = (0.15, 0.55)
    noise: float = 0.02
    distractor_count: tuple = (0, 0)
    seed: int = 0

    def validate(self):
        if min(self.h, self.w, self.d) < 1:
            raise ValueError(f"extents must be >= 1, got {(self.h, self.w, self.d)}")
        if len(self.informative) == 0:
            raise ValueError("informative band set is empty")
        for b in self.informative:
            if not 0 <= b < self.d:
                raise ValueError(f"informative band {b} outside [0, {self.d})")
        if not 0 < self.blob_radius[0] <= self.blob_radius[1]:
            raise ValueError(f"bad radius range {self.blob_radius}")
        if 2 * self.blob_radius[1] >= min(self.h, self.w):
            raise ValueError(f"radius {self.blob_radius[1]} too large for a {self.h}x{self.w} frame")
        if not 0 <= self.blob_count[0] <= self.blob_count[1]:
            raise ValueError(f"bad blob count range {self.blob_count}")
        if self.noise < 0:
            raise ValueError(f"noise must be >= 0, got {self.noise}")
        return self


def _disk_field(rng, spec, count_range):
    """Max-composited flat disks: opacity inside the disk, 0 outside.

    Centers are kept a radius away from the border so every disk is whole,
    which keeps the planted area within analytic bounds.
    """
    field = np.zeros((spec.h, spec.w))
    lo, hi = count_range
    count = int(rng.integers(lo, hi + 1))
    yy, xx = np.mgrid[0 : spec.h, 0 : spec.w]
    for _ in range(count):
        r = rng.uniform(*spec.blob_radius)
        cy = rng.uniform(r, spec.h - 1 - r)
        cx = rng.uniform(r, spec.w - 1 - r)
        op = rng.uniform(*spec.blob_opacity)
        disk = ((yy - cy) ** 2 + (xx - cx) ** 2) <= r * r
        field = np.maximum(field, op * disk)
    return field


def synth_sample(spec, index):
    """One (cube, mask) pair; fully determined by (spec.seed, index)."""
    rng = np.random.default_rng((spec.seed, index))
    bg = rng.uniform(spec.background[0], spec.background[1], size=spec.d)
    smoke = _disk_field(rng, spec, spec.blob_count)
    distract = _disk_field(rng, spec, spec.distractor_count)
    cube = np.empty((spec.d, spec.h, spec.w))
    informative = set(spec.informative)
    for b in range(spec.d):
        cube[b] = bg[b] + (smoke if b in informative else distract)
    if spec.noise > 0:
        cube += rng.normal(0.0, spec.noise, size=cube.shape)
    cube = np.clip(cube, 0.0, 1.0).astype(np.float32)
    mask = (smoke > 0).astype(np.uint8)
    return cube, mask


def synth_generate(spec, n):
    """n deterministic planted-signal samples: smoke disks live only in the informative bands."""
    if n < 1:
        raise ValueError(f"sample count must be >= 1, got {n}")
    spec.validate()
    return [synth_sample(spec, i) for i in range(n)]


# ---------------------------------------------------------------------------
# annotation consensus


def _check_triple(masks):
    if len(masks) != 3:
        raise ValueError(f"expected exactly 3 annotations, got {len(masks)}")
    shapes = {m.shape for m in masks}
    if len(shapes) != 1:
        raise ValueError(f"annotation extents differ: {sorted(shapes)}")
    for m in masks:
        vals = np.unique(m)
        if not np.all(np.isin(vals, (0, 1))):
            raise ValueError(f"annotation values must be 0/1, got {vals}")


def majority_vote(masks):
    """Pixelwise two-of-three vote over an annotation triple."""
    masks = [np.asarray(m) for m in masks]
    _check_triple(masks)
    votes = masks[0].astype(np.int64) + masks[1] + masks[2]
    return (votes >= 2).astype(np.uint8)


@dataclasses.dataclass
class AgreementStats:
    unanimous: float      # 3/3 pixels over the union
    majority_only: float  # exactly 2/3
    single_only: float    # exactly 1/3
    gt_from_unanimous: float  # share of GT pixels marked by all three
    gt_from_majority: float   # share of GT pixels marked by exactly two

    def lines(self):
        return [
            f"unanimous (3/3):      {100.0 * self.unanimous:.2f}%",
            f"majority-only (2/3):  {100.0 * self.majority_only:.2f}%",
            f"single-only (1/3):    {100.0 * self.single_only:.2f}%",
            f"GT from unanimous:    {100.0 * self.gt_from_unanimous:.2f}%",
            f"GT from majority:     {100.0 * self.gt_from_majority:.2f}%",
        ]


def agreement_stats(annotation_sets):
    """Consensus fractions pooled over a list of annotation triples.

    Fractions are over pixels marked by at least one annotator; the GT
    composition splits majority-vote pixels into 3/3 and 2/3 origins.  A GT
    with no pixels reports composition (0, 0).
    """
    if not annotation_sets:
        raise ValueError("no annotation sets given")
    n1 = n2 = n3 = 0
    for masks in annotation_sets:
        masks = [np.asarray(m) for m in masks]
        _check_triple(masks)
        votes = masks[0].astype(np.int64) + masks[1] + masks[2]
        n1 += int((votes == 1).sum())
        n2 += int((votes == 2).sum())
        n3 += int((votes == 3).sum())
    union = n1 + n2 + n3
    if union == 0:
        raise ValueError("empty union: no pixel marked by any annotator")
    gt = n2 + n3
    return AgreementStats(
        unanimous=n3 / union,
        majority_only=n2 / union,
        single_only=n1 / union,
        gt_from_unanimous=n3 / gt if gt else 0.0,
        gt_from_majority=n2 / gt if gt else 0.0,
    )
