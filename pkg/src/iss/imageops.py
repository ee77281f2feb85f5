"""Compression countermeasures and augmentation baselines.

Every compression op takes Byte images shaped ``(..., H, W, C)`` and returns
Byte images of the same shape.  Rounding is round-half-up throughout, done in
integer arithmetic wherever the weights allow it so outputs are bit-exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .dataset import to_byte, to_unit


def _require_byte(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise TypeError(f"expected a Byte (uint8) image, got {img.dtype}")
    return img


def _require_rgb(img: np.ndarray) -> np.ndarray:
    img = _require_byte(img)
    if img.ndim < 3 or img.shape[-1] != 3:
        raise ValueError(f"expected 3 channels, got shape {img.shape}")
    return img


def _replicate(lum: np.ndarray) -> np.ndarray:
    return np.repeat(lum[..., None], 3, axis=-1).astype(np.uint8)


def grayscale(img: np.ndarray) -> np.ndarray:
    """ITU-R 601 luminance copied to all three channels."""
    x = _require_rgb(img).astype(np.int64)
    lum = (299 * x[..., 0] + 587 * x[..., 1] + 114 * x[..., 2] + 500) // 1000
    return _replicate(lum)


def channel_mean(img: np.ndarray) -> np.ndarray:
    x = _require_rgb(img).astype(np.int64)
    return _replicate((2 * x.sum(axis=-1) + 3) // 6)


def channel_copy(img: np.ndarray, channel: int) -> np.ndarray:
    if channel not in (0, 1, 2):
        raise ValueError(f"channel must be 0, 1 or 2, got {channel}")
    return _replicate(_require_rgb(img)[..., channel])


def bit_depth_reduce(img: np.ndarray, bits: int) -> np.ndarray:
    """Quantize each value to ``2**bits`` evenly spaced levels on [0, 255]."""
    if not 1 <= int(bits) <= 8:
        raise ValueError(f"bits must be in [1, 8], got {bits}")
    x = _require_byte(img).astype(np.int64)
    levels = 2 ** int(bits) - 1
    q = (2 * x * levels + 255) // 510
    return ((510 * q + levels) // (2 * levels)).astype(np.uint8)


# --- JPEG quantization round trip -------------------------------------------

LUMA_BASE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99,
]).reshape(8, 8)

CHROMA_BASE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
]).reshape(8, 8)


def quality_scale(quality: int) -> int:
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"JPEG quality must be in [1, 100], got {quality}")
    q = int(quality)
    return 5000 // q if q < 50 else 200 - 2 * q


def quant_table(base: np.ndarray, quality: int) -> np.ndarray:
    """IJG scaling of an Annex-K base table, clamped to baseline range."""
    scale = quality_scale(quality)
    return np.clip((np.asarray(base, dtype=np.int64) * scale + 50) // 100, 1, 255)


@lru_cache(maxsize=None)
def dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal type-II DCT basis; row ``u`` is frequency ``u``."""
    k = np.arange(n)
    m = np.cos(np.pi * (2 * k[None, :] + 1) * k[:, None] / (2 * n))
    m[0] *= np.sqrt(1.0 / n)
    m[1:] *= np.sqrt(2.0 / n)
    m.flags.writeable = False
    return m


def rgb_to_ycbcr(x: np.ndarray) -> np.ndarray:
    r, g, b = x[..., 0], x[..., 1], x[..., 2]
    y = 0.299 * r + 0.587 * g + 0.114 * b
    cb = 128.0 - 0.168736 * r - 0.331264 * g + 0.5 * b
    cr = 128.0 + 0.5 * r - 0.418688 * g - 0.081312 * b
    return np.stack([y, cb, cr], axis=-1)


def ycbcr_to_rgb(x: np.ndarray) -> np.ndarray:
    y, cb, cr = x[..., 0], x[..., 1] - 128.0, x[..., 2] - 128.0
    r = y + 1.402 * cr
    g = y - 0.344136 * cb - 0.714136 * cr
    b = y + 1.772 * cb
    return np.stack([r, g, b], axis=-1)


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def block_dct_roundtrip(plane: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Level-shifted 8x8 DCT, quantize/dequantize with ``table``, inverse DCT.

    ``plane`` is ``(..., H, W)`` with H and W multiples of 8.
    """
    *lead, h, w = plane.shape
    d = dct_matrix(8)
    blocks = (plane - 128.0).reshape(*lead, h // 8, 8, w // 8, 8)
    coef = np.einsum("ui,...aibj,vj->...aubv", d, blocks, d, optimize=True)
    t = table[:, None, :]
    coef = _round_half_away(coef / t) * t
    rec = np.einsum("ui,...aubv,vj->...aibj", d, coef, d, optimize=True)
    return rec.reshape(*lead, h, w) + 128.0


def jpeg(img: np.ndarray, quality: int = 10) -> np.ndarray:
    """Pixel-domain effect of baseline JPEG at ``quality`` with 4:4:4 sampling."""
    x = _require_rgb(img)
    luma = quant_table(LUMA_BASE, quality).astype(np.float64)
    chroma = quant_table(CHROMA_BASE, quality).astype(np.float64)
    h, w = x.shape[-3], x.shape[-2]
    ph, pw = -h % 8, -w % 8
    ycc = rgb_to_ycbcr(x.astype(np.float64))
    if ph or pw:
        pad = [(0, 0)] * (ycc.ndim - 3) + [(0, ph), (0, pw), (0, 0)]
        ycc = np.pad(ycc, pad, mode="edge")
    planes = np.moveaxis(ycc, -1, 0)
    out = np.stack([
        block_dct_roundtrip(planes[0], luma),
        block_dct_roundtrip(planes[1], chroma),
        block_dct_roundtrip(planes[2], chroma),
    ], axis=-1)[..., :h, :w, :]
    rgb = ycbcr_to_rgb(out)
    return np.floor(np.clip(rgb, 0.0, 255.0) + 0.5).astype(np.uint8)


# --- 3x3 smoothing ------------------------------------------------------------

def _windows(img: np.ndarray) -> np.ndarray:
    """(..., H, W, C) -> (..., H, W, C, 3, 3) reflect-padded neighbourhoods."""
    pad = [(0, 0)] * (img.ndim - 3) + [(1, 1), (1, 1), (0, 0)]
    padded = np.pad(img, pad, mode="reflect")
    return sliding_window_view(padded, (3, 3), axis=(-3, -2))


def gaussian_kernel(sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    d = np.arange(-1, 2)
    k = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma**2))
    return k / k.sum()


def smooth(img: np.ndarray, kind: str = "median", sigma: float = 0.1) -> np.ndarray:
    x = _require_byte(img)
    win = _windows(x.astype(np.int64))
    if kind == "mean":
        s = win.sum(axis=(-2, -1))
        return ((2 * s + 9) // 18).astype(np.uint8)
    if kind == "median":
        flat = win.reshape(*win.shape[:-2], 9)
        return np.sort(flat, axis=-1)[..., 4].astype(np.uint8)
    if kind == "gaussian":
        k = gaussian_kernel(sigma)
        v = np.einsum("...ij,ij->...", win.astype(np.float64), k)
        return np.floor(np.clip(v, 0, 255) + 0.5).astype(np.uint8)
    raise ValueError(f"unknown smoothing kind {kind!r}")


# --- CompressionOp --------------------------------------------------------------

_KINDS = ("identity", "gray", "jpeg", "bdr", "mean", "median", "gauss", "cmean", "ccopy", "compose")


@dataclass(frozen=True)
class CompressionOp:
    """A countermeasure applied to Byte images before training.

    ``param`` holds the JPEG quality, BDR bit count, Gaussian sigma or copied
    channel; ``ops`` holds the stages of a ``compose``.
    """

    kind: str
    param: float | int | None = None
    ops: tuple["CompressionOp", ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValueError(f"unknown compression op {self.kind!r}")
        p = self.param
        if self.kind == "jpeg" and not (isinstance(p, int) and 1 <= p <= 100):
            raise ValueError(f"jpeg quality must be an int in [1, 100], got {p!r}")
        if self.kind == "bdr" and not (isinstance(p, int) and 1 <= p <= 8):
            raise ValueError(f"bdr bits must be an int in [1, 8], got {p!r}")
        if self.kind == "gauss" and not (p is not None and p > 0):
            raise ValueError("gauss sigma must be positive")
        if self.kind == "ccopy" and p not in (0, 1, 2):
            raise ValueError(f"ccopy channel must be 0, 1 or 2, got {p!r}")
        if self.kind == "compose" and not self.ops:
            raise ValueError("compose needs at least one stage")

    def __call__(self, images: np.ndarray) -> np.ndarray:
        return apply_op(self, images)

    def __str__(self) -> str:
        if self.kind == "compose":
            return "+".join(str(o) for o in self.ops)
        if self.param is None:
            return self.kind
        return f"{self.kind}:{self.param:g}" if self.kind == "gauss" else f"{self.kind}:{self.param}"


IDENTITY = CompressionOp("identity")
GRAY = CompressionOp("gray")
JPEG10 = CompressionOp("jpeg", 10)
BDR2 = CompressionOp("bdr", 2)


def parse_op(text: str) -> CompressionOp:
    """Parse ``gray``, ``jpeg:10``, ``bdr:2``, ``gauss:0.1``, ``ccopy:0``, ``gray+jpeg:10``..."""
    text = text.strip()
    if "+" in text:
        return CompressionOp("compose", ops=tuple(parse_op(t) for t in text.split("+")))
    name, _, arg = text.partition(":")
    name = {"grayscale": "gray", "none": "identity", "gaussian": "gauss"}.get(name, name)
    defaults = {"jpeg": 10, "bdr": 2, "gauss": 0.1}
    if name in ("jpeg", "bdr", "ccopy"):
        return CompressionOp(name, int(arg) if arg else defaults.get(name))
    if name == "gauss":
        return CompressionOp(name, float(arg) if arg else defaults["gauss"])
    if arg:
        raise ValueError(f"op {name!r} takes no parameter")
    return CompressionOp(name)


def apply_op(op: CompressionOp | None, images: np.ndarray) -> np.ndarray:
    x = _require_byte(images)
    if op is None or op.kind == "identity":
        return x.copy()
    if op.kind == "gray":
        return grayscale(x)
    if op.kind == "jpeg":
        return jpeg(x, op.param)
    if op.kind == "bdr":
        return bit_depth_reduce(x, op.param)
    if op.kind in ("mean", "median"):
        return smooth(x, op.kind)
    if op.kind == "gauss":
        return smooth(x, "gaussian", op.param)
    if op.kind == "cmean":
        return channel_mean(x)
    if op.kind == "ccopy":
        return channel_copy(x, op.param)
    for stage in op.ops:
        x = apply_op(stage, x)
    return x


# --- augmentation baselines ------------------------------------------------------

def _one_hot(label, num_classes: int) -> np.ndarray:
    y = np.asarray(label, dtype=np.float64)
    if y.ndim == 0:
        out = np.zeros(num_classes)
        out[int(label)] = 1.0
        return out
    return y


def cutout(img: np.ndarray, rng: np.random.Generator, size: int = 8) -> np.ndarray:
    x = to_unit(img).copy()
    h, w = x.shape[-3], x.shape[-2]
    top = rng.integers(0, h - size + 1)
    left = rng.integers(0, w - size + 1)
    x[..., top:top + size, left:left + size, :] = 0.0
    return x


def random_box(rng: np.random.Generator, h: int, w: int, lam: float) -> tuple[int, int, int, int]:
    """CutMix box covering roughly ``1 - lam`` of the image, clipped at borders."""
    cut = np.sqrt(1.0 - lam)
    bh, bw = int(h * cut), int(w * cut)
    cy, cx = rng.integers(0, h), rng.integers(0, w)
    top, bottom = np.clip(cy - bh // 2, 0, h), np.clip(cy + bh // 2, 0, h)
    left, right = np.clip(cx - bw // 2, 0, w), np.clip(cx + bw // 2, 0, w)
    return int(top), int(left), int(bottom), int(right)


def augment(
    img: np.ndarray,
    label,
    kind: str,
    partner: tuple[np.ndarray, object] | None = None,
    seed: int | np.random.Generator = 0,
    num_classes: int = 10,
    lam: float | None = None,
    box: tuple[int, int, int, int] | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply Cutout, CutMix or Mixup to one example.

    Returns a Unit-domain image and a soft label vector.  ``lam`` and ``box``
    override the seeded draws (Beta(1, 1) mixing weight and CutMix box).
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    y = _one_hot(label, num_classes)
    if kind == "cutout":
        return cutout(img, rng), y
    if kind not in ("cutmix", "mixup"):
        raise ValueError(f"unknown augmentation {kind!r}")
    if partner is None:
        raise ValueError(f"{kind} needs a partner example")
    x = to_unit(img)
    px, plabel = to_unit(partner[0]), _one_hot(partner[1], num_classes)
    if kind == "mixup":
        lam = rng.beta(1.0, 1.0) if lam is None else lam
        return lam * x + (1.0 - lam) * px, lam * y + (1.0 - lam) * plabel
    h, w = x.shape[-3], x.shape[-2]
    if box is None:
        box = random_box(rng, h, w, rng.beta(1.0, 1.0) if lam is None else lam)
    top, left, bottom, right = box
    out = x.copy()
    out[..., top:bottom, left:right, :] = px[..., top:bottom, left:right, :]
    frac = (bottom - top) * (right - left) / float(h * w)
    return out, (1.0 - frac) * y + frac * plabel


def augment_batch(
    x: np.ndarray, y: np.ndarray, kind: str, rng: np.random.Generator, num_classes: int
) -> tuple[np.ndarray, np.ndarray]:
    """Batch version used by the trainer; partners are a seeded permutation."""
    soft = np.eye(num_classes)[y] if y.ndim == 1 else y
    if kind == "cutout":
        out = x.copy()
        for i in range(len(x)):
            out[i] = cutout(x[i], rng)
        return out, soft
    perm = rng.permutation(len(x))
    out, labels = np.empty_like(x), np.empty_like(soft)
    for i in range(len(x)):
        out[i], labels[i] = augment(x[i], soft[i], kind, (x[perm[i]], soft[perm[i]]), rng, num_classes)
    return out, labels
