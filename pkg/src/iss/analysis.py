"""Frequency and colour-channel statistics of perturbations, plus PNG export."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from PIL import Image
from scipy.fft import dctn
from scipy.stats import spearmanr

from .dataset import to_byte


def dct2(plane: np.ndarray) -> np.ndarray:
    """Orthonormal 2-D type-II DCT over the last two axes."""
    return dctn(np.asarray(plane, dtype=np.float64), type=2, norm="ortho", axes=(-2, -1))


def high_freq_ratio(delta: np.ndarray, cutoff: int | None = None) -> float:
    """Share of non-DC spectral energy at indices with ``u + v >= cutoff``.

    ``delta`` is ``(H, W, C)`` (or ``(H, W)``) with ``H == W``; ``cutoff``
    defaults to ``H``.  Channels are averaged over those carrying any non-DC
    energy, and an all-constant input scores 0.
    """
    d = np.asarray(delta, dtype=np.float64)
    if d.ndim == 2:
        d = d[..., None]
    h, w = d.shape[:2]
    if h != w:
        raise ValueError(f"high_freq_ratio needs a square tensor, got {h}x{w}")
    cutoff = h if cutoff is None else cutoff
    energy = dct2(np.moveaxis(d, -1, 0)) ** 2
    energy[:, 0, 0] = 0.0
    u, v = np.indices((h, w))
    total = energy.sum(axis=(1, 2))
    high = energy[:, u + v >= cutoff].sum(axis=1)
    # relative threshold so float dust around a constant does not count as signal
    live = total > 1e-24 * max(1.0, float(np.sum(d * d)))
    if not live.any():
        return 0.0
    return float(np.mean(high[live] / total[live]))


def channel_spread(delta: np.ndarray) -> float:
    """Mean over pixels of the max-minus-min value across channels."""
    d = np.asarray(delta, dtype=np.float64)
    if d.shape[-1] != 3:
        raise ValueError(f"channel_spread needs 3 channels, got shape {d.shape}")
    return float(np.mean(d.max(axis=-1) - d.min(axis=-1)))


@dataclass
class SpectrumReport:
    method: str
    mean_high_freq_ratio: float
    mean_channel_spread: float
    per_image_ratios: list[float] = field(default_factory=list)
    per_image_spreads: list[float] = field(default_factory=list)


def spectrum_report(method: str, deltas: Iterable[np.ndarray]) -> SpectrumReport:
    ratios, spreads = [], []
    for d in deltas:
        ratios.append(high_freq_ratio(d))
        spreads.append(channel_spread(d) if np.shape(d)[-1] == 3 else 0.0)
    return SpectrumReport(
        method,
        float(np.mean(ratios)) if ratios else 0.0,
        float(np.mean(spreads)) if spreads else 0.0,
        ratios,
        spreads,
    )


def spectrum_csv(rows: Sequence[tuple[str, int, float, float]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["method", "seed", "ratio", "spread"])
    for method, seed, ratio, spread in rows:
        writer.writerow([method, seed, repr(float(ratio)), repr(float(spread))])
    return buf.getvalue()


def epoch_frequency_correlation(epochs: Sequence[int], mean_ratios: Sequence[float]) -> float:
    """Spearman rank correlation between surrogate epoch and mean ratio."""
    rho, _ = spearmanr(epochs, mean_ratios)
    return float(rho)


def rescale_delta(delta: np.ndarray) -> np.ndarray:
    """Affine map of a perturbation onto Byte range; constants map to 128."""
    d = np.asarray(delta, dtype=np.float64)
    lo, hi = d.min(), d.max()
    if hi == lo:
        return np.full(d.shape, 128, dtype=np.uint8)
    return np.floor((d - lo) / (hi - lo) * 255.0 + 0.5).astype(np.uint8)


def export_png(img: np.ndarray, rescale: bool | None = None) -> bytes:
    """Encode an ``(H, W, C)`` tensor as 8-bit RGB PNG bytes.

    Byte images are written as-is.  Floating tensors are treated as
    perturbations and rescaled to the full range unless ``rescale=False``, in
    which case they are read as Unit-domain images.
    """
    a = np.asarray(img)
    if rescale is None:
        rescale = a.dtype != np.uint8
    pixels = rescale_delta(a) if rescale else to_byte(a)
    if pixels.ndim == 2:
        pixels = pixels[..., None]
    if pixels.shape[-1] == 1:
        pixels = np.repeat(pixels, 3, axis=-1)
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def read_png(data: bytes) -> np.ndarray:
    return np.asarray(Image.open(io.BytesIO(data)).convert("RGB"))
