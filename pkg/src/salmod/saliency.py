"""Saliency maps: baselines, classical estimators, a quality-controlled
oracle, the NSS metric and map file I/O.

Maps are 2-D float arrays with values in [0, 1]. Images are ``[3, H, W]``
float arrays in [0, 1].
"""
from __future__ import annotations

import logging
from pathlib import Path

import numpy as np
from scipy import ndimage

from .netpbm import read_pnm, to_bytes, write_pnm

log = logging.getLogger(__name__)

SALIENCY_METHODS = ("white", "center", "itti_koch", "bms", "oracle")


class SaliencyError(ValueError):
    pass


def minmax(values: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant input maps to all zeros."""
    lo, hi = values.min(), values.max()
    if hi <= lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def resize_bilinear(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D array using pixel-centre alignment."""
    values = np.asarray(values, dtype=np.float64)
    h, w = values.shape
    if (h, w) == (height, width):
        return values.copy()
    rows = (np.arange(height) + 0.5) * (h / height) - 0.5
    cols = (np.arange(width) + 0.5) * (w / width) - 0.5
    grid = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(values, grid, order=1, mode="nearest")


def white_map(h: int, w: int) -> np.ndarray:
    if h < 1 or w < 1:
        raise SaliencyError(f"map size must be positive, got {h}x{w}")
    return np.ones((h, w))


def center_map(h: int, w: int, sigma_fraction: float = 0.25) -> np.ndarray:
    """Isotropic Gaussian centre prior with its peak scaled to 1."""
    if sigma_fraction <= 0:
        raise SaliencyError("sigma_fraction must be positive")
    sigma = sigma_fraction * min(h, w)
    y = np.arange(h) - (h - 1) / 2.0
    x = np.arange(w) - (w - 1) / 2.0
    d2 = y[:, None] ** 2 + x[None, :] ** 2
    g = np.exp(-d2 / (2.0 * sigma ** 2))
    return g / g.max()


def _pyramid(channel: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [channel]
    for _ in range(levels):
        pyr.append(ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")[::2, ::2])
    return pyr


# blur/resample roundoff on flat input leaves ~1e-16 residue; treat as no contrast
_CONTRAST_FLOOR = 1e-10


def _normalize_feature(fmap: np.ndarray) -> np.ndarray:
    # scale by max, then favour maps with few strong peaks over uniform ones
    peak = fmap.max()
    if peak <= _CONTRAST_FLOOR:
        return np.zeros_like(fmap)
    fmap = fmap / peak
    return fmap * (1.0 - fmap.mean()) ** 2


ITTI_CENTERS = (1, 2, 3)
ITTI_DELTA = 2


def itti_koch_map(image: np.ndarray) -> np.ndarray:
    """Reduced Itti-Koch model: centre-surround contrast of intensity and
    the R-G / B-Y opponent channels at three pyramid scales (no
    orientation channel)."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[0] != 3:
        raise SaliencyError(f"expected a [3,H,W] image, got {list(image.shape)}")
    _, h, w = image.shape
    coarsest = max(ITTI_CENTERS) + ITTI_DELTA
    if min(h, w) < 2 ** coarsest:
        raise SaliencyError(f"image {h}x{w} too small for a {coarsest}-level pyramid (need >= {2 ** coarsest})")
    r, g, b = image
    channels = {
        "intensity": (r + g + b) / 3.0,
        "rg": r - g,
        "by": b - (r + g) / 2.0,
    }
    out_h, out_w = _pyramid(np.zeros((h, w)), ITTI_CENTERS[0])[-1].shape
    conspicuity = []
    for chan in channels.values():
        pyr = _pyramid(chan, coarsest)
        acc = np.zeros((out_h, out_w))
        for c in ITTI_CENTERS:
            center = pyr[c]
            surround = resize_bilinear(pyr[c + ITTI_DELTA], *center.shape)
            fmap = _normalize_feature(np.abs(center - surround))
            acc += resize_bilinear(fmap, out_h, out_w)
        conspicuity.append(_normalize_feature(acc))
    combined = sum(conspicuity) / len(conspicuity)
    return minmax(resize_bilinear(combined, h, w))


def _surrounded(bmap: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(bmap)
    if count == 0:
        return np.zeros(bmap.shape)
    border = np.unique(np.concatenate([labels[0], labels[-1], labels[:, 0], labels[:, -1]]))
    return (bmap & ~np.isin(labels, border)).astype(np.float64)


def bms_map(image: np.ndarray, n_thresholds: int = 32, seed: int = 0) -> np.ndarray:
    """Boolean-map saliency: average surroundedness of randomly thresholded
    colour channels (each Boolean map and its complement)."""
    if n_thresholds < 1:
        raise SaliencyError("n_thresholds must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise SaliencyError(f"expected a [C,H,W] image, got {list(image.shape)}")
    rng = np.random.default_rng(seed)
    acc = np.zeros(image.shape[1:])
    for _ in range(n_thresholds):
        chan = image[rng.integers(image.shape[0])]
        t = rng.uniform(chan.min(), chan.max())
        bmap = chan > t
        acc += _surrounded(bmap) + _surrounded(~bmap)
    return minmax(acc / n_thresholds)


def oracle_map(mask: np.ndarray, quality: float, seed: int = 0, blur_sigma: float = 2.0) -> np.ndarray:
    """Blend of the blurred ground-truth mask (weight ``quality``) and seeded
    uniform noise, rescaled to [0, 1]."""
    if not 0.0 <= quality <= 1.0:
        raise SaliencyError(f"quality must lie in [0,1], got {quality}")
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise SaliencyError("oracle_map needs a nonempty mask")
    blurred = ndimage.gaussian_filter(mask.astype(np.float64), blur_sigma, mode="constant")
    blurred /= blurred.max()
    noise = np.random.default_rng(seed).random(mask.shape)
    return minmax(quality * blurred + (1.0 - quality) * noise)


def nss(saliency: np.ndarray, fixations) -> float:
    """Normalized scanpath saliency: mean z-score of the map at fixations.

    Uses the population standard deviation. A constant map scores 0.
    ``fixations`` holds ``(x, y)`` pixel coordinates.
    """
    saliency = np.asarray(saliency, dtype=np.float64)
    fix = np.asarray(fixations, dtype=np.int64).reshape(-1, 2)
    if len(fix) == 0:
        raise SaliencyError("nss needs at least one fixation")
    xs, ys = fix[:, 0], fix[:, 1]
    h, w = saliency.shape
    if xs.min() < 0 or ys.min() < 0 or xs.max() >= w or ys.max() >= h:
        raise SaliencyError("fixation outside the map")
    std = saliency.std()
    if std == 0:
        return 0.0
    z = (saliency - saliency.mean()) / std
    return float(z[ys, xs].mean())


def sample_fixations(mask: np.ndarray, n: int = 50, seed: int = 0) -> np.ndarray:
    """Up to ``n`` distinct foreground pixels as ``(x, y)`` rows."""
    ys, xs = np.nonzero(np.asarray(mask, dtype=bool))
    if len(xs) == 0:
        raise SaliencyError("cannot sample fixations from an empty mask")
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(xs), size=min(n, len(xs)), replace=False)
    pick.sort()
    return np.stack([xs[pick], ys[pick]], axis=1)


def save_map(saliency: np.ndarray, path) -> None:
    saliency = np.asarray(saliency, dtype=np.float64)
    if saliency.ndim != 2:
        raise SaliencyError(f"saliency map must be 2-D, got {saliency.shape}")
    write_pnm(path, to_bytes(saliency))


def load_map(path, shape: tuple[int, int] | None = None, normalize: bool = False) -> np.ndarray:
    """Read a P5 map. Mismatched sizes are resized bilinearly to ``shape``;
    ``normalize`` applies min-max rescaling (used for external maps)."""
    pixels = read_pnm(path)
    if pixels.ndim != 2:
        raise SaliencyError(f"{path}: saliency map must be a P5 graymap")
    values = pixels.astype(np.float64) / 255.0
    if shape is not None and values.shape != tuple(shape):
        log.warning("resized saliency map %s from %dx%d to %dx%d", Path(path).name, *values.shape, *shape)
        values = np.clip(resize_bilinear(values, *shape), 0.0, 1.0)
    if normalize:
        values = minmax(values)
    return values


def make_map(method: str, image: np.ndarray, mask: np.ndarray | None = None, *, quality: float = 1.0,
             seed: int = 0, sigma_fraction: float = 0.25, n_thresholds: int = 32) -> np.ndarray:
    """Dispatch to one of the built-in producers by name."""
    h, w = image.shape[1:]
    if method == "white":
        return white_map(h, w)
    if method == "center":
        return center_map(h, w, sigma_fraction)
    if method == "itti_koch":
        return itti_koch_map(image)
    if method == "bms":
        return bms_map(image, n_thresholds, seed)
    if method == "oracle":
        if mask is None:
            raise SaliencyError("oracle saliency needs a foreground mask")
        return oracle_map(mask, quality, seed)
    raise SaliencyError(f"unknown saliency method {method!r}")
