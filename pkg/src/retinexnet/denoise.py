"""Illumination-relative denoising of reflectance.

A non-local-means filter supplies the fully denoised image; it is blended
back per pixel with weight (1 - I)^p so dark regions get the most filtering.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import uniform_filter


@dataclass(frozen=True)
class DenoiseConfig:
    base_strength: float = 0.1
    window: int = 3
    search: int = 7
    illumination_exponent: float = 1.0

    def __post_init__(self):
        if self.window < 1 or self.search < 1:
            raise ValueError("window and search radii must be >= 1")
        if self.base_strength < 0 or self.illumination_exponent < 0:
            raise ValueError("strengths must be nonnegative")


def base_denoiser(img: np.ndarray, h: float, cfg: DenoiseConfig | None = None) -> np.ndarray:
    """Non-local means on an H x W x C image.

    The patch distance is the mean squared difference over a
    (2*window+1)^2 patch and all channels; weights are exp(-d^2 / h^2).
    """
    cfg = cfg or DenoiseConfig()
    img = np.asarray(img, dtype=np.float64)
    h2 = h * h
    # h*h underflows for subnormal h; the h -> 0 limit is the identity
    if h2 == 0:
        return img.copy()
    hh, ww = img.shape[:2]
    s = cfg.search
    padded = np.pad(img, ((s, s), (s, s), (0, 0)), mode="reflect")
    acc = np.zeros_like(img)
    wsum = np.zeros((hh, ww, 1))
    size = 2 * cfg.window + 1
    for dy in range(-s, s + 1):
        for dx in range(-s, s + 1):
            shifted = padded[s + dy:s + dy + hh, s + dx:s + dx + ww]
            diff = shifted - img
            d2 = uniform_filter((diff ** 2).mean(axis=2), size=size, mode="reflect")
            with np.errstate(over="ignore"):  # d2 / h2 -> inf gives weight 0, as intended
                weight = np.exp(-np.maximum(d2, 0.0) / h2)[..., None]
            # accumulate offsets from the centre pixel: constant regions stay exact
            acc += weight * diff
            wsum += weight
    return img + acc / wsum


def illumination_weight(I_low: np.ndarray, exponent: float) -> np.ndarray:
    return np.power(1.0 - np.asarray(I_low, dtype=np.float64), exponent)


def denoise_reflectance(R: np.ndarray, I_low: np.ndarray, cfg: DenoiseConfig | None = None) -> np.ndarray:
    """Blend ``R`` with its denoised version by (1 - I_low)^p.

    ``R`` is H x W x 3, ``I_low`` is H x W or H x W x 1.
    """
    cfg = cfg or DenoiseConfig()
    R = np.asarray(R, dtype=np.float64)
    I_low = np.asarray(I_low, dtype=np.float64)
    if I_low.ndim == 3:
        I_low = I_low[..., 0]
    if I_low.shape != R.shape[:2]:
        raise ValueError(f"illumination {I_low.shape} does not match reflectance {R.shape[:2]}")
    w = illumination_weight(I_low, cfg.illumination_exponent)[..., None]
    if not np.any(w):
        return R.copy()
    full = base_denoiser(R, cfg.base_strength, cfg)
    return np.clip((1.0 - w) * R + w * full, 0.0, 1.0)
