"""Decompose -> adjust -> (denoise) -> reconstruct, plus PSNR/SSIM."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from . import numerics as nx
from .data import from_batch, to_batch
from .denoise import DenoiseConfig, denoise_reflectance
from .model import WeightStore, decom_forward, enhance_forward


@dataclass
class Enhanced:
    S_hat: np.ndarray  # H x W x 3
    R: np.ndarray      # H x W x 3, after denoising if it ran
    I: np.ndarray      # H x W
    I_hat: np.ndarray  # H x W


def _pad_to_multiple(img: np.ndarray, factor: int) -> tuple[np.ndarray, tuple[int, int]]:
    h, w = img.shape[:2]
    ph, pw = (-h) % factor, (-w) % factor
    if ph == 0 and pw == 0:
        return img, (h, w)
    return np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect"), (h, w)


def decompose_image(S: np.ndarray, w: WeightStore) -> tuple[np.ndarray, np.ndarray]:
    """Single H x W x 3 image -> (R: H x W x 3, I: H x W)."""
    with nx.no_grad():
        out = decom_forward(w, to_batch(S))
    return from_batch(out.R.data)[0], np.asarray(out.I.data[0, 0], dtype=np.float64)


def enhance_image(S_low: np.ndarray, w: WeightStore, denoise_cfg: DenoiseConfig | None = None,
                  bypass_adjustment: bool = False) -> Enhanced:
    """Enhance one H x W x 3 image in [0, 1].

    The image is reflect-padded to a multiple of 2^M for the Enhance-Net and
    cropped back. ``bypass_adjustment`` uses I in place of the adjusted map.
    """
    if not w or not w.subset("decom."):
        raise ValueError("weights have no Decom-Net parameters")
    if not bypass_adjustment and not w.subset("enhance."):
        raise ValueError("weights have no Enhance-Net parameters")
    S_low = np.asarray(S_low, dtype=np.float64)
    factor = 2 ** w.enhance_config.num_scales if not bypass_adjustment else 1
    padded, (h, wd) = _pad_to_multiple(S_low, factor)
    with nx.no_grad():
        dec = decom_forward(w, to_batch(padded))
        I_hat_t = dec.I if bypass_adjustment else enhance_forward(w, dec.R, dec.I)
    R = from_batch(dec.R.data)[0][:h, :wd]
    I = np.asarray(dec.I.data[0, 0], dtype=np.float64)[:h, :wd]
    I_hat = np.asarray(I_hat_t.data[0, 0], dtype=np.float64)[:h, :wd]
    if denoise_cfg is not None:
        R = denoise_reflectance(R, I, denoise_cfg)
    S_hat = np.clip(R * I_hat[..., None], 0.0, 1.0)
    return Enhanced(S_hat, R, I, I_hat)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """10 log10(1 / MSE); ``inf`` for identical images."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def _luma(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img
    return img @ np.array([0.299, 0.587, 0.114])


def _gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(correlate1d(x, g, axis=0, mode="constant"), g, axis=1, mode="constant")
    return out[r:-r, r:-r]


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Single-scale SSIM on BT.601 luma with an 11x11, sigma 1.5 Gaussian window."""
    x, y = _luma(a), _luma(b)
    if x.shape != y.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"ssim needs both extents >= 11, got {x.shape}")
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    g = _gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + c1) * (2 * sxy + c2)
    den = (mx * mx + my * my + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))
