"""Retinex decomposition networks for low-light image enhancement, on a small numpy autodiff core."""

from .losses import LossWeights
from .model import (DecomNetConfig, DecomOutput, EnhanceNetConfig, WeightStore, decom_forward,
                    enhance_forward, init_weights, load_weights, save_weights)
from .pipeline import enhance_image, psnr, ssim

__all__ = [
    "DecomNetConfig", "DecomOutput", "EnhanceNetConfig", "LossWeights", "WeightStore",
    "decom_forward", "enhance_forward", "enhance_image", "init_weights", "load_weights",
    "psnr", "save_weights", "ssim",
]
