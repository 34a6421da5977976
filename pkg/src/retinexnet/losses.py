"""Training objectives for decomposition and illumination adjustment.

All norms are means of absolute values, so coefficients do not depend on
patch or batch size.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import Tensor

LOW, NORMAL = 0, 1


@dataclass
class LossWeights:
    lambda_ir: float = 0.001
    lambda_is: float = 0.1
    lambda_g: float = 10.0
    # indexed [i][j] with 0 = low, 1 = normal
    lambda_ij: list[list[float]] = field(default_factory=lambda: [[1.0, 0.001], [0.001, 1.0]])
    stop_weight_gradient: bool = False

    def __post_init__(self):
        vals = [self.lambda_ir, self.lambda_is, self.lambda_g] + [v for row in self.lambda_ij for v in row]
        if any(v < 0 for v in vals):
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_ij[0][0] != 1 or self.lambda_ij[1][1] != 1:
            raise ValueError("diagonal of lambda_ij must be 1")


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise nx.ShapeError(f"{what}: shape {a.shape} != {b.shape}")


def _check_pair(R: Tensor, I: Tensor, S: Tensor) -> None:
    if I.data.ndim != 4 or I.shape[1] != 1:
        raise nx.ShapeError(f"illumination must be B x 1 x H x W, got {I.shape}")
    if R.shape != S.shape:
        raise nx.ShapeError(f"reflectance {R.shape} and image {S.shape} differ")
    if R.shape[0] != I.shape[0] or R.shape[2:] != I.shape[2:]:
        raise nx.ShapeError(f"reflectance {R.shape} and illumination {I.shape} are not aligned")


def recon_loss(R_low, I_low, R_normal, I_normal, S_low, S_normal,
               lw: LossWeights | None = None) -> Tensor:
    """Sum over (i, j) of lambda_ij * mean|R_i * I_j - S_j|."""
    lw = lw or LossWeights()
    R = [nx.as_tensor(R_low), nx.as_tensor(R_normal)]
    I = [nx.as_tensor(I_low), nx.as_tensor(I_normal)]
    S = [nx.as_tensor(S_low), nx.as_tensor(S_normal)]
    total = None
    for i in (LOW, NORMAL):
        for j in (LOW, NORMAL):
            _check_pair(R[i], I[j], S[j])
            coef = lw.lambda_ij[i][j]
            if coef == 0:
                continue
            term = nx.reduce_mean_abs(nx.sub(nx.mul(R[i], I[j]), S[j]))
            if coef != 1:
                term = nx.scale(term, coef)
            total = term if total is None else nx.add(total, term)
    return total


def invariable_reflectance_loss(R_low, R_normal) -> Tensor:
    R_low, R_normal = nx.as_tensor(R_low), nx.as_tensor(R_normal)
    _check_same(R_low, R_normal, "invariable_reflectance_loss")
    return nx.reduce_mean_abs(nx.sub(R_low, R_normal))


def smoothness_weight(R, lambda_g: float, axis: str, stop_gradient: bool = False) -> Tensor:
    """exp(-lambda_g * mean_c |grad_axis R|), one channel."""
    R = nx.as_tensor(R)
    if stop_gradient:
        R = nx.stop_gradient(R)
    g = nx.channel_mean(nx.abs(nx.spatial_gradient(R, axis)))
    return nx.exp(nx.scale(g, -lambda_g))


def smoothness_loss(I, R, lambda_g: float = 10.0, stop_weight_gradient: bool = False) -> Tensor:
    """Structure-aware TV of a 1-channel map, relaxed where R has edges."""
    I, R = nx.as_tensor(I), nx.as_tensor(R)
    if I.data.ndim != 4 or I.shape[1] != 1:
        raise nx.ShapeError(f"illumination must be B x 1 x H x W, got {I.shape}")
    if R.shape[0] != I.shape[0] or R.shape[2:] != I.shape[2:]:
        raise nx.ShapeError(f"smoothness_loss: I {I.shape} and R {R.shape} not aligned")
    total = None
    for axis in ("horizontal", "vertical"):
        weight = smoothness_weight(R, lambda_g, axis, stop_weight_gradient)
        term = nx.mean(nx.mul(nx.abs(nx.spatial_gradient(I, axis)), weight))
        total = term if total is None else nx.add(total, term)
    return total


@dataclass
class DecomLossParts:
    total: Tensor
    recon: Tensor
    ir: Tensor
    smooth: Tensor


def decom_loss_parts(low, normal, S_low, S_normal, lw: LossWeights | None = None) -> DecomLossParts:
    """``low``/``normal`` are :class:`~retinexnet.model.DecomOutput` records."""
    lw = lw or LossWeights()
    recon = recon_loss(low.R, low.I, normal.R, normal.I, S_low, S_normal, lw)
    ir = invariable_reflectance_loss(low.R, normal.R)
    smooth = nx.add(smoothness_loss(low.I, low.R, lw.lambda_g, lw.stop_weight_gradient),
                    smoothness_loss(normal.I, normal.R, lw.lambda_g, lw.stop_weight_gradient))
    total = nx.add(nx.add(recon, nx.scale(ir, lw.lambda_ir)), nx.scale(smooth, lw.lambda_is))
    return DecomLossParts(total, recon, ir, smooth)


def decom_total_loss(low, normal, S_low, S_normal, lw: LossWeights | None = None) -> Tensor:
    return decom_loss_parts(low, normal, S_low, S_normal, lw).total


@dataclass
class EnhanceLossParts:
    total: Tensor
    recon: Tensor
    smooth: Tensor


def enhance_loss_parts(R_low, I_hat, S_normal, lw: LossWeights | None = None) -> EnhanceLossParts:
    lw = lw or LossWeights()
    R_low, I_hat, S_normal = nx.as_tensor(R_low), nx.as_tensor(I_hat), nx.as_tensor(S_normal)
    _check_pair(R_low, I_hat, S_normal)
    recon = nx.reduce_mean_abs(nx.sub(nx.mul(R_low, I_hat), S_normal))
    smooth = smoothness_loss(I_hat, R_low, lw.lambda_g, lw.stop_weight_gradient)
    return EnhanceLossParts(nx.add(recon, nx.scale(smooth, lw.lambda_is)), recon, smooth)


def enhance_loss(R_low, I_hat, S_normal, lw: LossWeights | None = None) -> Tensor:
    return enhance_loss_parts(R_low, I_hat, S_normal, lw).total


def loss_value(t: Tensor) -> float:
    return float(np.asarray(t.data))
