"""Decom-Net and Enhance-Net on top of :mod:`retinexnet.numerics`."""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import ConvSpec, Tensor

MAGIC = b"RTXW"
FORMAT_VERSION = 1


class WeightsFormatError(ValueError):
    """Weights file is malformed, truncated, or of an unknown version."""


@dataclass(frozen=True)
class DecomNetConfig:
    depth: int = 5
    width: int = 64
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 3:
            raise ValueError(f"DecomNet depth must be >= 3, got {self.depth}")
        if self.width < 1:
            raise ValueError(f"DecomNet width must be >= 1, got {self.width}")


@dataclass(frozen=True)
class EnhanceNetConfig:
    num_scales: int = 3
    width: int = 64

    def __post_init__(self):
        if self.num_scales < 1:
            raise ValueError(f"EnhanceNet num_scales must be >= 1, got {self.num_scales}")
        if self.width < 1:
            raise ValueError(f"EnhanceNet width must be >= 1, got {self.width}")


@dataclass
class DecomOutput:
    R: Tensor
    I: Tensor


class WeightStore(dict):
    """Ordered ``name -> Tensor`` map holding both networks' parameters.

    Names are ``decom.*`` or ``enhance.*``; ``<layer>.w`` is a kernel and
    ``<layer>.b`` its bias.
    """

    def subset(self, prefix: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.items() if k.startswith(prefix)}

    def zero_grad(self) -> None:
        for t in self.values():
            t.grad = None

    def copy_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.items()}

    def astype(self, dtype) -> "WeightStore":
        return WeightStore((k, Tensor(v.data.astype(dtype), requires_grad=v.requires_grad))
                           for k, v in self.items())

    @property
    def decom_config(self) -> DecomNetConfig:
        kernels = [k for k in self if k.startswith("decom.") and k.endswith(".w")]
        if not kernels:
            raise KeyError("store has no decom parameters")
        return DecomNetConfig(depth=len(kernels), width=self["decom.conv0.w"].shape[0])

    @property
    def enhance_config(self) -> EnhanceNetConfig:
        downs = [k for k in self if k.startswith("enhance.down") and k.endswith(".w")]
        if not downs:
            raise KeyError("store has no enhance parameters")
        return EnhanceNetConfig(num_scales=len(downs), width=self["enhance.stem.w"].shape[0])


def decom_layers(cfg: DecomNetConfig) -> list[tuple[str, ConvSpec]]:
    c = cfg.width
    layers = [("decom.conv0", ConvSpec(3, c, cfg.kernel))]
    for i in range(1, cfg.depth - 1):
        layers.append((f"decom.conv{i}", ConvSpec(c, c, cfg.kernel)))
    layers.append((f"decom.conv{cfg.depth - 1}", ConvSpec(c, 4, cfg.kernel)))
    return layers


def enhance_layers(cfg: EnhanceNetConfig) -> list[tuple[str, ConvSpec]]:
    c, m = cfg.width, cfg.num_scales
    layers = [("enhance.stem", ConvSpec(4, c, 3))]
    layers += [(f"enhance.down{i}", ConvSpec(c, c, 3, stride=2)) for i in range(m)]
    layers += [(f"enhance.up{i}", ConvSpec(c, c, 3)) for i in range(m)]
    layers += [("enhance.fuse", ConvSpec(c * m, c, 1)), ("enhance.out", ConvSpec(c, 1, 3))]
    return layers


def init_weights(decom_cfg: DecomNetConfig | None, enhance_cfg: EnhanceNetConfig | None,
                 seed: int = 0, dtype=np.float32) -> WeightStore:
    """He-normal kernels (std = sqrt(2 / fan_in)), zero biases."""
    rng = np.random.default_rng(seed)
    layers: list[tuple[str, ConvSpec]] = []
    if decom_cfg is not None:
        layers += decom_layers(decom_cfg)
    if enhance_cfg is not None:
        layers += enhance_layers(enhance_cfg)
    store = WeightStore()
    for name, spec in layers:
        fan_in = spec.in_channels * spec.kernel * spec.kernel
        kernel = rng.normal(0.0, np.sqrt(2.0 / fan_in),
                            size=(spec.out_channels, spec.in_channels, spec.kernel, spec.kernel))
        store[f"{name}.w"] = Tensor(kernel.astype(dtype), requires_grad=True)
        store[f"{name}.b"] = Tensor(np.zeros(spec.out_channels, dtype=dtype), requires_grad=True)
    return store


def _conv(w: WeightStore, name: str, x: Tensor, spec: ConvSpec) -> Tensor:
    return nx.conv2d(x, w[f"{name}.w"], w[f"{name}.b"], spec)


def decom_forward(w: WeightStore, S) -> DecomOutput:
    """Split an image batch ``S`` (B,3,H,W in [0,1]) into reflectance and illumination."""
    S = nx.as_tensor(S)
    if S.data.ndim != 4 or S.shape[1] != 3:
        raise nx.ShapeError(f"decom_forward expects B x 3 x H x W, got {S.shape}")
    if S.shape[2] < 8 or S.shape[3] < 8:
        raise nx.ShapeError(f"decom_forward needs H, W >= 8, got {S.shape[2:]}")
    if np.min(S.data) < 0 or np.max(S.data) > 1:
        raise ValueError("decom_forward input must lie in [0, 1]")
    layers = decom_layers(w.decom_config)
    name, spec = layers[0]
    h = _conv(w, name, S, spec)
    for name, spec in layers[1:-1]:
        h = nx.relu(_conv(w, name, h, spec))
    name, spec = layers[-1]
    out = nx.sigmoid(_conv(w, name, h, spec))
    return DecomOutput(R=nx.channel_slice(out, 0, 3), I=nx.channel_slice(out, 3, 4))


def enhance_forward(w: WeightStore, R_low, I_low, return_features: bool = False):
    """Adjusted illumination from ``[R_low, I_low]``.

    With ``return_features`` also returns a dict holding the encoder and
    decoder feature maps (keys ``encoder`` and ``decoder``, coarse to fine
    for the decoder).
    """
    R_low, I_low = nx.as_tensor(R_low), nx.as_tensor(I_low)
    cfg = w.enhance_config
    m, c = cfg.num_scales, cfg.width
    b, _, hh, ww = R_low.shape
    if I_low.shape != (b, 1, hh, ww):
        raise nx.ShapeError(f"enhance_forward: I_low shape {I_low.shape} != {(b, 1, hh, ww)}")
    factor = 2 ** m
    if hh % factor or ww % factor:
        raise nx.ShapeError(f"enhance_forward: spatial size {(hh, ww)} not divisible by {factor}")

    x = nx.concat([R_low, I_low], axis=1)
    feat = _conv(w, "enhance.stem", x, ConvSpec(4, c, 3))
    encoder = [feat]
    for i in range(m):
        feat = nx.relu(_conv(w, f"enhance.down{i}", feat, ConvSpec(c, c, 3, stride=2)))
        encoder.append(feat)

    decoder = []
    for i in range(m):
        skip = encoder[m - 1 - i]
        up = nx.resize_nearest(feat, skip.shape[2], skip.shape[3])
        feat = nx.add(nx.relu(_conv(w, f"enhance.up{i}", up, ConvSpec(c, c, 3))), skip)
        decoder.append(feat)

    fused = nx.concat([nx.resize_nearest(d, hh, ww) for d in decoder], axis=1)
    fused = _conv(w, "enhance.fuse", fused, ConvSpec(c * m, c, 1))
    I_hat = nx.sigmoid(_conv(w, "enhance.out", fused, ConvSpec(c, 1, 3)))
    if return_features:
        return I_hat, {"encoder": encoder[1:], "decoder": decoder}
    return I_hat


# ---------------------------------------------------------------------------
# weights file


def weights_to_bytes(w: WeightStore) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(w))]
    for name, t in w.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.data)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"parameter {name!r} has non-finite values")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def weights_from_bytes(buf: bytes) -> WeightStore:
    view = memoryview(buf)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise WeightsFormatError(f"truncated file while reading {what} at byte {pos}")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise WeightsFormatError("bad magic, not a weights file")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != FORMAT_VERSION:
        raise WeightsFormatError(f"unsupported format version {version}")
    records = []
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(name_len, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightsFormatError(f"record name is not UTF-8 at byte {pos}") from exc
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "dims"))
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(4 * n, f"values of {name!r}"), dtype="<f4")
        records.append((name, values.reshape(dims).astype(np.float32)))
    if pos != len(view):
        raise WeightsFormatError(f"{len(view) - pos} trailing bytes after last record")
    store = WeightStore()
    for name, arr in records:
        if name in store:
            raise WeightsFormatError(f"duplicate parameter name {name!r}")
        store[name] = Tensor(arr, requires_grad=True)
    return store


def save_weights(w: WeightStore, path) -> None:
    data = weights_to_bytes(w)
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def load_weights(path) -> WeightStore:
    with open(path, "rb") as fh:
        return weights_from_bytes(fh.read())
