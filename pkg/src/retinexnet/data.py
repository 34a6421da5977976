"""Paired images: PNG I/O, LOL-layout loading, patch sampling, Y histograms,
and synthetic darkening fitted to a target Y histogram.

Images are ``H x W x 3`` float arrays in [0, 1]; batches handed to the
networks are ``B x 3 x H x W`` float32.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

log = logging.getLogger(__name__)

Y_MIN, Y_MAX = 16, 240
N_BINS = Y_MAX - Y_MIN + 1
# BT.601 studio swing, inputs in [0, 1]
_YCBCR = np.array([[65.481, 128.553, 24.966],
                   [-37.797, -74.203, 112.0],
                   [112.0, -93.786, -18.214]])
_YCBCR_OFFSET = np.array([16.0, 128.0, 128.0])


class ImageFormatError(ValueError):
    """PNG could not be decoded or is not 8-bit RGB-compatible."""


# ---------------------------------------------------------------------------
# PNG


def read_png(path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("RGB", "L", "P", "RGBA", "LA"):
                arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            else:
                raise ImageFormatError(f"{path}: unsupported mode/bit depth {im.mode!r}")
    except (UnidentifiedImageError, OSError, SyntaxError) as exc:
        raise ImageFormatError(f"{path}: cannot decode ({exc})") from exc
    return arr.astype(np.float64) / 255.0


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 image, got {img.shape}")
    Image.fromarray(to_uint8(img), mode="RGB").save(path, format="PNG")


def to_batch(images) -> np.ndarray:
    """List/array of H x W x 3 images -> B x 3 x H x W float32."""
    arr = np.asarray(images, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2))


def from_batch(batch: np.ndarray) -> np.ndarray:
    """B x C x H x W -> B x H x W x C float64 (C = 1 broadcast to gray RGB)."""
    arr = np.asarray(batch, dtype=np.float64).transpose(0, 2, 3, 1)
    if arr.shape[-1] == 1:
        arr = np.repeat(arr, 3, axis=-1)
    return arr


# ---------------------------------------------------------------------------
# paired dataset


@dataclass
class ImagePair:
    id: str
    low: np.ndarray
    normal: np.ndarray


@dataclass
class LoadIssue:
    id: str
    reason: str


@dataclass
class PairDataset:
    pairs: list[ImagePair] = field(default_factory=list)
    split: str = "all"
    errors: list[LoadIssue] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def ids(self) -> list[str]:
        return [p.id for p in self.pairs]

    def split_train_eval(self, seed: int = 0) -> tuple["PairDataset", "PairDataset"]:
        """97/3 split (485/15 for 500 pairs), chosen by a seeded permutation."""
        n = len(self.pairs)
        n_eval = (3 * n + 50) // 100
        order = np.random.default_rng(seed).permutation(n)
        eval_idx = set(order[:n_eval].tolist())
        train = [p for i, p in enumerate(self.pairs) if i not in eval_idx]
        held = [p for i, p in enumerate(self.pairs) if i in eval_idx]
        return PairDataset(train, "train"), PairDataset(held, "eval")

    @classmethod
    def merge(cls, datasets, split: str = "train") -> "PairDataset":
        pairs, errors, seen = [], [], set()
        for ds in datasets:
            for p in ds.pairs:
                if p.id in seen:
                    raise ValueError(f"duplicate pair id {p.id!r} when merging datasets")
                seen.add(p.id)
                pairs.append(p)
            errors += ds.errors
        return cls(pairs, split, errors)


def _pair_dirs(root: Path) -> tuple[Path, Path]:
    low = root / "low"
    for name in ("high", "normal"):
        if (root / name).is_dir():
            return low, root / name
    return low, root / "high"


def load_pair_dataset(root, prefix: str = "") -> PairDataset:
    """Load ``<root>/low/*.png`` with the same-named ``<root>/high`` (or ``normal``) file.

    Bad pairs are recorded in ``errors`` and skipped.
    """
    root = Path(root)
    low_dir, high_dir = _pair_dirs(root)
    low_names = {p.name for p in low_dir.glob("*.png")} if low_dir.is_dir() else set()
    high_names = {p.name for p in high_dir.glob("*.png")} if high_dir.is_dir() else set()
    ds = PairDataset()
    if not low_names and not high_names:
        log.warning("no PNG pairs found under %s", root)
        return ds
    for name in sorted(low_names ^ high_names):
        side = "high" if name in low_names else "low"
        ds.errors.append(LoadIssue(prefix + name, f"no matching file in {side}/"))
    for name in sorted(low_names & high_names):
        pid = prefix + Path(name).stem
        try:
            low = read_png(low_dir / name)
            normal = read_png(high_dir / name)
        except ImageFormatError as exc:
            ds.errors.append(LoadIssue(pid, str(exc)))
            continue
        if low.shape != normal.shape:
            ds.errors.append(LoadIssue(pid, f"size mismatch {low.shape[:2]} vs {normal.shape[:2]}"))
            continue
        ds.pairs.append(ImagePair(pid, low, normal))
    if ds.errors:
        log.warning("%s: loaded %d pairs, %d problems", root, len(ds.pairs), len(ds.errors))
    return ds


@dataclass
class PatchBatch:
    low: np.ndarray
    normal: np.ndarray
    coords: list[tuple[int, int, int]]


def sample_patch_batch(ds: PairDataset, batch: int, patch: int, rng: np.random.Generator) -> PatchBatch:
    """Aligned random crops; each entry picks an image then a top-left corner."""
    if not ds.pairs:
        raise ValueError("cannot sample from an empty dataset")
    low = np.empty((batch, 3, patch, patch), dtype=np.float32)
    normal = np.empty_like(low)
    coords = []
    for b in range(batch):
        idx = int(rng.integers(len(ds.pairs)))
        pair = ds.pairs[idx]
        h, w = pair.low.shape[:2]
        if patch > h or patch > w:
            raise ValueError(f"patch {patch} larger than image {pair.id!r} ({h}x{w})")
        y = int(rng.integers(h - patch + 1))
        x = int(rng.integers(w - patch + 1))
        low[b] = pair.low[y:y + patch, x:x + patch].transpose(2, 0, 1)
        normal[b] = pair.normal[y:y + patch, x:x + patch].transpose(2, 0, 1)
        coords.append((idx, y, x))
    return PatchBatch(low, normal, coords)


# ---------------------------------------------------------------------------
# colour and histograms


def rgb_to_ycbcr(img: np.ndarray) -> np.ndarray:
    """H x W x 3 in [0,1] -> studio-range YCbCr (Y in [16, 235])."""
    return np.asarray(img, dtype=np.float64) @ _YCBCR.T + _YCBCR_OFFSET


def ycbcr_to_rgb(ycc: np.ndarray) -> np.ndarray:
    return (np.asarray(ycc, dtype=np.float64) - _YCBCR_OFFSET) @ np.linalg.inv(_YCBCR).T


def y_channel(img: np.ndarray) -> np.ndarray:
    return np.asarray(img, dtype=np.float64) @ _YCBCR[0] + _YCBCR_OFFSET[0]


@dataclass
class YHistogram:
    counts: np.ndarray  # N_BINS int64 counts for Y = 16..240

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def bin_centers(self) -> np.ndarray:
        return np.arange(Y_MIN, Y_MAX + 1)

    def normalized(self) -> np.ndarray:
        return self.counts / max(self.total, 1)

    def mean(self) -> float:
        return float(np.dot(self.normalized(), self.bin_centers))

    def log10_counts(self) -> np.ndarray:
        # log10(1 + count) keeps empty bins finite for plotting
        return np.log10(1.0 + self.counts)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_center", "count", "log10_count"])
            for c, n, lg in zip(self.bin_centers, self.counts, self.log10_counts()):
                writer.writerow([int(c), int(n), f"{lg:.6f}"])

    @classmethod
    def from_csv(cls, path) -> "YHistogram":
        counts = np.zeros(N_BINS, dtype=np.int64)
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                b = int(float(row["bin_center"]))
                if not Y_MIN <= b <= Y_MAX:
                    raise ValueError(f"{path}: bin {b} outside [{Y_MIN}, {Y_MAX}]")
                counts[b - Y_MIN] = int(float(row["count"]))
        return cls(counts)


def y_histogram(images) -> YHistogram:
    images = list(images)
    if not images:
        raise ValueError("y_histogram needs at least one image")
    counts = np.zeros(N_BINS, dtype=np.int64)
    for img in images:
        y = np.clip(np.rint(y_channel(img)), Y_MIN, Y_MAX).astype(np.int64)
        counts += np.bincount(y.ravel() - Y_MIN, minlength=N_BINS)
    return YHistogram(counts)


def histogram_distance(a: YHistogram, b: YHistogram) -> float:
    return float(np.abs(a.normalized() - b.normalized()).sum())


# ---------------------------------------------------------------------------
# synthetic darkening


@dataclass(frozen=True)
class DarkeningParams:
    gamma: float = 2.0
    beta: float = 0.3
    noise_sigma: float = 0.01

    def __post_init__(self):
        if self.gamma < 1:
            raise ValueError(f"gamma must be >= 1 (darkening only), got {self.gamma}")
        if not 0 < self.beta <= 1:
            raise ValueError(f"beta must be in (0, 1], got {self.beta}")
        if not 0 <= self.noise_sigma <= 1:
            raise ValueError(f"noise_sigma must be in [0, 1], got {self.noise_sigma}")


def darken(img: np.ndarray, gamma: float, beta: float, noise: np.ndarray | None = None) -> np.ndarray:
    out = beta * np.power(img, gamma)
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0)


def synth_low_light(img: np.ndarray, p: DarkeningParams, rng: np.random.Generator) -> np.ndarray:
    """clamp(beta * img**gamma + N(0, sigma), 0, 1), per channel."""
    img = np.asarray(img, dtype=np.float64)
    noise = rng.normal(0.0, p.noise_sigma, img.shape) if p.noise_sigma > 0 else None
    return darken(img, p.gamma, p.beta, noise)


GAMMA_GRID = np.round(np.arange(1.0, 5.0 + 1e-9, 0.25), 2)
BETA_GRID = np.round(np.arange(0.05, 1.0 + 1e-9, 0.05), 2)


@dataclass
class DarkeningFit:
    params: DarkeningParams
    distance: float


def fit_darkening_params(normal_images, target: YHistogram, noise_sigma: float = 0.01,
                         seed: int = 0) -> DarkeningFit:
    """Grid search for the (gamma, beta) whose darkened Y histogram is L1-closest to ``target``.

    One noise draw per image (from ``seed``) is shared by every grid point.
    Ties go to the smaller gamma, then the larger beta.
    """
    images = [np.asarray(im, dtype=np.float64) for im in normal_images]
    if not images:
        raise ValueError("fit_darkening_params needs at least one image")
    if target.total == 0:
        raise ValueError("target histogram is empty")
    rng = np.random.default_rng(seed)
    noises = [rng.normal(0.0, noise_sigma, im.shape) if noise_sigma > 0 else None for im in images]
    best: tuple[float, float, float] | None = None
    for gamma in GAMMA_GRID:
        powered = [np.power(im, gamma) for im in images]
        for beta in BETA_GRID[::-1]:
            hist = y_histogram(darken_powered(pw, beta, nz) for pw, nz in zip(powered, noises))
            d = histogram_distance(hist, target)
            if best is None or d < best[0]:
                best = (d, float(gamma), float(beta))
    d, gamma, beta = best
    return DarkeningFit(DarkeningParams(gamma, beta, noise_sigma), d)


def darken_powered(powered: np.ndarray, beta: float, noise: np.ndarray | None) -> np.ndarray:
    out = beta * powered
    if noise is not None:
        out = out + noise
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# procedural scenes for desk-scale experiments


def make_scene(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth colour scene: shaded background, flat shapes, faint texture."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    base = rng.uniform(0.3, 0.9, 3)
    tilt = rng.uniform(-0.3, 0.3, (2, 3))
    img = base + yy[..., None] * tilt[0] + xx[..., None] * tilt[1]
    for _ in range(int(rng.integers(3, 7))):
        color = rng.uniform(0.05, 1.0, 3)
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        if rng.random() < 0.5:
            ry, rx = rng.uniform(h / 10, h / 3), rng.uniform(w / 10, w / 3)
            mask = (np.abs(np.arange(h)[:, None] - cy) < ry) & (np.abs(np.arange(w)[None, :] - cx) < rx)
        else:
            r = rng.uniform(min(h, w) / 10, min(h, w) / 3)
            mask = (np.arange(h)[:, None] - cy) ** 2 + (np.arange(w)[None, :] - cx) ** 2 < r * r
        img[mask] = color
    # light falloff from a random point, then fine texture
    ly, lx = rng.uniform(0, 1, 2)
    falloff = 1.0 - 0.35 * np.sqrt((yy - ly) ** 2 + (xx - lx) ** 2)
    img = img * falloff[..., None]
    img = img + rng.normal(0.0, 0.02, (h, w, 1))
    return np.clip(img, 0.0, 1.0)


def synthetic_pairs(n: int, size: int, seed: int, gamma_range=(1.8, 2.6),
                    beta_range=(0.25, 0.45), noise_sigma: float = 0.01, prefix: str = "syn") -> PairDataset:
    """``n`` procedural scenes with darkened counterparts, params drawn per pair."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        normal = make_scene(size, size, rng)
        p = DarkeningParams(float(rng.uniform(*gamma_range)), float(rng.uniform(*beta_range)), noise_sigma)
        pairs.append(ImagePair(f"{prefix}{i:04d}", synth_low_light(normal, p, rng), normal))
    return PairDataset(pairs, "train")


def save_pair_dataset(ds: PairDataset, root) -> None:
    root = Path(root)
    (root / "low").mkdir(parents=True, exist_ok=True)
    (root / "high").mkdir(parents=True, exist_ok=True)
    for p in ds.pairs:
        write_png(root / "low" / f"{p.id}.png", p.low)
        write_png(root / "high" / f"{p.id}.png", p.normal)


def list_pngs(path) -> list[Path]:
    path = Path(path)
    if path.is_file():
        return [path]
    return sorted(p for p in path.glob("*.png") if p.is_file()) if path.is_dir() else []


def ensure_dir(path) -> Path:
    os.makedirs(path, exist_ok=True)
    return Path(path)
