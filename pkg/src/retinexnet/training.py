"""Three-phase SGD schedule: Decom-Net, then Enhance-Net, then joint fine-tuning."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import numerics as nx
from .data import PairDataset, sample_patch_batch
from .losses import LossWeights, decom_loss_parts, enhance_loss_parts
from .model import WeightStore, decom_forward, enhance_forward, load_weights, save_weights

log = logging.getLogger(__name__)

PHASES = ("decom", "enhance", "finetune")
PHASE_PARAMS = {"decom": ("decom.",), "enhance": ("enhance.",), "finetune": ("decom.", "enhance.")}
LOG_COLUMNS = ("iteration", "lr", "total_loss", "recon", "ir", "is")
STATE_MAGIC = b"RTXS"
STATE_VERSION = 1


class MissingGradientError(RuntimeError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration
        self.value = value


class CheckpointFormatError(ValueError):
    pass


@dataclass
class TrainConfig:
    phase: str = "decom"
    iterations: int = 2000
    batch: int = 16
    patch: int = 96
    learning_rate: float = 0.001
    lr_decay: float = 0.95
    momentum: float = 0.0
    seed: int = 0
    checkpoint_every: int = 0
    loss_weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")
        if self.iterations < 0 or self.batch < 1 or self.patch < 1:
            raise ValueError("iterations, batch and patch must be positive")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be nonnegative")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainLog:
    phase: str
    loss_weights: LossWeights
    rows: list[dict] = field(default_factory=list)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["total_loss"] for r in self.rows])

    def write_csv(self, path, append: bool = False) -> None:
        with open(path, "a" if append else "w", newline="") as fh:
            writer = csv.writer(fh)
            if not append:
                writer.writerow(LOG_COLUMNS)
            for r in self.rows:
                writer.writerow([r["iteration"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])


def read_log_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


@dataclass
class TrainState:
    """Everything needed to continue a phase bit-exactly."""
    phase: str
    iteration: int
    iterations: int
    lr: float
    rng_state: dict
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def finished(self) -> bool:
        return self.iteration >= self.iterations


# ---------------------------------------------------------------------------
# optimiser


def sgd_step(params: dict[str, nx.Tensor], lr: float, momentum: float = 0.0,
             velocity: dict[str, np.ndarray] | None = None) -> None:
    """p <- p - lr * grad (or heavy-ball with ``momentum``); grads are cleared."""
    missing = [name for name, p in params.items() if p.grad is None]
    if missing:
        raise MissingGradientError(f"no gradient for {missing[:3]}{'...' if len(missing) > 3 else ''}")
    for name, p in params.items():
        step = p.grad
        if momentum:
            v = velocity.get(name)
            v = step.copy() if v is None else momentum * v + step
            velocity[name] = v
            step = v
        p.data = (p.data - p.data.dtype.type(lr) * step).astype(p.data.dtype, copy=False)
        p.grad = None


def active_params(w: WeightStore, phase: str) -> dict[str, nx.Tensor]:
    prefixes = PHASE_PARAMS[phase]
    return {k: v for k, v in w.items() if k.startswith(prefixes)}


# ---------------------------------------------------------------------------
# per-phase objectives


def _decom_objective(w, low, normal, lw):
    lo, no = decom_forward(w, low), decom_forward(w, normal)
    parts = decom_loss_parts(lo, no, low, normal, lw)
    return parts.total, {"recon": parts.recon, "ir": parts.ir, "is": parts.smooth}


def _enhance_objective(w, low, normal, lw):
    with nx.no_grad():
        lo = decom_forward(w, low)
    I_hat = enhance_forward(w, lo.R, lo.I)
    parts = enhance_loss_parts(lo.R, I_hat, normal, lw)
    return parts.total, {"recon": parts.recon, "ir": 0.0, "is": parts.smooth}


def joint_loss(w, low, normal, lw):
    """Decomposition objective plus adjustment objective, gradients into both nets."""
    lo, no = decom_forward(w, low), decom_forward(w, normal)
    d = decom_loss_parts(lo, no, low, normal, lw)
    I_hat = enhance_forward(w, lo.R, lo.I)
    e = enhance_loss_parts(lo.R, I_hat, normal, lw)
    total = nx.add(d.total, e.total)
    return total, {"recon": nx.add(d.recon, e.recon), "ir": d.ir, "is": nx.add(d.smooth, e.smooth)}


OBJECTIVES: dict[str, Callable] = {
    "decom": _decom_objective,
    "enhance": _enhance_objective,
    "finetune": joint_loss,
}


# ---------------------------------------------------------------------------
# loop


def initial_state(cfg: TrainConfig) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    return TrainState(cfg.phase, 0, cfg.iterations, cfg.learning_rate, rng.bit_generator.state)


def run_phase(cfg: TrainConfig, ds: PairDataset, w: WeightStore, state: TrainState | None = None,
              checkpoint: Callable[[TrainState, TrainLog], None] | None = None) -> TrainLog:
    """Train the parameters of ``cfg.phase`` in place, returning this call's log rows."""
    if cfg.phase in ("enhance", "finetune"):
        factor = 2 ** w.enhance_config.num_scales
        if cfg.patch % factor:
            raise ValueError(f"patch {cfg.patch} must be divisible by {factor} for phase {cfg.phase}")
        if not w.subset("decom."):
            raise ValueError(f"phase {cfg.phase} needs Decom-Net weights")
    if not ds.pairs:
        raise ValueError("training dataset is empty")
    state = state or initial_state(cfg)
    if state.phase != cfg.phase:
        raise ValueError(f"checkpoint is for phase {state.phase!r}, not {cfg.phase!r}")
    rng = np.random.default_rng()
    rng.bit_generator.state = state.rng_state
    params = active_params(w, cfg.phase)
    velocity = {k: v.copy() for k, v in state.velocity.items()}
    objective = OBJECTIVES[cfg.phase]
    iters_per_epoch = max(1, math.ceil(len(ds) / cfg.batch))
    tlog = TrainLog(cfg.phase, cfg.loss_weights)

    it = state.iteration
    while it < cfg.iterations:
        lr = cfg.learning_rate * cfg.lr_decay ** (it // iters_per_epoch)
        batch = sample_patch_batch(ds, cfg.batch, cfg.patch, rng)
        total, parts = objective(w, batch.low, batch.normal, cfg.loss_weights)
        value = float(total.data)
        if not math.isfinite(value):
            w.zero_grad()
            raise TrainingDiverged(it, value)
        row = {"iteration": it, "lr": lr, "total_loss": value}
        row.update({k: float(np.asarray(v.data if isinstance(v, nx.Tensor) else v)) for k, v in parts.items()})
        tlog.rows.append(row)
        nx.backprop(total)
        sgd_step(params, lr, cfg.momentum, velocity)
        w.zero_grad()
        it += 1
        if checkpoint is not None and cfg.checkpoint_every and (it % cfg.checkpoint_every == 0 or it == cfg.iterations):
            checkpoint(TrainState(cfg.phase, it, cfg.iterations, lr, rng.bit_generator.state, velocity), tlog)
    return tlog


def train_decom(cfg: TrainConfig, ds: PairDataset, w: WeightStore, **kw) -> TrainLog:
    return run_phase(_with_phase(cfg, "decom"), ds, w, **kw)


def train_enhance(cfg: TrainConfig, ds: PairDataset, w: WeightStore, **kw) -> TrainLog:
    return run_phase(_with_phase(cfg, "enhance"), ds, w, **kw)


def finetune_end_to_end(cfg: TrainConfig, ds: PairDataset, w: WeightStore, **kw) -> TrainLog:
    return run_phase(_with_phase(cfg, "finetune"), ds, w, **kw)


def _with_phase(cfg: TrainConfig, phase: str) -> TrainConfig:
    if cfg.phase == phase:
        return cfg
    d = dict(cfg.__dict__)
    d["phase"] = phase
    return TrainConfig(**d)


# ---------------------------------------------------------------------------
# checkpoints: <dir>/weights.rtxw, <dir>/state.rtxs, <dir>/velocity.rtxw, <dir>/log.csv


def state_to_bytes(s: TrainState) -> bytes:
    phase = s.phase.encode("utf-8")
    rng = json.dumps(s.rng_state, sort_keys=True).encode("utf-8")
    return b"".join([
        STATE_MAGIC,
        struct.pack("<I", STATE_VERSION),
        struct.pack("<H", len(phase)), phase,
        struct.pack("<QQd", s.iteration, s.iterations, s.lr),
        struct.pack("<I", len(rng)), rng,
    ])


def state_from_bytes(buf: bytes) -> TrainState:
    try:
        if buf[:4] != STATE_MAGIC:
            raise CheckpointFormatError("bad magic, not a training state file")
        (version,) = struct.unpack_from("<I", buf, 4)
        if version != STATE_VERSION:
            raise CheckpointFormatError(f"unsupported state version {version}")
        pos = 8
        (n,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        phase = buf[pos:pos + n].decode("utf-8")
        pos += n
        iteration, iterations, lr = struct.unpack_from("<QQd", buf, pos)
        pos += 24
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        raw = buf[pos:pos + n]
        if len(raw) != n or pos + n != len(buf):
            raise CheckpointFormatError("truncated or oversized state file")
        rng_state = json.loads(raw.decode("utf-8"))
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt state file: {exc}") from exc
    return TrainState(phase, iteration, iterations, lr, rng_state)


def save_checkpoint(directory, w: WeightStore, state: TrainState, rows: list[dict]) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_weights(w, directory / "weights.rtxw")
    if state.velocity:
        save_weights(WeightStore((k, nx.Tensor(v)) for k, v in state.velocity.items()),
                     directory / "velocity.rtxw")
    TrainLog(state.phase, LossWeights(), rows).write_csv(directory / "log.csv")
    (directory / "state.rtxs").write_bytes(state_to_bytes(state))


def load_checkpoint(directory) -> tuple[WeightStore, TrainState, list[dict]]:
    directory = Path(directory)
    w = load_weights(directory / "weights.rtxw")
    state = state_from_bytes((directory / "state.rtxs").read_bytes())
    vel_path = directory / "velocity.rtxw"
    if vel_path.exists():
        state.velocity = {k: v.data for k, v in load_weights(vel_path).items()}
    log_path = directory / "log.csv"
    rows = read_log_csv(log_path) if log_path.exists() else []
    return w, state, rows[: state.iteration]


def smoothed_ratio(losses, window: int = 100) -> float:
    """Mean of the last ``window`` losses over the mean of the first ``window``."""
    losses = np.asarray(losses, dtype=np.float64)
    window = min(window, len(losses))
    return float(losses[-window:].mean() / losses[:window].mean())
