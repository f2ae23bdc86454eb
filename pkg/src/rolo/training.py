"""MSE objectives, Adam, and the windowed training loop."""
from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Mapping, Sequence

import numpy as np

from .lstm import COORDINATE, MODES, RoloModel, model_backward_window, model_forward_window
from .numerics import SeededRng
from .regions import BoundingBox

log = logging.getLogger(__name__)


def _box_rows(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64)
    else:
        arr = np.array([b.as_array() if isinstance(b, BoundingBox) else b for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def mse_coordinate_loss(pred, target) -> tuple[float, np.ndarray]:
    """Batch-mean squared Euclidean error over (cx, cy, w, h).

    Accepts BoundingBox lists or ``(n, 4)`` arrays. The nullified slots of the
    six-entry region vector are always zero on both sides, so dropping them
    leaves the loss unchanged.
    """
    p, t = _box_rows(pred), _box_rows(target)
    if p.shape != t.shape:
        raise ValueError(f"prediction/target length mismatch: {p.shape[0]} vs {t.shape[0]}")
    if p.shape[0] == 0:
        raise ValueError("empty batch")
    n = p.shape[0]
    diff = p - t
    return float((diff * diff).sum() / n), 2.0 * diff / n


def mse_heatmap_loss(H_pred, H_target) -> tuple[float, np.ndarray]:
    """Batch-mean sum of squared cell errors between flattened heatmaps.

    A single grid ``(side, side)`` counts as a batch of one; otherwise the
    leading axis is the batch.
    """
    p = np.asarray(H_pred, dtype=np.float64)
    t = np.asarray(H_target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"heatmap size mismatch: {p.shape} vs {t.shape}")
    if p.ndim == 2 and p.shape[0] == p.shape[1]:
        n = 1
    else:
        n = p.shape[0]
    if p.size == 0:
        raise ValueError("empty batch")
    diff = p - t
    return float((diff * diff).sum() / n), 2.0 * diff / n


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = 100
    step_size: int = 6
    batch_size: int = 16
    seed: int = 0
    mode: str = COORDINATE

    def __post_init__(self):
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ValueError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.step_size < 1:
            raise ValueError("step_size must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_mapping(cls, values: Mapping[str, object]) -> "TrainConfig":
        known = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for key, raw in values.items():
            if key not in known:
                continue
            default = getattr(cls, key)
            kwargs[key] = type(default)(raw) if not isinstance(default, str) else str(raw)
        return cls(**kwargs)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def fresh(cls, params: Mapping[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.items()},
                   {k: np.zeros_like(a) for k, a in params.items()}, 0)


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, config: TrainConfig):
    """One bias-corrected Adam update. Inputs are left untouched."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter block {k!r}")
        if np.shape(g) != np.shape(params[k]):
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {k!r} {np.shape(params[k])}")
    t = state.t + 1
    b1, b2 = config.beta1, config.beta2
    new_params, new_m, new_v = {}, {}, {}
    for k, theta in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        new_params[k] = theta - config.learning_rate * m_hat / (np.sqrt(v_hat) + config.epsilon)
        new_m[k], new_v[k] = m, v
    return new_params, AdamState(new_m, new_v, t)


@dataclass
class WindowedSequence:
    """Per-frame LSTM inputs and regression targets for one sequence."""

    inputs: np.ndarray
    targets: np.ndarray
    name: str = ""

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.inputs.shape[0] != self.targets.shape[0]:
            raise ValueError(f"sequence {self.name!r}: {self.inputs.shape[0]} inputs vs {self.targets.shape[0]} targets")

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def windows(self, T: int) -> tuple[np.ndarray, np.ndarray]:
        """All stride-1 windows as ``(count, T, D)`` inputs and targets."""
        idx = np.arange(len(self) - T + 1)[:, None] + np.arange(T)[None]
        return self.inputs[idx], self.targets[idx]


@dataclass
class LossReport:
    losses: list[float] = field(default_factory=list)
    seconds: list[float] = field(default_factory=list)
    initial_loss: float | None = None

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "loss", "seconds"])
            for epoch, (loss, sec) in enumerate(zip(self.losses, self.seconds), start=1):
                w.writerow([epoch, repr(float(loss)), f"{sec:.6f}"])


def window_loss(model: RoloModel, outputs: np.ndarray, targets: np.ndarray):
    """Loss and upstream gradient over every step of a batch of windows."""
    flat_out = outputs.reshape(-1, outputs.shape[-1])
    flat_tgt = targets.reshape(-1, targets.shape[-1])
    if model.mode == COORDINATE:
        loss, grad = mse_coordinate_loss(flat_out, flat_tgt)
    else:
        loss, grad = mse_heatmap_loss(flat_out, flat_tgt)
    return loss, grad.reshape(outputs.shape)


def dataset_loss(model: RoloModel, dataset: Sequence[WindowedSequence], step_size: int) -> float:
    total, count = 0.0, 0
    for seq in dataset:
        x, y = seq.windows(step_size)
        out, _ = model_forward_window(model, x)
        loss, _ = window_loss(model, out, y)
        total += loss * x.shape[0]
        count += x.shape[0]
    return total / count


def train_model(model: RoloModel, dataset: Sequence[WindowedSequence], config: TrainConfig):
    """Fit ``model`` with Adam over stride-1 windows of every sequence.

    Each epoch shuffles the windows of all sequences together with a seeded
    stream and cuts them into batches of at most ``batch_size``. Returns a new
    model and the per-epoch mean loss (measured on each batch before its
    update).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty training set")
    T = config.step_size
    for seq in dataset:
        if len(seq) < T:
            raise ValueError(f"sequence {seq.name!r} has {len(seq)} frames, shorter than step_size {T}")
        if seq.inputs.shape[1] != model.input_dim:
            raise ValueError(f"sequence {seq.name!r} input width {seq.inputs.shape[1]} != model input_dim {model.input_dim}")
    model = model.copy()
    report = LossReport()
    if config.epochs == 0:
        return model, report
    report.initial_loss = dataset_loss(model, dataset, T)
    x_all = np.concatenate([seq.windows(T)[0] for seq in dataset])
    y_all = np.concatenate([seq.windows(T)[1] for seq in dataset])
    rng = SeededRng(config.seed)
    state = AdamState.fresh(model.params)
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        total, count = 0.0, 0
        order = rng.permutation(x_all.shape[0])
        for start in range(0, order.size, config.batch_size):
            idx = order[start:start + config.batch_size]
            out, cache = model_forward_window(model, x_all[idx])
            loss, d_out = window_loss(model, out, y_all[idx])
            grads, _ = model_backward_window(model, cache, d_out)
            model.params, state = adam_step(model.params, grads, state, config)
            total += loss * idx.size
            count += idx.size
        report.losses.append(total / count)
        report.seconds.append(time.perf_counter() - t0)
        log.debug("epoch %d loss %.6f", epoch + 1, report.losses[-1])
    return model, report


def read_config_file(path) -> dict[str, str]:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = line.split("=", 1)
            values[key.strip()] = val.strip()
    return values


def config_dict(config) -> dict:
    return asdict(config)
