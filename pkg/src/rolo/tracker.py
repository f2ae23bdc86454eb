"""End-to-end recurrent tracker plus the Kalman and detection-only baselines.

All three trackers share the same gating rule and emit the same
:class:`Trajectory`, so the evaluator never needs to know which one ran.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .lstm import COORDINATE, HEATMAP, RoloModel, init_model, model_forward_window
from .numerics import SeededRng, ShapeError
from .regions import (
    DEFAULT_HISTORY,
    DEFAULT_IOU_MIN,
    BoundingBox,
    GateHistory,
    encode_region_vector,
    heatmap_decode,
    heatmap_encode,
)
from .training import WindowedSequence, train_model

DETECTED = "detector-assigned"
RECURRENT = "recurrent-only"
DEFAULT_STEP_SIZE = 6


class ProjectionFeatures:
    """Seeded random linear projection of a block-averaged frame.

    Frames are ``uint8`` or float grayscale arrays; each is pooled by
    ``pool x pool`` block means, centered, and projected to ``dim`` values.
    The projection depends only on the seed and pooled size, so features of a
    frame never depend on any other frame.
    """

    def __init__(self, dim: int = 64, seed: int = 0, pool: int = 4):
        if dim < 1 or pool < 1:
            raise ValueError("feature dim and pool must be positive")
        self.dim = dim
        self.seed = seed
        self.pool = pool
        self._proj: dict[tuple[int, int], np.ndarray] = {}

    def _matrix(self, shape: tuple[int, int]) -> np.ndarray:
        if shape not in self._proj:
            n = shape[0] * shape[1]
            rng = SeededRng(self.seed)
            self._proj[shape] = rng.normal(0.0, 1.0 / np.sqrt(n), size=(self.dim, n))
        return self._proj[shape]

    def __call__(self, frame_index: int, frame) -> np.ndarray:
        img = np.asarray(frame, dtype=np.float64)
        if img.ndim == 3:
            img = img.mean(axis=2)
        if img.dtype != np.float64 or img.max() > 1.0:
            img = img / 255.0
        p = self.pool
        rows, cols = img.shape[0] // p, img.shape[1] // p
        pooled = img[:rows * p, :cols * p].reshape(rows, p, cols, p).mean(axis=(1, 3))
        return self._matrix(pooled.shape) @ (pooled.ravel() - 0.5)

    def sequence_features(self, frames) -> np.ndarray:
        return np.stack([self(t, f) for t, f in enumerate(frames)])


@dataclass(frozen=True)
class DetectorStubConfig:
    """Stand-in detector: noisy copies of the truth with misses and clutter."""

    dropout_prob: float = 0.2
    jitter_sigma: float = 0.01
    false_positive_rate: float = 0.0
    distractor_detect_prob: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ("dropout_prob", "distractor_detect_prob"):
            val = getattr(self, name)
            if not 0.0 <= val <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {val}")
        if self.jitter_sigma < 0 or self.false_positive_rate < 0:
            raise ValueError("jitter_sigma and false_positive_rate must be non-negative")


def _jittered(rng: SeededRng, box: BoundingBox, sigma: float) -> BoundingBox:
    noise = rng.normal(0.0, sigma, size=4) if sigma > 0 else np.zeros(4)
    arr = box.as_array() + noise
    arr[2:] = np.maximum(arr[2:], 1e-3)
    return BoundingBox.from_array(arr)


def detect_frame(stub: DetectorStubConfig, frame_index: int, truth: BoundingBox,
                 occluded: bool = False, distractors: Sequence[BoundingBox] = ()) -> list[BoundingBox]:
    """Candidate boxes for one frame, seeded by ``(stub.seed, frame_index)``."""
    rng = SeededRng(stub.seed).spawn(frame_index)
    found: list[BoundingBox] = []
    hit = rng.random() >= stub.dropout_prob
    if hit and not occluded:
        found.append(_jittered(rng, truth, stub.jitter_sigma))
    for d in distractors:
        if rng.random() < stub.distractor_detect_prob:
            found.append(_jittered(rng, d, stub.jitter_sigma))
    n_false = rng.poisson(stub.false_positive_rate) if stub.false_positive_rate > 0 else 0
    for _ in range(n_false):
        w, h = rng.uniform(0.05, 0.3, size=2)
        cx, cy = rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2)
        found.append(BoundingBox.clipped(cx, cy, w, h))
    order = rng.permutation(len(found))
    return [found[i] for i in order]


def detect_sequence(stub: DetectorStubConfig, truth: Sequence[BoundingBox], occluded=None,
                    distractors=None) -> list[list[BoundingBox]]:
    n = len(truth)
    occ = np.zeros(n, bool) if occluded is None else np.asarray(occluded, bool)
    dis = distractors if distractors is not None else [()] * n
    return [detect_frame(stub, t, truth[t], bool(occ[t]), dis[t]) for t in range(n)]


@dataclass
class Trajectory:
    boxes: list[BoundingBox] = field(default_factory=list)
    sources: list[str] = field(default_factory=list)
    heatmaps: list | None = None
    start: int = 0

    def append(self, box: BoundingBox, source: str, heatmap=None) -> None:
        self.boxes.append(box)
        self.sources.append(source)
        if heatmap is not None:
            if self.heatmaps is None:
                self.heatmaps = []
            self.heatmaps.append(heatmap)

    def __len__(self) -> int:
        return len(self.boxes)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["frame", "cx", "cy", "w", "h", "source"])
            for k, (b, s) in enumerate(zip(self.boxes, self.sources)):
                w.writerow([self.start + k + 1, f"{b.cx:.6f}", f"{b.cy:.6f}", f"{b.w:.6f}", f"{b.h:.6f}", s])

    @classmethod
    def read_csv(cls, path) -> "Trajectory":
        traj = cls()
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        for row in rows:
            traj.append(BoundingBox(float(row["cx"]), float(row["cy"]), float(row["w"]), float(row["h"])), row["source"])
        if rows:
            traj.start = int(rows[0]["frame"]) - 1
        return traj


def region_input(box: BoundingBox, mode: str, side: int = 32) -> np.ndarray:
    if mode == COORDINATE:
        return encode_region_vector(box)
    return heatmap_encode(box, side).ravel()


class TrackWindow:
    """Ring buffer of the most recent concatenated inputs."""

    def __init__(self, step_size: int, width: int):
        if step_size < 1:
            raise ValueError("step_size must be >= 1")
        self.step_size = step_size
        self.width = width
        self._buf: deque[np.ndarray] = deque(maxlen=step_size)

    def push(self, vec: np.ndarray) -> None:
        if vec.shape != (self.width,):
            raise ShapeError(f"window input length {vec.shape} does not match width {self.width}")
        self._buf.append(vec)

    def array(self) -> np.ndarray:
        return np.stack(self._buf)

    def __len__(self) -> int:
        return len(self._buf)


def decode_output(model: RoloModel, out: np.ndarray, fallback: BoundingBox):
    """Box from a readout vector; heatmap mode falls back when nothing decodes."""
    if model.mode == COORDINATE:
        return BoundingBox.from_array(out), None
    hm = out.reshape(model.heatmap_side, model.heatmap_side)
    box = heatmap_decode(hm)
    return (box if box is not None else fallback), hm


def tracker_step(model: RoloModel, window: TrackWindow, x_t: np.ndarray,
                 detection: BoundingBox | None, previous: BoundingBox):
    """Push one frame and predict its box.

    ``previous`` is the last predicted box; it stands in for the region stream
    when ``detection`` is None. Returns ``(box, source, heatmap_or_None)``.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    region_box = detection if detection is not None else previous
    vec = np.concatenate([x_t, region_input(region_box, model.mode, model.heatmap_side)])
    if vec.size != model.input_dim:
        raise ShapeError(f"feature+region length {vec.size} does not match model input_dim {model.input_dim}")
    window.push(vec)
    out, _ = model_forward_window(model, window.array())
    box, hm = decode_output(model, out[-1], previous)
    return box, (DETECTED if detection is not None else RECURRENT), hm


def _frame_features(sequence, provider, start: int, stop: int) -> np.ndarray:
    feats = getattr(sequence, "features", None)
    if feats is not None:
        return np.asarray(feats[start:stop], dtype=np.float64)
    if provider is None:
        raise ValueError(f"sequence {sequence.name!r} has no features and no feature provider was given")
    return np.stack([provider(t, sequence.frames[t]) for t in range(start, stop)])


def _detections(sequence, stub: DetectorStubConfig | None):
    if stub is not None:
        return detect_sequence(stub, sequence.gt, getattr(sequence, "occluded", None))
    if sequence.detections is None:
        raise ValueError(f"sequence {sequence.name!r} has no detections and no detector stub was given")
    return sequence.detections


def _start_box(sequence, start: int, init_box: BoundingBox | None) -> BoundingBox:
    if init_box is not None:
        return init_box
    if not sequence.gt or len(sequence.gt) <= start or sequence.gt[start] is None:
        raise ValueError(f"sequence {sequence.name!r} has no ground truth at frame {start + 1}")
    return sequence.gt[start]


def track_sequence(model: RoloModel, sequence, provider=None, stub: DetectorStubConfig | None = None,
                   step_size: int = DEFAULT_STEP_SIZE, iou_min: float = DEFAULT_IOU_MIN,
                   start: int = 0, init_box: BoundingBox | None = None,
                   history_len: int = DEFAULT_HISTORY, features=None) -> Trajectory:
    """Run the recurrent tracker causally from ``start`` to the last frame.

    The first frame is initialized from ground truth (or ``init_box``): it
    seeds the gating history and stands in for a missing first detection.
    """
    first = _start_box(sequence, start, init_box)
    dets = _detections(sequence, stub)
    n = len(dets)
    feats = features if features is not None else _frame_features(sequence, provider, start, n)
    history = GateHistory(first, history_len, iou_min)
    window = TrackWindow(step_size, model.input_dim)
    traj = Trajectory(start=start)
    previous = first
    for k, t in enumerate(range(start, n)):
        det = history.assign(dets[t])
        box, source, hm = tracker_step(model, window, feats[k], det, previous)
        traj.append(box, source, hm)
        history.push(det if det is not None else box)
        previous = box
    return traj


def training_sequence(sequence, mode: str = COORDINATE, provider=None, stub=None,
                      iou_min: float = DEFAULT_IOU_MIN, history_len: int = DEFAULT_HISTORY,
                      heatmap_side: int = 32, model: RoloModel | None = None,
                      step_size: int = DEFAULT_STEP_SIZE) -> WindowedSequence:
    """LSTM inputs and targets for one labelled sequence.

    The region stream follows the tracking rule. On frames without an accepted
    detection the previous box is fed back: the previous ground truth, or,
    when ``model`` is given, that model's own previous prediction from a
    tracking run, which is exactly what it will see at inference.
    """
    dets = _detections(sequence, stub)
    gt = sequence.gt
    feats = _frame_features(sequence, provider, 0, len(gt))
    if model is not None:
        traj = track_sequence(model, sequence, stub=stub, step_size=step_size, iou_min=iou_min,
                              history_len=history_len, features=feats)
        previous_boxes = [gt[0]] + traj.boxes[:-1]
        history_boxes = traj.boxes
    else:
        previous_boxes = [gt[0]] + list(gt[:-1])
        history_boxes = gt
    history = GateHistory(gt[0], history_len, iou_min)
    inputs, targets = [], []
    for t in range(len(gt)):
        det = history.assign(dets[t])
        region = det if det is not None else previous_boxes[t]
        inputs.append(np.concatenate([feats[t], region_input(region, mode, heatmap_side)]))
        if mode == HEATMAP:
            targets.append(heatmap_encode(gt[t], heatmap_side).ravel())
        else:
            targets.append(gt[t].as_array())
        history.push(det if det is not None else history_boxes[t])
    return WindowedSequence(np.array(inputs), np.array(targets), getattr(sequence, "name", ""))


@dataclass(frozen=True)
class KalmanConfig:
    pos_noise: float = 1e-4
    vel_noise: float = 1e-3
    meas_noise: float = 1e-2
    init_vel_var: float = 1e-2


class ConstantVelocityKalman:
    """Linear Kalman filter over (cx, cy, w, h, vx, vy)."""

    def __init__(self, box: BoundingBox, config: KalmanConfig = KalmanConfig()):
        self.x = np.r_[box.as_array(), 0.0, 0.0]
        self.P = np.diag([config.meas_noise] * 4 + [config.init_vel_var] * 2)
        self.F = np.eye(6)
        self.F[0, 4] = self.F[1, 5] = 1.0
        self.H = np.eye(4, 6)
        self.Q = np.diag([config.pos_noise] * 4 + [config.vel_noise] * 2)
        self.R = np.eye(4) * config.meas_noise

    def predict(self) -> np.ndarray:
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + self.Q
        return self.x[:4].copy()

    def update(self, z: np.ndarray) -> None:
        y = z - self.H @ self.x
        S = self.H @ self.P @ self.H.T + self.R
        K = np.linalg.solve(S, self.H @ self.P).T
        self.x = self.x + K @ y
        self.P = (np.eye(6) - K @ self.H) @ self.P

    @property
    def box(self) -> BoundingBox:
        return BoundingBox.from_array(self.x[:4])


def kalman_baseline_track(detections, first_gt: BoundingBox, iou_min: float = DEFAULT_IOU_MIN,
                          history_len: int = DEFAULT_HISTORY, config: KalmanConfig = KalmanConfig(),
                          start: int = 0) -> Trajectory:
    """SORT-style single-target filter: predict every frame, update on assignment.

    The first frame reports the initial box; later frames report the filtered
    estimate, or the prediction when no detection passes the gate.
    """
    kf = ConstantVelocityKalman(first_gt, config)
    history = GateHistory(first_gt, history_len, iou_min)
    traj = Trajectory(start=start)
    for k, cands in enumerate(detections[start:]):
        if k > 0:
            kf.predict()
        det = history.assign(cands)
        if det is not None:
            kf.update(det.as_array())
        box = kf.box
        traj.append(box, DETECTED if det is not None else RECURRENT)
        history.push(det if det is not None else box)
    return traj


def detection_only_track(detections, first_gt: BoundingBox, iou_min: float = DEFAULT_IOU_MIN,
                         history_len: int = DEFAULT_HISTORY, start: int = 0) -> Trajectory:
    """Report the assigned detection; hold the last box through misses."""
    history = GateHistory(first_gt, history_len, iou_min)
    traj = Trajectory(start=start)
    last = first_gt
    for cands in detections[start:]:
        det = history.assign(cands)
        if det is not None:
            last = det
        traj.append(last, DETECTED if det is not None else RECURRENT)
        history.push(last)
    return traj


@dataclass
class RoloSettings:
    """Everything besides the optimizer needed to build and train a tracker."""

    hidden_dim: int = 32
    feature_dim: int = 64
    feature_pool: int = 4
    feature_seed: int = 1
    gate_variant: str = "standard"
    heatmap_side: int = 32
    feedback_rounds: int = 1
    iou_min: float = DEFAULT_IOU_MIN
    history_len: int = DEFAULT_HISTORY


def provider_from_meta(meta: dict) -> ProjectionFeatures:
    return ProjectionFeatures(meta.get("feature_dim", 64), meta.get("feature_seed", 1), meta.get("feature_pool", 4))


def sequence_features(sequence, provider) -> np.ndarray:
    return _frame_features(sequence, provider, 0, len(sequence.gt))


def fit_rolo(records, train_config, settings: RoloSettings = RoloSettings(), model_seed: int | None = None):
    """Train a tracker model on labelled sequences.

    The first round feeds back the previous ground-truth box on frames
    without an accepted detection. Each of the ``feedback_rounds`` extra
    rounds re-runs the current model over the training sequences, feeds back
    its own predictions instead, and continues training from the current
    weights. Returns ``(model, [LossReport per round])``.
    """
    records = list(records)
    if not records:
        raise ValueError("no training sequences")
    provider = ProjectionFeatures(settings.feature_dim, settings.feature_seed, settings.feature_pool)
    feats = [sequence_features(r, provider) for r in records]
    width = feats[0].shape[1]
    region_width = 6 if train_config.mode == COORDINATE else settings.heatmap_side ** 2
    seed = train_config.seed if model_seed is None else model_seed
    model = init_model(width + region_width, settings.hidden_dim, train_config.mode, seed,
                       settings.gate_variant, settings.heatmap_side)
    model.meta = {
        "feature_dim": width,
        "feature_pool": settings.feature_pool,
        "feature_seed": settings.feature_seed,
        "step_size": train_config.step_size,
        "iou_min": settings.iou_min,
        "history_len": settings.history_len,
    }
    reports = []
    for rnd in range(1 + settings.feedback_rounds):
        feedback = model if rnd > 0 else None
        data = [
            training_sequence(_WithFeatures(r, f), train_config.mode, iou_min=settings.iou_min,
                              history_len=settings.history_len, heatmap_side=settings.heatmap_side,
                              model=feedback, step_size=train_config.step_size)
            for r, f in zip(records, feats)
        ]
        cfg = train_config if rnd == 0 else replace(train_config, seed=train_config.seed + rnd)
        model, report = train_model(model, data, cfg)
        reports.append(report)
    return model, reports


class _WithFeatures:
    """View of a sequence with precomputed features attached."""

    def __init__(self, sequence, features):
        self._seq = sequence
        self.features = features

    def __getattr__(self, name):
        return getattr(self._seq, name)
