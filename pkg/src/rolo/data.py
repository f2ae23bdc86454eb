"""Synthetic occlusion scenes and OTB-style sequence folders.

A sequence folder holds ``groundtruth_rect.txt`` (pixel ``x,y,w,h`` per line,
top-left origin) and optionally ``img/NNNN.pgm`` frames,
``detections.txt`` (``frame,cx,cy,w,h`` normalized, 1-based frame),
``occlusion.txt`` (one 0/1 flag per frame), ``features.csv`` (one row per
frame) and ``meta.json``.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics import SeededRng
from .regions import BoundingBox
from .tracker import DetectorStubConfig, detect_frame
from .training import WindowedSequence


@dataclass
class SyntheticSceneConfig:
    frames: int = 100
    image_side: int = 64
    speed: float = 0.012
    velocity: tuple[float, float] | None = None
    start_center: tuple[float, float] | None = None
    target_size: tuple[float, float] = (0.2, 0.2)
    turn_sigma: float = 0.15
    scale_amplitude: float = 0.0
    occluder_start: int | None = None
    occluder_frames: int = 10
    occluder_margin: float = 0.02
    distractors: int = 1
    distractor_size: tuple[float, float] = (0.12, 0.12)
    dropout_prob: float = 0.2
    jitter_sigma: float = 0.03
    false_positive_rate: float = 0.0
    background_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1 or self.image_side < 4:
            raise ValueError("need at least one frame and an image side of 4 pixels")
        w, h = self.target_size
        if not (0 < w < 1 and 0 < h < 1):
            raise ValueError(f"target size {self.target_size} must lie strictly inside (0, 1)")
        if self.start_center is not None:
            cx, cy = self.start_center
            if cx - w / 2 < 0 or cx + w / 2 > 1 or cy - h / 2 < 0 or cy + h / 2 > 1:
                raise ValueError(f"start center {self.start_center} puts the target off the image")
        if self.scale_amplitude < 0 or (1 + self.scale_amplitude) * max(w, h) >= 1:
            raise ValueError("scale_amplitude makes the target larger than the image")

    def stub(self) -> DetectorStubConfig:
        return DetectorStubConfig(self.dropout_prob, self.jitter_sigma, self.false_positive_rate,
                                  seed=self.seed * 7919 + 17)

    @classmethod
    def from_mapping(cls, values: Mapping[str, object], **overrides) -> "SyntheticSceneConfig":
        kwargs = {}
        for f in fields(cls):
            if f.name in values:
                kwargs[f.name] = _parse_field(f.name, values[f.name], getattr(cls(), f.name))
        kwargs.update(overrides)
        return cls(**kwargs)


def _parse_field(name, raw, default):
    if isinstance(raw, str):
        text = raw.strip()
        if text.lower() in ("none", ""):
            return None
        if default is None and name in ("occluder_start",):
            return int(text)
        if isinstance(default, tuple) or default is None:
            return tuple(float(v) for v in re.split(r"[,\s]+", text) if v)
        if isinstance(default, bool):
            return text.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
    return raw


@dataclass
class SequenceRecord:
    """Frames (or features), ground truth, detections and occlusion flags."""

    name: str
    gt: list[BoundingBox]
    frames: np.ndarray | None = None
    features: np.ndarray | None = None
    detections: list[list[BoundingBox]] | None = None
    occluded: np.ndarray | None = None
    image_width: int = 0
    image_height: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.gt)
        for label, arr in (("frames", self.frames), ("features", self.features),
                           ("detections", self.detections), ("occluded", self.occluded)):
            if arr is not None and len(arr) != n:
                raise ValueError(f"sequence {self.name!r}: {label} has {len(arr)} entries, ground truth has {n}")
        if self.occluded is None:
            self.occluded = np.zeros(n, dtype=bool)

    def __len__(self) -> int:
        return len(self.gt)


def _render(side: int, target: BoundingBox, texture: np.ndarray, background: np.ndarray,
            distractors, occluder: BoundingBox | None) -> np.ndarray:
    img = background.copy()

    def paint(box: BoundingBox, fill):
        x0 = int(round((box.cx - box.w / 2) * side))
        x1 = int(round((box.cx + box.w / 2) * side))
        y0 = int(round((box.cy - box.h / 2) * side))
        y1 = int(round((box.cy + box.h / 2) * side))
        x0, y0 = max(x0, 0), max(y0, 0)
        x1, y1 = min(max(x1, x0 + 1), side), min(max(y1, y0 + 1), side)
        if callable(fill):
            img[y0:y1, x0:x1] = fill(y1 - y0, x1 - x0)
        else:
            img[y0:y1, x0:x1] = fill

    for d in distractors:
        paint(d, 0.55)
    paint(target, lambda hh, ww: texture[:hh, :ww])
    if occluder is not None:
        paint(occluder, 0.3)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def _bounce(pos: float, vel: float, half: float) -> tuple[float, float]:
    lo, hi = half, 1.0 - half
    if pos < lo:
        return 2 * lo - pos, -vel
    if pos > hi:
        return 2 * hi - pos, -vel
    return pos, vel


def generate_synthetic_sequence(config: SyntheticSceneConfig, name: str | None = None) -> SequenceRecord:
    """Render a moving textured target with distractors and an occluder.

    The target moves with the given (or a random) velocity, its heading
    drifts by ``turn_sigma`` radians per frame, and it reflects off the image
    border. The occluder interval starts at ``occluder_start`` (random in the
    middle three fifths when None). During it a flat rectangle covering the
    target's whole path for that interval is drawn on top and the detector
    reports nothing for the target.
    """
    rng = SeededRng(config.seed)
    w0, h0 = config.target_size
    amp = config.scale_amplitude
    max_half = (0.5 * w0 * (1 + amp), 0.5 * h0 * (1 + amp))
    if config.start_center is not None:
        cx, cy = config.start_center
    else:
        cx = rng.uniform(max_half[0] + 0.05, 1 - max_half[0] - 0.05)
        cy = rng.uniform(max_half[1] + 0.05, 1 - max_half[1] - 0.05)
    if config.velocity is not None:
        vx, vy = config.velocity
    else:
        ang = rng.uniform(0, 2 * np.pi)
        vx, vy = config.speed * np.cos(ang), config.speed * np.sin(ang)
    phase = rng.uniform(0, 2 * np.pi)
    gt: list[BoundingBox] = []
    for t in range(config.frames):
        if t > 0:
            if config.turn_sigma > 0:
                turn = rng.normal(0.0, config.turn_sigma)
                c, s = np.cos(turn), np.sin(turn)
                vx, vy = c * vx - s * vy, s * vx + c * vy
            cx, vx = _bounce(cx + vx, vx, max_half[0])
            cy, vy = _bounce(cy + vy, vy, max_half[1])
        scale = 1.0 + amp * np.sin(phase + 2 * np.pi * t / 50.0)
        w, h = w0 * scale, h0 * scale
        if cx - w / 2 < -1e-12 or cx + w / 2 > 1 + 1e-12 or cy - h / 2 < -1e-12 or cy + h / 2 > 1 + 1e-12:
            raise ValueError(f"target leaves the image at frame {t}")
        gt.append(BoundingBox.clipped(cx, cy, w, h))

    occluded = np.zeros(config.frames, dtype=bool)
    occluder = None
    occ_start = config.occluder_start
    if occ_start is None:
        margin = config.frames // 5
        occ_start = int(rng.integers(margin, max(config.frames - margin - config.occluder_frames, margin) + 1))
    if config.occluder_frames > 0:
        lo = max(occ_start, 0)
        hi = min(occ_start + config.occluder_frames, config.frames)
        if lo < hi:
            occluded[lo:hi] = True
            corners = np.array([b.corners() for b in gt[lo:hi]])
            m = config.occluder_margin
            x0, y0 = max(corners[:, 0].min() - m, 0.0), max(corners[:, 1].min() - m, 0.0)
            x1, y1 = min(corners[:, 2].max() + m, 1.0), min(corners[:, 3].max() + m, 1.0)
            occluder = BoundingBox.clipped((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)

    side = config.image_side
    yy, xx = np.mgrid[0:side, 0:side] / side
    bg_rng = SeededRng(config.background_seed)
    background = 0.15 + 0.1 * xx + 0.05 * yy + bg_rng.normal(0.0, 0.03, size=(side, side))
    texture = 0.85 + 0.1 * np.sign(np.sin(np.arange(side)[:, None] * 1.3) * np.cos(np.arange(side)[None] * 0.9))

    dpos = []
    dw, dh = config.distractor_size
    for _ in range(config.distractors):
        dpos.append([rng.uniform(dw / 2, 1 - dw / 2), rng.uniform(dh / 2, 1 - dh / 2),
                     rng.normal(0, config.speed), rng.normal(0, config.speed)])
    distractors: list[list[BoundingBox]] = []
    for t in range(config.frames):
        boxes = []
        for d in dpos:
            if t > 0:
                d[0], d[2] = _bounce(d[0] + d[2], d[2], dw / 2)
                d[1], d[3] = _bounce(d[1] + d[3], d[3], dh / 2)
            boxes.append(BoundingBox.clipped(d[0], d[1], dw, dh))
        distractors.append(boxes)

    frames = np.stack([
        _render(side, gt[t], texture, background, distractors[t], occluder if occluded[t] else None)
        for t in range(config.frames)
    ])
    stub = config.stub()
    detections = [detect_frame(stub, t, gt[t], bool(occluded[t]), distractors[t]) for t in range(config.frames)]
    meta = {"generator": "synthetic", "config": _jsonable(asdict(config))}
    return SequenceRecord(name or f"synth_{config.seed:04d}", gt, frames=frames, detections=detections,
                          occluded=occluded, image_width=side, image_height=side, meta=meta)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def read_pnm(path) -> np.ndarray:
    """Read a binary or ASCII PGM/PPM (8-bit) into a uint8 array."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    magic = tokens[0]
    width, height, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval > 255:
        raise ValueError(f"{path}: only 8-bit images are supported")
    channels = 3 if magic in (b"P6", b"P3") else 1
    if magic in (b"P5", b"P6"):
        raw = np.frombuffer(data, dtype=np.uint8, count=width * height * channels, offset=pos + 1)
    elif magic in (b"P2", b"P3"):
        raw = np.array(data[pos:].split()[: width * height * channels], dtype=np.uint8)
    else:
        raise ValueError(f"{path}: unsupported image type {magic!r}")
    img = raw.reshape(height, width, channels) if channels == 3 else raw.reshape(height, width)
    return img.copy()


def write_pgm_frame(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{frame.shape[1]} {frame.shape[0]}\n255\n".encode("ascii"))
        fh.write(frame.tobytes())


def _pixel_line(box: BoundingBox, W: int, H: int) -> str:
    x = (box.cx - box.w / 2) * W
    y = (box.cy - box.h / 2) * H
    return f"{x:.4f},{y:.4f},{box.w * W:.4f},{box.h * H:.4f}"


def save_sequence(record: SequenceRecord, directory) -> Path:
    """Write a sequence folder; identical records give identical bytes."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    W, H = record.image_width, record.image_height
    (out / "groundtruth_rect.txt").write_text("".join(_pixel_line(b, W, H) + "\n" for b in record.gt))
    if record.frames is not None:
        img_dir = out / "img"
        img_dir.mkdir(exist_ok=True)
        for t, frame in enumerate(record.frames):
            write_pgm_frame(img_dir / f"{t + 1:04d}.pgm", frame)
    if record.detections is not None:
        lines = ["frame,cx,cy,w,h\n"]
        for t, cands in enumerate(record.detections):
            lines += [f"{t + 1},{b.cx!r},{b.cy!r},{b.w!r},{b.h!r}\n" for b in cands]
        (out / "detections.txt").write_text("".join(lines))
    if record.features is not None:
        np.savetxt(out / "features.csv", record.features, delimiter=",", fmt="%.17g")
    (out / "occlusion.txt").write_text("".join(f"{int(v)}\n" for v in record.occluded))
    meta = dict(record.meta, name=record.name, image_width=W, image_height=H, frames=len(record))
    (out / "meta.json").write_text(json.dumps(_jsonable(meta), sort_keys=True, indent=2) + "\n")
    return out


def parse_groundtruth(path, image_width: int, image_height: int) -> list[BoundingBox]:
    if not image_width or not image_height:
        raise ValueError(f"{path}: image width and height are required to normalize boxes")
    boxes = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            parts = [p for p in re.split(r"[,\t ]+", line) if p]
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 values 'x,y,w,h', got {line!r}")
            try:
                x, y, w, h = (float(p) for p in parts)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric value in {line!r}") from None
            boxes.append(BoundingBox.clipped((x + w / 2) / image_width, (y + h / 2) / image_height,
                                             w / image_width, h / image_height))
    if not boxes:
        raise ValueError(f"{path}: ground truth file is empty")
    return boxes


def load_otb_sequence(path, image_width: int | None = None, image_height: int | None = None) -> SequenceRecord:
    """Load a sequence folder (or a bare ground-truth file).

    Image size comes from the arguments, then ``meta.json``, then the first
    frame's header.
    """
    path = Path(path)
    folder = path if path.is_dir() else path.parent
    gt_file = folder / "groundtruth_rect.txt" if path.is_dir() else path
    if not gt_file.exists():
        raise FileNotFoundError(f"{gt_file}: ground truth file not found")
    meta = {}
    if (folder / "meta.json").exists():
        meta = json.loads((folder / "meta.json").read_text())
    frame_files = []
    img_dir = folder / "img"
    if img_dir.is_dir():
        frame_files = sorted(p for p in img_dir.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".pnm"))
    frames = None
    if frame_files:
        frames = np.stack([read_pnm(p) for p in frame_files])
    W = image_width or meta.get("image_width") or (frames.shape[2] if frames is not None else None)
    H = image_height or meta.get("image_height") or (frames.shape[1] if frames is not None else None)
    gt = parse_groundtruth(gt_file, W, H)
    n = len(gt)
    if frames is not None and len(frames) != n:
        raise ValueError(f"{folder}: {len(frames)} frames but {n} ground-truth boxes")
    features = None
    if frames is None and (folder / "features.csv").exists():
        features = np.loadtxt(folder / "features.csv", delimiter=",", ndmin=2)
    detections = None
    if (folder / "detections.txt").exists():
        detections = [[] for _ in range(n)]
        with open(folder / "detections.txt") as fh:
            for lineno, raw in enumerate(fh, start=1):
                line = raw.strip()
                if not line or line.startswith("frame"):
                    continue
                parts = line.split(",")
                if len(parts) != 5:
                    raise ValueError(f"{folder / 'detections.txt'}:{lineno}: expected 'frame,cx,cy,w,h'")
                t = int(parts[0]) - 1
                if not 0 <= t < n:
                    raise ValueError(f"{folder / 'detections.txt'}:{lineno}: frame {t + 1} out of range")
                detections[t].append(BoundingBox(*(float(v) for v in parts[1:])))
    occluded = None
    if (folder / "occlusion.txt").exists():
        occluded = np.array([int(v) for v in (folder / "occlusion.txt").read_text().split()], dtype=bool)
    name = meta.get("name", folder.name)
    return SequenceRecord(name, gt, frames=frames, features=features, detections=detections,
                          occluded=occluded, image_width=int(W), image_height=int(H), meta=meta)


def load_dataset(path) -> list[SequenceRecord]:
    """Every sequence folder under ``path`` (or ``path`` itself), sorted by name."""
    path = Path(path)
    if (path / "groundtruth_rect.txt").exists():
        return [load_otb_sequence(path)]
    dirs = sorted(p for p in path.iterdir() if p.is_dir() and (p / "groundtruth_rect.txt").exists())
    if not dirs:
        raise FileNotFoundError(f"{path}: no sequence folders with groundtruth_rect.txt")
    return [load_otb_sequence(d) for d in dirs]


def linear_feature_toy(seed: int, frames: int = 40, feature_dim: int = 6) -> WindowedSequence:
    """Noiseless regression task: features are a fixed linear map of the box.

    A box bounces inside ``[0.2, 0.8]`` at constant speed; the region stream
    carries the true box. Used to check that training can fit at all.
    """
    rng = SeededRng(seed)
    A = rng.normal(size=(feature_dim, 4))
    c = rng.uniform(0.3, 0.7, size=2)
    v = rng.uniform(-0.01, 0.01, size=2)
    size = rng.uniform(0.1, 0.3, size=2)
    boxes = []
    for _ in range(frames):
        c = c + v
        v = np.where((c < 0.2) | (c > 0.8), -v, v)
        boxes.append(np.r_[c, size])
    boxes = np.array(boxes)
    region = np.zeros((frames, 6))
    region[:, 1:5] = boxes
    return WindowedSequence(np.hstack([boxes @ A.T, region]), boxes, f"toy_{seed:04d}")


OCCLUSION_TRAIN_SEED = 1000


def occlusion_suite(test_count: int = 10, train_count: int = 60, **overrides):
    """Seeded train/test scenes: 100 frames, 20% dropout, one 10-frame occlusion.

    Test scenes use seeds ``0..test_count-1``; training scenes start at seed
    1000 so the two never overlap.
    """
    def make(seed):
        return generate_synthetic_sequence(SyntheticSceneConfig(seed=seed, **overrides))

    train = [make(OCCLUSION_TRAIN_SEED + i) for i in range(train_count)]
    test = [make(i) for i in range(test_count)]
    return train, test
