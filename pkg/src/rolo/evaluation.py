"""Benchmark protocols (OPE, TRE, SRE), step-size sweep, and report files."""
from __future__ import annotations

import csv
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .regions import BoundingBox, iou
from .tracker import (
    DEFAULT_STEP_SIZE,
    RoloSettings,
    Trajectory,
    detection_only_track,
    fit_rolo,
    kalman_baseline_track,
    provider_from_meta,
    sequence_features,
    track_sequence,
)
from .training import TrainConfig

log = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(k / 20 for k in range(21))
DEFAULT_TRE_SEGMENTS = 20


def _default_perturbations():
    shifts = [(0.1, 0.0), (-0.1, 0.0), (0.0, 0.1), (0.0, -0.1),
              (0.1, 0.1), (0.1, -0.1), (-0.1, 0.1), (-0.1, -0.1)]
    return tuple([(dx, dy, 1.0) for dx, dy in shifts] + [(0.0, 0.0, s) for s in (0.8, 0.9, 1.1, 1.2)])


DEFAULT_PERTURBATIONS = _default_perturbations()
IDENTITY_PERTURBATION = ((0.0, 0.0, 1.0),)


def frame_ious(traj: Trajectory, gt: Sequence[BoundingBox]) -> np.ndarray:
    if len(traj) != len(gt):
        raise ValueError(f"trajectory has {len(traj)} frames, ground truth has {len(gt)}")
    return np.array([iou(p, g) for p, g in zip(traj.boxes, gt)])


def average_overlap_score(traj: Trajectory, gt: Sequence[BoundingBox]) -> float:
    """Mean per-frame IOU between a trajectory and the ground truth."""
    ious = frame_ious(traj, gt)
    if ious.size == 0:
        raise ValueError("cannot score an empty trajectory")
    return float(ious.mean())


@dataclass
class EvalCurve:
    thresholds: tuple[float, ...]
    rates: tuple[float, ...]
    auc: float


def curve_from_ious(ious, thresholds=DEFAULT_THRESHOLDS) -> EvalCurve:
    th = np.asarray(thresholds, dtype=np.float64)
    if th.ndim != 1 or th.size == 0:
        raise ValueError("need at least one threshold")
    if np.any(np.diff(th) < 0):
        raise ValueError("thresholds must be sorted ascending")
    if th[0] < 0 or th[-1] > 1:
        raise ValueError("thresholds must lie in [0, 1]")
    ious = np.asarray(ious, dtype=np.float64)
    if ious.size == 0:
        rates = np.zeros_like(th)
    else:
        rates = (ious[None, :] > th[:, None]).mean(axis=1)
    return EvalCurve(tuple(float(t) for t in th), tuple(float(r) for r in rates), float(rates.mean()))


def success_curve(traj: Trajectory, gt: Sequence[BoundingBox], thresholds=DEFAULT_THRESHOLDS) -> EvalCurve:
    """Fraction of frames whose IOU exceeds each threshold; AUC is the mean rate."""
    return curve_from_ious(frame_ious(traj, gt), thresholds)


@dataclass
class TrackerSpec:
    """A named tracker: ``run(sequence, start, init_box) -> Trajectory``."""

    name: str
    run: Callable[..., Trajectory]
    prepare: Callable[[Sequence], None] | None = None


def kalman_tracker(iou_min: float = 0.3, history_len: int = 5) -> TrackerSpec:
    def run(seq, start, init_box):
        return kalman_baseline_track(seq.detections, init_box, iou_min, history_len, start=start)

    return TrackerSpec("kalman", run)


def detector_tracker(iou_min: float = 0.3, history_len: int = 5) -> TrackerSpec:
    def run(seq, start, init_box):
        return detection_only_track(seq.detections, init_box, iou_min, history_len, start=start)

    return TrackerSpec("detector", run)


def oracle_tracker() -> TrackerSpec:
    """Reports the ground truth; only useful for checking the harness."""

    def run(seq, start, init_box):
        traj = Trajectory(start=start)
        for b in seq.gt[start:]:
            traj.append(b, "detector-assigned")
        return traj

    return TrackerSpec("oracle", run)


def rolo_tracker(model, step_size: int | None = None, name: str = "rolo") -> TrackerSpec:
    """Recurrent tracker; features are computed once per sequence up front."""
    meta = model.meta
    provider = provider_from_meta(meta)
    step = step_size or meta.get("step_size", DEFAULT_STEP_SIZE)
    iou_min = meta.get("iou_min", 0.3)
    history_len = meta.get("history_len", 5)
    cache: dict[int, np.ndarray] = {}

    def prepare(sequences):
        for seq in sequences:
            if id(seq) not in cache:
                cache[id(seq)] = sequence_features(seq, provider)

    def run(seq, start, init_box):
        feats = cache[id(seq)] if id(seq) in cache else sequence_features(seq, provider)
        return track_sequence(model, seq, step_size=step, iou_min=iou_min, start=start,
                              init_box=init_box, history_len=history_len, features=feats[start:])

    return TrackerSpec(name, run, prepare)


@dataclass
class EvalResult:
    """Per-sequence AOS and success curves for every tracker."""

    trackers: list[str]
    sequences: list[str]
    aos: dict[str, dict[str, float]] = field(default_factory=dict)
    curves: dict[str, EvalCurve] = field(default_factory=dict)
    sequence_curves: dict[str, dict[str, EvalCurve]] = field(default_factory=dict)
    runs: dict[str, dict[str, int]] = field(default_factory=dict)
    warnings: int = 0


def _run_jobs(jobs, threads: int):
    if threads <= 1:
        return [job() for job in jobs]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda job: job(), jobs))


def _evaluate(trackers: Sequence[TrackerSpec], sequences, runs_for, thresholds, threads: int) -> EvalResult:
    """Run every (tracker, sequence, start, init) job and pool frame IOUs."""
    warnings = 0
    plan = []
    for seq in sequences:
        runs, skipped = runs_for(seq)
        warnings += skipped
        plan.append((seq, runs))
    for spec in trackers:
        if spec.prepare is not None:
            spec.prepare(sequences)
    jobs, keys = [], []
    for spec in trackers:
        for seq, runs in plan:
            for start, init in runs:
                def job(spec=spec, seq=seq, start=start, init=init):
                    try:
                        traj = spec.run(seq, start, init)
                    except Exception as exc:
                        raise RuntimeError(f"tracker {spec.name!r} failed on sequence {seq.name!r}: {exc}") from exc
                    return frame_ious(traj, seq.gt[start:])
                jobs.append(job)
                keys.append((spec.name, seq.name))
    results = _run_jobs(jobs, threads)
    pooled: dict[tuple[str, str], list[np.ndarray]] = {}
    for key, ious in zip(keys, results):
        pooled.setdefault(key, []).append(ious)
    res = EvalResult([t.name for t in trackers], [s.name for s in sequences], warnings=warnings)
    for spec in trackers:
        res.aos[spec.name] = {}
        res.sequence_curves[spec.name] = {}
        res.runs[spec.name] = {}
        everything = []
        for seq, runs in plan:
            parts = pooled.get((spec.name, seq.name), [])
            ious = np.concatenate(parts) if parts else np.zeros(0)
            everything.append(ious)
            res.aos[spec.name][seq.name] = float(ious.mean()) if ious.size else float("nan")
            res.sequence_curves[spec.name][seq.name] = curve_from_ious(ious, thresholds)
            res.runs[spec.name][seq.name] = len(parts)
        res.curves[spec.name] = curve_from_ious(np.concatenate(everything) if everything else [], thresholds)
    return res


def run_ope(trackers, sequences, thresholds=DEFAULT_THRESHOLDS, threads: int = 1) -> EvalResult:
    """One run per sequence from the first frame's ground truth."""
    return _evaluate(trackers, sequences, lambda s: ([(0, s.gt[0])], 0), thresholds, threads)


def tre_starts(n_frames: int, segments: int) -> tuple[list[int], int]:
    """Evenly spaced start frames; repeated or out-of-range starts are dropped."""
    if segments < 1:
        raise ValueError("segments must be >= 1")
    starts, skipped = [], 0
    for k in range(segments):
        s = (k * n_frames) // segments
        if s >= n_frames or (starts and s == starts[-1]):
            skipped += 1
            continue
        starts.append(s)
    return starts, skipped


def run_tre(trackers, sequences, segments: int = DEFAULT_TRE_SEGMENTS, thresholds=DEFAULT_THRESHOLDS,
            threads: int = 1) -> EvalResult:
    """Runs from evenly spaced start frames, each seeded with that frame's truth."""
    if segments < 1:
        raise ValueError("segments must be >= 1")

    def runs_for(seq):
        starts, skipped = tre_starts(len(seq.gt), segments)
        if skipped:
            log.warning("sequence %s: skipped %d TRE segment starts", seq.name, skipped)
        return [(s, seq.gt[s]) for s in starts], skipped

    return _evaluate(trackers, sequences, runs_for, thresholds, threads)


def perturb_box(box: BoundingBox, dx: float, dy: float, scale: float) -> BoundingBox | None:
    """Shift the center by fractions of the box size and rescale; None if empty."""
    cx = box.cx + dx * box.w
    cy = box.cy + dy * box.h
    w, h = box.w * scale, box.h * scale
    x0, x1 = max(cx - w / 2, 0.0), min(cx + w / 2, 1.0)
    y0, y1 = max(cy - h / 2, 0.0), min(cy + h / 2, 1.0)
    if x1 - x0 <= 0 or y1 - y0 <= 0:
        return None
    return BoundingBox.clipped((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def run_sre(trackers, sequences, perturbations=DEFAULT_PERTURBATIONS, thresholds=DEFAULT_THRESHOLDS,
            threads: int = 1) -> EvalResult:
    """One run per perturbed first-frame box ``(dx, dy, scale)``."""
    perturbations = list(perturbations)
    if not perturbations:
        raise ValueError("need at least one perturbation")

    def runs_for(seq):
        runs, skipped = [], 0
        for dx, dy, scale in perturbations:
            init = perturb_box(seq.gt[0], dx, dy, scale)
            if init is None:
                skipped += 1
                log.warning("sequence %s: perturbation (%g, %g, %g) gives an empty box", seq.name, dx, dy, scale)
                continue
            runs.append((0, init))
        return runs, skipped

    return _evaluate(trackers, sequences, runs_for, thresholds, threads)


@dataclass
class SweepRow:
    step: int
    mean_iou: float
    fps: float


def time_tracking(spec: TrackerSpec, sequences, repeats: int = 3) -> float:
    """Frames per second of the tracking loop alone (best of ``repeats``)."""
    return _fps_table([spec], sequences, repeats)[0]


def _fps_table(specs, sequences, repeats: int) -> list[float]:
    """Best-of-``repeats`` fps per tracker, timed in interleaved rounds.

    Interleaving keeps a slow stretch of wall time from landing on only one
    tracker. Features are prepared beforehand so only tracking is timed.
    """
    for spec in specs:
        if spec.prepare is not None:
            spec.prepare(sequences)
    frames = sum(len(s.gt) for s in sequences)
    best = [float("inf")] * len(specs)
    for _ in range(max(repeats, 1)):
        for k, spec in enumerate(specs):
            t0 = time.perf_counter()
            for seq in sequences:
                spec.run(seq, 0, seq.gt[0])
            best[k] = min(best[k], time.perf_counter() - t0)
    return [frames / b if b > 0 else float("inf") for b in best]


def sweep_step_size(train_sequences, test_sequences, steps, train_config: TrainConfig,
                    settings: RoloSettings = RoloSettings(), threads: int = 1,
                    timing_repeats: int = 3) -> list[SweepRow]:
    """Train and evaluate one model per step size under identical seeds.

    Throughput is measured after all training finishes.
    """
    steps = [int(s) for s in steps]
    if not steps or any(s < 1 for s in steps):
        raise ValueError("step sizes must be positive")
    shortest = min(len(s.gt) for s in list(train_sequences) + list(test_sequences))
    if max(steps) > shortest:
        raise ValueError(f"step size {max(steps)} exceeds the shortest sequence ({shortest} frames)")
    specs, ious = [], []
    for step in steps:
        model, _ = fit_rolo(train_sequences, replace(train_config, step_size=step), settings)
        spec = rolo_tracker(model)
        result = run_ope([spec], test_sequences, threads=threads)
        ious.append(float(np.mean([result.aos[spec.name][s.name] for s in test_sequences])))
        specs.append(spec)
    fps = _fps_table(specs, test_sequences, timing_repeats)
    return [SweepRow(step, iou_, f) for step, iou_, f in zip(steps, ious, fps)]


def _fmt(x: float) -> str:
    return f"{x:.6f}"


def write_aos_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence"] + result.trackers)
        for seq in result.sequences:
            w.writerow([seq] + [_fmt(result.aos[t][seq]) for t in result.trackers])


def write_success_csv(result: EvalResult, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["tracker", "threshold", "success_rate", "auc"])
        for t in result.trackers:
            c = result.curves[t]
            for th, r in zip(c.thresholds, c.rates):
                w.writerow([t, _fmt(th), _fmt(r), _fmt(c.auc)])


def write_sweep_csv(rows: Sequence[SweepRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "mean_iou", "fps"])
        for r in rows:
            w.writerow([r.step, _fmt(r.mean_iou), f"{r.fps:.2f}"])


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def success_svg(curves: dict[str, EvalCurve], title: str = "Success plot") -> str:
    """Plain SVG 1.1 line chart of success rate against overlap threshold."""
    W, H, L, R, T, B = 480, 360, 60, 20, 40, 50
    pw, ph = W - L - R, H - T - B

    def sx(v):
        return L + v * pw

    def sy(v):
        return T + (1.0 - v) * ph

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{title}</text>',
        f'<rect x="{L}" y="{T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for k in range(6):
        v = k / 5
        out.append(f'<line x1="{sx(v):.1f}" y1="{T + ph}" x2="{sx(v):.1f}" y2="{T + ph + 5}" stroke="black"/>')
        out.append(f'<text x="{sx(v):.1f}" y="{T + ph + 18}" font-family="sans-serif" font-size="10" text-anchor="middle">{v:.1f}</text>')
        out.append(f'<line x1="{L - 5}" y1="{sy(v):.1f}" x2="{L}" y2="{sy(v):.1f}" stroke="black"/>')
        out.append(f'<text x="{L - 8}" y="{sy(v) + 3:.1f}" font-family="sans-serif" font-size="10" text-anchor="end">{v:.1f}</text>')
    out.append(f'<text x="{L + pw / 2:.1f}" y="{H - 10}" font-family="sans-serif" font-size="12" text-anchor="middle">Overlap threshold</text>')
    out.append(f'<text x="15" y="{T + ph / 2:.1f}" font-family="sans-serif" font-size="12" text-anchor="middle" '
               f'transform="rotate(-90 15 {T + ph / 2:.1f})">Success rate</text>')
    for k, (name, c) in enumerate(curves.items()):
        color = _COLORS[k % len(_COLORS)]
        pts = " ".join(f"{sx(t):.2f},{sy(r):.2f}" for t, r in zip(c.thresholds, c.rates))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        ly = T + 15 + 16 * k
        out.append(f'<line x1="{L + 10}" y1="{ly}" x2="{L + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{L + 35}" y="{ly + 4}" font-family="sans-serif" font-size="11">{name} [{c.auc:.3f}]</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_report(result: EvalResult, out_dir, title: str = "Success plot") -> list[Path]:
    """Write ``aos.csv``, ``success.csv`` and (with any tracker) ``success.svg``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        paths = [out / "aos.csv", out / "success.csv"]
        write_aos_csv(result, paths[0])
        write_success_csv(result, paths[1])
        if result.trackers:
            svg = out / "success.svg"
            svg.write_text(success_svg(result.curves, title))
            paths.append(svg)
    except OSError as exc:
        raise OSError(f"could not write report to {out}: {exc}") from exc
    return paths
