"""Command-line entry point: ``rolo {gen,train,track,eval,sweep}``.

Settings resolve as flag > ``ROLO_SEED`` (seed only) > ``--config`` file >
built-in default. Exit status is 0 on success, 2 on a usage or configuration
error and 1 when the run itself fails. Every run leaves a JSON manifest next
to its outputs.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, fields
from pathlib import Path

from . import __version__
from .data import SyntheticSceneConfig, generate_synthetic_sequence, load_dataset, save_sequence
from .evaluation import (
    DEFAULT_TRE_SEGMENTS,
    detector_tracker,
    kalman_tracker,
    rolo_tracker,
    run_ope,
    run_sre,
    run_tre,
    sweep_step_size,
    write_report,
    write_sweep_csv,
)
from .lstm import COORDINATE, MODES, load_model, save_model
from .numerics import RNG_ALGORITHM
from .tracker import DetectorStubConfig, RoloSettings, detect_sequence, fit_rolo
from .training import TrainConfig, read_config_file

log = logging.getLogger("rolo")

SEED_ENV = "ROLO_SEED"
TRACKERS = ("rolo", "kalman", "detector")
MANIFEST = "manifest.json"


class ConfigError(Exception):
    """Bad flag values or config file contents (exit status 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _train_keys() -> set[str]:
    return {f.name for f in fields(TrainConfig)} | {f.name for f in fields(RoloSettings)}


CONFIG_KEYS = {
    "gen": {f.name for f in fields(SyntheticSceneConfig)} | {"sequences"},
    "train": _train_keys(),
    "track": {"tracker", "step_size", "dropout_prob", "jitter_sigma", "detector_seed"},
    "eval": {"mode", "trackers", "segments", "dropout_prob", "jitter_sigma", "detector_seed"},
    "sweep": _train_keys() | {"steps", "timing_repeats"},
}


def _load_config(args) -> dict[str, str]:
    if not args.config:
        return {}
    try:
        values = read_config_file(args.config)
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    unknown = sorted(set(values) - CONFIG_KEYS[args.command])
    if unknown:
        raise ConfigError(f"{args.config}: unknown keys for '{args.command}': {', '.join(unknown)}")
    return values


def _resolve_seed(args, cfg: dict) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get(SEED_ENV)
    if env is not None and env.strip():
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from None
    try:
        return int(cfg.get("seed", 0))
    except ValueError:
        raise ConfigError(f"config seed {cfg['seed']!r} is not an integer") from None


def _merge(cfg: dict, args, keys) -> dict:
    """Config-file values overlaid with any flags that were given."""
    merged = dict(cfg)
    for key in keys:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _build(factory, values: dict, label: str):
    try:
        return factory(values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {label} settings: {exc}") from exc


def _settings_from(values: dict) -> RoloSettings:
    defaults = RoloSettings()
    kwargs = {}
    for f in fields(RoloSettings):
        if f.name in values:
            default = getattr(defaults, f.name)
            kwargs[f.name] = type(default)(values[f.name])
    return RoloSettings(**kwargs)


def _int_list(text, label: str) -> list[int]:
    try:
        out = [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError:
        raise ConfigError(f"{label} must be a comma-separated list of integers, got {text!r}") from None
    if not out:
        raise ConfigError(f"{label} is empty")
    return out


def _name_list(text, allowed, label: str) -> list[str]:
    out = [v for v in str(text).replace(" ", "").split(",") if v]
    bad = [v for v in out if v not in allowed]
    if bad or not out:
        raise ConfigError(f"{label} must be drawn from {', '.join(allowed)}; got {text!r}")
    return out


def _stub_from(values: dict) -> DetectorStubConfig:
    return DetectorStubConfig(
        dropout_prob=float(values.get("dropout_prob", 0.2)),
        jitter_sigma=float(values.get("jitter_sigma", 0.03)),
        seed=int(values.get("detector_seed", 0)),
    )


def _with_detections(records, stub: DetectorStubConfig):
    """Sequences loaded without a detections file get stub detections."""
    for rec in records:
        if rec.detections is None:
            log.info("sequence %s has no detections; using the detector stub", rec.name)
            rec.detections = detect_sequence(stub, rec.gt, rec.occluded)
    return records


def _load(path, label="--data"):
    if path is None:
        raise ConfigError(f"{label} is required")
    return load_dataset(path)


def write_manifest(path: Path, command: str, argv, config: dict, seed, outputs, started: float) -> Path:
    """Atomically write the run manifest (temp file, then rename)."""
    base = path.parent
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "seed": seed,
        "rng": RNG_ALGORITHM,
        "version": __version__,
        "outputs": sorted(os.path.relpath(p, base) for p in outputs),
        "started_at": _dt.datetime.fromtimestamp(started, _dt.timezone.utc).isoformat(),
        "wall_clock_seconds": round(time.time() - started, 3),
    }
    base.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=base, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True, default=str)
            fh.write("\n")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def cmd_gen(args, cfg, argv, started):
    seed = _resolve_seed(args, cfg)
    values = {k: v for k, v in cfg.items() if k != "sequences"}
    count = args.sequences if args.sequences is not None else int(cfg.get("sequences", 1))
    if count < 1:
        raise ConfigError("sequences must be >= 1")
    configs = [_build(lambda v, s=seed + i: SyntheticSceneConfig.from_mapping(v, seed=s), values, "generator")
               for i in range(count)]
    if args.out is None:
        raise ConfigError("--out is required")
    out = Path(args.out)
    outputs = [save_sequence(generate_synthetic_sequence(c), out / f"synth_{c.seed:04d}") for c in configs]
    snapshot = dict(asdict(configs[0]), sequences=count)
    write_manifest(out / MANIFEST, "gen", argv, snapshot, seed, outputs, started)
    return 0


def _train_inputs(args, cfg):
    seed = _resolve_seed(args, cfg)
    values = _merge(cfg, args, ("mode", "epochs", "step_size", "batch_size", "learning_rate", "hidden_dim"))
    values["seed"] = seed
    train_cfg = _build(TrainConfig.from_mapping, values, "training")
    settings = _build(_settings_from, values, "model")
    return seed, train_cfg, settings


def cmd_train(args, cfg, argv, started):
    seed, train_cfg, settings = _train_inputs(args, cfg)
    if args.out_model is None:
        raise ConfigError("--out-model is required")
    records = _with_detections(_load(args.data), DetectorStubConfig())
    model, reports = fit_rolo(records, train_cfg, settings)
    model_path = Path(args.out_model)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, model_path)
    loss_path = model_path.with_name(model_path.name + ".loss.csv")
    merged = reports[0]
    for r in reports[1:]:
        merged.losses += r.losses
        merged.seconds += r.seconds
    merged.write_csv(loss_path)
    snapshot = {"train": asdict(train_cfg), "model": asdict(settings)}
    write_manifest(model_path.with_name(model_path.name + ".manifest.json"), "train", argv, snapshot, seed,
                   [model_path, loss_path], started)
    return 0


def _tracker_specs(names, model_path):
    specs = []
    for name in names:
        if name == "rolo":
            if model_path is None:
                raise ConfigError("the rolo tracker needs --model")
            try:
                specs.append(rolo_tracker(load_model(model_path)))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot load model {model_path}: {exc}") from exc
        elif name == "kalman":
            specs.append(kalman_tracker())
        else:
            specs.append(detector_tracker())
    return specs


def cmd_track(args, cfg, argv, started):
    values = _merge(cfg, args, ("tracker",))
    name = _name_list(values.get("tracker", "rolo"), TRACKERS, "tracker")
    if len(name) != 1:
        raise ConfigError("track runs exactly one tracker")
    if args.out is None:
        raise ConfigError("--out is required")
    spec = _tracker_specs(name, args.model)[0]
    records = _with_detections(_load(args.data), _build(_stub_from, values, "detector"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    outputs = []
    if spec.prepare is not None:
        spec.prepare(records)
    for rec in records:
        traj = spec.run(rec, 0, rec.gt[0])
        path = out / f"{rec.name}.csv"
        traj.write_csv(path)
        outputs.append(path)
    write_manifest(out / MANIFEST, "track", argv, values, None, outputs, started)
    return 0


def cmd_eval(args, cfg, argv, started):
    values = _merge(cfg, args, ("mode", "trackers", "segments"))
    mode = values.get("mode", "ope")
    if mode not in ("ope", "tre", "sre"):
        raise ConfigError(f"unknown eval mode {mode!r}")
    names = _name_list(values.get("trackers", "rolo,kalman,detector"), TRACKERS, "trackers")
    if args.out is None:
        raise ConfigError("--out is required")
    specs = _tracker_specs(names, args.model)
    records = _with_detections(_load(args.data), _build(_stub_from, values, "detector"))
    if mode == "ope":
        result = run_ope(specs, records, threads=args.threads)
    elif mode == "tre":
        segments = int(values.get("segments", DEFAULT_TRE_SEGMENTS))
        if segments < 1:
            raise ConfigError("segments must be >= 1")
        result = run_tre(specs, records, segments=segments, threads=args.threads)
    else:
        result = run_sre(specs, records, threads=args.threads)
    out = Path(args.out)
    paths = write_report(result, out, title=f"Success plots of {mode.upper()}")
    snapshot = dict(values, mode=mode, trackers=",".join(names), warnings=result.warnings)
    write_manifest(out / MANIFEST, "eval", argv, snapshot, None, paths, started)
    return 0


def cmd_sweep(args, cfg, argv, started):
    seed, train_cfg, settings = _train_inputs(args, cfg)
    values = _merge(cfg, args, ("steps",))
    steps = _int_list(values.get("steps", "1,3,6,9"), "steps")
    if any(s < 1 for s in steps):
        raise ConfigError("steps must be positive")
    repeats = int(cfg.get("timing_repeats", 3)) if args.timing_repeats is None else args.timing_repeats
    if args.out is None:
        raise ConfigError("--out is required")
    test = _with_detections(_load(args.data), DetectorStubConfig())
    train = _with_detections(_load(args.train_data), DetectorStubConfig()) if args.train_data else test
    shortest = min(len(r) for r in train + test)
    if max(steps) > shortest:
        raise ConfigError(f"step size {max(steps)} exceeds the shortest sequence ({shortest} frames)")
    rows = sweep_step_size(train, test, steps, train_cfg, settings, threads=args.threads, timing_repeats=repeats)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "sweep.csv"
    write_sweep_csv(rows, path)
    snapshot = {"train": asdict(train_cfg), "model": asdict(settings), "steps": steps, "timing_repeats": repeats}
    write_manifest(out / MANIFEST, "sweep", argv, snapshot, seed, [path], started)
    return 0


def _add_training_flags(p):
    p.add_argument("--seed", type=int, help=f"training seed (overrides {SEED_ENV} and the config file)")
    p.add_argument("--mode", choices=MODES, help=f"region representation (default {COORDINATE})")
    p.add_argument("--epochs", type=int)
    p.add_argument("--step-size", dest="step_size", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat 'key = value' settings file")
    common.add_argument("--threads", type=int, default=1, help="worker threads for evaluation (default 1)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="rolo", description="Recurrent tracker harness: data, training, tracking, evaluation.")
    parser.add_argument("--version", action="version", version=f"rolo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", parents=[common], help="write synthetic occlusion sequences")
    p.add_argument("--seed", type=int)
    p.add_argument("--sequences", type=int, help="number of sequences, seeds seed..seed+n-1 (default 1)")
    p.add_argument("--out")

    p = sub.add_parser("train", parents=[common], help="train a recurrent tracker model")
    p.add_argument("--data")
    p.add_argument("--out-model", dest="out_model")
    _add_training_flags(p)

    p = sub.add_parser("track", parents=[common], help="write one trajectory CSV per sequence")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--tracker", choices=TRACKERS)
    p.add_argument("--out")

    p = sub.add_parser("eval", parents=[common], help="run OPE, TRE or SRE and write reports")
    p.add_argument("--mode", choices=("ope", "tre", "sre"))
    p.add_argument("--trackers", help="comma list from rolo,kalman,detector")
    p.add_argument("--segments", type=int, help=f"TRE start points (default {DEFAULT_TRE_SEGMENTS})")
    p.add_argument("--model")
    p.add_argument("--data")
    p.add_argument("--out")

    p = sub.add_parser("sweep", parents=[common], help="train and score one model per step size")
    p.add_argument("--steps", help="comma list of step sizes (default 1,3,6,9)")
    p.add_argument("--data", help="evaluation sequences")
    p.add_argument("--train-data", dest="train_data", help="training sequences (default: --data)")
    p.add_argument("--timing-repeats", dest="timing_repeats", type=int)
    p.add_argument("--out")
    _add_training_flags(p)
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "track": cmd_track, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    started = time.time()
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg, argv, started)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        log.debug("traceback", exc_info=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
