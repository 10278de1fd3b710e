"""Command-line entry point: ``mkoie {synth,train,enhance,eval}``.

Configuration is a flat UTF-8 ``key=value`` file with dotted namespaces
(``model.base_channels=32``); ``--set key=value`` and the dedicated flags
override it.  Exit codes: 0 success, 2 invalid configuration or arguments,
3 failure while running.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .tasks import ALL_TASKS, TaskKind

log = logging.getLogger("mkoie")

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3
DATA_ROOT_ENV = "MKOIE_DATA_ROOT"
CHECKPOINT_NAME = "checkpoint.ckpt"
METRICS_NAME = "metrics.jsonl"
RUN_MANIFEST_NAME = "run_manifest.json"


class ConfigError(ValueError):
    pass


# key -> (parser, default)
def _floats(v):
    return tuple(float(x) for x in v.split(",") if x.strip())


def _ints(v):
    return tuple(int(x) for x in v.split(",") if x.strip())


def _tasks(v):
    return tuple(TaskKind.parse(x).slug for x in v.split(",") if x.strip())


def _task(v):
    return TaskKind.parse(v).slug


def _mix(v):
    out = {}
    for part in v.split(","):
        if part.strip():
            k, _, w = part.partition(":")
            out[TaskKind.parse(k).slug] = float(w)
    return out


def _opt_int(v):
    return None if v.strip().lower() in ("", "none", "auto") else int(v)


def _opt_float(v):
    return None if v.strip().lower() in ("", "none", "off") else float(v)


def _str(v):
    return v.strip()


SCHEMA = {
    "seed": (int, 0),
    "paths.clean": (_str, ""),
    "paths.depth": (_str, ""),
    "paths.data": (_str, ""),
    "paths.out": (_str, "runs/latest"),
    "synth.tasks": (_tasks, ("id", "llie", "nhie")),
    "synth.patch": (int, 256),
    "synth.mode": (_str, "grid"),
    "synth.crops_per_image": (int, 4),
    "synth.depth_mode": (_str, "fractal"),
    "synth.bits": (int, 8),
    "synth.beta_range": (_floats, (0.5, 1.5)),
    "synth.day_light_range": (_floats, (0.7, 1.0)),
    "synth.night_light_range": (_floats, (0.2, 0.6)),
    "synth.scale_range": (_floats, (0.1, 0.5)),
    "synth.gamma_range": (_floats, (1.5, 3.0)),
    "synth.sigma_range": (_floats, (0.005, 0.02)),
    "model.base_channels": (int, 32),
    "model.rlb_per_stage": (int, 2),
    "model.encoder_stages": (int, 2),
    "model.attn_dk": (_opt_int, None),
    "train.epochs": (int, 200),
    "train.batch_size": (int, 8),
    "train.lr0": (float, 1e-3),
    "train.lr_drop_epochs": (_ints, (60, 120, 180)),
    "train.lr_drop_factor": (float, 0.1),
    "train.checkpoint_every": (int, 0),
    "train.task_mix": (_mix, {"id": 1.0, "llie": 1.0, "nhie": 1.0}),
    "train.mode": (_str, "single"),
    "train.task": (_task, "nhie"),
    "train.grad_clip": (_opt_float, 1.0),
    "loss.extractor": (_str, "frozen-random"),
    "loss.extractor_weights": (_str, ""),
    "loss.extractor_width": (float, 1.0),
    "loss.extractor_seed": (int, 0),
    "loss.weights": (_floats, (0.8, 0.2)),
}


def parse_config_text(text: str) -> dict[str, str]:
    raw = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"config line {n}: expected key=value, got {line!r}")
        raw[key.strip()] = value.strip()
    return raw


def resolve_config(raw: dict[str, str]) -> dict:
    """Type-convert ``raw`` against the schema and fill defaults."""
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg = {}
    for key, (conv, default) in SCHEMA.items():
        if key in raw:
            try:
                cfg[key] = conv(raw[key])
            except ValueError as exc:
                raise ConfigError(f"{key}: {exc}") from None
        else:
            cfg[key] = default
    return cfg


@dataclass
class RunConfig:
    values: dict
    source: str | None = None
    overrides: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self):
        from .net import ModelConfig

        return ModelConfig(
            base_channels=self["model.base_channels"],
            rlb_per_stage=self["model.rlb_per_stage"],
            encoder_stages=self["model.encoder_stages"],
            attn_dk=self["model.attn_dk"],
        )

    def train_config(self):
        from .train import TrainConfig

        return TrainConfig(
            epochs=self["train.epochs"],
            batch_size=self["train.batch_size"],
            lr0=self["train.lr0"],
            lr_drop_epochs=self["train.lr_drop_epochs"],
            lr_drop_factor=self["train.lr_drop_factor"],
            seed=self["seed"],
            checkpoint_every=self["train.checkpoint_every"],
            task_mix=self["train.task_mix"],
            mode=self["train.mode"],
            task=self["train.task"],
            grad_clip=self["train.grad_clip"],
            loss_weights=self["loss.weights"],
        )

    def sampler(self):
        from .degrade import ParamsSampler

        return ParamsSampler(
            beta_range=self["synth.beta_range"],
            day_light_range=self["synth.day_light_range"],
            night_light_range=self["synth.night_light_range"],
            scale_range=self["synth.scale_range"],
            gamma_range=self["synth.gamma_range"],
            sigma_range=self["synth.sigma_range"],
        )

    def snapshot(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(self.values.items())}


def load_run_config(args) -> RunConfig:
    raw = {}
    source = None
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        raw.update(parse_config_text(path.read_text(encoding="utf-8")))
        source = str(path)
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = value.strip()
    flag_map = {"seed": "seed", "out": "paths.out", "task": "train.task", "data": "paths.data"}
    for attr, key in flag_map.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = str(value)
    if not raw.get("paths.data") and "paths.data" not in overrides and os.environ.get(DATA_ROOT_ENV):
        overrides["paths.data"] = os.environ[DATA_ROOT_ENV]
    raw.update(overrides)
    return RunConfig(resolve_config(raw), source, overrides)


def write_run_manifest(out: Path, command: str, rc: RunConfig, extra: dict | None = None):
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "version": __version__,
        "seed": rc["seed"],
        "config_file": rc.source,
        "config": rc.snapshot(),
        "torch": torch.__version__,
        **(extra or {}),
    }
    tmp = out / (RUN_MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, out / RUN_MANIFEST_NAME)


def _image_paths(spec: str) -> list[Path]:
    paths = []
    for part in (p.strip() for p in spec.split(",") if p.strip()):
        p = Path(part)
        if p.is_dir():
            paths.extend(sorted(q for q in p.iterdir() if q.suffix.lower() == ".png"))
        elif p.is_file():
            paths.append(p)
        else:
            raise ConfigError(f"image path {p} does not exist")
    return paths


def _make_extractor(rc: RunConfig):
    from .loss import make_extractor

    if rc["loss.weights"][1] == 0:
        return None
    weights = rc["loss.extractor_weights"] or None
    if rc["loss.extractor"] == "pretrained-vgg16" and (not weights or not Path(weights).is_file()):
        raise ConfigError("loss.extractor=pretrained-vgg16 needs an existing loss.extractor_weights file")
    if rc["loss.extractor"] not in ("pretrained-vgg16", "frozen-random"):
        raise ConfigError(f"unknown loss.extractor {rc['loss.extractor']!r}")
    return make_extractor(
        rc["loss.extractor"], weights, seed=rc["loss.extractor_seed"], width=rc["loss.extractor_width"]
    )


# --------------------------------------------------------------------------
# commands: each returns a callable so validation finishes before any write
# --------------------------------------------------------------------------


def cmd_synth(rc: RunConfig, args):
    from .degrade import DEPTH_MODES, make_dataset, read_image

    if not rc["paths.clean"]:
        raise ConfigError("paths.clean is required for synth")
    images = _image_paths(rc["paths.clean"])
    if not images:
        raise ConfigError(f"no PNG images found under {rc['paths.clean']}")
    if rc["synth.mode"] not in ("grid", "random"):
        raise ConfigError(f"synth.mode must be grid or random, got {rc['synth.mode']!r}")
    if rc["synth.depth_mode"] not in DEPTH_MODES:
        raise ConfigError(f"synth.depth_mode must be one of {DEPTH_MODES}")
    depth_dir = Path(rc["paths.depth"]) if rc["paths.depth"] else None
    if depth_dir is not None and not depth_dir.is_dir():
        raise ConfigError(f"depth directory {depth_dir} does not exist")
    sampler = rc.sampler()
    out = Path(rc["paths.data"] or rc["paths.out"])

    def run():
        write_run_manifest(out, "synth", rc)
        clean = [read_image(p) for p in images]
        depths = None
        if depth_dir is not None:
            depths = [np.load(depth_dir / f"{p.stem}.npy") for p in images]
        summary = make_dataset(
            clean,
            sampler,
            out,
            patch=rc["synth.patch"],
            rng_seed=rc["seed"],
            tasks=rc["synth.tasks"],
            mode=rc["synth.mode"],
            crops_per_image=rc["synth.crops_per_image"],
            depths=depths,
            depth_mode=rc["synth.depth_mode"],
            sources=[p.name for p in images],
            bits=rc["synth.bits"],
        )
        print(f"wrote {sum(summary['counts'].values())} pairs to {out}: {summary['counts']}")

    return run


def cmd_train(rc: RunConfig, args):
    from .data import PairedDataset
    from .train import MetricsLog, fit, init_state, load_checkpoint

    data = rc["paths.data"]
    if not data or not Path(data).is_dir():
        raise ConfigError(f"training data root {data!r} does not exist (set paths.data or {DATA_ROOT_ENV})")
    model_cfg = rc.model_config()
    train_cfg = rc.train_config()
    out = Path(rc["paths.out"])
    ckpt_path = out / CHECKPOINT_NAME
    if args.resume and not ckpt_path.is_file():
        raise ConfigError(f"--resume given but {ckpt_path} does not exist")
    fx = _make_extractor(rc)

    def run():
        write_run_manifest(out, "train", rc, {"resume": bool(args.resume)})
        dataset = PairedDataset.from_directory(data, train_cfg.tasks())
        missing = [t.slug for t in train_cfg.tasks() if dataset.count(t) == 0]
        if missing:
            raise RuntimeError(f"no training pairs for task(s) {missing} under {data}")
        metrics_log = MetricsLog(out / METRICS_NAME)
        if args.resume:
            state = load_checkpoint(ckpt_path, model_cfg, train_cfg)
            log.info("resumed at epoch %d", state.epoch)
        else:
            metrics_log.path.unlink(missing_ok=True)
            state = init_state(model_cfg, train_cfg)

        def report(state, metrics):
            summary = ", ".join(f"{t} total={m['total']:.5f}" for t, m in metrics.items())
            print(f"epoch {state.epoch}/{train_cfg.epochs}: {summary}")

        fit(state, dataset, train_cfg, fx, log=metrics_log, checkpoint_path=ckpt_path, on_epoch=report)
        print(f"checkpoint: {ckpt_path}")

    return run


def cmd_enhance(rc: RunConfig, args):
    from .degrade import read_image, write_image
    from .net import enhance
    from .train import load_checkpoint

    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint!r} not found")
    if args.task is None:
        raise ConfigError("--task is required for enhance")
    task = TaskKind.parse(args.task)
    inputs = _image_paths(",".join(args.inputs))
    if not inputs:
        raise ConfigError("no input images")
    out = Path(rc["paths.out"])

    def run():
        write_run_manifest(out, "enhance", rc, {"checkpoint": str(args.checkpoint), "inputs": [str(p) for p in inputs]})
        model = load_checkpoint(args.checkpoint).model.eval()
        for path in inputs:
            x = torch.from_numpy(read_image(path).astype(np.float32))[None]
            y = enhance(model, x, task)[0].numpy()
            write_image(out / f"{path.stem}.png", y)
            print(f"{path} -> {out / (path.stem + '.png')}")

    return run


def cmd_eval(rc: RunConfig, args):
    from .data import PairedDataset
    from .evaluation import evaluate
    from .train import load_checkpoint

    if not args.checkpoint or not Path(args.checkpoint).is_file():
        raise ConfigError(f"checkpoint {args.checkpoint!r} not found")
    data = rc["paths.data"]
    if not data or not Path(data).is_dir():
        raise ConfigError(f"dataset root {data!r} does not exist")
    tasks = [TaskKind.parse(t) for t in (args.tasks.split(",") if args.tasks else [t.slug for t in ALL_TASKS])]
    out = Path(rc["paths.out"])

    def run():
        write_run_manifest(out, "eval", rc, {"checkpoint": str(args.checkpoint)})
        dataset = PairedDataset.from_directory(data, tasks)
        requested = [t for t in tasks if dataset.count(t)] if not args.tasks else tasks
        model = load_checkpoint(args.checkpoint).model
        report = evaluate(model, dataset, requested)
        (out / "report.csv").write_text(report.to_csv(), encoding="utf-8")
        with open(out / "per_sample.jsonl", "w", encoding="utf-8") as fh:
            for rec in report.per_sample:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        print(report.to_table())

    return run


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "enhance": cmd_enhance, "eval": cmd_eval}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory (paths.out)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mkoie", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="synthesize a paired dataset")
    p.add_argument("--data", help="dataset output root (paths.data)")

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("--data", help="dataset root (paths.data)")
    p.add_argument("--task", choices=[t.slug for t in ALL_TASKS])
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.ckpt")

    p = sub.add_parser("enhance", parents=[common], help="restore images with a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, choices=[t.slug for t in ALL_TASKS])
    p.add_argument("inputs", nargs="+", help="PNG files or directories")

    p = sub.add_parser("eval", parents=[common], help="PSNR/SSIM report on a paired dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset root (paths.data)")
    p.add_argument("--tasks", help="comma-separated subset of id,llie,nhie")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    # enhance takes the task as an inference argument, not a training key
    task_flag = args.__dict__.pop("task", None) if args.command == "enhance" else None
    try:
        rc = load_run_config(args)
        if args.command == "enhance":
            args.task = task_flag
        run = COMMANDS[args.command](rc, args)
    except (ConfigError, ValueError) as exc:
        print(f"mkoie {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_INVALID
    torch.use_deterministic_algorithms(True)
    try:
        run()
    except Exception as exc:  # noqa: BLE001
        log.debug("failure", exc_info=True)
        print(f"mkoie {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
