"""Command-line front end: train, eval, infer, label, synth, inspect, bench.

One JSON config file drives model, training, and labeling; dotted --set
overrides tweak individual keys. Exit codes: 0 success, 1 usage error,
2 data/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from .data import (AugmentConfig, ClassMap, SynthConfig, scan_and_split,
                   write_synth_dataset)
from .errors import ConfigError, PlumesegError
from .ioutil import canonical_dumps, load_json, read_image_rgb, write_gray_png
from .labeler import LabelerConfig, label_directory
from .metrics import MetricsReport
from .model import (Model, ModelConfig, count_flops, count_params,
                    load_checkpoint, save_checkpoint)
from .train import ScheduleConfig, TrainConfig, evaluate, train

USAGE_EXIT = 1
DATA_EXIT = 2


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


# ---------------------------------------------------------------------------
# config handling

_SCHEDULE_KEYS = {f.name for f in dc_fields(ScheduleConfig)}
_TRAIN_KEYS = _SCHEDULE_KEYS | {"batch_size", "betas", "adam_eps",
                                "weight_decay", "val_every", "augment"}
_AUGMENT_KEYS = {f.name for f in dc_fields(AugmentConfig)}
_SYNTH_KEYS = {f.name for f in dc_fields(SynthConfig)}


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: dict, pairs: list[str]) -> dict:
    """Apply dotted key=value overrides; unknown keys are rejected by name."""
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override '{pair}' is not of the form key=value")
        key, _, value = pair.partition("=")
        parts = key.split(".")
        node = cfg
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config key: {key}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config key: {key}")
        node[parts[-1]] = _parse_value(value)
    return cfg


def default_config() -> dict:
    return {
        "model": ModelConfig().to_dict(),
        "train": {
            "base_lr": 6e-5, "warmup_iters": 1500, "warmup_start_factor": 1e-6,
            "total_iters": 160_000, "poly_power": 1.0, "min_lr": 0.0,
            "batch_size": 2, "betas": [0.9, 0.999], "adam_eps": 1e-8,
            "weight_decay": 0.01, "val_every": None,
            "augment": {"base_scale": [640, 480], "ratio_range": [0.5, 2.0],
                        "crop_size": [512, 512]},
        },
        "labeler": {f.name: getattr(LabelerConfig(), f.name)
                    for f in dc_fields(LabelerConfig)},
    }


def load_config(path: str | None, overrides: list[str]) -> dict:
    cfg = default_config()
    if path:
        user = load_json(path)
        for section, value in user.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section: {section}")
            if not isinstance(value, dict):
                raise ConfigError(f"config section '{section}' must be an object")
            for k in value:
                base = cfg[section]
                if k not in base and section != "model":
                    raise ConfigError(f"unknown config key: {section}.{k}")
            if section == "model":
                cfg[section] = value  # validated by ModelConfig.from_dict
            else:
                cfg[section].update(value)
    return apply_overrides(cfg, overrides)


def model_config_from(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg["model"])


def train_config_from(cfg: dict) -> TrainConfig:
    t = dict(cfg["train"])
    for k in t:
        if k not in _TRAIN_KEYS:
            raise ConfigError(f"unknown config key: train.{k}")
    aug = t.pop("augment", None)
    if aug is not None:
        for k in aug:
            if k not in _AUGMENT_KEYS:
                raise ConfigError(f"unknown config key: train.augment.{k}")
        aug = AugmentConfig(
            base_scale=tuple(aug.get("base_scale", (640, 480))),
            ratio_range=tuple(aug.get("ratio_range", (0.5, 2.0))),
            crop_size=tuple(aug.get("crop_size", (512, 512))),
            pad_value=aug.get("pad_value", 0.0),
            ignore_index=aug.get("ignore_index", 255),
        )
    sched = ScheduleConfig(**{k: t.pop(k) for k in list(t) if k in _SCHEDULE_KEYS})
    betas = t.pop("betas", (0.9, 0.999))
    return TrainConfig(schedule=sched, betas=tuple(betas), augment=aug, **t)


# ---------------------------------------------------------------------------
# subcommands

def _cmd_inspect(args) -> int:
    cfg = load_config(args.config, args.set or [])
    model = Model(model_config_from(cfg), seed=args.seed)
    n = count_params(model)
    rep = count_flops(model, (args.size, args.size))
    print(f"parameters: {n:,} ({n / 1e6:.3f} M)")
    print(f"gflops @ {args.size}x{args.size}: {rep.gflops:.3f}")
    print(f"convention: {rep.convention}")
    print(f"excluded solver iterations: {rep.solver_macs / 1e9:.3f} GMACs")
    print("breakdown:")
    for mod, macs in rep.by_module().items():
        print(f"  {mod:<24} {macs / 1e9:>8.3f}")
    if args.out:
        Path(args.out).write_text(canonical_dumps({
            "params": n, "gflops": rep.gflops,
            "convention": rep.convention,
            "solver_gmacs": rep.solver_macs / 1e9,
            "breakdown": rep.by_module(),
        }) + "\n", encoding="utf-8")
    return 0


def _cmd_synth(args) -> int:
    scfg = SynthConfig(amplitude_per_class=args.amplitude,
                       noise_sigma=args.noise)
    manifest = write_synth_dataset(args.out, args.count, args.classes,
                                   args.size, args.seed, scfg)
    print(f"wrote {len(manifest.entries)} samples under {args.out} "
          f"({manifest.counts()})")
    return 0


def _cmd_label(args) -> int:
    cfg = LabelerConfig.from_file(args.config) if args.config else LabelerConfig()
    written = label_directory(args.frames, args.background, cfg, args.out)
    print(f"wrote {len(written)} masks to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = load_config(args.config, args.set or [])
    mcfg = model_config_from(cfg)
    hyper = train_config_from(cfg)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    hyper.log_path = str(out_dir / "train.log")
    Path(hyper.log_path).write_text("", encoding="utf-8")  # fresh log per run
    if args.init_from:
        model = load_checkpoint(args.init_from, num_classes=mcfg.num_classes,
                                reinit_head_if_class_mismatch=args.reinit_head,
                                head_seed=args.seed)
    else:
        model = Model(mcfg, seed=args.seed)
    manifest = scan_and_split(args.data, seed=args.seed)
    log = train(model, manifest, hyper, seed=args.seed)
    save_checkpoint(model, out_dir / "model.ckpt",
                    iteration=hyper.schedule.total_iters)
    report = evaluate(model, manifest, "val")
    _write_report(report, out_dir / "metrics.json", args.data, mcfg.num_classes)
    print(f"final val mIoU {report.miou:.4f} mFscore {report.mfscore:.4f}")
    print(f"checkpoint: {out_dir / 'model.ckpt'}")
    return 0


def _class_names(data_root, num_classes) -> list[str]:
    path = Path(data_root) / "classes.txt"
    if path.is_file():
        return list(ClassMap.from_file(path).names)
    return list(ClassMap.default_for(num_classes).names)


def _write_report(report: MetricsReport, path, data_root, num_classes) -> None:
    Path(path).write_text(report.to_json() + "\n", encoding="utf-8")
    table = report.to_table(_class_names(data_root, num_classes))
    Path(path).with_suffix(".txt").write_text(table + "\n", encoding="utf-8")


def _cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = scan_and_split(args.data, seed=args.seed)
    report = evaluate(model, manifest, args.split)
    print(report.to_table(_class_names(args.data, model.cfg.num_classes)))
    if args.out:
        _write_report(report, args.out, args.data, model.cfg.num_classes)
    return 0


def _cmd_infer(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = read_image_rgb(args.image)
    labels, probs = model.infer(image)
    write_gray_png(labels.astype(np.uint8), args.out)
    if args.probs:
        np.save(args.probs, probs)
    counts = np.bincount(labels.ravel(), minlength=model.cfg.num_classes)
    print(f"wrote {args.out}; class pixel counts: {counts.tolist()}")
    return 0


def bench(model: Model, size: int, repetitions: int, warmup: int = 1,
          seed: int = 0) -> dict:
    """Timed forward passes; returns latency stats plus accounting fields."""
    rng = np.random.default_rng(seed)
    image = rng.uniform(0, 255, (3, size, size))
    for _ in range(warmup):
        model.infer(image)
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        model.infer(image)
        times.append(time.perf_counter() - t0)
    rep = count_flops(model, (size, size))
    return {
        "input_size": size,
        "repetitions": repetitions,
        "latency_mean_s": float(np.mean(times)),
        "latency_min_s": float(np.min(times)),
        "latency_max_s": float(np.max(times)),
        "fps": repetitions / float(np.sum(times)),
        "params": count_params(model),
        "gflops": rep.gflops,
        "convention": rep.convention,
        "samples": times,
    }


def _cmd_bench(args) -> int:
    if args.checkpoint:
        model = load_checkpoint(args.checkpoint)
    else:
        cfg = load_config(args.config, args.set or [])
        model = Model(model_config_from(cfg), seed=args.seed)
    rep = bench(model, args.size, args.reps, seed=args.seed)
    print(f"hardware: {args.hardware}")
    print(f"input: {args.size}x{args.size}  repetitions: {args.reps}")
    print(f"latency s  mean {rep['latency_mean_s']:.3f}  "
          f"min {rep['latency_min_s']:.3f}  max {rep['latency_max_s']:.3f}")
    print(f"fps: {rep['fps']:.3f}")
    print(f"params: {rep['params']:,}  gflops: {rep['gflops']:.3f}")
    if args.out:
        out = dict(rep, hardware=args.hardware)
        Path(args.out).write_text(canonical_dumps(out) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="plumeseg",
                description="Gas-plume segmentation: training, inference, "
                            "mask labeling, and model accounting.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="dotted config override, e.g. model.num_classes=2")

    sp = sub.add_parser("train", help="train a model on a dataset tree")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--data", required=True, help="dataset root directory")
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--init-from", help="checkpoint to initialize from")
    sp.add_argument("--reinit-head", action="store_true",
                    help="reinitialize the classifier on class-count mismatch")
    common(sp)
    sp.set_defaults(fn=_cmd_train)

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--split", default="test", choices=("train", "val", "test"))
    sp.add_argument("--out", help="write metrics JSON (and .txt table) here")
    common(sp)
    sp.set_defaults(fn=_cmd_eval)

    sp = sub.add_parser("infer", help="segment one image")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--image", required=True)
    sp.add_argument("--out", required=True, help="output label-map PNG")
    sp.add_argument("--probs", help="optional .npy path for probabilities")
    common(sp)
    sp.set_defaults(fn=_cmd_infer)

    sp = sub.add_parser("label", help="run the mask-generation pipeline")
    sp.add_argument("--frames", required=True, help="directory of frame PNGs")
    sp.add_argument("--background", required=True,
                    help="directory of pre-release background PNGs")
    sp.add_argument("--config", help="labeler config JSON")
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=_cmd_label)

    sp = sub.add_parser("synth", help="generate a synthetic plume dataset")
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--count", type=int, default=30)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--amplitude", type=float, default=SynthConfig().amplitude_per_class)
    sp.add_argument("--noise", type=float, default=SynthConfig().noise_sigma)
    sp.add_argument("--out", required=True)
    common(sp)
    sp.set_defaults(fn=_cmd_synth)

    sp = sub.add_parser("inspect", help="print parameter and FLOP accounting")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--size", type=int, default=512)
    sp.add_argument("--out", help="write accounting JSON here")
    common(sp)
    sp.set_defaults(fn=_cmd_inspect)

    sp = sub.add_parser("bench", help="timed forward passes")
    sp.add_argument("--config", help="JSON config file")
    sp.add_argument("--checkpoint")
    sp.add_argument("--size", type=int, default=512)
    sp.add_argument("--reps", type=int, default=3)
    sp.add_argument("--hardware", default="unspecified",
                    help="free-form hardware description for the report")
    sp.add_argument("--out", help="write bench JSON here")
    common(sp)
    sp.set_defaults(fn=_cmd_bench)
    return p


def run(argv: list[str]) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except (PlumesegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DATA_EXIT


def main() -> None:
    raise SystemExit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
