"""Command-line runner: ``pcm3 gen | pretrain | eval | verify``.

Every command resolves a :class:`RunConfig` (JSON file plus flag overrides),
writes it next to its outputs and maps failures onto stable exit codes.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from . import data as D
from . import tensor as T
from .errors import CapabilityError, ConfigError, FormatError, NumericDomainError
from .evaluation import (append_report, config_hash, extract_features, knn_eval, linear_probe,
                         masked_pred_error, occlusion_eval)
from .model import PCM3Model
from .trainer import MODES, TrainConfig, check_mode, pretrain, write_outputs
from .verify import GRAD_TOL, run_suite

log = logging.getLogger("pcm3")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_CAPABILITY, EXIT_IO = 0, 2, 3, 4, 5
TASKS = ("knn", "linear", "occlusion", "maskpred")


@dataclass
class EvalOptions:
    tasks: list = field(default_factory=lambda: ["knn", "linear"])
    trials: int = 3
    seed: int = 0
    occlusion_range: list = field(default_factory=lambda: [0.3, 0.7])
    occlusion_probe: str = "knn"
    mask_ratio: float = 0.6
    linear_epochs: int = 200
    linear_lr: float = 0.5

    def validate(self):
        bad = [t for t in self.tasks if t not in TASKS]
        if bad:
            raise ConfigError(f"unknown eval task(s) {bad}; choose from {list(TASKS)}")
        lo, hi = self.occlusion_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError("occlusion_range must satisfy 0 <= lo <= hi <= 1")
        if self.occlusion_probe not in ("knn", "linear"):
            raise ConfigError("occlusion_probe must be 'knn' or 'linear'")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {unknown}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad values in {section!r}: {exc}") from exc


@dataclass
class RunConfig:
    data: D.SynthConfig = field(default_factory=D.SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalOptions = field(default_factory=EvalOptions)
    mode: str = "pcm3"

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a JSON object")
        unknown = sorted(set(raw) - {"data", "train", "eval", "mode"})
        if unknown:
            raise ConfigError(f"unknown top-level key(s): {unknown}")
        return cls(_build(D.SynthConfig, raw.get("data", {}), "data"),
                   _build(TrainConfig, raw.get("train", {}), "train"),
                   _build(EvalOptions, raw.get("eval", {}), "eval"),
                   raw.get("mode", "pcm3"))

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
        return cls.from_dict(raw)

    def validate(self) -> "RunConfig":
        self.data.validate()
        self.train.validate()
        self.eval.validate()
        check_mode(self.mode)
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def resolve(args) -> RunConfig:
    """Config file (or defaults) with command-line overrides applied."""
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.data.seed = cfg.train.seed = cfg.eval.seed = args.seed
    if getattr(args, "mode", None) is not None:
        cfg.mode = args.mode
    if getattr(args, "epochs", None) is not None:
        cfg.train.epochs = args.epochs
        cfg.train.lr_drop_epoch = None
    if getattr(args, "tasks", None):
        cfg.eval.tasks = [t.strip() for t in args.tasks.split(",") if t.strip()]
    return cfg.validate()


def _datasets(cfg: RunConfig, data_dir):
    if data_dir is None:
        return D.generate_synthetic(cfg.data)
    d = Path(data_dir)
    return D.load(d / "train.skds"), D.load(d / "test.skds")


def cmd_gen(args) -> int:
    cfg = resolve(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, test = D.generate_synthetic(cfg.data)
    D.save(train, out / "train.skds")
    D.save(test, out / "test.skds")
    manifest = {"train": "train.skds", "test": "test.skds", "train_size": len(train), "test_size": len(test),
                "config_hash": config_hash(asdict(cfg.data))}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    cfg.write(out / "run_config.json")
    print(f"wrote {len(train)} train / {len(test)} test sequences to {out}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = resolve(args)
    train, _ = _datasets(cfg, args.data)
    out = Path(args.out)

    def progress(epoch, rec):
        log.info("epoch %d step %d total %.4f", epoch, rec.step, rec.losses.total)

    result = pretrain(train, cfg.train, cfg.mode, progress=progress if args.verbose else None)
    paths = write_outputs(result, cfg.train, cfg.mode, out)
    cfg.write(out / "run_config.json")
    means = result.epoch_means()
    if len(means):
        print(f"{cfg.mode}: {len(means)} epochs, total loss {means[0]:.4f} -> {means[-1]:.4f}")
    print(f"checkpoint {paths['checkpoint']}")
    return EXIT_OK


def _run_task(task, model, train, test, opts: EvalOptions, train_bank):
    if task == "knn":
        r = knn_eval(train_bank, extract_features(model, test))
        return "knn1_accuracy", r.accuracy, {}
    if task == "linear":
        r = linear_probe(train_bank, extract_features(model, test), opts.linear_epochs, opts.linear_lr)
        return "linear_accuracy", r.accuracy, {"train_accuracy": r.extra["train_accuracy"]}
    if task == "occlusion":
        res = occlusion_eval(model, train, test, opts.trials, opts.seed, ratio_range=tuple(opts.occlusion_range),
                             train_bank=train_bank, probe=opts.occlusion_probe)
        detail = {k: {"accuracy": v.accuracy, "delta": v.extra["delta"]} for k, v in res.items()}
        detail["clean"] = res["spatial"].extra["clean"]
        return "spatial_occlusion_delta", res["spatial"].extra["delta"], detail
    if task == "maskpred":
        return "masked_pred_error", masked_pred_error(model, test, opts.mask_ratio, opts.trials, opts.seed), {}
    raise ConfigError(f"unknown task {task!r}")


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise ConfigError(f"checkpoint {ckpt} not found")
    cfg = resolve(args)
    model = PCM3Model.load(ckpt)
    mode = model.extra.get("mode", "unknown")
    if "maskpred" in cfg.eval.tasks and not model.has_decoder:
        raise CapabilityError(f"maskpred needs a decoder; {mode} checkpoints have none")
    train, test = _datasets(cfg, args.data)
    bank = extract_features(model, train)
    chash = config_hash({"eval": asdict(cfg.eval), "data": asdict(cfg.data), "checkpoint": model.checksum()})
    entries = []
    for task in cfg.eval.tasks:
        metric, value, detail = _run_task(task, model, train, test, cfg.eval, bank)
        entries.append({"task": task, "mode": mode, "seed": cfg.eval.seed, "metric": metric,
                        "value": float(value), "config_hash": chash, "detail": detail})
    report = Path(args.out) if args.out else ckpt.parent / "report.json"
    report.parent.mkdir(parents=True, exist_ok=True)
    append_report(report, entries)
    cfg.write(report.parent / "eval_config.json")
    print(f"{'task':<10} {'metric':<24} {'value':>10}")
    for e in entries:
        print(f"{e['task']:<10} {e['metric']:<24} {e['value']:>10.4f}")
    print(f"report appended to {report}")
    return EXIT_OK


def cmd_verify(args) -> int:
    seeds = tuple(range(args.seeds))
    if args.fault:
        with T.inject_grad_fault(args.fault):
            results = run_suite(seeds)
    else:
        results = run_suite(seeds)
    for r in results:
        label = "max rel err" if r.kind == "grad" else "abs err"
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:<28} {label} {r.value:.3e}")
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed (tolerance {GRAD_TOL:g}): {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pcm3", description="Skeleton pretraining runs on synthetic motion data")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run config (sections: data, train, eval, mode)")
        sp.add_argument("--seed", type=int, help="overrides every seed in the config")

    g = sub.add_parser("gen", help="generate train/test datasets")
    common(g)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("pretrain", help="pretrain an encoder")
    common(t)
    t.add_argument("--data", help="directory written by 'gen' (default: generate from config)")
    t.add_argument("--mode", help=f"one of {', '.join(MODES)}")
    t.add_argument("--epochs", type=int)
    t.add_argument("--out", required=True, help="output directory")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    common(e)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", help="directory written by 'gen' (default: generate from config)")
    e.add_argument("--tasks", help=f"comma-separated subset of {','.join(TASKS)}")
    e.add_argument("--out", help="report path (default: report.json beside the checkpoint)")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="finite-difference and closed-form loss checks")
    v.add_argument("--seeds", type=int, default=5)
    v.add_argument("--fault", help="scale one op's backward rule to show the suite catches it")
    v.set_defaults(func=cmd_verify)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericDomainError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except CapabilityError as exc:
        print(f"capability error: {exc}", file=sys.stderr)
        return EXIT_CAPABILITY
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
