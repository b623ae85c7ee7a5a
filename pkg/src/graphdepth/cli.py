"""Command-line entry point: ``train``, ``eval``, ``bench``, ``gen-data`` and ``ablate``.

Configuration comes from an optional ``key=value`` file (``--config``) whose
keys are namespaced ``model.*``, ``train.*``, ``scene.*`` and ``loss.*``.
``--set key=value`` and the dedicated flags override the file. Everything is
validated before the first file is written. Exit status is 0 on success, 1
for usage or configuration errors and 2 for runtime failures; failures also
print one ``error exit=<n> type=<name> message=<json string>`` line to stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import kvconfig
from .bench import DEFAULT_ATTN_RESOLUTIONS, DEFAULT_KNN_RESOLUTIONS, DEFAULT_MP_RESOLUTIONS, run_benchmarks
from .data import SceneConfig, generate_dataset, load_split, sample_ids, stack, write_pfm, write_split
from .errors import ConfigurationError, FormatError, GraphDepthError, NumericError, UsageError
from .model import GraphDepthModel, ModelConfig, load_checkpoint
from .objective import LossWeights, compute_metrics
from .trainer import TrainConfig, evaluate, resume, train_loop

SECTIONS = {"model": ModelConfig, "train": TrainConfig, "scene": SceneConfig, "loss": LossWeights}
RESOLVED_CONFIG = "run_config.txt"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    scene: SceneConfig = SceneConfig()
    loss: LossWeights = LossWeights()

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "RunConfig":
        grouped: dict[str, dict[str, str]] = {name: {} for name in SECTIONS}
        for key, value in items.items():
            section, _, name = key.partition(".")
            if section not in SECTIONS or not name:
                raise ConfigurationError(f"unknown config key {key!r} (expected model.*, train.*, scene.* or loss.*)")
            grouped[section][name] = value
        return cls(**{s: kvconfig.from_items(SECTIONS[s], grouped[s]) for s in SECTIONS})

    def items(self) -> list[tuple[str, str]]:
        return [kv for s in SECTIONS for kv in kvconfig.to_items(getattr(self, s), f"{s}.")]

    def write(self, directory) -> Path:
        path = Path(directory) / RESOLVED_CONFIG
        kvconfig.write_kv_file(path, self.items())
        return path


# -- ablation presets ------------------------------------------------------------

_BASE = ModelConfig(multi_scale_gnn=False, channel_attention_on=False, uncertainty_head_on=False)
_FULL = ModelConfig()


@dataclass(frozen=True)
class Preset:
    name: str
    model: ModelConfig
    expected_scales: frozenset = field(default_factory=frozenset)


def _cumulative():
    steps = [
        ("baseline", {}),
        ("+bottleneck-gnn", dict(bottleneck_gnn_only=True)),
        ("+multi-scale", dict(bottleneck_gnn_only=False, multi_scale_gnn=True)),
        ("+attention", dict(channel_attention_on=True)),
        ("+uncertainty", dict(uncertainty_head_on=True)),
        ("+knn", dict(graph_kind="knn", knn_k=16)),
    ]
    cfg = _BASE
    for name, change in steps:
        cfg = replace(cfg, **change)
        yield Preset(name, cfg, cfg.gnn_scales)


PRESETS = {
    "table5": tuple(_cumulative()),
    "table6": tuple(Preset(n, replace(_FULL, **c), _FULL.gnn_scales) for n, c in [
        ("grid4", dict(graph_kind="grid4")), ("grid8", dict(graph_kind="grid8")),
        ("knn8", dict(graph_kind="knn", knn_k=8)), ("knn16", dict(graph_kind="knn", knn_k=16)),
        ("knn32", dict(graph_kind="knn", knn_k=32)),
    ]),
}
ABLATION_FIELDS = ["preset", "config", "steps", "parameters", "final_total", "final_l1", "rmse", "abs_rel",
                   "delta1", "mae", "gnn_scales", "expected_scales"]


# -- argument parsing --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _parse_set(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="graphdepth", description="Graph-based monocular depth estimation on synthetic scenes.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", type=Path, help="key=value configuration file")
        sp.add_argument("--set", dest="overrides", type=_parse_set, action="append", default=[],
                        metavar="KEY=VALUE", help="override one configuration key (repeatable)")
        sp.add_argument("--seed", type=int, help="seed for every section that has one")

    sp = sub.add_parser("gen-data", help="write synthetic train/val splits")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--count", type=int, default=8, help="training samples")
    sp.add_argument("--val-count", type=int, default=0, help="validation samples (seeded after the training ones)")

    sp = sub.add_parser("train", help="train a model on a dataset directory")
    common(sp)
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--out", type=Path, default=Path("run"))
    sp.add_argument("--steps", type=int)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", type=Path, metavar="CHECKPOINT", help="checkpoint stem to continue from")

    sp = sub.add_parser("eval", help="metrics for a checkpoint on one split")
    common(sp)
    sp.add_argument("--checkpoint", type=Path, required=True, help="checkpoint stem (without suffix)")
    sp.add_argument("--data", type=Path, required=True)
    sp.add_argument("--split", default="val")
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--sigma", action="store_true", help="also write exp(S/2) per sample as PFM")

    sp = sub.add_parser("bench", help="scaling benchmarks")
    common(sp)
    sp.add_argument("--out", type=Path, required=True)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--threads", type=int, default=1)
    sp.add_argument("--channels", type=int, default=32)
    sp.add_argument("--dtype", choices=("float32", "float64"), default="float32")
    sp.add_argument("--quick", action="store_true", help="small resolutions for a fast smoke run")

    sp = sub.add_parser("ablate", help="train each configuration of an ablation table")
    common(sp)
    sp.add_argument("--preset", choices=sorted(PRESETS), required=True)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--data", type=Path, help="dataset directory (default: generate from scene.*)")
    sp.add_argument("--count", type=int, default=8, help="generated samples when --data is absent")
    sp.add_argument("--out", type=Path, default=Path("ablate"))
    return p


def resolve_config(args) -> RunConfig:
    items = kvconfig.read_kv_file(args.config) if args.config else {}
    for key, value in args.overrides:
        items[key] = value
    if args.seed is not None:
        for s in ("model", "train", "scene"):
            items[f"{s}.seed"] = str(args.seed)
    if getattr(args, "steps", None) is not None:
        items["train.steps"] = str(args.steps)
    if getattr(args, "epochs", None) is not None:
        items["train.epochs"] = str(args.epochs)
    return RunConfig.from_items(items)


def _require_split(data: Path, split: str) -> None:
    if not (data / split).is_dir() or not sample_ids(data / split):
        raise UsageError(f"no samples in {data / split}")


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args, cfg: RunConfig) -> None:
    if args.count < 1 or args.val_count < 0:
        raise UsageError("--count must be >= 1 and --val-count >= 0")
    args.out.mkdir(parents=True, exist_ok=True)
    write_split(args.out, "train", generate_dataset(cfg.scene, args.count))
    if args.val_count:
        write_split(args.out, "val", generate_dataset(cfg.scene, args.val_count, seed=cfg.scene.seed + args.count))
    cfg.write(args.out)
    print(f"wrote {args.count} train and {args.val_count} val samples to {args.out}")


def cmd_train(args, cfg: RunConfig) -> None:
    _require_split(args.data, "train")
    if args.resume is not None and not Path(f"{args.resume}.manifest").exists():
        raise UsageError(f"no checkpoint manifest at {args.resume}.manifest")
    train = load_split(args.data, "train")
    val = load_split(args.data, "val") if (args.data / "val").is_dir() else None
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.write(args.out)
    if args.resume is not None:
        model, result = resume(args.resume, train, cfg.train, cfg.loss, val, args.out)
    else:
        model = GraphDepthModel(cfg.model)
        result = train_loop(model, train, cfg.train, cfg.loss, val, args.out)
    last = result.train_log[-1] if result.train_log else {}
    print(f"trained {result.steps} steps; final total loss {last.get('total', float('nan')):.6g}; "
          f"checkpoint {result.checkpoint}")


def cmd_eval(args, cfg: RunConfig) -> None:
    if not Path(f"{args.checkpoint}.manifest").exists():
        raise UsageError(f"no checkpoint manifest at {args.checkpoint}.manifest")
    _require_split(args.data, args.split)
    model = load_checkpoint(args.checkpoint).build_model()
    if args.sigma and not model.config.uncertainty_head_on:
        raise UsageError("--sigma needs a model with the uncertainty head")
    samples = load_split(args.data, args.split)
    ids = sample_ids(args.data / args.split)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, model=model.config)
    cfg.write(args.out)
    rows = []
    for sid, s in zip(ids, samples):
        pred = model.predict(stack([s]).rgb)
        rows.append({"sample": sid, **compute_metrics(pred.depth.data[0], s.depth, s.valid_mask)})
        if args.sigma:
            (args.out / "sigma").mkdir(exist_ok=True)
            write_pfm(args.out / "sigma" / f"{sid}.pfm", pred.sigma()[0].astype(np.float32))
    rows.append({"sample": "all", **evaluate(model, samples, cfg.train.batch_size)})
    fields = ["sample", "rmse", "abs_rel", "delta1", "mae"]
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in rows:
            w.writerow([r["sample"]] + [repr(r[k]) for k in fields[1:]])
    print(" ".join(f"{k}={rows[-1][k]:.4f}" for k in fields[1:]))


def cmd_bench(args, cfg: RunConfig) -> None:
    if args.repeats < 5 or args.threads < 1 or args.channels < 1:
        raise UsageError("--repeats must be >= 5; --threads and --channels must be >= 1")
    if args.quick:
        res = dict(mp_resolutions=((16, 16), (32, 32), (64, 64), (128, 128)),
                   attn_resolutions=((8, 8), (16, 16), (24, 24), (32, 32)),
                   knn_resolutions=((8, 8), (12, 12), (16, 16), (24, 24)), batch_resolutions=((8, 8), (16, 16)))
    else:
        res = dict(mp_resolutions=DEFAULT_MP_RESOLUTIONS, attn_resolutions=DEFAULT_ATTN_RESOLUTIONS,
                   knn_resolutions=DEFAULT_KNN_RESOLUTIONS)
    args.out.mkdir(parents=True, exist_ok=True)
    cfg.write(args.out)
    report = run_benchmarks(c=args.channels, repeats=args.repeats, threads=args.threads, dtype=np.dtype(args.dtype),
                            knn=cfg.model.knn, seed=cfg.train.seed, **res)
    (args.out / "bench.csv").write_text(report.to_csv())
    (args.out / "bench_summary.txt").write_text(report.summary())
    print(report.summary(), end="")


def cmd_ablate(args, cfg: RunConfig) -> None:
    if args.steps < 1 or args.count < 1:
        raise UsageError("--steps and --count must be >= 1")
    if args.data is not None:
        _require_split(args.data, "train")
    train_cfg = replace(cfg.train, steps=args.steps)
    dataset = load_split(args.data, "train") if args.data is not None else generate_dataset(cfg.scene, args.count)
    if len(dataset) < train_cfg.batch_size:
        train_cfg = replace(train_cfg, batch_size=len(dataset))
    args.out.mkdir(parents=True, exist_ok=True)
    replace(cfg, train=train_cfg).write(args.out)
    with open(args.out / f"{args.preset}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_FIELDS)
        for preset in PRESETS[args.preset]:
            model_cfg = replace(preset.model, seed=cfg.model.seed, max_depth=cfg.model.max_depth)
            model = GraphDepthModel(model_cfg)
            result = train_loop(model, dataset, train_cfg, cfg.loss)
            seen = frozenset(model.gnn_applied)
            if seen != preset.expected_scales:
                raise GraphDepthError(f"{preset.name}: GraphSAGE ran at scales {sorted(seen)}, "
                                      f"expected {sorted(preset.expected_scales)}")
            metrics = evaluate(model, dataset, train_cfg.batch_size)
            last = result.train_log[-1]
            w.writerow([args.preset, preset.name, result.steps, model.parameter_count(), repr(last["total"]),
                        repr(last["l1"]), *(repr(metrics[k]) for k in ("rmse", "abs_rel", "delta1", "mae")),
                        ";".join(map(str, sorted(seen))), ";".join(map(str, sorted(preset.expected_scales)))])
            fh.flush()
            print(f"{preset.name}: total={last['total']:.4f} rmse={metrics['rmse']:.4f} scales={sorted(seen)}")


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "bench": cmd_bench,
            "ablate": cmd_ablate}


def _fail(code: int, exc: BaseException) -> int:
    print(f"error exit={code} type={type(exc).__name__} message={json.dumps(str(exc))}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
    except (UsageError, ConfigurationError) as exc:
        return _fail(1, exc)
    except OSError as exc:  # unreadable --config
        return _fail(1, exc)
    try:
        COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigurationError) as exc:
        return _fail(1, exc)
    except (NumericError, FormatError, OSError, GraphDepthError) as exc:
        return _fail(2, exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
