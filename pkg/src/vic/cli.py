"""Command-line entry points: train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure, 3 check failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import yaml

from vic import data as vdata
from vic.checkpoint import Checkpoint, CheckpointError, load_checkpoint, save_checkpoint
from vic.config import ConfigError, ModelConfig, TrainConfig, from_dict
from vic.model import VisionModel, param_count
from vic.trainer import AdamState, History, TrainingDiverged, evaluate, train

log = logging.getLogger("vic")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME, EXIT_CHECK = 0, 1, 2, 3
METRICS_COLUMNS = ["epoch", "train_loss", "test_acc", "wall_seconds"]
FULL_PROTOCOL = "full protocol: 500 epochs x 5 seeds; desk-scale runs use fewer epochs"

# image geometry and class count implied by each dataset
DATASET_SHAPES = {
    "mnist": (1, 28, 28, 10),
    "kmnist": (1, 28, 28, 10),
    "emnist-balanced": (1, 28, 28, 47),
    "mnist-sample": (1, 28, 28, 10),
    "cifar10": (3, 32, 32, 10),
    "cifar100": (3, 32, 32, 100),
}


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    dataset: str = "mnist"
    model: str = "vic"
    output_dir: str = "runs/default"
    seeds: list = field(default_factory=lambda: [0])
    train_limit: int | None = None
    test_limit: int | None = None
    model_config: ModelConfig = field(default_factory=ModelConfig)
    train_config: TrainConfig = field(default_factory=TrainConfig)

    def to_dict(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["seeds"] = list(self.seeds)
        out["model_config"] = self.model_config.to_dict()
        out["train_config"] = self.train_config.to_dict()
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        valid = [f.name for f in fields(cls)]
        unknown = sorted(set(d) - set(valid))
        if unknown:
            raise ConfigError(f"unknown config key(s) {unknown}; valid keys: {valid}")
        d["model_config"] = from_dict(ModelConfig, d.get("model_config", {}))
        d["train_config"] = from_dict(TrainConfig, d.get("train_config", {}))
        return cls(**d)

    def validate(self) -> None:
        if self.model not in ("vic", "vit"):
            raise ConfigError(f"model must be 'vic' or 'vit', got {self.model!r}")
        if self.dataset not in DATASET_SHAPES:
            raise ConfigError(f"unknown dataset {self.dataset!r}; valid: {sorted(DATASET_SHAPES)}")
        if not self.seeds:
            raise ConfigError("seeds must not be empty")


def load_config_file(path) -> dict:
    """Read a YAML/JSON config; a run manifest is accepted and its ``config`` section used."""
    with open(path) as fh:
        raw = (json.load(fh) if str(path).endswith(".json") else yaml.safe_load(fh)) or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: expected a mapping at top level")
    return raw["config"] if "config" in raw and "manifest_version" in raw else raw


# flag name -> (section, key, type)
OVERRIDES = {
    "dataset": (None, "dataset", str),
    "model": (None, "model", str),
    "out": (None, "output_dir", str),
    "seeds": (None, "seeds", lambda s: [int(x) for x in s.split(",")]),
    "seed": (None, "seeds", lambda s: [int(s)]),
    "train_limit": (None, "train_limit", int),
    "test_limit": (None, "test_limit", int),
    "epochs": ("train_config", "epochs", int),
    "batch_size": ("train_config", "batch_size", int),
    "lr": ("train_config", "learning_rate", float),
    "weight_decay": ("train_config", "weight_decay", float),
    "eval_every": ("train_config", "eval_every", int),
    "embed_dim": ("model_config", "embed_dim", int),
    "num_blocks": ("model_config", "num_blocks", int),
    "num_heads": ("model_config", "num_heads", int),
    "patch_size": ("model_config", ("patch_h", "patch_w"), int),
    "conv_layers": ("model_config", "conv_layers", int),
    "conv_filters": ("model_config", "conv_filters", int),
    "mlp_hidden": ("model_config", "mlp_hidden", int),
    "patch_residual": ("model_config", "patch_residual", str),
}


def resolve_config(args) -> RunConfig:
    base = load_config_file(args.config) if getattr(args, "config", None) else {}
    base.setdefault("model_config", {})
    base.setdefault("train_config", {})
    for flag, (section, key, conv) in OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        target = base if section is None else base[section]
        for k in key if isinstance(key, tuple) else (key,):
            target[k] = conv(value) if isinstance(value, str) else value
    ds = base.get("dataset", RunConfig.dataset)
    if ds in DATASET_SHAPES:
        c, h, w, k = DATASET_SHAPES[ds]
        base["model_config"].update(image_channels=c, image_h=h, image_w=w, num_classes=k)
    if "seeds" in base:
        base["train_config"]["seed"] = base["seeds"][0]
    cfg = RunConfig.from_dict(base)
    cfg.validate()
    return cfg


# -- shared training driver -----------------------------------------------

def _load_bundle(cfg: RunConfig, data_root) -> vdata.DatasetBundle:
    bundle = vdata.load_dataset(cfg.dataset, data_root)
    if cfg.train_limit is not None or cfg.test_limit is not None:
        bundle = bundle.subset(cfg.train_limit, cfg.test_limit)
    return bundle


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(x) -> str:
    return "nan" if isinstance(x, float) and math.isnan(x) else repr(x)


def run_training(cfg: RunConfig, seed: int, out_dir: Path, data_root=None, bundle=None, checksum=None) -> dict:
    """Train one (config, seed) run and write metrics, checkpoints and manifest into ``out_dir``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    bundle = bundle if bundle is not None else _load_bundle(cfg, data_root)
    checksum = checksum or vdata.dataset_checksum(cfg.dataset, data_root)
    tcfg = TrainConfig(**{**cfg.train_config.to_dict(), "seed": seed})
    model = VisionModel(cfg.model_config, cfg.model, seed=seed)
    # the manifest describes exactly this run, so it can be fed back via --config
    run_cfg = RunConfig.from_dict({**cfg.to_dict(), "seeds": [seed], "output_dir": str(out_dir)})
    run_cfg.train_config = tcfg
    manifest = {
        "manifest_version": 1,
        "config": run_cfg.to_dict(),
        "seed": seed,
        "dataset_sha256": checksum,
        "param_count": param_count(cfg.model_config, cfg.model),
        "note": FULL_PROTOCOL,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    best = {"acc": -1.0}

    def on_epoch_end(epoch: int, history: History, state: AdamState) -> None:
        rows = [[e, _fmt(l), _fmt(a), _fmt(w)] for e, l, a, w in
                zip(history.epoch, history.train_loss, history.test_acc, history.wall_seconds)]
        _write_csv(out_dir / "metrics.csv", METRICS_COLUMNS, rows)
        ckpt = Checkpoint.capture(model, tcfg, epoch, state, history, dataset=cfg.dataset,
                                  test_limit=cfg.test_limit)
        save_checkpoint(out_dir / "final.ckpt", ckpt)
        acc = history.test_acc[-1]
        if not math.isnan(acc) and acc > best["acc"]:
            best["acc"] = acc
            save_checkpoint(out_dir / "best.ckpt", ckpt)

    history = train(model, bundle, tcfg, on_epoch_end=on_epoch_end)
    if not history.epoch:
        _write_csv(out_dir / "metrics.csv", METRICS_COLUMNS, [])
    final_acc = history.test_acc[-1] if history.test_acc else float("nan")
    return {"seed": seed, "final_acc": final_acc, "best_acc": history.best_acc,
            "param_count": manifest["param_count"]}


# -- commands ---------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = resolve_config(args)
    print(cfg.dump(), end="", flush=True)
    out = Path(cfg.output_dir)
    bundle = _load_bundle(cfg, args.data_dir)
    checksum = vdata.dataset_checksum(cfg.dataset, args.data_dir)
    for seed in cfg.seeds:
        run_dir = out if len(cfg.seeds) == 1 else out / f"seed{seed}"
        res = run_training(cfg, seed, run_dir, bundle=bundle, checksum=checksum)
        print(json.dumps(res, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.build_model()
    name = args.dataset or ckpt.extra.get("dataset")
    if name is None:
        raise UsageError("--dataset is required: the checkpoint does not record one")
    c, h, w, k = DATASET_SHAPES[name]
    mc = ckpt.model_config
    if (mc.image_channels, mc.image_h, mc.image_w, mc.num_classes) != (c, h, w, k):
        raise CheckpointError(f"checkpoint model expects {mc.image_channels}x{mc.image_h}x{mc.image_w} "
                              f"with {mc.num_classes} classes; dataset {name} is {c}x{h}x{w} with {k}")
    bundle = vdata.load_dataset(name, args.data_dir)
    images, labels = ((bundle.train_images, bundle.train_labels) if args.split == "train"
                      else (bundle.test_images, bundle.test_labels))
    limit = args.limit if args.limit is not None else (ckpt.extra.get("test_limit") if args.split == "test" else None)
    if limit is not None:
        images, labels = images[:limit], labels[:limit]
    res = evaluate(model, images, labels)
    print(json.dumps({"dataset": name, "split": args.split, "n": int(len(labels)),
                      "accuracy": res["accuracy"], "loss": res["loss"]}, sort_keys=True))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from vic.gradsuite import run_suite

    results = run_suite(seed=args.seed)
    failed = False
    for name, err in results.items():
        ok = err < args.tol
        failed |= not ok
        print(f"{name:22s} {err:.3e} {'ok' if ok else 'FAIL'}")
    return EXIT_CHECK if failed else EXIT_OK


def cmd_ablate(args) -> int:
    cfg = resolve_config(args)
    if args.epochs is None:
        cfg.train_config.epochs = 5
    depths = [int(c) for c in args.conv_layers_list.split(",")]
    print(cfg.dump(), end="", flush=True)
    out = Path(cfg.output_dir)
    bundle = _load_bundle(cfg, args.data_dir)
    checksum = vdata.dataset_checksum(cfg.dataset, args.data_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for depth in depths:
        run_cfg = RunConfig.from_dict(cfg.to_dict())
        run_cfg.model_config.conv_layers = depth
        run_cfg.model_config.validate()
        for seed in cfg.seeds:
            res = run_training(run_cfg, seed, out / f"conv{depth}_seed{seed}", bundle=bundle, checksum=checksum)
            rows.append([depth, seed, _fmt(res["final_acc"])])
            print(json.dumps({"conv_layers": depth, **res}, sort_keys=True), flush=True)
            _write_csv(out / "ablation.csv", ["conv_layers", "seed", "test_acc"], rows)
    return EXIT_OK


# -- argument parsing -------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML/JSON run config (or a run manifest.json)")
    p.add_argument("--data-dir", default=None, help="dataset root (default: $DATA_DIR or ./data)")
    p.add_argument("--dataset", choices=sorted(DATASET_SHAPES))
    p.add_argument("--model", choices=["vic", "vit"])
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", help="single seed")
    p.add_argument("--seeds", help="comma-separated seeds")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--train-limit", type=int, help="use only the first N training examples")
    p.add_argument("--test-limit", type=int, help="use only the first N test examples")
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--num-blocks", type=int)
    p.add_argument("--num-heads", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--conv-filters", type=int)
    p.add_argument("--mlp-hidden", type=int)
    p.add_argument("--patch-residual", choices=["normed", "block_input"])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vic", description="Vision Conformer training and checks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a ViC or ViT model")
    _add_run_flags(p)
    p.add_argument("--conv-layers", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--dataset", choices=sorted(DATASET_SHAPES))
    p.add_argument("--data-dir", default=None)
    p.add_argument("--split", choices=["train", "test"], default="test")
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op and block")
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="sweep the number of conv layers per block")
    _add_run_flags(p)
    p.add_argument("--conv-layers", dest="conv_layers_list", default="1,2,4,6")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (vdata.DatasetNotFound, vdata.DataFormatError, CheckpointError, TrainingDiverged,
            FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
