"""Command-line entry point: dataset generation, pretraining, evaluation, export.

One process per command; a run directory holds the effective config, the
metrics log, and one checkpoint directory per view, so any run can be
reproduced from its own artifacts. Exit codes: 0 success, 1 usage error,
2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from .data import ViewKind, load_dataset, save_dataset, synth_dataset
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .evaluate import (
    EvalReport,
    config_digest,
    ensemble_accuracy,
    finetune_eval,
    knn_eval,
    linear_eval_scores,
    semi_supervised_eval,
    export_embeddings,
)
from .train import TrainConfig, pretrain, write_metrics_csv


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


@dataclasses.dataclass
class RunConfig:
    """Flat union of every tunable the commands accept."""

    views: tuple = ("joint",)
    epochs: int = 60
    stage_switch_epoch: int = 30
    batch_size: int = 32
    base_lr: float = 0.05
    lr_milestones: tuple = (50,)
    lr_factor: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    encoder_momentum: float = 0.99
    temperature: float = 0.07
    top_k: int = 1
    bank_capacity: int = 2048
    shear_beta: float = 0.5
    crop_gamma: int = 6
    guide_grad: bool = False
    checkpoint_interval: int = 0
    block_channels: tuple = (16, 32, 64)
    temporal_kernel: int = 9
    embed_dim: int = 32
    probe_epochs: int = 100
    probe_lr: float = 0.5
    finetune_epochs: int = 25
    finetune_lr: float = 0.05
    knn_k: int = 1
    label_fraction: float = 0.1
    seed: int = 0

    @classmethod
    def field_names(cls):
        return {f.name for f in dataclasses.fields(cls)}

    @classmethod
    def from_sources(cls, file_values: dict | None, overrides: dict) -> "RunConfig":
        """File values first, explicit flags on top; unknown keys rejected."""
        merged = {}
        if file_values:
            unknown = set(file_values) - cls.field_names()
            if unknown:
                raise UsageError(f"config: unknown keys {sorted(unknown)}")
            merged.update(file_values)
        merged.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**merged)
        cfg.views = tuple(ViewKind.parse(v) if not isinstance(v, ViewKind) else v
                          for v in cfg.views)
        cfg.lr_milestones = tuple(cfg.lr_milestones)
        cfg.block_channels = tuple(cfg.block_channels)
        return cfg

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["views"] = [str(getattr(v, "value", v)) for v in self.views]
        out["lr_milestones"] = list(self.lr_milestones)
        out["block_channels"] = list(self.block_channels)
        return out

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            views=self.views, epochs=self.epochs,
            stage_switch_epoch=self.stage_switch_epoch,
            batch_size=self.batch_size, base_lr=self.base_lr,
            lr_milestones=self.lr_milestones, lr_factor=self.lr_factor,
            sgd_momentum=self.sgd_momentum, weight_decay=self.weight_decay,
            encoder_momentum=self.encoder_momentum, temperature=self.temperature,
            top_k=self.top_k, bank_capacity=self.bank_capacity,
            shear_beta=self.shear_beta, crop_gamma=self.crop_gamma,
            guide_grad=self.guide_grad,
            checkpoint_interval=self.checkpoint_interval, seed=self.seed)

    def encoder_config(self, graph) -> EncoderConfig:
        return EncoderConfig(graph=graph, channels=self.block_channels,
                             temporal_kernel=self.temporal_kernel,
                             embed_dim=self.embed_dim)


def _parse_views(text: str) -> tuple:
    return tuple(ViewKind.parse(part) for part in text.split(",") if part.strip())


def _load_config_file(path: str | None) -> dict | None:
    if path is None:
        return None
    file_path = Path(path)
    if not file_path.is_file():
        raise UsageError(f"config file not found: {path}")
    try:
        return json.loads(file_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise UsageError(f"config file {path} is not valid JSON: {err}")


def _collect_overrides(args, names) -> dict:
    return {name: getattr(args, name) for name in names if hasattr(args, name)}


def _add_shared_config_flags(parser):
    parser.add_argument("--config", help="JSON file merged under explicit flags")
    parser.add_argument("--seed", type=int, default=None)


def cmd_gen_data(args) -> int:
    if args.poses < 1 or args.motions < 1 or args.poses * args.motions < 2:
        raise UsageError("gen-data: need poses*motions >= 2")
    if args.per_class < 2:
        raise UsageError("gen-data: need per-class >= 2")
    if args.noise_std < 0:
        raise UsageError("gen-data: noise-std must be >= 0")
    seed = args.seed if args.seed is not None else 0
    train, test = synth_dataset(args.poses, args.motions, args.per_class,
                                joints=args.joints, frames=args.frames,
                                noise_std=args.noise_std, seed=seed,
                                test_per_class=args.test_per_class)
    out = Path(args.out)
    save_dataset(train, out / "train")
    save_dataset(test, out / "test")
    print(f"wrote {len(train)} train and {len(test)} test sequences "
          f"({train.class_count} classes, T={train.frames}, "
          f"V={train.graph.joint_count}) to {out}")
    return 0


def cmd_pretrain(args) -> int:
    file_values = _load_config_file(args.config)
    overrides = _collect_overrides(args, RunConfig.field_names())
    if args.views is not None:
        overrides["views"] = _parse_views(args.views)
    cfg = RunConfig.from_sources(file_values, overrides)

    if args.mode == "skeletonclr":
        cfg.stage_switch_epoch = cfg.epochs  # never enters the cross-view stage
    elif len(cfg.views) < 2:
        raise UsageError("pretrain: --mode crossclr needs at least 2 views")

    train = load_dataset(Path(args.data) / "train")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(
        json.dumps({"mode": args.mode, **cfg.to_dict()}, indent=2, sort_keys=True)
        + "\n", encoding="utf-8")

    encoder_cfg = cfg.encoder_config(train.graph)

    def write_ckpts(epoch, result):
        for view, pair in result.pairs.items():
            save_checkpoint(out / f"ckpt-{view.value}", pair, encoder_cfg,
                            view.value, epoch,
                            result.optimizers[view].velocities)

    result = pretrain(train, cfg.train_config(), encoder_cfg,
                      checkpoint_hook=write_ckpts if cfg.checkpoint_interval else None)
    write_ckpts(cfg.epochs - 1, result)
    write_metrics_csv(result.metrics, out / "metrics.csv")
    views = ",".join(v.value for v in cfg.views)
    print(f"pretrained views [{views}] for {cfg.epochs} epochs "
          f"({args.mode}); run directory: {out}")
    return 0


def _load_view_checkpoints(ckpt_dir: Path, views, graph):
    pairs = {}
    enc_cfg = None
    for view in views:
        path = ckpt_dir / f"ckpt-{view.value}"
        pair, cfg, stored_view, _epoch, _vel = load_checkpoint(path)
        if stored_view != view.value:
            raise ValueError(f"checkpoint {path} stores view {stored_view!r}, "
                             f"expected {view.value!r}")
        if cfg.graph != graph:
            raise ValueError(f"checkpoint {path}: graph does not match the dataset")
        pairs[view] = pair
        enc_cfg = cfg
    return pairs, enc_cfg


def cmd_eval(args) -> int:
    views = _parse_views(args.views)
    if not views:
        raise UsageError("eval: --views must name at least one view")
    if args.ensemble and len(views) < 2:
        raise UsageError("eval: --ensemble needs at least 2 views")
    if args.ensemble and args.protocol == "knn":
        raise UsageError("eval: --ensemble is not defined for the knn protocol")
    seed = args.seed if args.seed is not None else 0

    train = load_dataset(Path(args.data) / "train")
    test = load_dataset(Path(args.data) / "test")
    pairs, enc_cfg = _load_view_checkpoints(Path(args.ckpt), views, train.graph)

    accuracies, score_stack = {}, []
    fraction = None
    for view in views:
        pair = pairs[view]
        if args.protocol == "linear":
            acc, scores, _ = linear_eval_scores(pair, enc_cfg, train, test, view,
                                                epochs=args.probe_epochs,
                                                base_lr=args.probe_lr, seed=seed)
            score_stack.append(scores)
        elif args.protocol == "knn":
            acc = knn_eval(pair, enc_cfg, train, test, k=args.knn_k, view=view)
        elif args.protocol == "finetune":
            acc = finetune_eval(pair, enc_cfg, train, test, view,
                                epochs=args.finetune_epochs,
                                base_lr=args.finetune_lr, seed=seed)
        else:
            fraction = args.fraction
            acc = semi_supervised_eval(pair, enc_cfg, train, test, fraction, view,
                                       epochs=args.probe_epochs,
                                       base_lr=args.probe_lr, seed=seed)
        accuracies[view.value] = acc

    ensemble = None
    if args.ensemble and score_stack:
        ensemble = ensemble_accuracy(score_stack, test.labels)

    digest = config_digest({"protocol": args.protocol, "views": args.views,
                            "seed": seed, "ckpt": str(args.ckpt),
                            "knn_k": args.knn_k, "fraction": fraction})
    report = EvalReport(args.protocol, accuracies, ensemble, fraction,
                        seeds=[seed], config_digest=digest)
    text = report.to_json()
    print(text)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_export(args) -> int:
    ds = load_dataset(Path(args.data) / args.split)
    view = ViewKind.parse(args.view)
    pairs, enc_cfg = _load_view_checkpoints(Path(args.ckpt), (view,), ds.graph)
    count = export_embeddings(pairs[view], enc_cfg, ds, args.out, view)
    print(f"wrote {count} embedding rows to {args.out}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="crossview",
                     description="cross-view contrastive skeleton pretraining")
    commands = parser.add_subparsers(dest="command", required=True)

    gen = commands.add_parser("gen-data", help="generate the synthetic benchmark")
    gen.add_argument("--poses", type=int, required=True)
    gen.add_argument("--motions", type=int, required=True)
    gen.add_argument("--per-class", type=int, required=True, dest="per_class")
    gen.add_argument("--test-per-class", type=int, default=None, dest="test_per_class")
    gen.add_argument("--joints", type=int, default=8)
    gen.add_argument("--frames", type=int, default=50)
    gen.add_argument("--noise-std", type=float, default=0.02, dest="noise_std")
    gen.add_argument("--out", required=True)
    _add_shared_config_flags(gen)
    gen.set_defaults(func=cmd_gen_data)

    pre = commands.add_parser("pretrain", help="two-stage contrastive pretraining")
    pre.add_argument("--data", required=True, help="dataset directory (train/ inside)")
    pre.add_argument("--out", required=True, help="run directory")
    pre.add_argument("--mode", choices=("skeletonclr", "crossclr"), required=True)
    pre.add_argument("--views", default=None, help="comma-separated view names")
    for name, kind in (("epochs", int), ("stage-switch-epoch", int),
                       ("batch-size", int), ("base-lr", float),
                       ("lr-factor", float), ("sgd-momentum", float),
                       ("weight-decay", float), ("encoder-momentum", float),
                       ("temperature", float), ("top-k", int),
                       ("bank-capacity", int), ("shear-beta", float),
                       ("crop-gamma", int), ("checkpoint-interval", int),
                       ("temporal-kernel", int), ("embed-dim", int)):
        pre.add_argument(f"--{name}", type=kind, default=None,
                         dest=name.replace("-", "_"))
    _add_shared_config_flags(pre)
    pre.set_defaults(func=cmd_pretrain)

    ev = commands.add_parser("eval", help="downstream evaluation protocols")
    ev.add_argument("protocol", choices=("linear", "knn", "finetune", "semi"))
    ev.add_argument("--ckpt", required=True, help="run directory with ckpt-<view>/")
    ev.add_argument("--data", required=True)
    ev.add_argument("--views", default="joint")
    ev.add_argument("--ensemble", action="store_true")
    ev.add_argument("--fraction", type=float, default=0.1)
    ev.add_argument("--knn-k", type=int, default=1, dest="knn_k")
    ev.add_argument("--probe-epochs", type=int, default=100, dest="probe_epochs")
    ev.add_argument("--probe-lr", type=float, default=0.5, dest="probe_lr")
    ev.add_argument("--finetune-epochs", type=int, default=25, dest="finetune_epochs")
    ev.add_argument("--finetune-lr", type=float, default=0.05, dest="finetune_lr")
    ev.add_argument("--out", default=None, help="write the report JSON here")
    _add_shared_config_flags(ev)
    ev.set_defaults(func=cmd_eval)

    ex = commands.add_parser("export-embeddings", help="dump hidden features as CSV")
    ex.add_argument("--ckpt", required=True)
    ex.add_argument("--data", required=True)
    ex.add_argument("--split", choices=("train", "test"), default="test")
    ex.add_argument("--view", default="joint")
    ex.add_argument("--out", required=True)
    _add_shared_config_flags(ex)
    ex.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
