"""SGD with momentum, the step schedule, and two-stage multi-view pretraining.

Stage 1 trains every view with its own instance-discrimination loss; from
the switch epoch on, the objective becomes the sum of all directed
cross-view terms. Views share nothing but the sample order, so summing the
losses and stepping each view's parameters from the shared tape matches
training them independently.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, augment_pair_batch
from .contrastive import MemoryBank, ViewState, cross_view_terms, loss_infonce
from .data import LabeledDataset, ViewKind, bone_view, motion_view
from .encoder import (
    EncoderConfig,
    MomentumEncoderPair,
    encode,
    make_pair,
    momentum_update,
)

STAGE_SINGLE = "infonce"
STAGE_CROSS = "cross"


@dataclass
class TrainConfig:
    views: tuple = (ViewKind.JOINT,)
    epochs: int = 60
    stage_switch_epoch: int = 30
    batch_size: int = 32
    base_lr: float = 0.05
    lr_milestones: tuple = (50,)
    lr_factor: float = 0.1
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    encoder_momentum: float = 0.99  # alpha of the key EMA, sized for short runs
    temperature: float = 0.07
    top_k: int = 1
    bank_capacity: int = 2048
    shear_beta: float = 0.5
    crop_gamma: int = 6
    guide_grad: bool = False
    checkpoint_interval: int = 0  # 0: final state only
    seed: int = 0

    def __post_init__(self):
        self.views = tuple(ViewKind.parse(v) if not isinstance(v, ViewKind) else v
                           for v in self.views)
        if len(set(self.views)) != len(self.views) or not self.views:
            raise ValueError(f"train: views must be distinct and non-empty, got {self.views}")
        # stage_switch_epoch == epochs means the cross-view stage never runs
        if not 0 < self.stage_switch_epoch <= self.epochs:
            raise ValueError(f"train: stage switch {self.stage_switch_epoch} outside "
                             f"(0, {self.epochs}]")
        if self.batch_size < 2:
            raise ValueError(f"train: batch size {self.batch_size} < 2")
        if self.base_lr <= 0 or self.lr_factor <= 0:
            raise ValueError("train: rates must be positive")
        if not 0.0 <= self.encoder_momentum <= 1.0:
            raise ValueError(f"train: encoder momentum {self.encoder_momentum} outside [0, 1]")
        if self.temperature <= 0:
            raise ValueError(f"train: temperature {self.temperature} must be positive")
        if self.top_k < 0 or self.top_k > self.bank_capacity:
            raise ValueError(f"train: top_k {self.top_k} outside [0, {self.bank_capacity}]")

    @property
    def augment(self) -> AugmentConfig:
        return AugmentConfig(self.shear_beta, self.crop_gamma)


class OptimizerState:
    """Per-parameter velocity buffers, zero-initialized."""

    def __init__(self, params: dict):
        self.velocities = {name: np.zeros_like(t.data) for name, t in params.items()}


def sgd_step(params: dict, grads: dict, state: OptimizerState, lr: float,
             momentum: float, weight_decay: float) -> None:
    """g' = g + wd * p; v = mu * v + g'; p -= lr * v (in place)."""
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"sgd_step: gradient shape {g.shape} does not match "
                             f"parameter {name} {p.data.shape}")
        v = state.velocities[name]
        v *= momentum
        v += g + weight_decay * p.data
        p.data = p.data - lr * v


def lr_at_epoch(cfg: TrainConfig, epoch: int) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"lr_at_epoch: epoch {epoch} outside [0, {cfg.epochs})")
    drops = sum(1 for m in cfg.lr_milestones if m <= epoch)
    return cfg.base_lr * cfg.lr_factor ** drops


@dataclass
class MetricRow:
    epoch: int
    view: str
    stage: str
    mean_loss: float
    lr: float


def write_metrics_csv(rows, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["epoch", "view", "stage", "mean_loss", "lr"])
        for row in rows:
            writer.writerow([row.epoch, row.view, row.stage,
                             repr(row.mean_loss), repr(row.lr)])


@dataclass
class PretrainResult:
    pairs: dict
    banks: dict
    optimizers: dict
    metrics: list = field(default_factory=list)
    encoder_cfg: EncoderConfig = None


def _view_batch(raw: np.ndarray, kind: ViewKind, graph) -> np.ndarray:
    if kind is ViewKind.JOINT:
        return raw
    if kind is ViewKind.MOTION:
        return motion_view(raw)
    return bone_view(raw, graph)


def pretrain(dataset: LabeledDataset, cfg: TrainConfig,
             encoder_cfg: EncoderConfig | None = None,
             checkpoint_hook=None) -> PretrainResult:
    """Run the two-stage loop and return per-view pairs, banks, and metrics.

    Deterministic given the config seed. ``checkpoint_hook(epoch, result)``
    fires every ``checkpoint_interval`` epochs when the interval is set.
    """
    if len(dataset) < cfg.batch_size:
        raise ValueError(f"pretrain: dataset of {len(dataset)} samples is smaller "
                         f"than one batch ({cfg.batch_size})")
    if encoder_cfg is None:
        encoder_cfg = EncoderConfig(graph=dataset.graph)
    if dataset.frames < encoder_cfg.temporal_kernel:
        raise ValueError("pretrain: sequences shorter than the temporal kernel")

    views = cfg.views
    order_rng = np.random.default_rng([cfg.seed, 1])
    pairs, banks, opts, aug_rngs = {}, {}, {}, {}
    for vi, view in enumerate(views):
        pairs[view] = make_pair(encoder_cfg, np.random.default_rng([cfg.seed, 2, vi]),
                                alpha=cfg.encoder_momentum)
        banks[view] = MemoryBank.randomized(cfg.bank_capacity, encoder_cfg.embed_dim,
                                            np.random.default_rng([cfg.seed, 3, vi]))
        opts[view] = OptimizerState(pairs[view].query.weights)
        aug_rngs[view] = np.random.default_rng([cfg.seed, 4, vi])

    result = PretrainResult(pairs, banks, opts, [], encoder_cfg)
    n_batches = len(dataset) // cfg.batch_size
    iteration = 0

    for epoch in range(cfg.epochs):
        lr = lr_at_epoch(cfg, epoch)
        cross_stage = epoch >= cfg.stage_switch_epoch
        stage = STAGE_CROSS if cross_stage else STAGE_SINGLE
        if cross_stage and len(views) < 2:
            raise ValueError("pretrain: the cross-view stage needs at least 2 views")
        perm = order_rng.permutation(len(dataset))
        epoch_loss = {view: 0.0 for view in views}

        for b in range(n_batches):
            index = perm[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            raw = np.asarray(dataset.data[index], dtype=np.float64)

            states, keys = {}, {}
            for view in views:
                pair = pairs[view]
                data_v = _view_batch(raw, view, dataset.graph)
                x_query, x_key = augment_pair_batch(data_v, cfg.augment, aug_rngs[view])
                z = encode(x_query, pair.query, encoder_cfg, mode="train")
                with ad.no_grad():
                    z_key = encode(x_key, pair.key, encoder_cfg, mode="train").data
                states[view] = ViewState(z, z_key, banks[view].matrix.copy())
                keys[view] = z_key

            if cross_stage:
                terms = cross_view_terms([states[v] for v in views],
                                         cfg.temperature, cfg.top_k, cfg.guide_grad)
                per_view = {view: None for view in views}
                for (src, dst), term in sorted(terms.items()):
                    view = views[dst]
                    per_view[view] = term if per_view[view] is None \
                        else per_view[view] + term
            else:
                per_view = {view: loss_infonce(states[view].z, states[view].z_hat,
                                               states[view].bank, cfg.temperature)
                            for view in views}

            total = None
            for view in views:
                total = per_view[view] if total is None else total + per_view[view]
            if not np.isfinite(total.data):
                raise RuntimeError(f"pretrain: non-finite loss at iteration {iteration}")
            grads = ad.backward(total)

            for view in views:
                pair = pairs[view]
                named = {name: grads[t] for name, t in pair.query.weights.items()
                         if t in grads}
                sgd_step(pair.query.weights, named, opts[view], lr,
                         cfg.sgd_momentum, cfg.weight_decay)
                momentum_update(pair)
                banks[view].enqueue(keys[view])
                epoch_loss[view] += float(per_view[view].data)
            iteration += 1

        for view in views:
            result.metrics.append(MetricRow(epoch, view.value, stage,
                                            epoch_loss[view] / n_batches, lr))
        if (checkpoint_hook is not None and cfg.checkpoint_interval > 0
                and (epoch + 1) % cfg.checkpoint_interval == 0):
            checkpoint_hook(epoch, result)

    return result
