"""Downstream protocols: linear probe, kNN, finetune, fewer labels, fusion, export.

Every protocol consumes the query encoder of a pretrained pair. The linear
probe trains an affine classifier on frozen eval-mode hidden features; the
finetune protocol trains the encoder jointly and mutates the pair it is
given. Per-view class scores fuse by summing softmax probabilities.
"""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import LabeledDataset, ViewKind, make_view
from .encoder import EncoderConfig, EncoderParams, stgcn_forward
from .train import OptimizerState, sgd_step

_PROBE_MOMENTUM = 0.9
_PROBE_WEIGHT_DECAY = 1e-4
_PROBE_MILESTONE_FRAC = 0.8


@dataclass
class EvalReport:
    protocol: str
    view_accuracy: dict
    ensemble_accuracy: float | None = None
    label_fraction: float | None = None
    seeds: list = field(default_factory=list)
    config_digest: str = ""

    def __post_init__(self):
        for view, acc in self.view_accuracy.items():
            if not 0.0 <= acc <= 100.0:
                raise ValueError(f"report: accuracy {acc} for {view} outside [0, 100]")
        if self.ensemble_accuracy is not None and len(self.view_accuracy) < 2:
            raise ValueError("report: ensemble accuracy needs at least 2 views")

    def to_json(self) -> str:
        payload = {
            "protocol": self.protocol,
            "view_accuracy": dict(self.view_accuracy),
            "ensemble_accuracy": self.ensemble_accuracy,
            "label_fraction": self.label_fraction,
            "seeds": list(self.seeds),
            "config_digest": self.config_digest,
        }
        return json.dumps(payload, indent=2, sort_keys=True)


def config_digest(payload) -> str:
    return hashlib.sha256(
        json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def hidden_features(params: EncoderParams, cfg: EncoderConfig, ds: LabeledDataset,
                    view: ViewKind = ViewKind.JOINT, batch: int = 256) -> np.ndarray:
    """Eval-mode pooled features for every sample, (N, hidden_dim)."""
    out = np.empty((len(ds), cfg.hidden_dim))
    with ad.no_grad():
        for start in range(0, len(ds), batch):
            raw = np.asarray(ds.data[start:start + batch], dtype=np.float64)
            data = make_view(raw, ds.graph, view)
            out[start:start + batch] = stgcn_forward(data, params, cfg, mode="eval").data
    return out


def _check_labels(ds: LabeledDataset):
    if len(ds.labels) and (ds.labels.min() < 0 or ds.labels.max() >= ds.class_count):
        raise ValueError("eval: label outside [0, class_count)")


def train_linear_classifier(h_train: np.ndarray, y_train: np.ndarray,
                            h_test: np.ndarray, y_test: np.ndarray,
                            class_count: int, epochs: int = 100,
                            base_lr: float = 0.5, seed: int = 0,
                            batch: int = 128):
    """SGD-trained affine classifier on fixed features.

    Returns (top-1 accuracy in percent, test score matrix, (W, b)).
    """
    rng = np.random.default_rng([seed, 11])
    dim = h_train.shape[1]
    weights = {
        "w": Tensor(rng.normal(0.0, 0.01, size=(dim, class_count)), requires_grad=True),
        "b": Tensor(np.zeros(class_count), requires_grad=True),
    }
    state = OptimizerState(weights)
    milestone = int(np.floor(epochs * _PROBE_MILESTONE_FRAC))
    n = h_train.shape[0]
    steps = max(n // batch, 1)
    label_idx = y_train.astype(np.int64)

    for epoch in range(epochs):
        lr = base_lr * (0.1 if milestone and epoch >= milestone else 1.0)
        perm = rng.permutation(n)
        for s in range(steps):
            index = perm[s * batch:(s + 1) * batch]
            if index.size == 0:
                continue
            logits = ad.matmul(h_train[index], weights["w"]) + weights["b"]
            picked = logits.gather(label_idx[index][:, None]).reshape((index.size,))
            loss = (logits.logsumexp() - picked).mean()
            grads = ad.backward(loss)
            named = {name: grads[t] for name, t in weights.items() if t in grads}
            sgd_step(weights, named, state, lr, _PROBE_MOMENTUM, _PROBE_WEIGHT_DECAY)

    scores = h_test @ weights["w"].data + weights["b"].data
    accuracy = 100.0 * float((scores.argmax(axis=1) == y_test).mean())
    return accuracy, scores, (weights["w"].data.copy(), weights["b"].data.copy())


def linear_eval(pair, enc_cfg: EncoderConfig, train_ds: LabeledDataset,
                test_ds: LabeledDataset, view: ViewKind = ViewKind.JOINT,
                epochs: int = 100, base_lr: float = 0.5, seed: int = 0) -> float:
    """Frozen-encoder probe; returns test top-1 accuracy in percent."""
    acc, _, _ = linear_eval_scores(pair, enc_cfg, train_ds, test_ds, view,
                                   epochs, base_lr, seed)
    return acc


def linear_eval_scores(pair, enc_cfg, train_ds, test_ds,
                       view: ViewKind = ViewKind.JOINT, epochs: int = 100,
                       base_lr: float = 0.5, seed: int = 0):
    _check_labels(train_ds)
    _check_labels(test_ds)
    view = ViewKind.parse(view) if not isinstance(view, ViewKind) else view
    h_train = hidden_features(pair.query, enc_cfg, train_ds, view)
    h_test = hidden_features(pair.query, enc_cfg, test_ds, view)
    acc, scores, _ = train_linear_classifier(h_train, train_ds.labels, h_test,
                                             test_ds.labels, train_ds.class_count,
                                             epochs, base_lr, seed)
    return acc, scores, h_test


def knn_eval(pair, enc_cfg: EncoderConfig, train_ds: LabeledDataset,
             test_ds: LabeledDataset, k: int = 1,
             view: ViewKind = ViewKind.JOINT) -> float:
    """Cosine k-nearest-neighbor vote over train hidden features."""
    if k < 1:
        raise ValueError(f"knn_eval: k {k} < 1")
    if k > len(train_ds):
        raise ValueError(f"knn_eval: k {k} exceeds train size {len(train_ds)}")
    _check_labels(train_ds)
    _check_labels(test_ds)
    view = ViewKind.parse(view) if not isinstance(view, ViewKind) else view
    h_train = hidden_features(pair.query, enc_cfg, train_ds, view)
    h_test = hidden_features(pair.query, enc_cfg, test_ds, view)
    h_train = h_train / np.maximum(np.linalg.norm(h_train, axis=1, keepdims=True), 1e-12)
    h_test = h_test / np.maximum(np.linalg.norm(h_test, axis=1, keepdims=True), 1e-12)

    sims = h_test @ h_train.T
    order = np.argsort(-sims, axis=1, kind="stable")[:, :k]
    votes = train_ds.labels[order]  # (N_test, k), nearest first
    predictions = np.empty(len(test_ds), dtype=np.int64)
    for i in range(len(test_ds)):
        counts = np.bincount(votes[i], minlength=train_ds.class_count)
        best = counts.max()
        tied = np.flatnonzero(counts == best)
        if tied.size == 1:
            predictions[i] = tied[0]
        else:
            # tie: the tied class holding the single nearest neighbor wins
            for label in votes[i]:
                if label in tied:
                    predictions[i] = label
                    break
    return 100.0 * float((predictions == test_ds.labels).mean())


def finetune_eval(pair, enc_cfg: EncoderConfig, train_ds: LabeledDataset,
                  test_ds: LabeledDataset, view: ViewKind = ViewKind.JOINT,
                  epochs: int = 25, base_lr: float = 0.05, seed: int = 0,
                  batch: int = 32) -> float:
    """Classifier plus encoder trained jointly; mutates the given query params."""
    _check_labels(train_ds)
    _check_labels(test_ds)
    view = ViewKind.parse(view) if not isinstance(view, ViewKind) else view
    # same head-init stream as the linear probe: a zero-epoch finetune then
    # matches frozen-init linear classification exactly
    rng = np.random.default_rng([seed, 11])
    params = pair.query
    head = {
        "w": Tensor(rng.normal(0.0, 0.01, size=(enc_cfg.hidden_dim, train_ds.class_count)),
                    requires_grad=True),
        "b": Tensor(np.zeros(train_ds.class_count), requires_grad=True),
    }
    head_state = OptimizerState(head)
    encoder_weights = params.weights
    encoder_state = OptimizerState(encoder_weights)
    milestone = int(np.floor(epochs * _PROBE_MILESTONE_FRAC))
    n = len(train_ds)
    steps = max(n // batch, 1)

    for epoch in range(epochs):
        lr = base_lr * (0.1 if milestone and epoch >= milestone else 1.0)
        perm = rng.permutation(n)
        for s in range(steps):
            index = perm[s * batch:(s + 1) * batch]
            if index.size < 2:
                continue
            raw = np.asarray(train_ds.data[index], dtype=np.float64)
            data = make_view(raw, train_ds.graph, view)
            hidden = stgcn_forward(data, params, enc_cfg, mode="train")
            logits = ad.matmul(hidden, head["w"]) + head["b"]
            picked = logits.gather(train_ds.labels[index][:, None]).reshape((index.size,))
            loss = (logits.logsumexp() - picked).mean()
            grads = ad.backward(loss)
            named_enc = {name: grads[t] for name, t in encoder_weights.items()
                         if t in grads}
            sgd_step(encoder_weights, named_enc, encoder_state, lr,
                     _PROBE_MOMENTUM, _PROBE_WEIGHT_DECAY)
            named_head = {name: grads[t] for name, t in head.items() if t in grads}
            sgd_step(head, named_head, head_state, lr, _PROBE_MOMENTUM,
                     _PROBE_WEIGHT_DECAY)

    h_test = hidden_features(params, enc_cfg, test_ds, view)
    scores = h_test @ head["w"].data + head["b"].data
    return 100.0 * float((scores.argmax(axis=1) == test_ds.labels).mean())


def subsample_labels(labels: np.ndarray, class_count: int, fraction: float,
                     seed: int, attempts: int = 100) -> np.ndarray:
    """Uniform index subset keeping at least one sample per class."""
    if not 0.0 < fraction <= 1.0:
        raise ValueError(f"semi: fraction {fraction} outside (0, 1]")
    n = len(labels)
    count = max(int(np.floor(fraction * n)), 1)
    if count < class_count:
        raise ValueError(f"semi: {count} labels cannot cover {class_count} classes")
    for attempt in range(attempts):
        rng = np.random.default_rng([seed, 13, attempt])
        chosen = rng.choice(n, size=count, replace=False)
        if np.unique(labels[chosen]).size == class_count:
            return np.sort(chosen)
    raise ValueError(f"semi: no draw covered every class after {attempts} attempts")


def semi_supervised_eval(pair, enc_cfg: EncoderConfig, train_ds: LabeledDataset,
                         test_ds: LabeledDataset, fraction: float,
                         view: ViewKind = ViewKind.JOINT, epochs: int = 100,
                         base_lr: float = 0.5, seed: int = 0) -> float:
    """Linear probe on a random labeled subset of the train split."""
    _check_labels(train_ds)
    chosen = subsample_labels(train_ds.labels, train_ds.class_count, fraction, seed)
    view = ViewKind.parse(view) if not isinstance(view, ViewKind) else view
    h_train = hidden_features(pair.query, enc_cfg, train_ds, view)[chosen]
    h_test = hidden_features(pair.query, enc_cfg, test_ds, view)
    acc, _, _ = train_linear_classifier(h_train, train_ds.labels[chosen], h_test,
                                        test_ds.labels, train_ds.class_count,
                                        epochs, base_lr, seed)
    return acc


def ensemble_fuse(probability_vectors) -> int:
    """Predicted label from summed per-view class probabilities."""
    rows = [np.asarray(p, dtype=np.float64) for p in probability_vectors]
    if len(rows) < 2:
        raise ValueError(f"ensemble_fuse: need at least 2 views, got {len(rows)}")
    width = rows[0].shape[-1]
    if any(r.ndim != 1 or r.shape[0] != width for r in rows):
        raise ValueError("ensemble_fuse: class counts differ across views")
    return int(np.argmax(np.sum(rows, axis=0)))


def ensemble_accuracy(score_matrices, labels: np.ndarray) -> float:
    """Fuse per-view raw scores through softmax and score the argmax."""
    if len(score_matrices) < 2:
        raise ValueError("ensemble_accuracy: need at least 2 views")
    probs = [_softmax(np.asarray(s)) for s in score_matrices]
    width = probs[0].shape
    if any(p.shape != width for p in probs):
        raise ValueError("ensemble_accuracy: class counts differ across views")
    fused = np.sum(probs, axis=0)
    return 100.0 * float((fused.argmax(axis=1) == labels).mean())


def export_embeddings(pair, enc_cfg: EncoderConfig, ds: LabeledDataset, path,
                      view: ViewKind = ViewKind.JOINT) -> int:
    """Write sample_id, label, h_1..h_dim rows; returns the row count."""
    view = ViewKind.parse(view) if not isinstance(view, ViewKind) else view
    hidden = hidden_features(pair.query, enc_cfg, ds, view)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["sample_id", "label"]
                        + [f"h_{i + 1}" for i in range(hidden.shape[1])])
        for i in range(hidden.shape[0]):
            writer.writerow([i, int(ds.labels[i])] + [repr(float(v)) for v in hidden[i]])
    return hidden.shape[0]
