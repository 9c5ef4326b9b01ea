"""Slim spatio-temporal graph encoder, projection head, and momentum twin.

Each block runs a spatial step (joints aggregated through the normalized
adjacency, channels mixed by a learned matrix), a depthwise temporal
convolution, per-channel normalization, and ReLU. Pooling over time and
joints yields the hidden vector h; the projector maps it to a unit-norm
embedding z. The key branch is a gradient-free copy of the query branch
whose learnable parameters track it by exponential moving average.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NUM_CHANNELS, SkeletonGraph

_BN_EPS = 1e-5
_BN_MOMENTUM = 0.1

CKPT_VERSION = 1
_CKPT_META = "ckpt.json"
_CKPT_BLOB = "params.f32"


@dataclass
class EncoderConfig:
    graph: SkeletonGraph
    channels: tuple[int, ...] = (16, 32, 64)
    temporal_kernel: int = 9
    embed_dim: int = 32

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if not self.channels:
            raise ValueError("encoder: need at least one block")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"encoder: bad channel widths {self.channels}")
        if self.temporal_kernel < 1 or self.temporal_kernel % 2 == 0:
            raise ValueError(f"encoder: temporal kernel {self.temporal_kernel} must be odd")
        if not self.channels[-1] >= self.embed_dim >= 2:
            raise ValueError(f"encoder: need hidden {self.channels[-1]} >= "
                             f"embed {self.embed_dim} >= 2")

    @property
    def hidden_dim(self) -> int:
        return self.channels[-1]

    def to_dict(self) -> dict:
        return {
            "channels": list(self.channels),
            "temporal_kernel": self.temporal_kernel,
            "embed_dim": self.embed_dim,
            "graph": {
                "joint_count": self.graph.joint_count,
                "edges": [[c, p] for c, p in self.graph.edges],
                "root": self.graph.root,
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        g = d["graph"]
        graph = SkeletonGraph(g["joint_count"], [(c, p) for c, p in g["edges"]],
                              g["root"])
        return cls(graph=graph, channels=tuple(d["channels"]),
                   temporal_kernel=d["temporal_kernel"], embed_dim=d["embed_dim"])


class EncoderParams:
    """Learnable tensors plus per-block running normalization statistics."""

    def __init__(self, weights: dict[str, Tensor], stats: dict[str, np.ndarray]):
        self.weights = weights
        self.stats = stats

    def clone(self, requires_grad: bool = False) -> "EncoderParams":
        weights = {name: Tensor(t.data.copy(), requires_grad=requires_grad)
                   for name, t in self.weights.items()}
        stats = {name: a.copy() for name, a in self.stats.items()}
        return EncoderParams(weights, stats)

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for name in sorted(self.weights):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.weights[name].data).tobytes())
        for name in sorted(self.stats):
            digest.update(name.encode())
            digest.update(np.ascontiguousarray(self.stats[name]).tobytes())
        return digest.hexdigest()


def init_params(cfg: EncoderConfig, rng, requires_grad: bool = True) -> EncoderParams:
    weights: dict[str, Tensor] = {}
    stats: dict[str, np.ndarray] = {}
    fan_in = NUM_CHANNELS
    for i, width in enumerate(cfg.channels):
        spatial = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, width))
        temporal = rng.normal(0.0, np.sqrt(2.0 / cfg.temporal_kernel),
                              size=(width, cfg.temporal_kernel))
        weights[f"block{i}.spatial"] = Tensor(spatial, requires_grad)
        weights[f"block{i}.temporal"] = Tensor(temporal, requires_grad)
        weights[f"block{i}.scale"] = Tensor(np.ones(width), requires_grad)
        weights[f"block{i}.shift"] = Tensor(np.zeros(width), requires_grad)
        stats[f"block{i}.mean"] = np.zeros(width)
        stats[f"block{i}.var"] = np.ones(width)
        fan_in = width
    proj = rng.normal(0.0, np.sqrt(2.0 / cfg.hidden_dim),
                      size=(cfg.hidden_dim, cfg.embed_dim))
    weights["proj.weight"] = Tensor(proj, requires_grad)
    weights["proj.bias"] = Tensor(np.zeros(cfg.embed_dim), requires_grad)
    return EncoderParams(weights, stats)


@dataclass
class MomentumEncoderPair:
    query: EncoderParams
    key: EncoderParams
    alpha: float

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"momentum pair: alpha {self.alpha} outside [0, 1]")


def make_pair(cfg: EncoderConfig, rng, alpha: float = 0.999) -> MomentumEncoderPair:
    query = init_params(cfg, rng, requires_grad=True)
    return MomentumEncoderPair(query, query.clone(requires_grad=False), alpha)


def momentum_update(pair: MomentumEncoderPair, alpha: float | None = None) -> None:
    """key <- alpha * key + (1 - alpha) * query, learnable parameters only."""
    a = pair.alpha if alpha is None else alpha
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"momentum_update: alpha {a} outside [0, 1]")
    for name, q in pair.query.weights.items():
        k = pair.key.weights[name]
        k.data = a * k.data + (1.0 - a) * q.data


def spatial_step(x, adjacency, weight) -> Tensor:
    """y[b, d, t, v] = sum_{w, c} adj[v, w] * x[b, c, t, w] * W[c, d].

    Stays channels-first throughout: joints aggregate through adj^T on the
    right, channels mix through W^T on the left.
    """
    x = ad.as_tensor(x)
    adj_t = ad.as_tensor(adjacency).transpose((1, 0))
    mixed = ad.matmul(x, adj_t)  # right-multiplying by adj^T aggregates rows
    b, c, t, v = mixed.shape
    flat = mixed.reshape((b, c, t * v))
    out = ad.left_matmul(ad.as_tensor(weight).transpose((1, 0)), flat)
    return out.reshape((b, weight.shape[1], t, v))


def _channel_norm(x: Tensor, scale: Tensor, shift: Tensor, mean_stat: np.ndarray,
                  var_stat: np.ndarray, mode: str) -> Tensor:
    """Normalize per channel over (batch, time, joints), fused into one node.

    Train mode uses batch statistics (biased variance) and updates the
    running buffers; eval mode and degenerate batches of one use the
    running buffers as constants. The hand-written backward implements the
    full batch-statistics Jacobian.
    """
    data = x.data
    n = data.shape[0] * data.shape[2] * data.shape[3]  # per-channel count
    axes = (0, 2, 3)
    batch_stats = mode == "train" and data.shape[0] > 1
    if batch_stats:
        mu = data.mean(axis=axes)
        var = np.einsum("bctv,bctv->c", data, data) / n - mu * mu
        var = np.maximum(var, 0.0)
        mean_stat *= 1.0 - _BN_MOMENTUM
        mean_stat += _BN_MOMENTUM * mu
        var_stat *= 1.0 - _BN_MOMENTUM
        var_stat += _BN_MOMENTUM * var
    else:
        mu, var = mean_stat.copy(), var_stat.copy()
    inv = 1.0 / np.sqrt(var + _BN_EPS)
    # two-pass affine form; the normalized activations are only rebuilt when
    # the backward pass actually needs them
    a = inv * scale.data
    out_data = data * a[:, None, None] + (shift.data - mu * a)[:, None, None]

    def vjp(g):
        xhat = (data - mu[:, None, None]) * inv[:, None, None]
        g_shift = g.sum(axis=axes) if shift.requires_grad else None
        g_scale = np.einsum("bctv,bctv->c", g, xhat) if scale.requires_grad else None
        if not x.requires_grad:
            return None, g_scale, g_shift
        if batch_stats:
            term_mean = g.mean(axis=axes) * scale.data
            term_proj = (np.einsum("bctv,bctv->c", g, xhat) / n) * scale.data
            gx = (g * scale.data[:, None, None] - term_mean[:, None, None]
                  - xhat * term_proj[:, None, None]) * inv[:, None, None]
        else:
            gx = g * a[:, None, None]
        return gx, g_scale, g_shift

    return ad._op(out_data, (x, scale, shift), vjp)


def stgcn_forward(x, params: EncoderParams, cfg: EncoderConfig,
                  mode: str = "train") -> Tensor:
    """Encode a (B, 3, T, V) batch into (B, hidden_dim) pooled features."""
    if mode not in ("train", "eval"):
        raise ValueError(f"stgcn_forward: unknown mode {mode!r}")
    t = ad.as_tensor(x)
    if t.ndim != 4 or t.shape[1] != NUM_CHANNELS:
        raise ValueError(f"stgcn_forward: expected (B, 3, T, V), got {t.shape}")
    if t.shape[3] != cfg.graph.joint_count:
        raise ValueError(f"stgcn_forward: input has {t.shape[3]} joints, "
                         f"graph has {cfg.graph.joint_count}")
    if t.shape[2] < cfg.temporal_kernel:
        raise ValueError(f"stgcn_forward: T={t.shape[2]} shorter than temporal "
                         f"kernel {cfg.temporal_kernel}")
    adjacency = cfg.graph.adjacency
    for i in range(len(cfg.channels)):
        t = spatial_step(t, adjacency, params.weights[f"block{i}.spatial"])
        t = ad.temporal_conv(t, params.weights[f"block{i}.temporal"])
        t = _channel_norm(t, params.weights[f"block{i}.scale"],
                          params.weights[f"block{i}.shift"],
                          params.stats[f"block{i}.mean"],
                          params.stats[f"block{i}.var"], mode)
        t = t.relu()
    return t.mean(axes=(2, 3))


def project(hidden, params: EncoderParams) -> Tensor:
    """FC + ReLU + row normalization; an all-zero row falls back to e_0."""
    h = ad.as_tensor(hidden)
    z = ad.matmul(h, params.weights["proj.weight"]) + params.weights["proj.bias"]
    z = z.relu()
    dead = ~z.data.any(axis=-1)
    if dead.any():
        fallback = np.zeros(z.shape)
        fallback[dead, 0] = 1.0
        z = z + Tensor(fallback)
    return z.l2_normalize()


def encode(x, params: EncoderParams, cfg: EncoderConfig, mode: str = "train") -> Tensor:
    """Full query path: pooled hidden features projected to unit-norm embeddings."""
    return project(stgcn_forward(x, params, cfg, mode), params)


# ---------------------------------------------------------------------------
# checkpoint format: ckpt.json (manifest) + params.f32 (raw little-endian)
# ---------------------------------------------------------------------------

def _manifest_arrays(pair: MomentumEncoderPair,
                     velocities: dict[str, np.ndarray] | None):
    for name in pair.query.weights:
        yield f"query/{name}", pair.query.weights[name].data
    for name in pair.key.weights:
        yield f"key/{name}", pair.key.weights[name].data
    for name in pair.query.stats:
        yield f"stats/query/{name}", pair.query.stats[name]
    for name in pair.key.stats:
        yield f"stats/key/{name}", pair.key.stats[name]
    for name in (velocities or {}):
        yield f"opt/{name}", velocities[name]


def save_checkpoint(path, pair: MomentumEncoderPair, cfg: EncoderConfig,
                    view: str, epoch: int,
                    velocities: dict[str, np.ndarray] | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, chunks, offset = [], [], 0
    for name, array in _manifest_arrays(pair, velocities):
        blob = np.ascontiguousarray(array, dtype="<f4").tobytes()
        manifest.append({"name": name, "shape": list(array.shape), "offset": offset})
        chunks.append(blob)
        offset += len(blob)
    meta = {
        "version": CKPT_VERSION,
        "view": view,
        "epoch": int(epoch),
        "alpha": pair.alpha,
        "config": cfg.to_dict(),
        "manifest": manifest,
    }
    (path / _CKPT_META).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (path / _CKPT_BLOB).write_bytes(b"".join(chunks))


def load_checkpoint(path):
    """Returns (pair, cfg, view, epoch, velocities)."""
    path = Path(path)
    meta_path = path / _CKPT_META
    if not meta_path.is_file():
        raise ValueError(f"load_checkpoint: missing {meta_path}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    if meta.get("version") != CKPT_VERSION:
        raise ValueError(f"load_checkpoint: unknown version {meta.get('version')}")
    cfg = EncoderConfig.from_dict(meta["config"])
    blob = (path / _CKPT_BLOB).read_bytes()

    groups: dict[str, dict[str, np.ndarray]] = {"query": {}, "key": {},
                                                "stats/query": {}, "stats/key": {},
                                                "opt": {}}
    for entry in meta["manifest"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise ValueError(f"load_checkpoint: {_CKPT_BLOB} has {len(blob)} bytes, "
                             f"entry {entry['name']} needs {end}")
        array = np.frombuffer(blob[start:end], dtype="<f4").astype(np.float64)
        array = array.reshape(shape)
        name = entry["name"]
        for prefix in ("stats/query/", "stats/key/", "query/", "key/", "opt/"):
            if name.startswith(prefix):
                groups[prefix.rstrip("/")][name[len(prefix):]] = array
                break
        else:
            raise ValueError(f"load_checkpoint: unknown manifest entry {name!r}")

    query = EncoderParams({n: Tensor(a, requires_grad=True)
                           for n, a in groups["query"].items()},
                          dict(groups["stats/query"]))
    key = EncoderParams({n: Tensor(a, requires_grad=False)
                         for n, a in groups["key"].items()},
                        dict(groups["stats/key"]))
    pair = MomentumEncoderPair(query, key, float(meta["alpha"]))
    velocities = dict(groups["opt"]) or None
    return pair, cfg, meta["view"], int(meta["epoch"]), velocities
