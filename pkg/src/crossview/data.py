"""Skeleton sequences, tree graphs, data views, a synthetic benchmark, and dataset io.

A sequence is a dense (3, T, V) array of joint coordinates. Three "views"
derive from it: the raw joint coordinates, frame-to-frame motion
displacements, and parent-relative bone vectors. The synthetic generator
builds a labeled benchmark whose classes are (pose, motion-pattern) pairs;
its trajectories are additive to the placed pose so that samples sharing a
motion pattern are exact duplicates in the motion view.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

NUM_CHANNELS = 3

# Generated coordinates snap to this grid and stay below 8 in magnitude, so
# pose + trajectory sums are exact in float32 and motion views subtract the
# pose away with no rounding residue.
_GRID = 2.0 ** -12

FORMAT_VERSION = 1
_META_NAME = "meta.json"
_DATA_NAME = "data.f32"
_LABELS_NAME = "labels.u32"


class ViewKind(str, Enum):
    JOINT = "joint"
    MOTION = "motion"
    BONE = "bone"

    @classmethod
    def parse(cls, name: str) -> "ViewKind":
        try:
            return cls(name.strip().lower())
        except ValueError:
            raise ValueError(f"unknown view {name!r}; expected one of "
                             f"{[v.value for v in cls]}") from None


class SkeletonGraph:
    """A spanning tree over joints plus its normalized adjacency.

    ``edges`` are (child, parent) pairs rooted at ``root``. The adjacency is
    (A + I) / d_max: symmetric, self-looped, and every row sums to
    degree/d_max in (0, 1].
    """

    def __init__(self, joint_count: int, edges, root: int = 0):
        edges = tuple((int(c), int(p)) for c, p in edges)
        if joint_count < 2:
            raise ValueError(f"graph: need at least 2 joints, got {joint_count}")
        if len(edges) != joint_count - 1:
            raise ValueError(f"graph: a tree over {joint_count} joints needs "
                             f"{joint_count - 1} edges, got {len(edges)}")
        if not 0 <= root < joint_count:
            raise ValueError(f"graph: root {root} out of range")
        parents = np.full(joint_count, -1, dtype=np.int64)
        for child, parent in edges:
            if not (0 <= child < joint_count and 0 <= parent < joint_count):
                raise ValueError(f"graph: edge ({child}, {parent}) out of range")
            if child == root:
                raise ValueError(f"graph: root {root} listed as a child")
            if parents[child] != -1:
                raise ValueError(f"graph: joint {child} has two parents")
            parents[child] = parent
        parents[root] = root
        if np.any(parents == -1):
            raise ValueError("graph: some joints have no parent edge")
        for j in range(joint_count):
            seen, node = set(), j
            while node != root:
                if node in seen:
                    raise ValueError(f"graph: cycle involving joint {node}")
                seen.add(node)
                node = int(parents[node])

        self.joint_count = int(joint_count)
        self.edges = edges
        self.root = int(root)
        self.parents = parents
        self.adjacency = self._normalized_adjacency()

    def _normalized_adjacency(self) -> np.ndarray:
        v = self.joint_count
        a = np.eye(v, dtype=np.float64)
        for child, parent in self.edges:
            a[child, parent] = 1.0
            a[parent, child] = 1.0
        return a / a.sum(axis=1).max()

    def __eq__(self, other):
        return (isinstance(other, SkeletonGraph)
                and self.joint_count == other.joint_count
                and self.edges == other.edges
                and self.root == other.root)

    def __repr__(self):
        return f"SkeletonGraph(joints={self.joint_count}, root={self.root})"


def heap_tree(joint_count: int) -> SkeletonGraph:
    """Default synthetic skeleton: joint i hangs off joint (i - 1) // 2."""
    edges = [(i, (i - 1) // 2) for i in range(1, joint_count)]
    return SkeletonGraph(joint_count, edges, root=0)


@dataclass
class SkeletonSequence:
    data: np.ndarray  # (3, T, V) float64
    label: int | None = None

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3 or self.data.shape[0] != NUM_CHANNELS:
            raise ValueError(f"sequence: expected (3, T, V) data, got {self.data.shape}")
        if self.data.shape[1] < 2 or self.data.shape[2] < 2:
            raise ValueError(f"sequence: need T >= 2 and V >= 2, got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("sequence: non-finite coordinates")

    @property
    def frames(self) -> int:
        return self.data.shape[1]

    @property
    def joints(self) -> int:
        return self.data.shape[2]


def _as_array(x) -> tuple[np.ndarray, int | None]:
    if isinstance(x, SkeletonSequence):
        return x.data, x.label
    return np.asarray(x, dtype=np.float64), None


def _wrap_like(template, data, label):
    if isinstance(template, SkeletonSequence):
        return SkeletonSequence(data, label)
    return data


def resample(seq: SkeletonSequence, target_len: int) -> SkeletonSequence:
    """Drop all-zero frames, then linearly interpolate to ``target_len``.

    A frame is invalid iff every joint is exactly the zero vector.
    """
    if target_len < 2:
        raise ValueError(f"resample: target length {target_len} < 2")
    data, label = _as_array(seq)
    valid = ~np.all(data == 0.0, axis=(0, 2))
    if not valid.any():
        raise ValueError(f"resample: no valid frames (label={label})")
    kept = data[:, valid, :]
    t_valid = kept.shape[1]
    positions = np.linspace(0.0, t_valid - 1.0, target_len)
    base = np.arange(t_valid, dtype=np.float64)
    out = np.empty((NUM_CHANNELS, target_len, kept.shape[2]), dtype=np.float64)
    for c in range(NUM_CHANNELS):
        for v in range(kept.shape[2]):
            out[c, :, v] = np.interp(positions, base, kept[c, :, v])
    return _wrap_like(seq, out, label)


def motion_view(seq):
    """Frame-to-frame displacement; the last frame is zero so shape is kept."""
    data, label = _as_array(seq)
    if data.shape[-2] < 2:
        raise ValueError(f"motion_view: need at least 2 frames, got {data.shape[-2]}")
    out = np.zeros_like(data)
    out[..., :-1, :] = data[..., 1:, :] - data[..., :-1, :]
    return _wrap_like(seq, out, label)


def bone_view(seq, graph: SkeletonGraph):
    """Joint minus its parent; the root bone is zero so shape is kept."""
    data, label = _as_array(seq)
    if data.shape[-1] != graph.joint_count:
        raise ValueError(f"bone_view: sequence has {data.shape[-1]} joints, "
                         f"graph has {graph.joint_count}")
    out = data - data[..., graph.parents]
    return _wrap_like(seq, out, label)


def make_view(seq, graph: SkeletonGraph, kind: ViewKind):
    kind = ViewKind.parse(kind) if not isinstance(kind, ViewKind) else kind
    if kind is ViewKind.JOINT:
        data, label = _as_array(seq)
        return _wrap_like(seq, data.copy(), label)
    if kind is ViewKind.MOTION:
        return motion_view(seq)
    return bone_view(seq, graph)


@dataclass
class LabeledDataset:
    """Fixed-shape sample collection; float32 in memory to match the disk format."""

    data: np.ndarray  # (N, 3, T, V) float32
    labels: np.ndarray  # (N,) int64
    graph: SkeletonGraph
    class_count: int
    split: str = "train"

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.data.ndim != 4 or self.data.shape[1] != NUM_CHANNELS:
            raise ValueError(f"dataset: expected (N, 3, T, V) data, got {self.data.shape}")
        if self.data.shape[3] != self.graph.joint_count:
            raise ValueError("dataset: joint count does not match its graph")
        if self.labels.shape != (self.data.shape[0],):
            raise ValueError("dataset: labels do not match sample count")
        if self.class_count < 1:
            raise ValueError(f"dataset: class_count {self.class_count} < 1")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValueError("dataset: label outside [0, class_count)")
        if not np.isfinite(self.data).all():
            raise ValueError("dataset: non-finite coordinates")

    def __len__(self):
        return self.data.shape[0]

    def __getitem__(self, index: int) -> SkeletonSequence:
        return SkeletonSequence(np.asarray(self.data[index], dtype=np.float64),
                                int(self.labels[index]))

    @property
    def frames(self) -> int:
        return self.data.shape[2]


# ---------------------------------------------------------------------------
# synthetic benchmark
# ---------------------------------------------------------------------------

def _quantize(a: np.ndarray) -> np.ndarray:
    return np.round(a / _GRID) * _GRID


def _pose_prototypes(count: int, joints: int, seed: int) -> np.ndarray:
    """One (3, V) rest pose per class, grown along the default tree."""
    rng = np.random.default_rng([seed, 101])
    parents = heap_tree(joints).parents
    protos = np.zeros((count, 3, joints), dtype=np.float64)
    for g in range(count):
        pose = np.zeros((3, joints), dtype=np.float64)
        for j in range(1, joints):
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            length = rng.uniform(0.35, 0.75)
            pose[:, j] = pose[:, parents[j]] + direction * length
        pose -= pose.mean(axis=1, keepdims=True)
        protos[g] = _quantize(pose)
    return protos


@dataclass
class _MotionPattern:
    """Two phase-locked oscillation harmonics with per-joint phase profiles.

    Patterns of one dataset share a base direction and sit at neighboring
    frequencies, so they are easy to confuse from raw coordinates (where
    placement, pose, and augmentation distort them) yet cleanly separable
    in the pose-free motion view.
    """

    direction: np.ndarray
    direction2: np.ndarray
    amplitude: float
    cycles: float
    joint_phase: np.ndarray
    joint_phase2: np.ndarray


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def _motion_patterns(count: int, joints: int, seed: int) -> list[_MotionPattern]:
    shared = np.random.default_rng([seed, 201])
    base_dir = _unit(shared.normal(size=3))
    patterns = []
    for m in range(count):
        rng = np.random.default_rng([seed, 202, m])
        direction = _unit(base_dir + 0.25 * rng.normal(size=3))
        direction2 = _unit(rng.normal(size=3))
        amplitude = rng.uniform(0.38, 0.5)
        cycles = 1.4 + 0.45 * m + rng.uniform(-0.05, 0.05)
        joint_phase = rng.uniform(0.0, 2.0 * np.pi, size=joints)
        joint_phase2 = rng.uniform(0.0, 2.0 * np.pi, size=joints)
        patterns.append(_MotionPattern(direction, direction2, amplitude, cycles,
                                       joint_phase, joint_phase2))
    return patterns


def _displacements(pattern: _MotionPattern, frames: int, joints: int,
                   phase: float) -> np.ndarray:
    """Per-frame whole-body displacement field (3, T, V), zero at frame 0."""
    t = np.arange(frames, dtype=np.float64) / (frames - 1)
    theta = 2.0 * np.pi * pattern.cycles * t[:, None] + phase
    first = np.sin(theta + pattern.joint_phase[None, :])
    first -= np.sin(phase + pattern.joint_phase)[None, :]
    second = np.sin(2.0 * theta + pattern.joint_phase2[None, :])
    second -= np.sin(2.0 * phase + pattern.joint_phase2)[None, :]
    d = (pattern.direction[:, None, None] * pattern.amplitude * first[None, :, :]
         + pattern.direction2[:, None, None] * (0.35 * pattern.amplitude)
         * second[None, :, :])
    return _quantize(d)


def _render_sample(proto: np.ndarray, pattern: _MotionPattern, rng,
                   frames: int, noise_std: float) -> np.ndarray:
    """One sequence: rigidly placed pose + additive trajectory + noise."""
    joints = proto.shape[1]
    angle = rng.uniform(-0.35, 0.35)
    translation = rng.uniform(-1.2, 1.2, size=3)
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    placed = _quantize(rot @ proto + translation[:, None])
    phase = rng.uniform(0.0, 2.0 * np.pi)
    moved = placed[:, None, :] + _displacements(pattern, frames, joints, phase)
    if noise_std > 0:
        moved = moved + rng.normal(0.0, noise_std, size=moved.shape)
    return moved.astype(np.float32)


def synth_dataset(poses: int, motions: int, per_class: int, joints: int = 8,
                  frames: int = 50, noise_std: float = 0.02, seed: int = 0,
                  test_per_class: int | None = None
                  ) -> tuple[LabeledDataset, LabeledDataset]:
    """Build train/test splits with class id = pose_id * motions + motion_id.

    Each sample is a rigid random placement of its pose prototype animated
    by its motion pattern plus i.i.d. Gaussian noise. Deterministic in
    ``seed``; train and test draw disjoint per-sample streams.
    """
    if poses < 1 or motions < 1 or poses * motions < 2:
        raise ValueError(f"synth_dataset: need at least 2 classes, got {poses}x{motions}")
    if per_class < 2:
        raise ValueError(f"synth_dataset: per_class {per_class} < 2")
    if noise_std < 0:
        raise ValueError(f"synth_dataset: negative noise_std {noise_std}")
    if joints < 2 or frames < 2:
        raise ValueError(f"synth_dataset: degenerate shape V={joints}, T={frames}")
    if test_per_class is None:
        test_per_class = max(per_class // 2, 1)

    graph = heap_tree(joints)
    protos = _pose_prototypes(poses, joints, seed)
    patterns = _motion_patterns(motions, joints, seed)
    class_count = poses * motions

    splits = []
    for split_id, (split, count) in enumerate((("train", per_class),
                                               ("test", test_per_class))):
        data = np.empty((class_count * count, NUM_CHANNELS, frames, joints),
                        dtype=np.float32)
        labels = np.empty(class_count * count, dtype=np.int64)
        row = 0
        for cls in range(class_count):
            pose_id, motion_id = divmod(cls, motions)
            for i in range(count):
                rng = np.random.default_rng([seed, split_id, cls, i])
                data[row] = _render_sample(protos[pose_id], patterns[motion_id],
                                           rng, frames, noise_std)
                labels[row] = cls
                row += 1
        splits.append(LabeledDataset(data, labels, graph, class_count, split))
    return splits[0], splits[1]


# ---------------------------------------------------------------------------
# on-disk format: meta.json + data.f32 + labels.u32
# ---------------------------------------------------------------------------

def save_dataset(ds: LabeledDataset, path) -> None:
    """Write meta.json, raw little-endian float32 data, and uint32 labels."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    meta = {
        "version": FORMAT_VERSION,
        "C": NUM_CHANNELS,
        "T": int(ds.data.shape[2]),
        "V": int(ds.data.shape[3]),
        "class_count": int(ds.class_count),
        "samples": len(ds),
        "edges": [[int(c), int(p)] for c, p in ds.graph.edges],
        "root": ds.graph.root,
        "split": ds.split,
    }
    (path / _META_NAME).write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")
    (path / _DATA_NAME).write_bytes(
        np.ascontiguousarray(ds.data, dtype="<f4").tobytes())
    (path / _LABELS_NAME).write_bytes(
        np.ascontiguousarray(ds.labels, dtype="<u4").tobytes())


def load_dataset(path) -> LabeledDataset:
    path = Path(path)
    meta_path = path / _META_NAME
    if not meta_path.is_file():
        raise ValueError(f"load_dataset: missing {meta_path}")
    try:
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as err:
        raise ValueError(f"load_dataset: malformed header {meta_path}: {err}") from None
    for key in ("version", "C", "T", "V", "class_count", "samples", "edges", "root"):
        if key not in meta:
            raise ValueError(f"load_dataset: header missing field {key!r}")
    if meta["version"] != FORMAT_VERSION:
        raise ValueError(f"load_dataset: unknown version {meta['version']}")
    if meta["C"] != NUM_CHANNELS:
        raise ValueError(f"load_dataset: expected C={NUM_CHANNELS}, got {meta['C']}")
    if meta["class_count"] < 1:
        raise ValueError(f"load_dataset: class_count {meta['class_count']} < 1")

    n, t, v = int(meta["samples"]), int(meta["T"]), int(meta["V"])
    blob = (path / _DATA_NAME).read_bytes()
    expected = n * NUM_CHANNELS * t * v * 4
    if len(blob) != expected:
        raise ValueError(f"load_dataset: {_DATA_NAME} has {len(blob)} bytes, "
                         f"expected {expected}")
    data = np.frombuffer(blob, dtype="<f4").reshape(n, NUM_CHANNELS, t, v)

    lab_blob = (path / _LABELS_NAME).read_bytes()
    if len(lab_blob) != n * 4:
        raise ValueError(f"load_dataset: {_LABELS_NAME} has {len(lab_blob)} bytes, "
                         f"expected {n * 4}")
    labels = np.frombuffer(lab_blob, dtype="<u4").astype(np.int64)

    graph = SkeletonGraph(v, [(c, p) for c, p in meta["edges"]], int(meta["root"]))
    return LabeledDataset(data.copy(), labels, graph, int(meta["class_count"]),
                          str(meta.get("split", "train")))
