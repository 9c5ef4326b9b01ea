"""Stochastic positive-pair augmentation: spatial shear plus temporal crop.

Shear multiplies every joint coordinate by a random unit-diagonal 3x3
matrix, one matrix per sequence. Crop reflect-pads the time axis by
floor(T / gamma) frames on each side and slices a random window of the
original length. A positive pair is two independent draws of
crop(shear(x)) from the same source.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import SkeletonSequence


@dataclass
class AugmentConfig:
    shear_beta: float = 0.5
    crop_gamma: int = 6

    def __post_init__(self):
        if self.shear_beta < 0:
            raise ValueError(f"augment: shear amplitude {self.shear_beta} < 0")
        if int(self.crop_gamma) != self.crop_gamma or self.crop_gamma < 0:
            raise ValueError(f"augment: padding ratio {self.crop_gamma} must be a "
                             "non-negative integer")
        self.crop_gamma = int(self.crop_gamma)


def _unwrap(x):
    if isinstance(x, SkeletonSequence):
        return x.data, x.label, True
    return np.asarray(x, dtype=np.float64), None, False


def _rewrap(data, label, wrapped):
    return SkeletonSequence(data, label) if wrapped else data


def shear_factors(beta: float, rng, count: int = 1) -> np.ndarray:
    """Draw (count, 6) off-diagonal factors uniformly from [-beta, beta]."""
    if beta < 0:
        raise ValueError(f"shear: amplitude {beta} < 0")
    return rng.uniform(-beta, beta, size=(count, 6))


def shear_matrix(factors) -> np.ndarray:
    """Unit-diagonal matrices from per-sample factor rows (a12 a13 a21 a23 a31 a32)."""
    factors = np.atleast_2d(np.asarray(factors, dtype=np.float64))
    n = factors.shape[0]
    mats = np.tile(np.eye(3), (n, 1, 1))
    mats[:, 0, 1] = factors[:, 0]
    mats[:, 0, 2] = factors[:, 1]
    mats[:, 1, 0] = factors[:, 2]
    mats[:, 1, 2] = factors[:, 3]
    mats[:, 2, 0] = factors[:, 4]
    mats[:, 2, 1] = factors[:, 5]
    return mats


def shear(x, beta: float, rng):
    """Apply one random shear matrix to a whole (3, T, V) sequence."""
    data, label, wrapped = _unwrap(x)
    mat = shear_matrix(shear_factors(beta, rng))[0]
    out = np.einsum("ij,jtv->itv", mat, data)
    return _rewrap(out, label, wrapped)


def crop(x, gamma: int, rng):
    """Reflect-pad floor(T / gamma) frames per side, slice a random window."""
    data, label, wrapped = _unwrap(x)
    if gamma < 0 or int(gamma) != gamma:
        raise ValueError(f"crop: padding ratio {gamma} must be a non-negative integer")
    if gamma == 0:
        return _rewrap(data.copy(), label, wrapped)
    t = data.shape[-2]
    pad = t // int(gamma)
    if pad >= t:
        raise ValueError(f"crop: pad {pad} >= length {t}; reflection undefined")
    padded = np.pad(data, [(0, 0)] * (data.ndim - 2) + [(pad, pad), (0, 0)],
                    mode="reflect")
    start = int(rng.integers(0, 2 * pad + 1))
    out = padded[..., start:start + t, :].copy()
    return _rewrap(out, label, wrapped)


def augment_pair(x, cfg: AugmentConfig, rng, rng_second=None):
    """Two independent crop(shear(x)) draws of the same source sequence.

    By default both branches consume ``rng`` in turn; passing
    ``rng_second`` gives the second branch its own stream.
    """
    first = crop(shear(x, cfg.shear_beta, rng), cfg.crop_gamma, rng)
    other = rng if rng_second is None else rng_second
    second = crop(shear(x, cfg.shear_beta, other), cfg.crop_gamma, other)
    return first, second


# ---------------------------------------------------------------------------
# batched variants used by the training loop (per-sample draws, one call)
# ---------------------------------------------------------------------------

def shear_batch(batch: np.ndarray, beta: float, rng) -> np.ndarray:
    mats = shear_matrix(shear_factors(beta, rng, count=batch.shape[0]))
    return np.einsum("bij,bjtv->bitv", mats, batch)


def crop_batch(batch: np.ndarray, gamma: int, rng) -> np.ndarray:
    if gamma == 0:
        return batch.copy()
    t = batch.shape[-2]
    pad = t // int(gamma)
    if pad >= t:
        raise ValueError(f"crop: pad {pad} >= length {t}; reflection undefined")
    padded = np.pad(batch, [(0, 0), (0, 0), (pad, pad), (0, 0)], mode="reflect")
    starts = rng.integers(0, 2 * pad + 1, size=batch.shape[0])
    index = (starts[:, None] + np.arange(t))[:, None, :, None]
    return np.take_along_axis(padded, index, axis=2)


def augment_batch(batch: np.ndarray, cfg: AugmentConfig, rng) -> np.ndarray:
    """One crop(shear(.)) draw per sample of a (B, 3, T, V) batch."""
    return crop_batch(shear_batch(batch, cfg.shear_beta, rng), cfg.crop_gamma, rng)


def augment_pair_batch(batch: np.ndarray, cfg: AugmentConfig, rng):
    return augment_batch(batch, cfg, rng), augment_batch(batch, cfg, rng)
