"""Attention maps from fused feature maps and the drop masks built on them."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, upsample_nearest


@dataclass
class DropMask:
    values: np.ndarray
    kind: str = "hard"

    @property
    def dropped(self):
        return int(np.count_nonzero(self.values < 1))


def _arr(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def channel_pool(f):
    """Mean over the channel axis: (c, h, w) -> (h, w), or (N, c, h, w) -> (N, h, w)."""
    f = _arr(f)
    if f.ndim not in (3, 4) or f.shape[-3] < 1:
        raise ValueError(f"channel_pool expects (c, h, w) or (N, c, h, w), got {f.shape}")
    return f.mean(axis=-3)


def fuse(f_first, f_last):
    """Attention map of the stem map modulated by the upsampled last map.

    Both maps are channel-pooled (the last one after nearest upsampling to the
    stem resolution) and multiplied cellwise. Works per sample or batched.
    """
    f_first, f_last = _arr(f_first), _arr(f_last)
    h, w = f_first.shape[-2:]
    if f_last.shape[-2] > h or f_last.shape[-1] > w:
        raise ValueError(f"last map {f_last.shape[-2:]} is spatially larger than first map {(h, w)}")
    up = upsample_nearest(Tensor(f_last), (h, w)).data
    return channel_pool(f_first) * channel_pool(up)


def last_only_attention(f_last, size):
    """Attention from the last map alone (the no-fusion ablation)."""
    f_last = _arr(f_last)
    return channel_pool(upsample_nearest(Tensor(f_last), size).data)


def round_half_up(x):
    return int(math.floor(x + 0.5))


def stabilize(kappa, gamma, h, w):
    """Split the constant drop budget into top-attention and random cell counts.

    Returns ``(n_kappa, n_rand)`` with ``n_kappa + n_rand = round(gamma% of h*w)``.
    """
    if gamma < 0 or gamma > 100:
        raise ValueError(f"gamma must lie in [0, 100], got {gamma}")
    if kappa < 0:
        raise ValueError(f"kappa must be non-negative, got {kappa}")
    if kappa > gamma:
        raise ValueError(f"kappa {kappa} exceeds total drop ratio gamma {gamma}")
    cells = h * w
    n_gamma = round_half_up(gamma * cells / 100.0)
    n_kappa = min(max(round_half_up(kappa * cells / 100.0), 0), n_gamma)
    return n_kappa, n_gamma - n_kappa


def top_order(attention):
    """Flat cell indices sorted by descending attention, ties to the smaller index."""
    a = np.asarray(attention).reshape(-1)
    return np.argsort(-a, kind="stable")


def hard_mask(attention, n_kappa, n_rand, rng):
    """Zero the ``n_kappa`` highest-attention cells plus ``n_rand`` random others."""
    a = np.asarray(attention)
    size = a.size
    if n_kappa < 0 or n_rand < 0 or n_kappa + n_rand > size:
        raise ValueError(f"cannot drop {n_kappa} + {n_rand} cells of {size}")
    order = top_order(a)
    m = np.ones(size, dtype=np.float32)
    m[order[:n_kappa]] = 0
    if n_rand:
        rest = np.sort(order[n_kappa:])
        m[rng.choice(rest, size=n_rand, replace=False)] = 0
    return DropMask(m.reshape(a.shape), "hard")


def soft_mask(attention, n_kappa, n_rand=0, rng=None):
    """Rank-linear mask: the r-th highest cell (1-based) of the top set gets r / n_kappa.

    ``n_rand`` additional random cells, if requested, are zeroed as in
    :func:`hard_mask` so the total number of attenuated cells stays constant.
    """
    a = np.asarray(attention)
    size = a.size
    if n_kappa < 0 or n_kappa + n_rand > size:
        raise ValueError(f"cannot attenuate {n_kappa} + {n_rand} cells of {size}")
    order = top_order(a)
    m = np.ones(size, dtype=np.float32)
    if n_kappa:
        m[order[:n_kappa]] = np.arange(1, n_kappa + 1, dtype=np.float32) / np.float32(n_kappa)
    if n_rand:
        rest = np.sort(order[n_kappa:])
        m[rng.choice(rest, size=n_rand, replace=False)] = 0
    return DropMask(m.reshape(a.shape), "soft")


def random_mask(shape, n_drop, rng):
    """Zero ``n_drop`` uniformly chosen cells, ignoring attention."""
    size = int(np.prod(shape))
    m = np.ones(size, dtype=np.float32)
    m[rng.choice(size, size=n_drop, replace=False)] = 0
    return DropMask(m.reshape(shape), "hard")


# ---------------------------------------------------------------- export

def to_pgm(values, path):
    """Write a 2-D map as an 8-bit binary PGM, min-max normalised."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM export needs a 2-D map, got shape {v.shape}")
    lo, hi = v.min(), v.max()
    scaled = np.zeros_like(v) if hi == lo else (v - lo) / (hi - lo)
    pix = np.round(scaled * 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{v.shape[1]} {v.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def to_csv(values, path):
    v = np.asarray(values)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in v:
            writer.writerow([repr(float(x)) for x in row])
