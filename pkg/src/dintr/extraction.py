"""From captured attention maps to per-target saliency and output indicators.

Self-attention is averaged into an ``(n, n)`` row-stochastic matrix and
cross-attention into ``(n, m)``; each target's cross columns are pushed
through a power of the self map, normalised to [0, 1], upsampled to pixels
and read out as a point, box or mask.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .conditioning import Box, Point, Segment, split_attention
from .denoiser import AttentionRecord
from .numerics import ContractError


class LostTargetError(RuntimeError):
    """Saliency carries no signal; the tracker keeps the previous indicator."""


@dataclass
class AccumulatedAttention:
    self_map: np.ndarray  # (n, n)
    cross_map: np.ndarray  # (n, m [+1 sink])
    sink: bool
    steps: tuple[int, ...]
    count: int

    @property
    def condition_columns(self) -> np.ndarray:
        return self.cross_map[:, :-1] if self.sink else self.cross_map

    def per_target(self, ranges) -> list[np.ndarray]:
        return split_attention(self.condition_columns, ranges)


def window_steps(T: int, window_fraction: float = 0.8) -> range:
    """Steps 0 .. ceil(fraction * T) - 1, counted from the clean end."""
    if not 0 < window_fraction <= 1:
        raise ValueError(f"window fraction must be in (0, 1], got {window_fraction}")
    # round first so that 0.8 * 50 does not become 40.000000000000001
    return range(math.ceil(round(window_fraction * T, 9)))


def accumulate(records: list[AttentionRecord], N: int, T: int,
               window_fraction: float = 0.8) -> AccumulatedAttention:
    """Average self and cross maps over N layers and the step window."""
    steps = window_steps(T, window_fraction)
    chosen = [r for r in records if r.step in steps]
    if not chosen:
        raise ContractError(f"no attention records inside steps [0, {len(steps)})")
    seen = {(r.layer, r.step) for r in chosen}
    missing = [(l, k) for k in steps for l in range(N) if (l, k) not in seen]
    if missing:
        raise ContractError(f"records miss {len(missing)} (layer, step) slots, first {missing[0]}")
    S = np.zeros_like(chosen[0].self_map)
    X = np.zeros_like(chosen[0].cross_map)
    for r in chosen:
        if r.self_map.shape != S.shape or r.cross_map.shape != X.shape:
            raise ContractError("attention maps change shape across records")
        S += r.self_map
        X += r.cross_map
    c = len(chosen)
    return AccumulatedAttention(S / c, X / c, chosen[0].sink, tuple(steps), c)


# fusion --------------------------------------------------------------------------

@dataclass
class FusedSaliency:
    map: np.ndarray  # (H, W) in [0, 1]
    grid: np.ndarray  # (h, w) normalised map before upsampling
    peak: float  # max of the raw fused map before normalisation
    flat: bool = False  # raw map constant: no localisation signal


FLAT_RTOL = 1e-12


def is_flat(v: np.ndarray) -> bool:
    """Constant up to round-off relative to its magnitude."""
    lo, hi = float(v.min()), float(v.max())
    return hi - lo <= FLAT_RTOL * max(abs(hi), abs(lo))


def minmax(v: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; a constant nonzero map becomes all ones, zero stays zero."""
    lo, hi = float(v.min()), float(v.max())
    if not is_flat(v):
        return (v - lo) / (hi - lo)
    return np.ones_like(v) if hi > 0 else np.zeros_like(v)


def upsample_bilinear(grid: np.ndarray, factor: int) -> np.ndarray:
    """Half-pixel-centred bilinear upsampling with clamped edges."""
    h, w = grid.shape

    def axis(n):
        c = (np.arange(n * factor) + 0.5) / factor - 0.5
        i0 = np.clip(np.floor(c).astype(int), 0, n - 1)
        i1 = np.minimum(i0 + 1, n - 1)
        f = np.clip(c - i0, 0.0, 1.0)
        return i0, i1, f

    y0, y1, fy = axis(h)
    x0, x1, fx = axis(w)
    top = grid[y0][:, x0] * (1 - fx) + grid[y0][:, x1] * fx
    bot = grid[y1][:, x0] * (1 - fx) + grid[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def fuse(self_map: np.ndarray, cross_vec: np.ndarray, grid: tuple[int, int], patch: int = 1,
         mode: str = "propagate", beta: int = 4) -> FusedSaliency:
    """Combine the averaged self map with one target's cross-attention vector."""
    h, w = grid
    n = h * w
    cross_vec = np.asarray(cross_vec, dtype=np.float64).reshape(-1)
    if self_map.shape != (n, n) or cross_vec.shape != (n,):
        raise ContractError(f"self map {self_map.shape} / cross {cross_vec.shape} vs grid {grid}")
    if int(beta) != beta or beta < 1:
        raise ValueError(f"beta must be a positive integer, got {beta}")
    if mode == "propagate":
        raw = np.linalg.matrix_power(self_map, int(beta)) @ cross_vec
    elif mode == "elementwise":
        raw = self_map.mean(axis=0) ** int(beta) * cross_vec
    else:
        raise ValueError(f"unknown fusion mode {mode!r}")
    if not np.all(np.isfinite(raw)):
        raise LostTargetError("fused saliency is not finite")
    g = minmax(raw).reshape(h, w)
    up = minmax(upsample_bilinear(g, patch)) if patch > 1 else g.copy()
    return FusedSaliency(up, g, float(raw.max()), is_flat(raw))


# read-out --------------------------------------------------------------------------

def _check(sal: np.ndarray) -> np.ndarray:
    sal = np.asarray(sal, dtype=np.float64)
    if sal.ndim != 2:
        raise ContractError(f"saliency must be 2-D, got {sal.shape}")
    if not np.any(sal > 0):
        raise LostTargetError("all-zero saliency")
    return sal


def to_point(sal: np.ndarray) -> Point:
    """Centre of the first maximal pixel in row-major order."""
    sal = _check(sal)
    i, j = divmod(int(np.argmax(sal)), sal.shape[1])
    return Point(j + 0.5, i + 0.5)


def to_segment(sal: np.ndarray, threshold: float = 0.5) -> Segment:
    sal = _check(sal)
    return Segment(sal > threshold * sal.max())


def mask_box(mask: np.ndarray) -> Box:
    """Tightest pixel-edge rectangle around the set pixels."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise LostTargetError("empty segment has no box")
    return Box(float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def to_box(sal: np.ndarray, threshold: float = 0.5) -> Box:
    return mask_box(to_segment(sal, threshold).mask)


def map_to_indicator(sal, kind: str, seg_threshold: float = 0.5):
    sal = sal.map if isinstance(sal, FusedSaliency) else sal
    if kind == "point":
        return to_point(sal)
    if kind == "segment":
        return to_segment(sal, seg_threshold)
    if kind == "box":
        return to_box(sal, seg_threshold)
    raise ValueError(f"unknown indicator kind {kind!r}")
