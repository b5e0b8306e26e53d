"""Indicators and the condition tokens built from them.

Tokens live in the same feature space as the denoiser's input embedding: a
latent cell is standardised per channel across the grid and projected by the
shared seeded basis.  Point and region tokens pool those features (with a
Gaussian kernel or over the rasterised region), so a token describes what
the target looks like at its current location.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np

from .codec import read_pgm, to_tokens
from .denoiser import standardize_array


class IndicatorError(ValueError):
    """Indicator outside the frame, empty or otherwise malformed."""


class VocabError(KeyError):
    pass


@dataclass(frozen=True)
class Point:
    x: float
    y: float


@dataclass(frozen=True)
class Pose:
    points: tuple[Point, ...]

    def __post_init__(self):
        if not self.points:
            raise IndicatorError("pose needs at least one point")


@dataclass(frozen=True)
class Box:
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise IndicatorError(f"degenerate box {self}")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]


@dataclass(frozen=True, eq=False)
class Segment:
    mask: np.ndarray = field(repr=False)

    def __eq__(self, other):
        return isinstance(other, Segment) and np.array_equal(self.mask, other.mask)

    __hash__ = None


@dataclass(frozen=True)
class Text:
    token_ids: tuple[int, ...]


Indicator = Union[Point, Pose, Box, Segment, Text]


def kind_of(ind: Indicator) -> str:
    return {Point: "point", Pose: "pose", Box: "box", Segment: "segment", Text: "text"}[type(ind)]


def check_bounds(ind: Indicator, height: int, width: int) -> None:
    if isinstance(ind, Point):
        if not (0 <= ind.x <= width and 0 <= ind.y <= height):
            raise IndicatorError(f"point ({ind.x}, {ind.y}) outside {width}x{height} frame")
    elif isinstance(ind, Pose):
        for p in ind.points:
            check_bounds(p, height, width)
    elif isinstance(ind, Box):
        if ind.x_min < 0 or ind.y_min < 0 or ind.x_max > width or ind.y_max > height:
            raise IndicatorError(f"box {ind.as_list()} outside {width}x{height} frame")
    elif isinstance(ind, Segment):
        if ind.mask.shape != (height, width):
            raise IndicatorError(f"mask {ind.mask.shape} does not match frame {height}x{width}")


# tokens ----------------------------------------------------------------------

def cell_features(latent: np.ndarray, basis: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """(h*w, d) projected, standardised cell features of a latent."""
    return standardize_array(to_tokens(latent), eps) @ basis


def point_heatmap(p: Point, sigma: float, grid: tuple[int, int], patch: int) -> np.ndarray:
    """Gaussian over latent cells (distances in cells), peak-normalised."""
    if sigma <= 0:
        raise IndicatorError(f"sigma must be positive, got {sigma}")
    h, w = grid
    if not (0 <= p.x <= w * patch and 0 <= p.y <= h * patch):
        raise IndicatorError(f"point ({p.x}, {p.y}) outside {w * patch}x{h * patch} frame")
    cy = (np.arange(h) + 0.5)[:, None]
    cx = (np.arange(w) + 0.5)[None, :]
    d2 = (cx - p.x / patch) ** 2 + (cy - p.y / patch) ** 2
    heat = np.exp(-d2 / (2.0 * sigma * sigma))
    return heat / heat.max()


def point_tokens(p: Point, sigma: float, latent: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """One token: cell features pooled with the Gaussian heatmap weights."""
    _, h, w = latent.shape
    patch = int(round(math.sqrt(latent.shape[0] // 3)))
    heat = point_heatmap(p, sigma, (h, w), patch).reshape(-1)
    return ((heat / heat.sum()) @ cell_features(latent, basis))[None, :]


def region_weights(ind: Union[Box, Segment], grid: tuple[int, int], patch: int) -> np.ndarray:
    """Fraction of each latent cell covered by the region, shape (h, w)."""
    h, w = grid
    if isinstance(ind, Segment):
        mask = np.asarray(ind.mask, dtype=np.float64)
        if mask.shape != (h * patch, w * patch):
            raise IndicatorError(f"mask {mask.shape} does not match {h * patch}x{w * patch}")
        return mask.reshape(h, patch, w, patch).mean(axis=(1, 3))
    edges = np.arange(w + 1) * patch
    ox = np.clip(np.minimum(edges[1:], ind.x_max) - np.maximum(edges[:-1], ind.x_min), 0, None)
    edges = np.arange(h + 1) * patch
    oy = np.clip(np.minimum(edges[1:], ind.y_max) - np.maximum(edges[:-1], ind.y_min), 0, None)
    return np.outer(oy, ox) / (patch * patch)


def region_tokens(ind: Union[Box, Segment], latent: np.ndarray, basis: np.ndarray) -> np.ndarray:
    """One token: coverage-weighted mean of cell features over the region."""
    _, h, w = latent.shape
    patch = int(round(math.sqrt(latent.shape[0] // 3)))
    wts = region_weights(ind, (h, w), patch).reshape(-1)
    if wts.sum() <= 0:
        raise IndicatorError("region covers no latent cell")
    return ((wts / wts.sum()) @ cell_features(latent, basis))[None, :]


def make_vocab(size: int, dim: int, seed: int = 11) -> np.ndarray:
    rng = np.random.default_rng([int(seed), size, dim])
    return rng.standard_normal((size, dim)) / math.sqrt(dim)


def text_tokens(t: Text, vocab: np.ndarray) -> np.ndarray:
    ids = list(t.token_ids)
    if not ids:
        raise VocabError("empty text indicator")
    for i in ids:
        if not 0 <= i < vocab.shape[0]:
            raise VocabError(f"token id {i} outside vocabulary of {vocab.shape[0]}")
    return vocab[ids].copy()


def associate(vocab: np.ndarray, token_id: int, latent: np.ndarray, mask: np.ndarray,
              basis: np.ndarray) -> np.ndarray:
    """Return a copy of ``vocab`` whose row ``token_id`` is the pooled look of ``mask``.

    One-shot stand-in for learning a word embedding from an exemplar.
    """
    out = vocab.copy()
    out[token_id] = region_tokens(Segment(np.asarray(mask, dtype=bool)), latent, basis)[0]
    return out


def indicator_tokens(ind: Indicator, latent: np.ndarray, basis: np.ndarray, *,
                     sigma: float = 1.5, vocab: np.ndarray | None = None) -> np.ndarray:
    if isinstance(ind, Point):
        return point_tokens(ind, sigma, latent, basis)
    if isinstance(ind, Pose):
        return np.concatenate([point_tokens(p, sigma, latent, basis) for p in ind.points])
    if isinstance(ind, (Box, Segment)):
        return region_tokens(ind, latent, basis)
    if isinstance(ind, Text):
        if vocab is None:
            raise VocabError("text indicator needs a vocabulary table")
        return text_tokens(ind, vocab)
    raise TypeError(f"not an indicator: {ind!r}")


# multi-target packing -------------------------------------------------------------

@dataclass
class ConditionTokens:
    tokens: np.ndarray
    ranges: list[tuple[int, int]]  # (start, length) per target, in target order

    def split(self) -> list[np.ndarray]:
        return [self.tokens[s:s + n] for s, n in self.ranges]


def pack_targets(per_target: list[np.ndarray]) -> ConditionTokens:
    if not per_target:
        raise ValueError("pack_targets needs at least one target")
    ranges, start = [], 0
    for tok in per_target:
        tok = np.atleast_2d(tok)
        ranges.append((start, tok.shape[0]))
        start += tok.shape[0]
    return ConditionTokens(np.concatenate([np.atleast_2d(t) for t in per_target]), ranges)


def check_ranges(ranges, columns: int) -> None:
    pos = 0
    for s, n in ranges:
        if s != pos or n < 1:
            raise ValueError(f"ranges {ranges} do not tile [0, {columns})")
        pos += n
    if pos != columns:
        raise ValueError(f"ranges {ranges} cover {pos} columns, map has {columns}")


def split_attention(cross_map: np.ndarray, ranges) -> list[np.ndarray]:
    """Average each target's columns into one saliency vector over cells."""
    check_ranges(ranges, cross_map.shape[1])
    return [cross_map[:, s:s + n].mean(axis=1) for s, n in ranges]


# JSON ----------------------------------------------------------------------------

def indicator_from_json(obj: dict, base_dir=None) -> Indicator:
    kind = obj.get("type")
    if kind == "point":
        return Point(float(obj["x"]), float(obj["y"]))
    if kind == "pose":
        return Pose(tuple(Point(float(x), float(y)) for x, y in obj["points"]))
    if kind == "box":
        if "box" in obj:
            return Box(*map(float, obj["box"]))
        return Box(float(obj["x_min"]), float(obj["y_min"]), float(obj["x_max"]), float(obj["y_max"]))
    if kind == "segment":
        path = Path(obj["mask"])
        if base_dir is not None and not path.is_absolute():
            path = Path(base_dir) / path
        return Segment(read_pgm(path) >= 0.5)
    if kind == "text":
        return Text(tuple(int(i) for i in obj["ids"]))
    raise IndicatorError(f"unknown indicator type {kind!r}")


def indicator_to_json(ind: Indicator) -> dict:
    if isinstance(ind, Point):
        return {"type": "point", "x": ind.x, "y": ind.y}
    if isinstance(ind, Pose):
        return {"type": "pose", "points": [[p.x, p.y] for p in ind.points]}
    if isinstance(ind, Box):
        return {"type": "box", "box": ind.as_list()}
    if isinstance(ind, Text):
        return {"type": "text", "ids": list(ind.token_ids)}
    raise IndicatorError("segments serialise through a PGM path, not inline JSON")


def load_indicators(path) -> list[Indicator]:
    """A JSON file holding one indicator object or a list of them."""
    path = Path(path)
    data = json.loads(path.read_text())
    items = data if isinstance(data, list) else [data]
    return [indicator_from_json(o, path.parent) for o in items]
