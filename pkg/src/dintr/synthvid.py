"""Deterministic moving-shape clips with exact ground truth.

Positions follow ``start + v * t (+ amp * sin(2 pi t / period))`` and are
evaluated with exact rationals for the linear part.  Frames are rendered by
4x4 supersampling; the ground-truth mask of an object is its visible
coverage >= 0.5, the box is the mask's tight rectangle.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from .codec import rle_encode, write_ppm

SUPERSAMPLE = 4


class SpecError(ValueError):
    pass


@dataclass
class ObjectSpec:
    shape: str = "disc"  # disc | square
    size: float = 6.0  # radius for discs, side length for squares
    color: tuple[float, float, float] = (0.9, 0.3, 0.2)
    start: tuple[float, float] = (16.0, 20.0)
    velocity: tuple[float, float] = (1.0, 0.5)
    sin_amp: tuple[float, float] = (0.0, 0.0)
    sin_period: float = 0.0

    def extent(self) -> float:
        return self.size if self.shape == "disc" else self.size / 2.0

    def center(self, t: int) -> tuple[float, float]:
        out = []
        for s, v, a in zip(self.start, self.velocity, self.sin_amp):
            c = float(Fraction(str(s)) + Fraction(str(v)) * t)
            if a and self.sin_period:
                c += a * math.sin(2.0 * math.pi * t / self.sin_period)
            out.append(c)
        return out[0], out[1]


@dataclass
class Occluder:
    box: tuple[float, float, float, float]  # x0, y0, x1, y1
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)


@dataclass
class Background:
    kind: str = "constant"  # constant | gradient | noise
    color: tuple[float, float, float] = (0.15, 0.15, 0.2)
    color2: tuple[float, float, float] = (0.3, 0.3, 0.35)
    amplitude: float = 0.05
    seed: int = 0


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    frames: int = 32
    objects: list[ObjectSpec] = field(default_factory=lambda: [ObjectSpec()])
    background: Background = field(default_factory=Background)
    occluder: Occluder | None = None

    def validate(self) -> None:
        if self.width < 4 or self.height < 4 or self.frames < 1:
            raise SpecError(f"bad frame geometry {self.width}x{self.height}x{self.frames}")
        if not self.objects:
            raise SpecError("scene has no objects")
        for i, o in enumerate(self.objects):
            if o.shape not in ("disc", "square") or o.size <= 0:
                raise SpecError(f"object {i}: bad shape {o.shape!r} / size {o.size}")
            r = o.extent()
            for t in range(self.frames):
                cx, cy = o.center(t)
                if cx - r < 1 or cy - r < 1 or cx + r > self.width - 1 or cy + r > self.height - 1:
                    raise SpecError(f"object {i} leaves the 1 px margin at frame {t} (centre {cx}, {cy})")
        if self.background.kind not in ("constant", "gradient", "noise"):
            raise SpecError(f"unknown background {self.background.kind!r}")


def default_scene() -> SceneSpec:
    return SceneSpec()


def two_disc_scene() -> SceneSpec:
    return SceneSpec(objects=[
        ObjectSpec(start=(12.0, 14.0), velocity=(1.0, 0.25)),
        ObjectSpec(color=(0.2, 0.7, 0.9), start=(50.0, 48.0), velocity=(-1.0, 0.25)),
    ])


def scene_from_json(obj: dict) -> SceneSpec:
    known = {"width", "height", "frames", "objects", "background", "occluder"}
    extra = set(obj) - known
    if extra:
        raise SpecError(f"unknown scene keys {sorted(extra)}")
    try:
        objects = [ObjectSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in o.items()})
                   for o in obj.get("objects", [asdict(ObjectSpec())])]
        bg = Background(**{k: tuple(v) if isinstance(v, list) else v
                           for k, v in obj.get("background", {}).items()})
        occ = obj.get("occluder")
        occ = Occluder(tuple(occ["box"]), tuple(occ.get("color", (0.5, 0.5, 0.5)))) if occ else None
    except TypeError as e:
        raise SpecError(str(e)) from None
    spec = SceneSpec(obj.get("width", 64), obj.get("height", 64), obj.get("frames", 32),
                     objects, bg, occ)
    spec.validate()
    return spec


def scene_to_json(spec: SceneSpec) -> dict:
    return asdict(spec)


# rendering ---------------------------------------------------------------------

def _samples(n: int) -> np.ndarray:
    return (np.arange(n * SUPERSAMPLE) + 0.5) / SUPERSAMPLE


def shape_coverage(o: ObjectSpec, t: int, height: int, width: int) -> np.ndarray:
    """Fraction of each pixel inside the object at frame t."""
    cx, cy = o.center(t)
    ys, xs = _samples(height)[:, None], _samples(width)[None, :]
    if o.shape == "disc":
        inside = (xs - cx) ** 2 + (ys - cy) ** 2 <= o.size * o.size
    else:
        half = o.size / 2.0
        inside = (np.abs(xs - cx) <= half) & (np.abs(ys - cy) <= half)
    return inside.reshape(height, SUPERSAMPLE, width, SUPERSAMPLE).mean(axis=(1, 3))


def _box_coverage(box, height: int, width: int) -> np.ndarray:
    x0, y0, x1, y1 = box
    ys, xs = _samples(height)[:, None], _samples(width)[None, :]
    inside = (xs >= x0) & (xs < x1) & (ys >= y0) & (ys < y1)
    return inside.reshape(height, SUPERSAMPLE, width, SUPERSAMPLE).mean(axis=(1, 3))


def background(spec: SceneSpec) -> np.ndarray:
    bg, H, W = spec.background, spec.height, spec.width
    base = np.ones((H, W, 1)) * np.asarray(bg.color)[None, None, :]
    if bg.kind == "gradient":
        ramp = (np.arange(W) / max(W - 1, 1))[None, :, None]
        base = base * (1 - ramp) + np.asarray(bg.color2)[None, None, :] * ramp
    elif bg.kind == "noise":
        rng = np.random.default_rng(bg.seed)
        base = base + bg.amplitude * rng.uniform(-1, 1, size=(H, W, 3))
    return np.clip(base, 0.0, 1.0)


@dataclass
class FrameTruth:
    centers: list[tuple[float, float]]
    masks: list[np.ndarray]

    def boxes(self) -> list[list[float] | None]:
        out = []
        for m in self.masks:
            rows, cols = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
            out.append(None if rows.size == 0 else
                       [float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)])
        return out


def render_frame(spec: SceneSpec, t: int) -> tuple[np.ndarray, FrameTruth]:
    H, W = spec.height, spec.width
    img = background(spec)
    covs = [shape_coverage(o, t, H, W) for o in spec.objects]
    for o, c in zip(spec.objects, covs):
        img = img * (1 - c[..., None]) + np.asarray(o.color)[None, None, :] * c[..., None]
    occ_cov = np.zeros((H, W))
    if spec.occluder is not None:
        occ_cov = _box_coverage(spec.occluder.box, H, W)
        img = img * (1 - occ_cov[..., None]) + np.asarray(spec.occluder.color)[None, None, :] * occ_cov[..., None]
    masks = []
    for i, c in enumerate(covs):
        visible = c.copy()
        for later in covs[i + 1:]:
            visible *= 1 - later
        visible *= 1 - occ_cov
        masks.append(visible >= 0.5)
    return img, FrameTruth([o.center(t) for o in spec.objects], masks)


def render(spec: SceneSpec) -> tuple[list[np.ndarray], list[dict]]:
    """All frames plus one ground-truth record per frame."""
    spec.validate()
    frames, truth = [], []
    for t in range(spec.frames):
        img, gt = render_frame(spec, t)
        frames.append(img)
        targets = []
        for i, (c, m, b) in enumerate(zip(gt.centers, gt.masks, gt.boxes())):
            targets.append({"id": i, "point": [c[0], c[1]], "box": b, "rle": rle_encode(m),
                            "visible": bool(m.any())})
        truth.append({"frame": t, "size": [spec.height, spec.width], "targets": targets})
    return frames, truth


def write_clip(spec: SceneSpec, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    frames, truth = render(spec)
    names = []
    for t, f in enumerate(frames):
        name = f"frame_{t:05d}.ppm"
        write_ppm(out / name, f)
        names.append(name)
    with open(out / "gt.jsonl", "w") as fh:
        for rec in truth:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    manifest = {"frames": names, "width": spec.width, "height": spec.height,
                "scene": scene_to_json(spec)}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_clip(seq_dir) -> list[np.ndarray]:
    from .codec import read_ppm

    seq_dir = Path(seq_dir)
    mpath = seq_dir / "manifest.json"
    if mpath.exists():
        names = json.loads(mpath.read_text())["frames"]
    else:
        names = sorted(p.name for p in seq_dir.glob("frame_*.ppm"))
    return [read_ppm(seq_dir / n) for n in names]


def read_truth(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]
