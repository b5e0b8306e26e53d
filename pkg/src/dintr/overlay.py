"""Draw tracker output onto frames."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .codec import rle_decode, write_ppm
from .metrics import boundary
from .numerics import ContractError

PALETTE = np.array([
    [1.0, 0.85, 0.0], [0.0, 1.0, 0.4], [1.0, 0.0, 1.0], [0.0, 0.9, 1.0],
    [1.0, 0.5, 0.0], [0.6, 0.4, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0],
])


def color_for(target_id: int) -> np.ndarray:
    return PALETTE[target_id % len(PALETTE)]


def draw_box(img: np.ndarray, box, color) -> None:
    """1-px outline on the pixels just inside the box edges."""
    H, W = img.shape[:2]
    x0, y0, x1, y1 = (int(round(v)) for v in box)
    x0, y0 = max(x0, 0), max(y0, 0)
    x1, y1 = min(x1, W), min(y1, H)
    if x1 <= x0 or y1 <= y0:
        return
    img[y0, x0:x1] = color
    img[y1 - 1, x0:x1] = color
    img[y0:y1, x0] = color
    img[y0:y1, x1 - 1] = color


def draw_point(img: np.ndarray, point, color, arm: int = 2) -> None:
    H, W = img.shape[:2]
    cx, cy = int(np.floor(point[0])), int(np.floor(point[1]))
    for d in range(-arm, arm + 1):
        if 0 <= cy < H and 0 <= cx + d < W:
            img[cy, cx + d] = color
        if 0 <= cy + d < H and 0 <= cx < W:
            img[cy + d, cx] = color


def draw_contour(img: np.ndarray, mask: np.ndarray, color) -> None:
    img[boundary(mask)] = color


def annotate(frame: np.ndarray, record: dict) -> np.ndarray:
    img = np.array(frame, dtype=np.float64, copy=True)
    for tgt in record.get("targets", []):
        color = color_for(int(tgt["id"]))
        if "rle" in tgt:
            draw_contour(img, rle_decode(tgt["rle"], img.shape[:2]), color)
        if "box" in tgt:
            draw_box(img, tgt["box"], color)
        if "point" in tgt:
            draw_point(img, tgt["point"], color)
        for p in tgt.get("points", []):
            draw_point(img, p, color)
    return img


def overlay_sequence(frames: list[np.ndarray], records: list[dict], out_dir) -> list[Path]:
    """Write ``overlay_%05d.ppm`` per frame; an empty prediction copies frames unchanged."""
    if records and len(records) != len(frames):
        raise ContractError(f"{len(records)} prediction lines for {len(frames)} frames")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        img = annotate(frame, records[t]) if records else frame
        if records and records[t].get("frame", t) != t:
            raise ContractError(f"prediction line {t} is for frame {records[t]['frame']}")
        p = out / f"overlay_{t:05d}.ppm"
        write_ppm(p, img)
        paths.append(p)
    return paths
