"""Space-to-depth codec between frames and latents, plus PPM/PGM I/O.

A frame is an ``(H, W, 3)`` float array in [0, 1]; its latent is
``(3 p^2, H/p, W/p)``.  The mapping is a pure permutation of entries, so it
is exactly invertible and linear.
"""
from __future__ import annotations

from pathlib import Path

import numpy as np

DEFAULT_PATCH = 4


class CodecShapeError(ValueError):
    pass


def encode(frame: np.ndarray, p: int = DEFAULT_PATCH) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise CodecShapeError(f"frame must be H x W x 3, got {frame.shape}")
    H, W, _ = frame.shape
    if H % p or W % p:
        raise CodecShapeError(f"frame {H}x{W} not divisible by patch factor {p}")
    h, w = H // p, W // p
    # channel index = (dy * p + dx) * 3 + c
    z = frame.reshape(h, p, w, p, 3).transpose(1, 3, 4, 0, 2)
    return z.reshape(p * p * 3, h, w).copy()


def decode(latent: np.ndarray) -> np.ndarray:
    latent = np.asarray(latent, dtype=np.float64)
    if latent.ndim != 3:
        raise CodecShapeError(f"latent must be C x h x w, got {latent.shape}")
    C, h, w = latent.shape
    if C % 3:
        raise CodecShapeError(f"latent channels {C} not divisible by 3")
    p = int(round(np.sqrt(C // 3)))
    if p * p * 3 != C:
        raise CodecShapeError(f"latent channels {C} are not 3 * p^2")
    f = latent.reshape(p, p, 3, h, w).transpose(3, 0, 4, 1, 2)
    return f.reshape(h * p, w * p, 3).copy()


def patch_factor(latent_shape) -> int:
    return int(round(np.sqrt(latent_shape[0] // 3)))


def to_tokens(latent: np.ndarray) -> np.ndarray:
    """(C, h, w) -> (h*w, C), row-major over cells."""
    C = latent.shape[0]
    return latent.reshape(C, -1).T.copy()


def from_tokens(tokens: np.ndarray, h: int, w: int) -> np.ndarray:
    return tokens.T.reshape(-1, h, w).copy()


# image files --------------------------------------------------------------------

def _to_bytes(values: np.ndarray) -> np.ndarray:
    # round half away from zero; values are non-negative after clipping
    v = np.clip(values, 0.0, 1.0) * 255.0
    return np.floor(v + 0.5).astype(np.uint8)


def _read_header(raw: bytes, magic: bytes):
    if not raw.startswith(magic):
        raise ValueError(f"expected {magic!r} image")
    fields, pos = [], 2
    while len(fields) < 3:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError(f"only maxval 255 supported, got {maxval}")
    return w, h, raw[pos + 1:]


def write_ppm(path, frame: np.ndarray) -> None:
    frame = np.asarray(frame)
    H, W = frame.shape[:2]
    body = _to_bytes(frame).tobytes()
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + body)


def read_ppm(path) -> np.ndarray:
    w, h, body = _read_header(Path(path).read_bytes(), b"P6")
    data = np.frombuffer(body[: w * h * 3], dtype=np.uint8)
    if data.size != w * h * 3:
        raise ValueError(f"{path}: truncated PPM")
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    mask = np.asarray(mask)
    H, W = mask.shape
    values = mask.astype(np.float64) if mask.dtype == bool else mask
    Path(path).write_bytes(f"P5\n{W} {H}\n255\n".encode() + _to_bytes(values).tobytes())


def read_pgm(path) -> np.ndarray:
    w, h, body = _read_header(Path(path).read_bytes(), b"P5")
    data = np.frombuffer(body[: w * h], dtype=np.uint8)
    if data.size != w * h:
        raise ValueError(f"{path}: truncated PGM")
    return data.reshape(h, w).astype(np.float64) / 255.0


# run-length masks -------------------------------------------------------------

def rle_encode(mask: np.ndarray) -> str:
    """Row-major run lengths, alternating background/foreground, background first."""
    flat = np.asarray(mask, dtype=bool).reshape(-1)
    change = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return " ".join(str(r) for r in runs)


def rle_decode(counts: str, shape: tuple[int, int]) -> np.ndarray:
    runs = [int(c) for c in counts.split()]
    if sum(runs) != shape[0] * shape[1] or any(r < 0 for r in runs):
        raise CodecShapeError(f"run lengths sum to {sum(runs)}, mask has {shape[0] * shape[1]} pixels")
    vals = np.arange(len(runs)) % 2 == 1
    return np.repeat(vals, runs).reshape(shape)
