"""Timing and quality of the two processes against the schedule length T."""
from __future__ import annotations

import csv
import json
import statistics
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import engine
from .codec import encode, to_tokens
from .conditioning import point_tokens, Point
from .denoiser import Denoiser, DenoiserConfig, feature_basis
from .schedule import NoiseContext, make_linear
from .synthvid import ObjectSpec, SceneSpec, render

DEFAULT_T = (50, 100, 150, 200, 250)


@dataclass
class BenchRow:
    mode: str
    T: int
    evals: int
    seconds: float  # median wall clock of one process run
    mse: float  # final latent vs the true next latent
    baseline_mse: float  # current latent vs the true next latent


def fixture_pair(gap: int = 2):
    """Frames 0 and ``gap`` of a disc moving (1, 0.5) px/frame, as token matrices."""
    spec = SceneSpec(frames=gap + 1, objects=[ObjectSpec(start=(20.0, 24.0))])
    frames, truth = render(spec)
    z0, z1 = encode(frames[0]), encode(frames[gap])
    return to_tokens(z0), to_tokens(z1), z0, truth[0]["targets"][0]["point"]


def _time_interleaved(fns: list, repeats: int) -> list[float]:
    """Median wall clock per function, alternating them each repeat.

    Alternating keeps slow drift in machine load from landing on one
    process only, which matters when the quantity of interest is a ratio.
    """
    times = [[] for _ in fns]
    for _ in range(repeats):
        for i, fn in enumerate(fns):
            t0 = time.perf_counter()
            fn()
            times[i].append(time.perf_counter() - t0)
    return [statistics.median(t) for t in times]


def run_bench(modes=("reconstruct", "interpolate"), Ts=DEFAULT_T, repeats: int = 5,
              steps: int = 50, lr: float = 1e-5, seed: int = 0, operator: str = "offset_clean",
              inversion: str = "ddim", model_seed: int = 0, progress=None) -> list[BenchRow]:
    """Finetune with the same budget at every T, then time and score one run.

    Noise is off so the training inputs follow the deterministic inversion
    path; the reconstruction inverts with the frozen starting weights.
    """
    z0, z1, latent0, pt = fixture_pair()
    base = Denoiser(DenoiserConfig(), seed=model_seed)
    basis = feature_basis(base.cfg.latent_channels, base.cfg.embed_dim, base.cfg.basis_seed)
    tau = point_tokens(Point(*pt), 1.5, latent0, basis)
    noise = NoiseContext(seed, zero=True)
    baseline = float(np.mean((z0 - z1) ** 2))
    rows = []
    for T in Ts:
        schedule = make_linear(T)
        runs, traces = [], []
        for mode in modes:
            tuned = engine.finetune(base, z0, z1, tau, schedule, steps=steps, lr=lr, process=mode,
                                    kind=operator, noise=noise, seed=seed).model if steps else base
            if mode == "reconstruct":
                def run(tuned=tuned):
                    return engine.reconstruct(z0, tau, schedule, tuned, inversion=inversion,
                                              inversion_model=base, noise=noise)
            else:
                def run(tuned=tuned):
                    return engine.interpolate(z0, z1, tau, schedule, operator, tuned, noise=noise)
            runs.append(run)
            traces.append(run())
        for mode, trace, secs in zip(modes, traces, _time_interleaved(runs, repeats)):
            final = trace.final.data
            rows.append(BenchRow(mode, T, trace.evals, secs, float(np.mean((final - z1) ** 2)), baseline))
            if progress:
                progress(rows[-1])
    return rows


def write_outputs(rows: list[BenchRow], out_dir) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "bench.csv", "json": out / "bench.json", "svg": out / "bench.svg"}
    fields = list(asdict(rows[0]).keys())
    with open(paths["csv"], "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow(asdict(r))
    paths["json"].write_text(json.dumps([asdict(r) for r in rows], indent=2))
    paths["svg"].write_text(line_chart(rows))
    return paths


def line_chart(rows: list[BenchRow], width: int = 480, height: int = 300) -> str:
    """Wall-clock time against T, one polyline per mode."""
    pad = 40
    Ts = sorted({r.T for r in rows})
    tmax = max(r.seconds for r in rows) or 1.0
    t_lo, t_hi = Ts[0], Ts[-1] if Ts[-1] > Ts[0] else Ts[0] + 1

    def xy(T, s):
        x = pad + (T - t_lo) / (t_hi - t_lo) * (width - 2 * pad)
        y = height - pad - s / tmax * (height - 2 * pad)
        return f"{x:.1f},{y:.1f}"

    colors = {"reconstruct": "#c0392b", "interpolate": "#2471a3"}
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">T</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">seconds</text>']
    for T in Ts:
        x = xy(T, 0).split(",")[0]
        parts.append(f'<text x="{x}" y="{height - pad + 14}" text-anchor="middle" font-size="10">{T}</text>')
    for i, mode in enumerate(sorted({r.mode for r in rows})):
        pts = " ".join(xy(r.T, r.seconds) for r in sorted(rows, key=lambda r: r.T) if r.mode == mode)
        color = colors.get(mode, "#555555")
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>')
        parts.append(f'<text x="{pad + 8}" y="{pad + 14 * (i + 1)}" fill="{color}" font-size="11">{mode}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
