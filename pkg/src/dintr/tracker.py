"""Online tracking loop: per frame pair finetune, run the process, read out targets."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import conditioning as cond
from . import engine
from .codec import encode, patch_factor, rle_encode, to_tokens
from .conditioning import Box, Indicator, Point, Pose, Segment, Text
from .config import RunConfig
from .denoiser import Denoiser, DenoiserConfig, feature_basis
from .extraction import LostTargetError, accumulate, fuse, map_to_indicator
from .schedule import NoiseContext


class BootstrapError(RuntimeError):
    pass


@dataclass
class Tracklet:
    id: int
    kind: str  # point | pose | box | segment
    indicators: list[Indicator] = field(default_factory=list)
    conf: list[float] = field(default_factory=list)
    lost: list[bool] = field(default_factory=list)

    def append(self, ind: Indicator, conf: float, lost: bool) -> None:
        self.indicators.append(ind)
        self.conf.append(conf)
        self.lost.append(lost)


@dataclass
class TrackRun:
    config: dict
    sequence: str
    tracklets: list[Tracklet]
    evals: int = 0
    pairs: int = 0
    seconds: float = 0.0

    def expected_evals(self) -> int:
        per = self.config["engine"]["T"]
        if self.config["engine"]["process"] == "reconstruct":
            per *= 2 if self.config["engine"]["inversion"] == "ddim" else 1
        return per * self.pairs


def build_model(cfg: RunConfig, channels: int = 48) -> Denoiser:
    t = cfg.tracker
    dcfg = DenoiserConfig(latent_channels=channels, embed_dim=t.embed_dim, layers=t.layers,
                          mlp_ratio=t.mlp_ratio, sink=t.sink, basis_seed=t.basis_seed)
    return Denoiser(dcfg, seed=t.model_seed)


def _output_kind(ind: Indicator) -> str:
    return "box" if isinstance(ind, Text) else cond.kind_of(ind)


def _target_tokens(ind: Indicator, latent, basis, cfg: RunConfig, vocab) -> list[np.ndarray]:
    """Token groups for one target; a pose gives one group per keypoint."""
    if isinstance(ind, Pose):
        return [cond.point_tokens(p, cfg.tracker.sigma, latent, basis) for p in ind.points]
    return [cond.indicator_tokens(ind, latent, basis, sigma=cfg.tracker.sigma, vocab=vocab)]


def run_process(cfg: RunConfig, tuned: Denoiser, base: Denoiser, z0, z1, tau, schedule, noise):
    e = cfg.engine
    if e.process == "interpolate":
        return engine.interpolate(z0, z1, tau, schedule, e.operator, tuned, capture=True, noise=noise)
    return engine.reconstruct(z0, tau, schedule, tuned, capture=True, inversion=e.inversion,
                              inversion_model=base, noise=noise)


def pair_saliency(cfg: RunConfig, model: Denoiser, base: Denoiser, z0, z1, tau, ranges,
                  grid, patch, schedule, pair_index: int):
    """Finetune on one pair, run the process and fuse one saliency map per token group."""
    e, x = cfg.engine, cfg.extraction
    seed = cfg.effective_seed
    noise = NoiseContext(seed, pair_index, zero=e.noise == "zero")
    if e.finetune_steps > 0:
        tuned = engine.finetune(model, z0, z1, tau, schedule, steps=e.finetune_steps, lr=e.lr,
                                process=e.process, kind=e.operator, noise=noise,
                                seed=seed * 100003 + pair_index, objective=e.objective).model
    else:
        tuned = model
    trace = run_process(cfg, tuned, base, z0, z1, tau, schedule, noise)
    acc = accumulate(trace.records, model.cfg.layers, schedule.T, x.window_fraction)
    fused = [fuse(acc.self_map, v, grid, patch, x.mode, x.beta) for v in acc.per_target(ranges)]
    return fused, tuned, trace.evals


def _read_out(kind: str, sal, cfg: RunConfig):
    if sal.flat:
        raise LostTargetError("flat saliency")
    return map_to_indicator(sal, kind, cfg.extraction.seg_threshold)


def track_sequence(frames: list[np.ndarray], initial: list[Indicator], cfg: RunConfig,
                   vocab: np.ndarray | None = None, sequence: str = "") -> TrackRun:
    """Track every initial indicator through the clip, strictly frame by frame."""
    if len(frames) < 2:
        raise ValueError("tracking needs at least two frames")
    if not initial:
        raise ValueError("tracking needs at least one indicator")
    started = time.perf_counter()
    H, W = frames[0].shape[:2]
    for ind in initial:
        cond.check_bounds(ind, H, W)
    latents = [encode(f) for f in frames]
    patch = patch_factor(latents[0].shape)
    grid = latents[0].shape[1:]
    schedule = cfg.noise_schedule()
    base = build_model(cfg, latents[0].shape[0])
    basis = feature_basis(base.cfg.latent_channels, base.cfg.embed_dim, base.cfg.basis_seed)
    if vocab is None and any(isinstance(i, Text) for i in initial):
        vocab = cond.make_vocab(cfg.tracker.vocab_size, base.cfg.embed_dim, cfg.tracker.vocab_seed)

    tracklets = [Tracklet(i, _output_kind(ind)) for i, ind in enumerate(initial)]
    current: list[Indicator] = list(initial)
    for tr, ind in zip(tracklets, initial):
        tr.append(ind, 1.0, False)
    frozen = [_target_tokens(ind, latents[0], basis, cfg, vocab) for ind in initial]

    model, evals = base, 0
    for t in range(len(frames) - 1):
        groups, owners = [], []
        for i, ind in enumerate(current):
            if isinstance(ind, Text) or not cfg.tracker.rebuild_tokens:
                toks = frozen[i]
            else:
                toks = _target_tokens(ind, latents[t], basis, cfg, vocab)
            groups.extend(toks)
            owners.extend([i] * len(toks))
        packed = cond.pack_targets(groups)
        z0, z1 = to_tokens(latents[t]), to_tokens(latents[t + 1])
        fused, tuned, n = pair_saliency(cfg, model, base, z0, z1, packed.tokens, packed.ranges,
                                        grid, patch, schedule, t)
        evals += n
        if cfg.tracker.warm_start:
            model = tuned

        nxt: list[Indicator] = []
        for i, (tr, prev) in enumerate(zip(tracklets, current)):
            sals = [f for f, o in zip(fused, owners) if o == i]
            if isinstance(prev, Pose):
                pts, lost_any, confs = [], False, []
                for p, sal in zip(prev.points, sals):
                    try:
                        pts.append(_read_out("point", sal, cfg))
                    except LostTargetError:
                        pts.append(p)
                        lost_any = True
                    confs.append(sal.peak)
                new, conf, lost = Pose(tuple(pts)), float(np.mean(confs)), lost_any
            else:
                sal = sals[0]
                try:
                    new, lost = _read_out(tr.kind, sal, cfg), False
                except LostTargetError:
                    new, lost = (tr.indicators[-1]), True
                conf = sal.peak
            tr.append(new, conf, lost)
            nxt.append(prev if isinstance(prev, Text) else new)  # text tokens stay frozen
        current = nxt

    return TrackRun(cfg.to_json(), sequence, tracklets, evals, len(frames) - 1,
                    time.perf_counter() - started)


def bootstrap_from_text(frame0: np.ndarray, frame1: np.ndarray, text: Text, cfg: RunConfig,
                        vocab: np.ndarray, max_targets: int = 1) -> list[Box]:
    """Box proposals from one text-conditioned pass, ranked by saliency mass."""
    z0l, z1l = encode(frame0), encode(frame1)
    base = build_model(cfg, z0l.shape[0])
    schedule = cfg.noise_schedule()
    tau = cond.text_tokens(text, vocab)
    e, x = cfg.engine, cfg.extraction
    noise = NoiseContext(cfg.effective_seed, 0, zero=e.noise == "zero")
    trace = run_process(cfg, base, base, to_tokens(z0l), to_tokens(z1l), tau, schedule, noise)
    acc = accumulate(trace.records, base.cfg.layers, schedule.T, x.window_fraction)
    vec = acc.condition_columns.mean(axis=1)
    sal = fuse(acc.self_map, vec, z0l.shape[1:], patch_factor(z0l.shape), x.mode, x.beta)
    if sal.flat:
        raise BootstrapError("saliency is flat: nothing in the frame matches the text")
    labels, count = ndimage.label(sal.map > x.seg_threshold * sal.map.max())
    if count == 0:
        raise BootstrapError("no component above threshold")
    mass = ndimage.sum(sal.map, labels, index=np.arange(1, count + 1))
    order = np.argsort(-mass, kind="stable")[:max_targets]
    boxes = []
    for idx in order:
        rows, cols = np.nonzero(labels == idx + 1)
        boxes.append(Box(float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1)))
    return boxes


# output -----------------------------------------------------------------------------

def indicator_record(ind: Indicator) -> dict:
    if isinstance(ind, Point):
        return {"point": [ind.x, ind.y]}
    if isinstance(ind, Pose):
        return {"points": [[p.x, p.y] for p in ind.points]}
    if isinstance(ind, Box):
        return {"box": ind.as_list()}
    if isinstance(ind, Segment):
        return {"rle": rle_encode(ind.mask)}
    raise TypeError(f"cannot serialise {ind!r}")


def frame_records(run: TrackRun) -> list[dict]:
    n = len(run.tracklets[0].indicators)
    out = []
    for t in range(n):
        targets = []
        for tr in run.tracklets:
            ind = tr.indicators[t]
            rec = {"id": tr.id, "kind": tr.kind}
            if isinstance(ind, Text):
                rec["text"] = list(ind.token_ids)
            else:
                rec.update(indicator_record(ind))
            rec["conf"] = float(tr.conf[t])
            rec["lost"] = bool(tr.lost[t])
            targets.append(rec)
        out.append({"frame": t, "targets": targets})
    return out


def write_jsonl(run: TrackRun, path) -> None:
    with open(Path(path), "w") as fh:
        for rec in frame_records(run):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
