"""``dintr`` command line: synth | track | eval | bench | verify | overlay.

Exit codes: 0 success, 1 failed verification, 2 bad configuration or
input, 3 runtime error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

from . import bench, metrics, synthvid, tracker, verify
from .codec import CodecShapeError
from .conditioning import IndicatorError, VocabError, load_indicators
from .config import RunConfig, config_from_dict, load_config
from .numerics import load_dtnr
from .overlay import overlay_sequence
from .schedule import ConfigError
from .synthvid import SpecError, read_clip, read_truth

log = logging.getLogger("dintr")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("DINTR_THREADS", "1")))
    except ValueError:
        raise ConfigError(f"DINTR_THREADS must be an integer, got {os.environ['DINTR_THREADS']!r}")


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    else:
        print(text)


# subcommands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    if args.config:
        try:
            data = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"{args.config}: invalid JSON ({e})") from None
        spec = synthvid.scene_from_json(data)
    else:
        spec = synthvid.two_disc_scene() if args.preset == "two-disc" else synthvid.default_scene()
    out = synthvid.write_clip(spec, args.out)
    log.info("wrote %d frames to %s", spec.frames, out)
    return EXIT_OK


def _track_config(args) -> RunConfig:
    cfg = load_config(args.config)
    for key in ("seq", "indicator", "out"):
        val = getattr(args, key)
        if val is not None:
            setattr(cfg.paths, key, val)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.warm_start:
        cfg.tracker.warm_start = True
    if args.steps is not None:
        cfg.engine.finetune_steps = args.steps
    cfg.validate()
    cfg.require("paths.seq", "paths.indicator", "paths.out")
    return cfg


def cmd_track(args) -> int:
    cfg = _track_config(args)
    frames = read_clip(cfg.paths.seq)
    initial = load_indicators(cfg.paths.indicator)
    vocab = load_dtnr(cfg.paths.vocab) if cfg.paths.vocab else None
    run = tracker.track_sequence(frames, initial, cfg, vocab=vocab, sequence=cfg.paths.seq)
    if run.evals != run.expected_evals():
        raise RuntimeError(f"network evaluations {run.evals} != expected {run.expected_evals()}")
    tracker.write_jsonl(run, cfg.paths.out)
    if args.emit_config:
        Path(args.emit_config).write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")
    log.info("tracked %d targets over %d frames in %.1fs (%d network evaluations)",
             len(run.tracklets), len(frames), run.seconds, run.evals)
    return EXIT_OK


def cmd_eval(args) -> int:
    if len(args.gt) != len(args.pred):
        raise ConfigError(f"{len(args.gt)} --gt files but {len(args.pred)} --pred files")
    names = [m.strip() for m in args.metrics.split(",") if m.strip()]
    thresholds = tuple(float(v) for v in args.thresholds.split(","))

    def one(pair):
        gt_path, pred_path = pair
        return metrics.evaluate(read_truth(gt_path), read_truth(pred_path), names, thresholds,
                                tol=args.tol, skip_first=not args.include_first)

    with ThreadPoolExecutor(max_workers=thread_cap()) as pool:
        reports = list(pool.map(one, zip(args.gt, args.pred)))
    _write_json(reports[0] if len(reports) == 1 else reports, args.out)
    return EXIT_OK


def cmd_bench(args) -> int:
    Ts = tuple(int(t) for t in args.T.split(","))
    modes = tuple(m.strip() for m in args.modes.split(","))
    for m in modes:
        if m not in ("reconstruct", "interpolate"):
            raise ConfigError(f"unknown bench mode {m!r}")
    rows = bench.run_bench(modes, Ts, args.repeats, args.steps, args.lr, args.seed,
                           inversion=args.inversion,
                           progress=lambda r: log.info("%s T=%d %.3fs mse=%.3g", r.mode, r.T, r.seconds, r.mse))
    paths = bench.write_outputs(rows, args.out)
    for r in rows:
        print(f"{r.mode:12s} T={r.T:4d} evals={r.evals:4d} seconds={r.seconds:.4f} mse={r.mse:.6g}")
    log.info("wrote %s", ", ".join(str(p) for p in paths.values()))
    return EXIT_OK


def cmd_verify(args) -> int:
    results = verify.run_checks(args.mutate)
    report = {"passed": all(c.passed for c in results), "mutation": args.mutate,
              "checks": [c.as_dict() for c in results]}
    for c in results:
        print(f"{'PASS' if c.passed else 'FAIL'} {c.name}: measured {c.measured:.3g} "
              f"(tolerance {c.tolerance:.3g}) {c.detail}".rstrip())
    if args.json:
        _write_json(report, args.json)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_overlay(args) -> int:
    frames = read_clip(args.seq)
    records = read_truth(args.pred)
    paths = overlay_sequence(frames, records, args.out)
    log.info("wrote %d overlay frames to %s", len(paths), args.out)
    return EXIT_OK


# parser ---------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dintr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic clip with ground truth")
    s.add_argument("--config", help="scene JSON")
    s.add_argument("--preset", choices=("default", "two-disc"), default="default")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    t = sub.add_parser("track", help="track indicators through a clip")
    t.add_argument("--config")
    t.add_argument("--seq")
    t.add_argument("--indicator")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--steps", type=int, help="override engine.finetune_steps")
    t.add_argument("--warm-start", action="store_true", help="carry finetuned weights across pairs")
    t.add_argument("--emit-config", help="write the effective config JSON here")
    t.set_defaults(fn=cmd_track)

    e = sub.add_parser("eval", help="score predictions against ground truth")
    e.add_argument("--gt", action="append", required=True)
    e.add_argument("--pred", action="append", required=True)
    e.add_argument("--metrics", default=",".join(metrics.ALL_METRICS))
    e.add_argument("--thresholds", default="1,2,4,8,16")
    e.add_argument("--tol", type=float, default=1.0)
    e.add_argument("--include-first", action="store_true")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("bench", help="time both processes against T")
    b.add_argument("--modes", default="reconstruct,interpolate")
    b.add_argument("--T", default=",".join(str(t) for t in bench.DEFAULT_T))
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--steps", type=int, default=50)
    b.add_argument("--lr", type=float, default=1e-5)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--inversion", choices=("ddim", "closed"), default="ddim")
    b.add_argument("--out", default="bench_out")
    b.set_defaults(fn=cmd_bench)

    v = sub.add_parser("verify", help="run the invariant checks")
    v.add_argument("--json", help="write the machine-readable report here")
    v.add_argument("--mutate", choices=sorted(verify.MUTATIONS))
    v.set_defaults(fn=cmd_verify)

    o = sub.add_parser("overlay", help="draw predictions onto frames")
    o.add_argument("--seq", required=True)
    o.add_argument("--pred", required=True)
    o.add_argument("--out", required=True)
    o.set_defaults(fn=cmd_overlay)
    return p


CONFIG_ERRORS = (ConfigError, SpecError, IndicatorError, VocabError, CodecShapeError, FileNotFoundError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except CONFIG_ERRORS as e:
        print(f"dintr {args.command}: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - surfaced as the runtime exit code
        log.debug("runtime failure", exc_info=True)
        print(f"dintr {args.command}: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
