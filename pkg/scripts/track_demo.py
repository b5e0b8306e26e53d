"""Render a scene, track it from the first-frame ground truth, score it and draw overlays."""
import argparse
import json
from pathlib import Path

from dintr import synthvid as sv
from dintr import tracker as tk
from dintr.codec import rle_decode
from dintr.conditioning import Box, Point, Segment
from dintr.config import RunConfig, load_config
from dintr.metrics import evaluate
from dintr.overlay import overlay_sequence

p = argparse.ArgumentParser()
p.add_argument("--scene", choices=("default", "two-disc"), default="default")
p.add_argument("--kind", choices=("point", "box", "segment"), default="point")
p.add_argument("--config", help="run config JSON; defaults otherwise")
p.add_argument("--steps", type=int)
p.add_argument("--out", default="demo_out")
args = p.parse_args()

cfg = load_config(args.config) if args.config else RunConfig()
if args.steps is not None:
    cfg.engine.finetune_steps = args.steps
frames, truth = sv.render(sv.two_disc_scene() if args.scene == "two-disc" else sv.default_scene())
shape = tuple(truth[0]["size"])


def start(t):
    if args.kind == "point":
        return Point(*t["point"])
    if args.kind == "box":
        return Box(*t["box"])
    return Segment(rle_decode(t["rle"], shape))


run = tk.track_sequence(frames, [start(t) for t in truth[0]["targets"]], cfg)
pred = tk.frame_records(run)
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)
tk.write_jsonl(run, out / "pred.jsonl")
overlay_sequence(frames, pred, out / "overlay")
rep = evaluate(truth, pred)["metrics"]
(out / "report.json").write_text(json.dumps(rep, indent=2))
print(f"{run.evals} network evaluations in {run.seconds:.1f}s")
print(json.dumps(rep, indent=2))
