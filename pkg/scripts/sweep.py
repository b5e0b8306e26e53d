"""Grid over operator, fusion mode and beta on the default scene; one line per setting."""
import argparse
import itertools
import time


from dintr import synthvid as sv
from dintr import tracker as tk
from dintr.conditioning import Point
from dintr.config import RunConfig
from dintr.metrics import evaluate

p = argparse.ArgumentParser()
p.add_argument("--operators", default="offset_clean,offset_noisy")
p.add_argument("--modes", default="propagate,elementwise")
p.add_argument("--betas", default="1,2,4")
p.add_argument("--T", type=int, default=20)
p.add_argument("--steps", type=int, default=10)
p.add_argument("--frames", type=int, default=12)
args = p.parse_args()

spec = sv.default_scene()
spec.frames = args.frames
frames, truth = sv.render(spec)
start = [Point(*t["point"]) for t in truth[0]["targets"]]
for op, mode, beta in itertools.product(args.operators.split(","), args.modes.split(","),
                                        [int(b) for b in args.betas.split(",")]):
    cfg = RunConfig()
    cfg.engine.operator, cfg.engine.T, cfg.engine.finetune_steps = op, args.T, args.steps
    cfg.extraction.mode, cfg.extraction.beta = mode, beta
    t0 = time.perf_counter()
    m = evaluate(truth, tk.frame_records(tk.track_sequence(frames, start, cfg)))["metrics"]["point"]
    print(f"{op:13s} {mode:11s} beta={beta}  acc@4 {m['per_threshold'][4.0]:.2f}  "
          f"mean error {m['mean_error']:.2f}px  {time.perf_counter() - t0:.1f}s", flush=True)
