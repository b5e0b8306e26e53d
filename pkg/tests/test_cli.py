import json
import subprocess
import sys

import numpy as np
import pytest

from dintr import cli
from dintr import synthvid as sv
from dintr.codec import read_ppm


@pytest.fixture
def clip(tmp_path):
    spec = sv.SceneSpec(width=32, height=32, frames=4, objects=[sv.ObjectSpec(size=4, start=(10, 10))])
    (tmp_path / "scene.json").write_text(json.dumps(sv.scene_to_json(spec)))
    assert cli.main(["synth", "--config", str(tmp_path / "scene.json"), "--out", str(tmp_path / "seq")]) == 0
    gt = sv.read_truth(tmp_path / "seq" / "gt.jsonl")
    (tmp_path / "ind.json").write_text(json.dumps({"type": "box", "box": gt[0]["targets"][0]["box"]}))
    (tmp_path / "cfg.json").write_text(json.dumps({"engine": {"T": 3, "finetune_steps": 1}}))
    return tmp_path


def _track(d, out="o.jsonl", *extra):
    return cli.main(["track", "--config", str(d / "cfg.json"), "--seq", str(d / "seq"),
                     "--indicator", str(d / "ind.json"), "--out", str(d / out), *extra])


def test_synth_writes_clip(clip):
    names = sorted(p.name for p in (clip / "seq").iterdir())
    assert names[:2] == ["frame_00000.ppm", "frame_00001.ppm"] and "gt.jsonl" in names
    assert "manifest.json" in names and len(names) == 6


def test_track_output_schema(clip):
    assert _track(clip) == 0
    lines = (clip / "o.jsonl").read_text().splitlines()
    assert len(lines) == 4
    for t, line in enumerate(lines):
        rec = json.loads(line)
        assert rec["frame"] == t
        (tgt,) = rec["targets"]
        assert set(tgt) == {"id", "kind", "box", "conf", "lost"} and tgt["kind"] == "box"
        assert len(tgt["box"]) == 4 and isinstance(tgt["lost"], bool)


def test_same_seed_gives_identical_bytes(clip):
    assert _track(clip, "a.jsonl", "--seed", "5") == 0
    assert _track(clip, "b.jsonl", "--seed", "5") == 0
    assert (clip / "a.jsonl").read_bytes() == (clip / "b.jsonl").read_bytes()


def test_emitted_config_reruns_identically(clip):
    assert _track(clip, "a.jsonl", "--seed", "2", "--emit-config", str(clip / "eff.json")) == 0
    eff = json.loads((clip / "eff.json").read_text())
    assert eff["seed"] == 2 and eff["paths"]["out"].endswith("a.jsonl")
    eff["paths"]["out"] = str(clip / "b.jsonl")
    (clip / "eff.json").write_text(json.dumps(eff))
    assert cli.main(["track", "--config", str(clip / "eff.json")]) == 0
    assert (clip / "a.jsonl").read_bytes() == (clip / "b.jsonl").read_bytes()


def test_missing_key_exits_2_with_path(clip, capsys):
    code = cli.main(["track", "--config", str(clip / "cfg.json"), "--seq", str(clip / "seq"),
                     "--out", str(clip / "o.jsonl")])
    assert code == 2 and "paths.indicator" in capsys.readouterr().err


def test_unknown_key_exits_2(clip, capsys):
    (clip / "bad.json").write_text(json.dumps({"engine": {"steps": 3}}))
    code = cli.main(["track", "--config", str(clip / "bad.json"), "--seq", str(clip / "seq"),
                     "--indicator", str(clip / "ind.json"), "--out", str(clip / "o.jsonl")])
    assert code == 2 and "engine.steps" in capsys.readouterr().err


def test_bad_indicator_exits_2(clip):
    (clip / "ind.json").write_text(json.dumps({"type": "point", "x": 99, "y": 1}))
    assert _track(clip) == 2


def test_runtime_failure_exits_3(clip, capsys):
    (clip / "seq" / "frame_00002.ppm").write_bytes(b"P6\n32 32\n255\n")  # truncated
    assert _track(clip) == 3
    assert "truncated" in capsys.readouterr().err


def test_bad_scene_exits_2(tmp_path):
    (tmp_path / "s.json").write_text(json.dumps({"objects": [{"start": [1, 1]}]}))
    assert cli.main(["synth", "--config", str(tmp_path / "s.json"), "--out", str(tmp_path / "x")]) == 2


def test_eval_report(clip, capsys):
    gt = clip / "seq" / "gt.jsonl"
    assert cli.main(["eval", "--gt", str(gt), "--pred", str(gt), "--metrics", "point,box,mask,jf,id"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["metrics"]["box_iou"] == 1.0 and rep["metrics"]["JF"] == 1.0
    assert rep["config"]["thresholds"] == [1.0, 2.0, 4.0, 8.0, 16.0]


def test_eval_many_sequences_in_parallel(clip, monkeypatch, tmp_path):
    monkeypatch.setenv("DINTR_THREADS", "2")
    gt = str(clip / "seq" / "gt.jsonl")
    out = tmp_path / "r.json"
    assert cli.main(["eval", "--gt", gt, "--gt", gt, "--pred", gt, "--pred", gt, "--out", str(out)]) == 0
    assert len(json.loads(out.read_text())) == 2
    assert cli.main(["eval", "--gt", gt, "--pred", gt, "--pred", gt]) == 2


def test_track_then_eval_and_overlay(clip, tmp_path):
    assert _track(clip) == 0
    rep = tmp_path / "rep.json"
    assert cli.main(["eval", "--gt", str(clip / "seq" / "gt.jsonl"), "--pred", str(clip / "o.jsonl"),
                     "--out", str(rep)]) == 0
    assert 0 <= json.loads(rep.read_text())["metrics"]["box_iou"] <= 1
    assert cli.main(["overlay", "--seq", str(clip / "seq"), "--pred", str(clip / "o.jsonl"),
                     "--out", str(tmp_path / "ov")]) == 0
    assert len(list((tmp_path / "ov").glob("overlay_*.ppm"))) == 4


def test_overlay_misalignment_exits_3(clip, tmp_path):
    gt = (clip / "seq" / "gt.jsonl").read_text().splitlines()
    (tmp_path / "short.jsonl").write_text("\n".join(gt[:2]) + "\n")
    assert cli.main(["overlay", "--seq", str(clip / "seq"), "--pred", str(tmp_path / "short.jsonl"),
                     "--out", str(tmp_path / "ov")]) == 3


def test_verify_and_mutation(tmp_path, capsys):
    assert cli.main(["verify", "--json", str(tmp_path / "v.json")]) == 0
    rep = json.loads((tmp_path / "v.json").read_text())
    assert rep["passed"] and len(rep["checks"]) >= 10
    capsys.readouterr()
    assert cli.main(["verify", "--mutate", "from_next_sign_flip"]) == 1
    assert "FAIL operator_equivalence" in capsys.readouterr().out


def test_bench_small(tmp_path, capsys):
    code = cli.main(["bench", "--T", "2,3", "--repeats", "1", "--steps", "1", "--out", str(tmp_path / "b")])
    assert code == 0
    rows = json.loads((tmp_path / "b" / "bench.json").read_text())
    assert {(r["mode"], r["T"], r["evals"]) for r in rows} == {
        ("reconstruct", 2, 4), ("interpolate", 2, 2), ("reconstruct", 3, 6), ("interpolate", 3, 3)}
    assert (tmp_path / "b" / "bench.csv").read_text().startswith("mode,T,evals")
    assert cli.main(["bench", "--modes", "sideways", "--out", str(tmp_path / "c")]) == 2


def test_console_entry_point(tmp_path):
    out = subprocess.run([sys.executable, "-m", "dintr", "synth", "--preset", "two-disc", "--out",
                          str(tmp_path / "two")], capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    gt = sv.read_truth(tmp_path / "two" / "gt.jsonl")
    assert len(gt) == 32 and len(gt[0]["targets"]) == 2
    frame = read_ppm(tmp_path / "two" / "frame_00000.ppm")
    assert frame.shape == (64, 64, 3) and np.isfinite(frame).all()
