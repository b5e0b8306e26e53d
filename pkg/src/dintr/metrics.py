"""Tracking metrics: point accuracy, box IoU, mask J / boundary F, identity switches."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .codec import rle_decode
from .numerics import ContractError

DEFAULT_THRESHOLDS = (1, 2, 4, 8, 16)
_CROSS = ndimage.generate_binary_structure(2, 1)


class UndefinedMetricError(ValueError):
    pass


def point_accuracy(pred, gt, thresholds=DEFAULT_THRESHOLDS) -> dict:
    """Fraction of frames with Euclidean error below each threshold, plus their mean."""
    pred = np.asarray(pred, dtype=np.float64).reshape(-1, 2)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 2)
    if pred.shape != gt.shape:
        raise ContractError(f"{len(pred)} predicted points vs {len(gt)} ground-truth points")
    if len(pred) == 0:
        raise UndefinedMetricError("no frames to score")
    err = np.hypot(*(pred - gt).T)
    rates = {float(d): float(np.mean(err < d)) for d in thresholds}
    return {"per_threshold": rates, "average": float(np.mean(list(rates.values()))),
            "mean_error": float(err.mean())}


def box_iou(a, b) -> float:
    ax0, ay0, ax1, ay1 = a
    bx0, by0, bx1, by1 = b
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = (ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter
    return inter / union if union > 0 else 0.0


def box_iou_mean(pred, gt) -> float:
    if len(pred) != len(gt):
        raise ContractError(f"{len(pred)} predicted boxes vs {len(gt)} ground-truth boxes")
    if not pred:
        raise UndefinedMetricError("no frames to score")
    return float(np.mean([box_iou(p, g) for p, g in zip(pred, gt)]))


def _masks(pred, gt):
    pred, gt = np.asarray(pred, dtype=bool), np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ContractError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not gt.any():
        raise UndefinedMetricError("ground-truth mask is empty")
    return pred, gt


def mask_jaccard(pred, gt) -> float:
    pred, gt = _masks(pred, gt)
    return float((pred & gt).sum() / (pred | gt).sum())


def boundary(mask: np.ndarray) -> np.ndarray:
    """Pixels of the mask with a 4-neighbour outside it (frame edges count as outside)."""
    mask = np.asarray(mask, dtype=bool)
    return mask & ~ndimage.binary_erosion(mask, _CROSS, border_value=0)


def boundary_f(pred, gt, tol: float = 1.0) -> float:
    """F-measure of boundary pixels matched within ``tol`` pixels (Euclidean)."""
    pred, gt = _masks(pred, gt)
    bp, bg = boundary(pred), boundary(gt)
    if not bp.any():
        return 0.0
    dist_to_gt = ndimage.distance_transform_edt(~bg)
    dist_to_pred = ndimage.distance_transform_edt(~bp)
    precision = float(np.mean(dist_to_gt[bp] <= tol))
    recall = float(np.mean(dist_to_pred[bg] <= tol))
    if precision + recall == 0:
        return 0.0
    return 2 * precision * recall / (precision + recall)


def jf(pred, gt, tol: float = 1.0) -> float:
    return 0.5 * (mask_jaccard(pred, gt) + boundary_f(pred, gt, tol))


# identity ----------------------------------------------------------------------------

@dataclass
class Detection:
    id: int
    box: tuple | None = None
    point: tuple | None = None


def _score(p: Detection, g: Detection, iou_gate: float, dist_gate: float) -> float | None:
    """Higher is better; None when the pair fails the gate."""
    if p.box is not None and g.box is not None:
        s = box_iou(p.box, g.box)
        return s if s >= iou_gate else None
    if p.point is not None and g.point is not None:
        d = float(np.hypot(p.point[0] - g.point[0], p.point[1] - g.point[1]))
        return -d if d <= dist_gate else None
    return None


def greedy_match(preds: list[Detection], gts: list[Detection], iou_gate=0.5, dist_gate=8.0):
    """Pred id -> gt id, best-scoring pairs first; ties keep input order."""
    pairs = []
    for i, p in enumerate(preds):
        for j, g in enumerate(gts):
            s = _score(p, g, iou_gate, dist_gate)
            if s is not None:
                pairs.append((-s, i, j))
    pairs.sort()
    used_p, used_g, out = set(), set(), {}
    for _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out[preds[i].id] = gts[j].id
    return out


@dataclass
class IdReport:
    switches: int
    matches: int
    rate: float
    per_frame: list[dict] = field(default_factory=list)


def id_consistency(pred_frames, gt_frames, iou_gate: float = 0.5, dist_gate: float = 8.0) -> IdReport:
    """Count frames where a predicted target's matched ground-truth id changes."""
    if len(pred_frames) != len(gt_frames):
        raise ContractError(f"{len(pred_frames)} predicted frames vs {len(gt_frames)} ground-truth frames")
    last: dict[int, int] = {}
    switches = matches = 0
    per_frame = []
    for preds, gts in zip(pred_frames, gt_frames):
        m = greedy_match(preds, gts, iou_gate, dist_gate)
        for pid, gid in m.items():
            matches += 1
            if pid in last and last[pid] != gid:
                switches += 1
            last[pid] = gid
        per_frame.append(m)
    return IdReport(switches, matches, switches / matches if matches else 0.0, per_frame)


def brute_force_match(preds, gts, iou_gate=0.5, dist_gate=8.0):
    """Exhaustive maximum-total-score assignment; reference for small cases."""
    best, best_map = None, {}
    n = max(len(preds), len(gts))
    for perm in itertools.permutations(range(n), len(preds)) if len(preds) <= n else []:
        total, mapping = 0.0, {}
        for i, j in enumerate(perm):
            if j >= len(gts):
                continue
            s = _score(preds[i], gts[j], iou_gate, dist_gate)
            if s is not None:
                total += s + 1e6  # prefer more matches first
                mapping[preds[i].id] = gts[j].id
        if best is None or total > best:
            best, best_map = total, mapping
    return best_map


# JSONL evaluation --------------------------------------------------------------------

ALL_METRICS = ("point", "box", "mask", "jf", "id")


def _pred_point(rec: dict, shape):
    if "point" in rec:
        return rec["point"]
    if "box" in rec:
        x0, y0, x1, y1 = rec["box"]
        return [(x0 + x1) / 2, (y0 + y1) / 2]
    if "rle" in rec:
        ys, xs = np.nonzero(rle_decode(rec["rle"], shape))
        if xs.size:
            return [float(xs.mean()) + 0.5, float(ys.mean()) + 0.5]
    return None


def _pred_box(rec: dict, shape):
    if "box" in rec:
        return rec["box"]
    if "rle" in rec:
        m = rle_decode(rec["rle"], shape)
        rows, cols = np.flatnonzero(m.any(axis=1)), np.flatnonzero(m.any(axis=0))
        if rows.size:
            return [float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1)]
    return None


def evaluate(gt: list[dict], pred: list[dict], metrics=ALL_METRICS, thresholds=DEFAULT_THRESHOLDS,
             tol: float = 1.0, iou_gate: float = 0.5, skip_first: bool = True) -> dict:
    """Score tracker JSONL records against ground-truth JSONL records.

    Targets are paired by id.  The first frame holds the given indicators and
    is skipped unless ``skip_first`` is off.
    """
    unknown = set(metrics) - set(ALL_METRICS)
    if unknown:
        raise ValueError(f"unknown metrics {sorted(unknown)}")
    if len(gt) != len(pred):
        raise ContractError(f"{len(pred)} predicted frames vs {len(gt)} ground-truth frames")
    frames = range(1 if skip_first else 0, len(gt))
    acc: dict[str, dict[int, list]] = {m: {} for m in ("pt_p", "pt_g", "box_p", "box_g", "J", "F")}
    per_frame, id_pred, id_gt = [], [], []
    for t in frames:
        g_t, p_t = gt[t], pred[t]
        if g_t["frame"] != p_t["frame"]:
            raise ContractError(f"frame index mismatch at line {t}: {g_t['frame']} vs {p_t['frame']}")
        shape = tuple(g_t["size"])
        gts = {r["id"]: r for r in g_t["targets"]}
        row = {"frame": g_t["frame"], "targets": []}
        dets_p, dets_g = [], []
        for rec in p_t["targets"]:
            g = gts.get(rec["id"])
            if g is None:
                continue
            entry = {"id": rec["id"]}
            pp, pb = _pred_point(rec, shape), _pred_box(rec, shape)
            if pp is not None:
                acc["pt_p"].setdefault(rec["id"], []).append(pp)
                acc["pt_g"].setdefault(rec["id"], []).append(g["point"])
                entry["point_error"] = float(np.hypot(pp[0] - g["point"][0], pp[1] - g["point"][1]))
            if pb is not None and g.get("box") is not None:
                acc["box_p"].setdefault(rec["id"], []).append(pb)
                acc["box_g"].setdefault(rec["id"], []).append(g["box"])
                entry["iou"] = box_iou(pb, g["box"])
            if "rle" in rec and g.get("visible", True):
                pm, gm = rle_decode(rec["rle"], shape), rle_decode(g["rle"], shape)
                if gm.any():
                    entry["J"] = mask_jaccard(pm, gm)
                    entry["F"] = boundary_f(pm, gm, tol)
                    acc["J"].setdefault(rec["id"], []).append(entry["J"])
                    acc["F"].setdefault(rec["id"], []).append(entry["F"])
            dets_p.append(Detection(rec["id"], tuple(rec["box"]) if "box" in rec else None,
                                    tuple(pp) if pp is not None and "box" not in rec else None))
            row["targets"].append(entry)
        for g in g_t["targets"]:
            dets_g.append(Detection(g["id"], tuple(g["box"]) if g.get("box") else None, tuple(g["point"])))
        id_pred.append(dets_p)
        id_gt.append(dets_g)
        per_frame.append(row)

    def _flat(key):
        return [v for vals in acc[key].values() for v in vals]

    out: dict = {}
    if "point" in metrics and _flat("pt_p"):
        out["point"] = point_accuracy(_flat("pt_p"), _flat("pt_g"), thresholds)
    if "box" in metrics and _flat("box_p"):
        out["box_iou"] = box_iou_mean(_flat("box_p"), _flat("box_g"))
    if "mask" in metrics and _flat("J"):
        out["J"] = float(np.mean(_flat("J")))
    if "jf" in metrics and _flat("J"):
        out["F"] = float(np.mean(_flat("F")))
        out["JF"] = 0.5 * (out["F"] + float(np.mean(_flat("J"))))
    if "id" in metrics:
        rep = id_consistency(id_pred, id_gt, iou_gate)
        out["id"] = {"switches": rep.switches, "matches": rep.matches, "rate": rep.rate}
    return {"metrics": out, "per_frame": per_frame,
            "config": {"metrics": list(metrics), "thresholds": list(thresholds), "tol": tol,
                       "iou_gate": iou_gate, "skip_first": skip_first}}
