"""Self-check suite: algebraic identities, attention invariants and gradients.

Each check returns a :class:`Check` with the measured quantity and the
tolerance it was held to.  Mutations deliberately break one piece of the
engine so that the suite can be shown to catch it.
"""
from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import conditioning as cond
from . import engine, extraction
from . import numerics as nx
from .codec import decode, encode
from .denoiser import Denoiser, DenoiserConfig
from .schedule import make_linear


@dataclass
class Check:
    name: str
    passed: bool
    measured: float
    tolerance: float
    detail: str = ""

    def as_dict(self) -> dict:
        return asdict(self)


def _check(name, measured, tol, detail="", below=True) -> Check:
    ok = bool(measured <= tol) if below else bool(measured >= tol)
    return Check(name, ok, float(measured), float(tol), detail)


CLEAN_KINDS = ("blend", "from_next", "from_current", "offset_clean")


def check_operator_equivalence(pairs: int = 20, T: int = 50, seed: int = 0) -> Check:
    rng = np.random.default_rng(seed)
    s = make_linear(T)
    worst, where = 0.0, ""
    for _ in range(pairs):
        z0, z1 = rng.standard_normal((2, 8, 6))
        ref = engine.interpolate(z0, z1, None, s, "blend", None).latents
        for kind in CLEAN_KINDS[1:]:
            got = engine.interpolate(z0, z1, None, s, kind, None).latents
            err = max(float(np.abs(a - b).max()) for a, b in zip(got, ref))
            if err > worst:
                worst, where = err, kind
    return _check("operator_equivalence", worst, 1e-9, f"max-abs vs blend, worst operator {where or '-'}")


def check_telescoping() -> Check:
    rng = np.random.default_rng(1)
    worst = 0.0
    for T in (1, 5, 50, 250):
        z0, z1 = rng.standard_normal((2, 4, 5))
        tr = engine.interpolate(z0, z1, None, make_linear(T), "offset_clean", None)
        worst = max(worst, float(np.abs(tr.latents[-1] - z1).max()))
    return _check("offset_telescoping", worst, 1e-9, "T in {1, 5, 50, 250}")


def check_from_next_amplification() -> Check:
    rep = engine.stability_probe("from_next", make_linear(50))
    return _check("from_next_cumulative_amplification", abs(rep.cumulative - rep.analytic), 1e-12,
                  f"measured {rep.cumulative} vs analytic {rep.analytic}")


def check_bounded_amplification() -> Check:
    s = make_linear(50)
    worst = 0.0
    for kind in ("blend", "offset_clean"):
        rep = engine.stability_probe(kind, s)
        worst = max(worst, max(rep.per_step.values()), rep.cumulative)
    return _check("blend_offset_amplification", worst, 1 + 1e-12, "max per-step and cumulative factor")


def check_eval_counts() -> Check:
    T = 6
    s = make_linear(T)
    model = Denoiser(DenoiserConfig(latent_channels=12, embed_dim=8, layers=1))
    z0, z1 = np.random.default_rng(2).standard_normal((2, 16, 12))
    tau = np.ones((1, 8))
    a = engine.interpolate(z0, z1, tau, s, "offset_clean", model).evals
    b = engine.reconstruct(z0, tau, s, model).evals
    miss = abs(a - T) + abs(b - 2 * T)
    return _check("network_eval_counts", miss, 0, f"interpolate {a} (want {T}), reconstruct {b} (want {2 * T})")


def check_inverse_pair() -> Check:
    z0 = np.random.default_rng(3).standard_normal((10, 12))
    tr = engine.reconstruct(z0, None, make_linear(50), None)
    return _check("identity_inversion_round_trip", float(np.abs(tr.final.data - z0).max()), 1e-9)


def _captured(seed=4, T=5):
    model = Denoiser(DenoiserConfig(latent_channels=12, embed_dim=8, layers=2), seed=seed)
    rng = np.random.default_rng(seed)
    z0, z1 = rng.standard_normal((2, 16, 12))
    tau = rng.standard_normal((3, 8))
    return engine.interpolate(z0, z1, tau, make_linear(T), "offset_clean", model, capture=True)


def check_row_stochastic() -> Check:
    tr = _captured()
    worst = 0.0
    for r in tr.records:
        for m in (r.self_map, r.cross_map):
            worst = max(worst, float(np.abs(m.sum(axis=1) - 1).max()))
            if m.min() < 0:
                worst = math.inf
    return _check("attention_row_stochastic", worst, 1e-9, f"{len(tr.records)} records")


def check_window() -> Check:
    worst = 0
    for T in (1, 5, 10, 50, 250):
        got = len(extraction.window_steps(T, 0.8))
        want = math.ceil(0.8 * T - 1e-9)
        worst = max(worst, abs(got - want))
    tr = _captured(T=10)
    acc = extraction.accumulate(tr.records, 2, 10)
    worst = max(worst, abs(acc.count - 2 * 8))
    return _check("window_step_count", worst, 0, "ceil(0.8 T) steps, N layers each")


def check_fused_range() -> Check:
    tr = _captured()
    acc = extraction.accumulate(tr.records, 2, 5)
    worst = 0.0
    for v in acc.per_target([(0, 1), (1, 2)]):
        for mode in ("propagate", "elementwise"):
            f = extraction.fuse(acc.self_map, v, (4, 4), 4, mode, 4)
            worst = max(worst, max(0.0, -float(f.map.min())), max(0.0, float(f.map.max()) - 1))
    return _check("fused_saliency_in_unit_range", worst, 0.0)


def check_readout(maps: int = 200, seed: int = 5) -> Check:
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(maps):
        sal = rng.random((6, 7)) ** 3
        lo, hi = sorted(rng.random(2))
        a, b = extraction.to_segment(sal, lo).mask, extraction.to_segment(sal, hi).mask
        bad += int(np.any(b & ~a))
        box = extraction.to_box(sal, hi).as_list()
        ys, xs = np.nonzero(b)
        bad += int(box != [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1])
    return _check("segment_nesting_box_minimality", bad, 0, f"{maps} random maps")


def check_primitive_gradients(seeds: int = 5) -> Check:
    worst = 0.0
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        a = nx.Tensor(rng.standard_normal((3, 4)), requires_grad=True)
        b = nx.Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        c = nx.Tensor(rng.standard_normal((3, 3)))

        def f():
            with nx.Tape():
                m = nx.softmax_rows(nx.gelu(a @ b), 0.7)
                out = nx.sum(nx.mul(m, c))
            return out

        with nx.Tape():
            m = nx.softmax_rows(nx.gelu(a @ b), 0.7)
            loss = nx.sum(nx.mul(m, c))
            a.grad = b.grad = None
            nx.backward(loss)
        for t in (a, b):
            num = nx.numeric_grad(lambda: f().item(), t)
            worst = max(worst, nx.rel_error(t.grad, num))
    return _check("primitive_gradcheck", worst, 1e-4, f"{seeds} seeds, matmul/gelu/softmax chain")


def check_loss_gradient() -> Check:
    cfg = DenoiserConfig(latent_channels=12, embed_dim=8, layers=1)
    model = Denoiser(cfg, seed=1)
    rng = np.random.default_rng(6)
    for p in model.params.values():  # leave the identity point so gradients are non-trivial
        p.data = p.data + 0.05 * rng.standard_normal(p.shape)
    z0, z1 = rng.standard_normal((2, 9, 12))
    tau = rng.standard_normal((2, 8))
    s = make_linear(3)

    def loss_value():
        tr = engine.interpolate(z0, z1, tau, s, "offset_clean", model)
        return float(np.mean((tr.latents[-1] - z1) ** 2))

    with nx.Tape():
        tr = engine.interpolate(z0, z1, tau, s, "offset_clean", model)
        loss = engine.interpolation_loss(tr.final, z1)
        for p in model.params.values():
            p.grad = None
        nx.backward(loss)
    worst = 0.0
    for name in ("l0.self.q", "l0.cross.o", "out.w", "l0.mlp.w1"):
        p = model.params[name]
        worst = max(worst, nx.rel_error(p.grad, nx.numeric_grad(loss_value, p)))
    return _check("end_to_end_loss_gradcheck", worst, 1e-4, "full-chain interpolation loss")


def check_codec_round_trip() -> Check:
    f = np.random.default_rng(7).random((16, 12, 3))
    return _check("codec_round_trip", float(np.abs(decode(encode(f)) - f).max()), 0.0)


def check_pack_split() -> Check:
    rng = np.random.default_rng(8)
    parts = [rng.standard_normal((n, 5)) for n in (1, 3, 2)]
    packed = cond.pack_targets(parts)
    err = max(float(np.abs(a - b).max()) for a, b in zip(packed.split(), parts))
    return _check("pack_split_round_trip", err, 0.0)


def check_schedule() -> Check:
    s = make_linear(50)
    bad = int(s.alpha_bar[0] != 1.0) + int(np.any(np.diff(s.alpha_bar) >= 0))
    bad += int(s.interp_weight[0] != 0.0 or s.interp_weight[-1] != 1.0)
    return _check("schedule_shape", bad, 0, "alpha_bar starts at 1 and decreases; k/T spans [0, 1]")


CHECKS = [check_operator_equivalence, check_telescoping, check_from_next_amplification,
          check_bounded_amplification, check_eval_counts, check_inverse_pair, check_row_stochastic,
          check_window, check_fused_range, check_readout, check_primitive_gradients,
          check_loss_gradient, check_codec_round_trip, check_pack_split, check_schedule]


# mutations --------------------------------------------------------------------------

@contextlib.contextmanager
def _flip_from_next():
    original = engine.operator_step

    def flipped(kind, zk, z_t0, z_t1, schedule, k, noise=None):
        if engine.OperatorKind(kind) is engine.OperatorKind.FROM_NEXT:
            r = schedule.interp_weight[k - 1] / schedule.interp_weight[k]
            return engine._lin(zk, -r, (1.0 + r) * z_t1)
        return original(kind, zk, z_t0, z_t1, schedule, k, noise)

    engine.operator_step = flipped
    try:
        yield
    finally:
        engine.operator_step = original


@contextlib.contextmanager
def _offset_half_step():
    original = engine.operator_step

    def halved(kind, zk, z_t0, z_t1, schedule, k, noise=None):
        if engine.OperatorKind(kind) is engine.OperatorKind.OFFSET_CLEAN:
            return engine._lin(zk, 1.0, 0.5 * (z_t1 - z_t0) / schedule.T)
        return original(kind, zk, z_t0, z_t1, schedule, k, noise)

    engine.operator_step = halved
    try:
        yield
    finally:
        engine.operator_step = original


MUTATIONS = {"from_next_sign_flip": _flip_from_next, "offset_half_step": _offset_half_step}


def run_checks(mutation: str | None = None) -> list[Check]:
    if mutation is not None and mutation not in MUTATIONS:
        raise KeyError(f"unknown mutation {mutation!r}; choose from {sorted(MUTATIONS)}")
    ctx = MUTATIONS[mutation]() if mutation else contextlib.nullcontext()
    results = []
    with ctx:
        for fn in CHECKS:
            try:
                results.append(fn())
            except Exception as e:  # a crashing check is a failing check
                results.append(Check(fn.__name__.removeprefix("check_"), False, math.nan, math.nan,
                                     f"{type(e).__name__}: {e}"))
    return results
