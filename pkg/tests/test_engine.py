import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from dintr import engine
from dintr import numerics as nx
from dintr.denoiser import Denoiser, DenoiserConfig
from dintr.engine import OperatorKind as K
from dintr.schedule import NoiseContext, from_betas, make_linear

CFG = DenoiserConfig(latent_channels=12, embed_dim=8, layers=1)
CLEAN = [K.FROM_NEXT, K.FROM_CURRENT, K.OFFSET_CLEAN]


def _perturbed(seed=0, scale=0.05):
    model = Denoiser(CFG, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for p in model.params.values():
        p.data = p.data + scale * rng.standard_normal(p.shape)
    return model


def _pair(seed=0, shape=(16, 12)):
    rng = np.random.default_rng(seed)
    return rng.standard_normal(shape), rng.standard_normal(shape), rng.standard_normal((2, 8))


# operators -------------------------------------------------------------------------

@given(st.integers(1, 60), st.data())
def test_offset_with_no_motion_is_stationary(T, data):
    k = data.draw(st.integers(1, T))
    z = np.random.default_rng(k).standard_normal(5)
    assert np.array_equal(engine.operator_step(K.OFFSET_CLEAN, z, z, z, make_linear(T), k), z)


def test_blend_endpoints():
    s = make_linear(6)
    z0, z1 = np.array([1.0, 2.0]), np.array([-3.0, 5.0])
    assert np.array_equal(engine.blend_at(z0, z1, s, 6), z0)
    assert np.array_equal(engine.blend_at(z0, z1, s, 0), z1)
    assert np.array_equal(engine.operator_step(K.BLEND, z0, z0, z1, s, 1), z1)


def test_offset_hand_sequence():
    tr = engine.interpolate(np.zeros(1), np.ones(1), None, make_linear(4), K.OFFSET_CLEAN, None)
    np.testing.assert_allclose(np.ravel(tr.latents), [0.0, 0.25, 0.5, 0.75, 1.0], rtol=0, atol=1e-15)


def test_operator_formulas_match_hand_values():
    s = make_linear(4)
    zk, z0, z1 = np.array([2.0]), np.array([1.0]), np.array([5.0])
    # k = 2: alpha_k = 1/2, alpha_{k-1} = 1/4
    assert engine.operator_step(K.FROM_NEXT, zk, z0, z1, s, 2)[0] == pytest.approx(5 + 0.5 * (2 - 5))
    assert engine.operator_step(K.FROM_CURRENT, zk, z0, z1, s, 2)[0] == pytest.approx(1 + 1.5 * (2 - 1))
    assert engine.operator_step(K.OFFSET_CLEAN, zk, z0, z1, s, 2)[0] == pytest.approx(2 + 0.25 * 4)


def test_unstable_boundaries():
    s = make_linear(5)
    z = np.ones(3)
    with pytest.raises(engine.InstabilityError):
        engine.operator_step(K.FROM_CURRENT, z, z, z, s, 5)
    np.testing.assert_array_equal(engine.guarded_step(K.FROM_CURRENT, 7 * z, z, 2 * z, s, 5),
                                  engine.blend_at(z, 2 * z, s, 4))
    with pytest.raises(IndexError):
        engine.operator_step(K.BLEND, z, z, z, s, 0)
    with pytest.raises(ValueError):
        engine.operator_step(K.OFFSET_NOISY, z, z, z, s, 2)


def test_noisy_offset_uses_seeded_q():
    s = make_linear(8)
    z0, z1, _ = _pair(3, (4, 12))
    ctx = NoiseContext(9, pair_index=1)
    got = engine.operator_step(K.OFFSET_NOISY, z0, z0, z1, s, 5, ctx)
    want = z0 - ctx.q(z0, 0, 5, s) + ctx.q(z1, 1, 4, s)
    np.testing.assert_allclose(got, want, rtol=1e-14, atol=1e-14)
    zero = NoiseContext(9, zero=True)
    clean = engine.operator_step(K.OFFSET_NOISY, z0, z0, z1, s, 1, zero)
    np.testing.assert_allclose(clean, z0 - math.sqrt(s.alpha_bar[1]) * z0 + z1, rtol=1e-14)


# interpolation ------------------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 2, 5, 50, 250])
def test_telescoping(T):
    z0, z1, _ = _pair(T)
    tr = engine.interpolate(z0, z1, None, make_linear(T), K.OFFSET_CLEAN, None)
    assert np.abs(tr.latents[-1] - z1).max() <= 1e-9


@pytest.mark.parametrize("seed", range(20))
def test_clean_operators_match_blend(seed):
    T = [1, 3, 10, 50][seed % 4]
    z0, z1, _ = _pair(seed)
    s = make_linear(T)
    ref = engine.interpolate(z0, z1, None, s, K.BLEND, None).latents
    for kind in CLEAN:
        got = engine.interpolate(z0, z1, None, s, kind, None).latents
        assert len(got) == T + 1
        assert max(float(np.abs(a - b).max()) for a, b in zip(got, ref)) <= 1e-9


@pytest.mark.parametrize("kind", [K.BLEND] + CLEAN)
def test_stationary_video(kind):
    z = np.random.default_rng(0).standard_normal((4, 12))
    tr = engine.interpolate(z, z, None, make_linear(7), kind, None, noise=NoiseContext(0, zero=True))
    for lat in tr.latents:
        np.testing.assert_allclose(lat, z, atol=1e-12)


def test_noisy_offset_does_not_telescope():
    """Each step adds Q(z1, k-1) - Q(z0, k); the two frames never cancel, so the sum grows with T."""
    z0, z1, _ = _pair(11)
    s = make_linear(20)
    tr = engine.interpolate(z0, z1, None, s, K.OFFSET_NOISY, None, noise=NoiseContext(0, zero=True))
    root = np.sqrt(s.alpha_bar)
    want = z0 + sum(root[k - 1] * z1 - root[k] * z0 for k in range(1, 21))
    np.testing.assert_allclose(tr.latents[-1], want, rtol=1e-12, atol=1e-12)
    assert np.abs(tr.latents[-1] - z1).max() > 0.1


def test_trace_structure_and_eval_count():
    z0, z1, tau = _pair()
    T = 6
    model = _perturbed()
    tr = engine.interpolate(z0, z1, tau, make_linear(T), K.OFFSET_CLEAN, model, capture=True)
    assert tr.T == T and len(tr.latents) == T + 1 and tr.evals == T == model.evals
    assert np.array_equal(tr.at(T), z0) and np.array_equal(tr.at(0), tr.final.data)
    assert sorted({r.step for r in tr.records}) == list(range(T))
    assert len(tr.records) == T * CFG.layers


def test_perturbed_start_response_per_operator():
    """Blend forgets a perturbed base case; the recurrences carry it as far as their factors allow."""
    z0, z1, _ = _pair(4)
    s = make_linear(10)
    bump = z0 + 1e-3
    runs = {k: (engine.interpolate(z0, z1, None, s, k, None).latents,
                engine.interpolate(z0, z1, None, s, k, None, start=bump).latents) for k in CLEAN + [K.BLEND]}
    a, b = runs[K.BLEND]
    assert all(np.array_equal(x, y) for x, y in zip(a[1:], b[1:]))
    a, b = runs[K.OFFSET_CLEAN]
    assert all(np.abs((y - x) - 1e-3).max() < 1e-12 for x, y in zip(a, b))
    # from_next scales the bump by alpha_{k-1} / alpha_k: it survives every step but the last
    a, b = runs[K.FROM_NEXT]
    np.testing.assert_allclose(b[5] - a[5], 1e-3 * 5 / 10, rtol=1e-9)
    assert np.abs(b[-1] - a[-1]).max() == 0.0
    # from_current's first step divides by zero and is served by the closed form
    a, b = runs[K.FROM_CURRENT]
    assert all(np.array_equal(x, y) for x, y in zip(a[1:], b[1:]))


@pytest.mark.parametrize("kind", CLEAN + [K.OFFSET_NOISY])
def test_trace_is_stepwise_chained(kind):
    z0, z1, tau = _pair(5)
    s = make_linear(5)
    model = _perturbed(2)
    ctx = NoiseContext(1)
    tr = engine.interpolate(z0, z1, tau, s, kind, model, noise=ctx)
    for k in range(s.T, 0, -1):
        again = engine.recompute_step(tr, k, z0, z1, tau, s, kind, model, ctx)
        assert again.tobytes() == tr.at(k - 1).tobytes()


# reconstruction -------------------------------------------------------------------------

@pytest.mark.parametrize("T", [1, 4, 50])
def test_reconstruct_eval_counts(T):
    z0, _, tau = _pair()
    model = Denoiser(CFG)
    tr = engine.reconstruct(z0, tau, make_linear(T), model)
    assert tr.evals == 2 * T == model.evals
    it = engine.interpolate(z0, z0, tau, make_linear(T), K.OFFSET_CLEAN, model)
    assert tr.evals / it.evals == 2
    closed = engine.reconstruct(z0, tau, make_linear(T), model, inversion="closed")
    assert closed.evals == T


@pytest.mark.parametrize("T", [1, 10, 50, 250])
def test_identity_inversion_round_trip(T):
    z0, _, _ = _pair(T)
    tr = engine.reconstruct(z0, None, make_linear(T), None)
    assert np.abs(tr.final.data - z0).max() <= 1e-9
    assert len(tr.denoised) == T
    np.testing.assert_allclose(tr.inverted, math.sqrt(make_linear(T).alpha_bar[T]) * z0, rtol=1e-12)


def test_reconstruct_records_are_labelled_by_target_step():
    z0, _, tau = _pair()
    tr = engine.reconstruct(z0, tau, make_linear(4), _perturbed(), capture=True)
    assert [r.step for r in tr.records] == [3, 2, 1, 0]


def test_ddim_move_round_trip(rng):
    s = make_linear(20)
    z, eps = rng.standard_normal((2, 6))
    there = engine.ddim_move(z, eps, s, 3, 11)
    np.testing.assert_allclose(engine.ddim_move(there, eps, s, 11, 3), z, rtol=1e-12)


# losses -------------------------------------------------------------------------------

def test_interpolation_loss_examples(rng):
    assert engine.interpolation_loss(np.ones(4), np.ones(4)).item() == 0.0
    assert engine.interpolation_loss(np.array([0.0]), np.array([2.0])).item() == 4.0
    a, b = rng.standard_normal((2, 3, 5))
    loop = sum((a[i, j] - b[i, j]) ** 2 for i in range(3) for j in range(5)) / 15
    assert engine.interpolation_loss(a, b).item() == pytest.approx(loop, rel=1e-14)


def test_reconstruction_loss_examples(rng):
    xs = list(rng.standard_normal((4, 3, 2)))
    assert engine.reconstruction_loss(xs, xs).item() == 0.0
    ys = list(rng.standard_normal((4, 3, 2)))
    loop = 0.0
    for x, y in zip(xs, ys):
        loop += sum((x[i, j] - y[i, j]) ** 2 for i in range(3) for j in range(2)) / 6
    assert engine.reconstruction_loss(xs, ys).item() == pytest.approx(loop, rel=1e-13)
    assert engine.reconstruction_loss(xs[:1], ys[:1]).item() == \
        engine.interpolation_loss(xs[0], ys[0]).item()
    with pytest.raises(ValueError):
        engine.reconstruction_loss(xs, ys[:2])


# finetuning ---------------------------------------------------------------------------

def test_finetune_with_zero_lr_is_inert():
    z0, z1, tau = _pair(6)
    model = _perturbed(3)
    res = engine.finetune(model, z0, z1, tau, make_linear(3), steps=4, lr=0.0, objective="chain")
    assert len(set(res.losses)) == 1
    for name, p in model.params.items():
        assert np.array_equal(p.data, res.model.params[name].data)


def test_finetune_leaves_input_model_untouched():
    z0, z1, tau = _pair(7)
    model = _perturbed(3)
    before = {k: p.data.copy() for k, p in model.params.items()}
    engine.finetune(model, z0, z1, tau, make_linear(3), steps=3, lr=1e-2, objective="chain")
    assert all(np.array_equal(before[k], model.params[k].data) for k in before)


def test_finetune_reduces_chain_loss():
    rng = np.random.default_rng(0)
    z0 = rng.standard_normal((16, 12))
    z1 = z0 + 0.3 * rng.standard_normal((16, 12))
    res = engine.finetune(_perturbed(0), z0, z1, rng.standard_normal((1, 8)), make_linear(4),
                          steps=50, lr=1e-3, objective="chain")
    assert res.losses[-1] < res.losses[0]


def test_reconstruct_finetune_improves_final_latent():
    rng = np.random.default_rng(1)
    z0 = rng.standard_normal((16, 12))
    z1 = z0 + 0.3 * rng.standard_normal((16, 12))
    tau = rng.standard_normal((1, 8))
    s, base, ctx = make_linear(4), Denoiser(CFG), NoiseContext(0, zero=True)

    def mse(m):
        out = engine.reconstruct(z0, tau, s, m, inversion_model=base, noise=ctx).final.data
        return float(np.mean((out - z1) ** 2))

    tuned = engine.finetune(base, z0, z1, tau, s, steps=50, lr=1e-3, process="reconstruct", noise=ctx).model
    assert mse(tuned) < mse(base)


def test_finetune_is_deterministic():
    z0, z1, tau = _pair(8)
    runs = [engine.finetune(_perturbed(1), z0, z1, tau, make_linear(5), steps=6, lr=1e-3,
                            kind=K.OFFSET_NOISY, seed=4).losses for _ in range(2)]
    assert runs[0] == runs[1]


def test_identity_step_objective_has_nothing_to_learn():
    """On the blend path the identity network is already exact; rounding noise must not move it."""
    z0, z1, tau = _pair(9)
    base = Denoiser(CFG)
    res = engine.finetune(base, z0, z1, tau, make_linear(10), steps=10, lr=1e-2)
    assert max(res.losses) < 1e-28
    for name, p in base.params.items():
        assert np.array_equal(p.data, res.model.params[name].data)


def test_finetune_divergence_is_reported():
    z0, z1, tau = _pair(10)
    with pytest.raises(engine.DivergenceError, match="step 0"), np.errstate(over="ignore"):
        engine.finetune(Denoiser(CFG), z0, z1 * 1e200, tau, make_linear(3), steps=2, lr=1e-3,
                        objective="chain")


def test_finetune_argument_errors():
    z0, z1, tau = _pair()
    with pytest.raises(ValueError):
        engine.finetune(Denoiser(CFG), z0, z1, tau, make_linear(3), steps=0)
    with pytest.raises(ValueError):
        engine.finetune(Denoiser(CFG), z0, z1, tau, make_linear(3), steps=1, process="sideways")


def test_adam_matches_hand_update():
    p = nx.Tensor(np.array([1.0]), requires_grad=True)
    opt = engine.Adam({"p": p}, lr=0.1)
    p.grad = np.array([2.0])
    opt.step()
    # first bias-corrected step is lr * sign(g) up to eps
    assert p.data[0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), rel=1e-14)


# stability -------------------------------------------------------------------------------

def test_stability_examples():
    s = make_linear(50)
    blend = engine.stability_probe(K.BLEND, s)
    assert set(blend.per_step.values()) == {0.0} and blend.cumulative == 0.0
    off = engine.stability_probe(K.OFFSET_CLEAN, s)
    assert all(v == pytest.approx(1.0, abs=1e-9) for v in off.per_step.values())
    assert off.cumulative == pytest.approx(1.0, abs=1e-9)
    nxt = engine.stability_probe(K.FROM_NEXT, s)
    assert nxt.per_step[1] == 0.0 and nxt.per_step[2] == pytest.approx(0.5, rel=1e-12)
    assert nxt.analytic == s.interp_weight[0] / s.interp_weight[50] == 0.0
    assert abs(nxt.cumulative - nxt.analytic) <= 1e-12
    cur = engine.stability_probe(K.FROM_CURRENT, s)
    assert math.isinf(cur.per_step[50]) and cur.per_step[49] == pytest.approx(2.0, rel=1e-12)
    with pytest.raises(ValueError):
        engine.stability_probe(K.BLEND, s, 0.0)


def test_from_next_product_on_a_custom_schedule():
    s = from_betas(np.full(8, 0.01))
    rep = engine.stability_probe(K.FROM_NEXT, s)
    prod = 1.0
    for k in range(8, 1, -1):
        prod *= rep.per_step[k]
    assert prod == pytest.approx(s.interp_weight[1] / s.interp_weight[8], rel=1e-12)
