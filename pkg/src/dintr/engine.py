"""Temporal processes between two frame latents.

All latents here are token matrices ``(n, C)``; the operators are
elementwise so the layout never matters.  ``interpolate`` walks from the
current latent to the next one with one of four interchangeable operators,
``reconstruct`` inverts to step T and denoises back (twice the network
evaluations).
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .denoiser import AttentionRecord, Denoiser
from .numerics import Tensor
from .schedule import NoiseContext, NoiseSchedule


class InstabilityError(ArithmeticError):
    """An operator would divide by a vanishing weight."""


class DivergenceError(RuntimeError):
    pass


class OperatorKind(str, enum.Enum):
    BLEND = "blend"
    FROM_NEXT = "from_next"
    FROM_CURRENT = "from_current"
    OFFSET_CLEAN = "offset_clean"
    OFFSET_NOISY = "offset_noisy"

    @property
    def accumulative(self) -> bool:
        return self is not OperatorKind.BLEND


def _lin(zk, coeff_zk: float, const: np.ndarray):
    """coeff_zk * zk + const for arrays or tape tensors (tensor stays on the left)."""
    if isinstance(zk, Tensor):
        return nx.add(nx.scale(zk, coeff_zk), Tensor(const))
    return coeff_zk * zk + const


def operator_step(kind: OperatorKind, zk, z_t0: np.ndarray, z_t1: np.ndarray,
                  schedule: NoiseSchedule, k: int, noise: NoiseContext | None = None):
    """One step from the step-k latent to the step-(k-1) latent."""
    kind = OperatorKind(kind)
    if not 1 <= k <= schedule.T:
        raise IndexError(f"operator step needs 1 <= k <= {schedule.T}, got {k}")
    a_k = float(schedule.interp_weight[k])
    a_prev = float(schedule.interp_weight[k - 1])
    if kind is OperatorKind.BLEND:
        out = blend_at(z_t0, z_t1, schedule, k - 1)
        return Tensor(out) if isinstance(zk, Tensor) else out
    if kind is OperatorKind.FROM_NEXT:
        if a_k == 0.0:
            raise InstabilityError(f"learning from the next frame divides by alpha_{k} = 0")
        r = a_prev / a_k
        return _lin(zk, r, (1.0 - r) * z_t1)
    if kind is OperatorKind.FROM_CURRENT:
        if a_k == 1.0:
            raise InstabilityError(f"learning from the current frame divides by 1 - alpha_{k} = 0")
        r = (1.0 - a_prev) / (1.0 - a_k)
        return _lin(zk, r, (1.0 - r) * z_t0)
    if kind is OperatorKind.OFFSET_CLEAN:
        return _lin(zk, 1.0, (a_k - a_prev) * (z_t1 - z_t0))
    if noise is None:
        raise ValueError("the noisy offset operator needs a noise context")
    offset = noise.q(z_t1, 1, k - 1, schedule) - noise.q(z_t0, 0, k, schedule)
    return _lin(zk, 1.0, offset)


def blend_at(z_t0, z_t1, schedule: NoiseSchedule, k: int) -> np.ndarray:
    """Closed-form intermediate latent at step k."""
    a = float(schedule.interp_weight[k])
    return a * z_t0 + (1.0 - a) * z_t1


def guarded_step(kind, zk, z_t0, z_t1, schedule, k, noise=None):
    """``operator_step`` with the closed-form blend at unstable boundary steps."""
    try:
        return operator_step(kind, zk, z_t0, z_t1, schedule, k, noise)
    except InstabilityError:
        return operator_step(OperatorKind.BLEND, zk, z_t0, z_t1, schedule, k, noise)


@dataclass
class InterpolationTrace:
    latents: list[np.ndarray]  # index i holds step T - i, so latents[0] is step T
    records: list[AttentionRecord] = field(default_factory=list)
    evals: int = 0
    final: Tensor | None = None

    @property
    def T(self) -> int:
        return len(self.latents) - 1

    def at(self, k: int) -> np.ndarray:
        return self.latents[self.T - k]


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def interpolate(z_t0: np.ndarray, z_t1: np.ndarray, tau, schedule: NoiseSchedule,
                kind: OperatorKind, model: Denoiser | None, capture: bool = False,
                noise: NoiseContext | None = None, start=None) -> InterpolationTrace:
    """Base case ``z_T = z_t0``; per step an operator move then one network call.

    The network is evaluated at steps T-1, ..., 0, so T calls in total.
    ``model=None`` stands for the identity network.  When a tape is active
    the chain is differentiable and ``trace.final`` carries it.
    """
    z = start if start is not None else z_t0
    if nx.active_tape() is not None and not isinstance(z, Tensor):
        z = Tensor(z)
    latents = [_data(z).copy()]
    records: list[AttentionRecord] = []
    evals = 0
    for k in range(schedule.T, 0, -1):
        z = guarded_step(kind, z, z_t0, z_t1, schedule, k, noise)
        if model is not None:
            z, recs = model(z, k - 1, tau, capture)
            records.extend(recs)
            evals += 1
        latents.append(_data(z).copy())
    return InterpolationTrace(latents, records, evals, z if isinstance(z, Tensor) else Tensor(z))


def recompute_step(trace: InterpolationTrace, k: int, z_t0, z_t1, tau, schedule, kind,
                   model: Denoiser | None, noise=None) -> np.ndarray:
    """Rebuild the stored step-(k-1) latent from the stored step-k latent."""
    z = guarded_step(kind, trace.at(k), z_t0, z_t1, schedule, k, noise)
    if model is not None:
        z, _ = model(z, k - 1, tau)
        z = z.data
    return np.asarray(z)


# reconstruction ------------------------------------------------------------------

def _eps_hat(model: Denoiser | None, z, k, tau, capture):
    """Noise estimate = residual of the network; zero for the identity network."""
    if model is None:
        zero = Tensor(np.zeros(z.shape)) if isinstance(z, Tensor) else np.zeros(np.shape(z))
        return zero, []
    out, recs = model(z, k, tau, capture)
    if isinstance(z, Tensor):
        return nx.sub(out, z), recs
    return out.data - z, recs


def ddim_move(z, eps, schedule: NoiseSchedule, k_from: int, k_to: int):
    """Deterministic move between noise levels given a noise estimate."""
    ab_f = float(schedule.alpha_bar[k_from])
    ab_t = float(schedule.alpha_bar[k_to])
    c_z = math.sqrt(ab_t / ab_f)
    c_e = math.sqrt(1.0 - ab_t) - c_z * math.sqrt(1.0 - ab_f)
    if isinstance(z, Tensor):
        return nx.add(nx.scale(z, c_z), nx.scale(eps, c_e))
    return c_z * z + c_e * eps


@dataclass
class ReconstructionTrace:
    inverted: np.ndarray  # latent at step T
    denoised: list[np.ndarray]  # steps T-1, ..., 0
    records: list[AttentionRecord] = field(default_factory=list)
    evals: int = 0
    final: Tensor | None = None


def reconstruct(z_t0: np.ndarray, tau, schedule: NoiseSchedule, model: Denoiser | None,
                capture: bool = False, inversion: str = "ddim",
                inversion_model: Denoiser | None = "same", noise: NoiseContext | None = None
                ) -> ReconstructionTrace:
    """Invert ``z_t0`` to step T, then denoise T steps back.

    ``inversion="ddim"`` spends one network call per inversion step (2T in
    total); ``"closed"`` jumps straight to ``Q(z_t0, T)`` and spends T.
    ``inversion_model`` defaults to ``model``; pass the pre-finetuning
    network to invert with the frozen weights.
    """
    inv_model = model if inversion_model == "same" else inversion_model
    evals = 0
    if inversion == "ddim":
        z = z_t0
        for k in range(schedule.T):
            eps, _ = _eps_hat(inv_model, z, k + 1, tau, False)
            evals += inv_model is not None
            z = ddim_move(z, eps, schedule, k, k + 1)
    elif inversion == "closed":
        ctx = noise or NoiseContext(0, zero=True)
        z = ctx.q(z_t0, 0, schedule.T, schedule)
    else:
        raise ValueError(f"unknown inversion mode {inversion!r}")
    inverted = _data(z).copy()
    if nx.active_tape() is not None and not isinstance(z, Tensor):
        z = Tensor(z)
    denoised, records = [], []
    for k in range(schedule.T, 0, -1):
        eps, recs = _eps_hat(model, z, k, tau, capture)
        evals += model is not None
        for r in recs:
            r.step = k - 1
        records.extend(recs)
        z = ddim_move(z, eps, schedule, k, k - 1)
        denoised.append(_data(z).copy())
    final = z if isinstance(z, Tensor) else Tensor(z)
    return ReconstructionTrace(inverted, denoised, records, evals, final)


# losses ------------------------------------------------------------------------------

def interpolation_loss(pred, target) -> Tensor:
    """Mean squared error between the predicted and the true next latent."""
    pred = nx.as_tensor(pred)
    target = nx.as_tensor(target)
    diff = nx.sub(pred, target)
    return nx.mean(nx.mul(diff, diff))


def reconstruction_loss(denoised, targets) -> Tensor:
    """Step-wise squared errors plus the final image term.

    ``denoised`` and ``targets`` list steps T-1, ..., 0; targets are the
    noised next-frame latents ``Q(z_t1, k-1)``.  The last pair is scored in
    pixel space; the codec is a permutation so that equals the latent MSE.
    """
    if len(denoised) != len(targets) or not denoised:
        raise ValueError(f"trace has {len(denoised)} steps, targets {len(targets)}")
    total = interpolation_loss(denoised[-1], targets[-1])
    for pred, tgt in zip(denoised[:-1], targets[:-1]):
        total = nx.add(total, interpolation_loss(pred, tgt))
    return total


# finetuning ----------------------------------------------------------------------------

class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = self.b1 * self.m[name] + (1 - self.b1) * g
            self.v[name] = self.b2 * self.v[name] + (1 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[name] / c1) / (np.sqrt(self.v[name] / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class FinetuneResult:
    model: Denoiser
    losses: list[float]


def _check_finite(loss: float, step: int, losses: list[float]) -> None:
    if not math.isfinite(loss):
        tail = ", ".join(f"{v:.4g}" for v in losses[-5:])
        raise DivergenceError(f"loss became {loss} at step {step}; last losses [{tail}]")


def rounding_floor(target) -> float:
    """Squared error below which a loss is float64 rounding of ``target``."""
    return (64 * np.finfo(np.float64).eps) ** 2 * float(np.mean(np.square(target)))


def finetune(model: Denoiser, z_t0: np.ndarray, z_t1: np.ndarray, tau, schedule: NoiseSchedule,
             steps: int = 500, lr: float = 3e-5, process: str = "interpolate",
             kind: OperatorKind = OperatorKind.OFFSET_CLEAN, noise: NoiseContext | None = None,
             seed: int = 0, objective: str = "step") -> FinetuneResult:
    """Adapt a copy of ``model`` to one frame pair; the input model is untouched.

    For ``interpolate`` the ``chain`` objective backpropagates the MSE of
    the full T-step endpoint (T calls per step); ``step`` draws k, feeds the
    blended step-k latent through one operator move and one network call and
    scores it against the blended step-(k-1) latent.
    ``reconstruct`` follows the in-place reconstruction recipe: each step
    draws k uniformly, noises the current latent to k, takes one denoising
    move and scores it against the next latent noised to k-1.
    """
    if steps < 1:
        raise ValueError("finetune needs at least one step")
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    tuned = model.copy()
    opt = Adam(tuned.params, lr)
    rng = np.random.default_rng([int(seed), 17])
    ctx = noise or NoiseContext(seed)
    losses: list[float] = []
    for step in range(steps):
        opt.zero_grad()
        with nx.Tape():
            if process == "interpolate" and objective == "chain":
                trace = interpolate(z_t0, z_t1, tau, schedule, kind, tuned, noise=ctx)
                target = z_t1
                loss = interpolation_loss(trace.final, target)
            elif process == "interpolate" and objective == "step":
                k = int(rng.integers(1, schedule.T + 1))
                zk = Tensor(blend_at(z_t0, z_t1, schedule, k))
                moved = guarded_step(kind, zk, z_t0, z_t1, schedule, k, ctx)
                pred, _ = tuned(moved, k - 1, tau)
                target = blend_at(z_t0, z_t1, schedule, k - 1)
                loss = interpolation_loss(pred, target)
            elif process == "reconstruct":
                k = int(rng.integers(1, schedule.T + 1))
                zk = Tensor(ctx.q(z_t0, 0, k, schedule))
                eps, _ = _eps_hat(tuned, zk, k, tau, False)
                pred = ddim_move(zk, eps, schedule, k, k - 1)
                target = ctx.q(z_t1, 1, k - 1, schedule)
                loss = interpolation_loss(pred, target)
            else:
                raise ValueError(f"unknown process/objective {process!r}/{objective!r}")
            value = loss.item()
            _check_finite(value, step, losses)
            losses.append(value)
            # Adam rescales gradients, so a loss at rounding level would
            # still move the weights by ~lr in an arbitrary direction
            if lr > 0 and value > rounding_floor(target):
                nx.backward(loss)
        if lr > 0:
            opt.step()
    tuned.evals = 0
    return FinetuneResult(tuned, losses)


# stability -------------------------------------------------------------------------------

@dataclass
class StabilityReport:
    kind: OperatorKind
    per_step: dict[int, float]  # k -> |d z_{k-1}| / |d z_k|
    cumulative: float  # response at step 0 to a perturbation of the base case
    analytic: float


def analytic_factor(kind: OperatorKind, schedule: NoiseSchedule, k: int) -> float:
    a = schedule.interp_weight
    if kind is OperatorKind.BLEND:
        return 0.0
    if kind is OperatorKind.FROM_NEXT:
        return a[k - 1] / a[k] if a[k] != 0 else math.inf
    if kind is OperatorKind.FROM_CURRENT:
        return (1 - a[k - 1]) / (1 - a[k]) if a[k] != 1 else math.inf
    return 1.0


def stability_probe(kind: OperatorKind, schedule: NoiseSchedule, perturbation: float = 1e-6
                    ) -> StabilityReport:
    """Perturb the step-k latent by ``perturbation`` and measure the step-(k-1) response.

    The operators are affine in the step-k latent, so running them on the
    all-zero pair isolates the response exactly.  Boundary steps that would
    divide by zero report an infinite factor and are served by the closed
    form in the full pass.
    """
    if perturbation <= 0:
        raise ValueError("perturbation must be positive")
    kind = OperatorKind(kind)
    zero = np.zeros(1)
    noise = NoiseContext(0, zero=True)
    per_step = {}
    for k in range(schedule.T, 0, -1):
        try:
            y = operator_step(kind, zero + perturbation, zero, zero, schedule, k, noise)
            per_step[k] = float(abs(y[0]) / perturbation)
        except InstabilityError:
            per_step[k] = math.inf
    run = interpolate(zero, zero, None, schedule, kind, None, noise=noise, start=zero + perturbation)
    cumulative = float(abs(run.latents[-1][0]) / perturbation)
    analytic = 1.0
    for k in range(schedule.T, 0, -1):
        f = analytic_factor(kind, schedule, k)
        analytic = 0.0 if not math.isfinite(f) else analytic * f
    return StabilityReport(kind, per_step, cumulative, float(analytic))
