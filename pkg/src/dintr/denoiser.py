"""Single-head token transformer used as the denoising / interpolation network.

The latent grid is flattened to ``n = h * w`` tokens of ``C`` channels.  Each
layer runs self-attention, cross-attention against the condition tokens and a
GELU MLP, each on a residual branch.  All residual branch outputs and the
final projection start at zero, so a freshly initialised network maps every
latent to itself while its attention maps are already informative.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


@dataclass(frozen=True)
class DenoiserConfig:
    latent_channels: int = 48
    embed_dim: int = 32
    layers: int = 2
    mlp_ratio: int = 4
    cond_tokens: int = 1  # informational; parameters do not depend on it
    sink: bool = True  # zero-logit column appended to every cross-attention row
    basis_seed: int = 7
    norm_eps: float = 1e-6
    qk_norm: bool = True  # unit-length query/key rows: scores become scaled cosines
    qk_scale: float = 4.0  # softmax temperature when qk_norm is on
    pos_gain: float = 0.75  # grid position added to self-attention queries/keys only

    def __post_init__(self):
        if self.embed_dim <= 0 or self.layers < 1 or self.latent_channels <= 0:
            raise ValueError(f"invalid denoiser config {self}")


@dataclass
class AttentionRecord:
    layer: int
    step: int
    self_map: np.ndarray
    cross_map: np.ndarray
    sink: bool = False

    @property
    def condition_columns(self) -> np.ndarray:
        return self.cross_map[:, :-1] if self.sink else self.cross_map


def feature_basis(channels: int, dim: int, seed: int) -> np.ndarray:
    """Seeded ``channels x dim`` projection shared by the embedding and the condition tokens."""
    rng = np.random.default_rng([int(seed), channels, dim])
    bound = 1.0 / math.sqrt(channels)
    return rng.uniform(-bound, bound, size=(channels, dim))


def timestep_embedding(k: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / max(half, 1))
    ang = k * freqs
    emb = np.concatenate([np.sin(ang), np.cos(ang)])
    if dim % 2:
        emb = np.concatenate([emb, [0.0]])
    return emb[None, :]


def grid_shape(n: int) -> tuple[int, int]:
    """Most square factorisation ``rows * cols = n`` with rows <= cols."""
    rows = max(r for r in range(1, math.isqrt(n) + 1) if n % r == 0)
    return rows, n // rows


def position_table(n: int, dim: int) -> np.ndarray:
    """Sinusoids of the row and column index, ``dim / 2`` channels each."""
    rows, cols = grid_shape(n)
    ys, xs = np.divmod(np.arange(n), cols)
    f = max(dim // 4, 1)
    freqs = 1.0 / (16.0 ** (np.arange(f) / f))
    parts = [np.sin(xs[:, None] * freqs), np.cos(xs[:, None] * freqs),
             np.sin(ys[:, None] * freqs), np.cos(ys[:, None] * freqs)]
    table = np.concatenate(parts, axis=1)[:, :dim]
    if table.shape[1] < dim:
        table = np.concatenate([table, np.zeros((n, dim - table.shape[1]))], axis=1)
    return table


def _shapes(cfg: DenoiserConfig) -> dict[str, tuple[int, ...]]:
    C, d, hid = cfg.latent_channels, cfg.embed_dim, cfg.embed_dim * cfg.mlp_ratio
    shapes = {"in.w": (C, d), "in.b": (1, d), "time.w": (d, d)}
    for l in range(cfg.layers):
        for branch in ("self", "cross"):
            for name in ("q", "k", "v", "o"):
                shapes[f"l{l}.{branch}.{name}"] = (d, d)
        shapes[f"l{l}.mlp.w1"] = (d, hid)
        shapes[f"l{l}.mlp.b1"] = (1, hid)
        shapes[f"l{l}.mlp.w2"] = (hid, d)
        shapes[f"l{l}.mlp.b2"] = (1, d)
    shapes["out.w"] = (d, C)
    shapes["out.b"] = (1, C)
    return shapes


def param_count(cfg: DenoiserConfig) -> int:
    return sum(int(np.prod(s)) for s in _shapes(cfg).values())


_ZERO = ("in.b", "time.w", ".o", ".b1", ".w2", ".b2", "out.w", "out.b")


def init_params(cfg: DenoiserConfig, seed: int = 0) -> dict[str, Tensor]:
    """Uniform +-1/sqrt(fan_in) weights; zeros on every residual output.

    Key projections start as copies of the matching query projections so the
    first attention scores are feature similarities.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in _shapes(cfg).items():
        if name.endswith(_ZERO):
            params[name] = np.zeros(shape)
        elif name.endswith(".k"):
            params[name] = params[name[:-1] + "q"].copy()
        else:
            bound = 1.0 / math.sqrt(shape[0])
            params[name] = rng.uniform(-bound, bound, size=shape)
    params["in.w"] = feature_basis(cfg.latent_channels, cfg.embed_dim, cfg.basis_seed)
    return {k: Tensor(v, requires_grad=True) for k, v in params.items()}


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {k: Tensor(v.data.copy(), requires_grad=True) for k, v in params.items()}


def standardize(x: Tensor, eps: float) -> Tensor:
    """Per-channel standardisation across the token grid."""
    n = x.shape[0]
    ones = Tensor(np.ones((n, 1)))
    centred = nx.sub(x, ones @ nx.mean(x, axis=0))
    var = nx.mean(nx.mul(centred, centred), axis=0)
    inv = nx.reciprocal(nx.sqrt(nx.add_scalar(var, eps)))
    return nx.mul(centred, ones @ inv)


def standardize_array(x: np.ndarray, eps: float) -> np.ndarray:
    c = x - x.mean(axis=0, keepdims=True)
    return c / np.sqrt((c * c).mean(axis=0, keepdims=True) + eps)


def rownorm(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale every row to unit length."""
    d = x.shape[1]
    sq = nx.mul(x, x) @ Tensor(np.ones((d, 1)))
    inv = nx.reciprocal(nx.sqrt(nx.add_scalar(sq, eps)))
    return nx.mul(x, inv @ Tensor(np.ones((1, d))))


def _scores(q: Tensor, k: Tensor, cfg: DenoiserConfig) -> tuple[Tensor, float]:
    if cfg.qk_norm:
        return rownorm(q) @ nx.transpose(rownorm(k)), cfg.qk_scale
    return q @ nx.transpose(k), 1.0 / math.sqrt(cfg.embed_dim)


class Denoiser:
    """Parameters plus configuration; counts network evaluations."""

    def __init__(self, cfg: DenoiserConfig, params: dict[str, Tensor] | None = None, seed: int = 0):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, seed)
        self.evals = 0

    def copy(self) -> "Denoiser":
        return Denoiser(self.cfg, clone_params(self.params))

    def __call__(self, tokens, k: int, tau, capture: bool = False):
        self.evals += 1
        if nx.active_tape() is None:
            out, records = forward_array(self.params, self.cfg, tokens, k, tau, capture)
            return Tensor(out), records
        return forward(self.params, self.cfg, tokens, k, tau, capture)

    def save(self, directory) -> None:
        save_params(directory, self.params, self.cfg)

    @classmethod
    def load(cls, directory) -> "Denoiser":
        params, cfg = load_params(directory)
        return cls(cfg, params)


def forward(params: dict[str, Tensor], cfg: DenoiserConfig, tokens, k: int, tau,
            capture: bool = False) -> tuple[Tensor, list[AttentionRecord]]:
    """One network evaluation on ``(n, C)`` tokens with ``(m, d)`` condition tokens."""
    x = nx.as_tensor(tokens)
    tau = nx.as_tensor(tau)
    d = cfg.embed_dim
    if x.ndim != 2 or x.shape[1] != cfg.latent_channels:
        raise ShapeError(f"tokens must be (n, {cfg.latent_channels}), got {x.shape}")
    if tau.ndim != 2 or tau.shape[0] == 0 or tau.shape[1] != d:
        raise ShapeError(f"condition tokens must be (m>0, {d}), got {tau.shape}")
    n, m = x.shape[0], tau.shape[0]
    ones = Tensor(np.ones((n, 1)))
    P = params

    temb = Tensor(timestep_embedding(k, d)) @ P["time.w"]
    h = standardize(x, cfg.norm_eps) @ P["in.w"] + ones @ nx.add(P["in.b"], temb)

    pos = Tensor(cfg.pos_gain * position_table(n, d)) if cfg.pos_gain else None
    records = []
    for l in range(cfg.layers):
        hp = h + pos if pos is not None else h
        q = hp @ P[f"l{l}.self.q"]
        kk = hp @ P[f"l{l}.self.k"]
        v = h @ P[f"l{l}.self.v"]
        scores, temp = _scores(q, kk, cfg)
        A = nx.softmax_rows(scores, temp)
        h = h + (A @ v) @ P[f"l{l}.self.o"]

        qx = h @ P[f"l{l}.cross.q"]
        kx = tau @ P[f"l{l}.cross.k"]
        vx = tau @ P[f"l{l}.cross.v"]
        scores, temp = _scores(qx, kx, cfg)
        if cfg.sink:
            scores = nx.concat([scores, Tensor(np.zeros((n, 1)))], axis=1)
        X = nx.softmax_rows(scores, temp)
        Xc = nx.slice(X, 0, m, axis=1) if cfg.sink else X
        h = h + (Xc @ vx) @ P[f"l{l}.cross.o"]

        hid = nx.gelu(h @ P[f"l{l}.mlp.w1"] + ones @ P[f"l{l}.mlp.b1"])
        h = h + hid @ P[f"l{l}.mlp.w2"] + ones @ P[f"l{l}.mlp.b2"]

        if capture:
            records.append(AttentionRecord(l, k, A.data.copy(), X.data.copy(), cfg.sink))

    out = x + h @ P["out.w"] + ones @ P["out.b"]
    return out, records


def _softmax(a: np.ndarray, scale: float) -> np.ndarray:
    if not np.all(np.isfinite(a)):
        raise nx.NumericError("softmax_rows input is not finite")
    s = a * scale
    e = np.exp(s - s.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _rownorm(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    sq = (x * x) @ np.ones((x.shape[1], 1))
    return x * (1.0 / np.sqrt(sq + eps))


def _scores_array(q: np.ndarray, k: np.ndarray, cfg: DenoiserConfig) -> tuple[np.ndarray, float]:
    if cfg.qk_norm:
        return _rownorm(q) @ _rownorm(k).T.copy(), cfg.qk_scale
    return q @ k.T.copy(), 1.0 / math.sqrt(cfg.embed_dim)


def _gelu(a: np.ndarray) -> np.ndarray:
    inner = (a + ((a * a) * a) * 0.044715) * math.sqrt(2.0 / math.pi)
    return (a * (np.tanh(inner) + 1.0)) * 0.5


def forward_array(params: dict[str, Tensor], cfg: DenoiserConfig, tokens, k: int, tau,
                  capture: bool = False) -> tuple[np.ndarray, list[AttentionRecord]]:
    """Inference-only twin of :func:`forward` on plain arrays.

    Performs the same floating-point operations in the same order, so the
    output matches the taped path bit for bit at a fraction of the cost.
    """
    x = np.asarray(tokens.data if isinstance(tokens, Tensor) else tokens, dtype=np.float64)
    tau = np.asarray(tau.data if isinstance(tau, Tensor) else tau, dtype=np.float64)
    d = cfg.embed_dim
    if x.ndim != 2 or x.shape[1] != cfg.latent_channels:
        raise ShapeError(f"tokens must be (n, {cfg.latent_channels}), got {x.shape}")
    if tau.ndim != 2 or tau.shape[0] == 0 or tau.shape[1] != d:
        raise ShapeError(f"condition tokens must be (m>0, {d}), got {tau.shape}")
    n, m = x.shape[0], tau.shape[0]
    P = {name: t.data for name, t in params.items()}

    temb = timestep_embedding(k, d) @ P["time.w"]
    c = x - x.sum(axis=0, keepdims=True) * (1.0 / n)
    var = (c * c).sum(axis=0, keepdims=True) * (1.0 / n)
    h = (c * (1.0 / np.sqrt(var + cfg.norm_eps))) @ P["in.w"] + (P["in.b"] + temb)

    pos = cfg.pos_gain * position_table(n, d) if cfg.pos_gain else None
    records = []
    for l in range(cfg.layers):
        hp = h + pos if pos is not None else h
        scores, temp = _scores_array(hp @ P[f"l{l}.self.q"], hp @ P[f"l{l}.self.k"], cfg)
        A = _softmax(scores, temp)
        h = h + (A @ (h @ P[f"l{l}.self.v"])) @ P[f"l{l}.self.o"]

        scores, temp = _scores_array(h @ P[f"l{l}.cross.q"], tau @ P[f"l{l}.cross.k"], cfg)
        if cfg.sink:
            scores = np.concatenate([scores, np.zeros((n, 1))], axis=1)
        X = _softmax(scores, temp)
        Xc = X[:, :m].copy() if cfg.sink else X
        h = h + (Xc @ (tau @ P[f"l{l}.cross.v"])) @ P[f"l{l}.cross.o"]

        hid = _gelu(h @ P[f"l{l}.mlp.w1"] + P[f"l{l}.mlp.b1"])
        h = h + hid @ P[f"l{l}.mlp.w2"] + P[f"l{l}.mlp.b2"]

        if capture:
            records.append(AttentionRecord(l, k, A.copy(), X.copy(), cfg.sink))

    return x + h @ P["out.w"] + P["out.b"], records


def save_params(directory, params: dict[str, Tensor], cfg: DenoiserConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"config": asdict(cfg), "tensors": {}}
    for name, t in params.items():
        fname = name.replace(".", "_") + ".dtnr"
        nx.save_dtnr(directory / fname, t.data)
        manifest["tensors"][name] = {"file": fname, "shape": list(t.shape)}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_params(directory) -> tuple[dict[str, Tensor], DenoiserConfig]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    cfg = DenoiserConfig(**manifest["config"])
    params = {}
    for name, meta in manifest["tensors"].items():
        arr = nx.load_dtnr(directory / meta["file"])
        if list(arr.shape) != meta["shape"]:
            raise ShapeError(f"{name}: file shape {arr.shape} != manifest {meta['shape']}")
        params[name] = Tensor(arr, requires_grad=True)
    return params, cfg
