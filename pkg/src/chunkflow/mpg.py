"""Manifold-preserving gating.

A reliability gate ``g = exp(-D / tau)`` is computed from the sliced
Wasserstein discrepancy between the layer-normalised, projected suffix
features and a noise-free action anchor. The gate scales only the
feature-conditioned residual ``W E_obs(H)``; the bias ``b`` is always added.
The gate is a constant for differentiation (stop-gradient).
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from ._rng import stream
from .errors import DivergenceError
from .flow_policy import ActionChunk, ContextFeatures, TrainConfig, VelocityNet, _Batchable, euler_denoise, sample_training_batch

log = logging.getLogger(__name__)

GATE_FLOOR = 1e-300
LN_EPS = 1e-5


@dataclass
class MpgParams:
    E_obs: np.ndarray  # (d_emb, d_model)
    E_act: np.ndarray  # (d_emb, d_model)
    W: np.ndarray  # (d_model, d_emb)
    b: np.ndarray  # (d_model,)
    lam: float = 0.1
    tau: float = 1.0
    n_slices: int = 32
    slice_seed: int = 0

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not self.lam >= 0:
            raise ValueError("lambda must be >= 0 (0 disables the residual)")
        if self.n_slices < 1:
            raise ValueError("need at least one slice")

    @classmethod
    def init(cls, d_model: int, d_emb: int = 32, lam: float = 0.1, tau: float = 1.0,
             n_slices: int = 32, seed: int = 0, w_scale: float = 0.1, tied: bool = False) -> "MpgParams":
        """Random projections; ``tied`` starts ``E_obs`` as a copy of ``E_act``."""
        rng = stream(seed, "mpg-init")
        E_obs = rng.standard_normal((d_emb, d_model)) / np.sqrt(d_model)
        E_act = E_obs.copy() if tied else rng.standard_normal((d_emb, d_model)) / np.sqrt(d_model)
        return cls(
            E_obs=E_obs,
            E_act=E_act,
            W=w_scale * rng.standard_normal((d_model, d_emb)) / np.sqrt(d_emb),
            b=np.zeros(d_model),
            lam=lam, tau=tau, n_slices=n_slices, slice_seed=seed,
        )

    @property
    def d_emb(self) -> int:
        return self.E_obs.shape[0]

    def copy(self) -> "MpgParams":
        return replace(self, E_obs=self.E_obs.copy(), E_act=self.E_act.copy(), W=self.W.copy(), b=self.b.copy())


@dataclass(frozen=True)
class GateDiagnostics:
    D: float
    g: float
    anchor: np.ndarray = field(repr=False)

    def to_json(self) -> dict:
        return {"D": self.D, "g": self.g}


def layer_norm(X, eps: float = LN_EPS) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    mu = X.mean(axis=-1, keepdims=True)
    var = X.var(axis=-1, keepdims=True)
    return (X - mu) / np.sqrt(var + eps)


def action_anchor(action_embeds) -> np.ndarray:
    Z = np.asarray(action_embeds, dtype=float)
    if Z.ndim != 2 or Z.shape[0] == 0:
        raise ValueError("anchor needs at least one action embedding row")
    return Z.mean(axis=0)


def slice_directions(d_emb: int, n_slices: int, seed: int) -> np.ndarray:
    """Unit directions, Gaussian then normalised; replayed from ``seed`` on every call."""
    th = stream(seed, "swd-slices").standard_normal((n_slices, d_emb))
    return th / np.linalg.norm(th, axis=1, keepdims=True)


def swd(H_hat, Z_hat, n_slices: int = 32, seed: int = 0, directions=None) -> float:
    """``(1/M) sum_m ||sort(H theta_m) - sort(Z theta_m)||^2``."""
    H = np.asarray(H_hat, dtype=float)
    Z = np.asarray(Z_hat, dtype=float)
    if H.ndim != 2 or H.shape != Z.shape:
        raise ValueError(f"swd needs equal-shape matrices, got {H.shape} and {Z.shape}")
    th = slice_directions(H.shape[1], n_slices, seed) if directions is None else np.asarray(directions, float)
    if th.ndim != 2 or th.shape[1] != H.shape[1]:
        raise ValueError("slice directions do not match the embedding width")
    ph = np.sort(H @ th.T, axis=0)
    pz = np.sort(Z @ th.T, axis=0)
    return float(np.mean(np.sum((ph - pz) ** 2, axis=0)))


def gate(D: float, tau: float) -> float:
    if D < 0:
        raise ValueError("discrepancy must be >= 0")
    if not tau > 0:
        raise ValueError("tau must be > 0")
    return max(float(np.exp(-D / tau)), GATE_FLOOR)


def discrepancy(suffix_tokens, anchor, params: MpgParams) -> float:
    S = np.asarray(suffix_tokens, dtype=float)
    H_hat = layer_norm(S @ params.E_obs.T)
    z_hat = layer_norm(params.E_act @ np.asarray(anchor, float))
    Z_hat = np.broadcast_to(z_hat, H_hat.shape)
    return swd(H_hat, Z_hat, params.n_slices, params.slice_seed)


def enhance(ctx: ContextFeatures, g: float, params: MpgParams) -> ContextFeatures:
    """``H + lam*g*W E_obs(H) + lam*b`` on the suffix rows; prefix rows untouched."""
    tokens = ctx.tokens.copy()
    sl = ctx.suffix()
    S = tokens[sl]
    tokens[sl] = S + params.lam * g * (S @ params.E_obs.T) @ params.W.T + params.lam * params.b
    return ctx.replace_tokens(tokens)


def gate_for(ctx: ContextFeatures, anchor, params: MpgParams) -> GateDiagnostics:
    D = discrepancy(ctx.tokens[ctx.suffix()], anchor, params)
    return GateDiagnostics(D, gate(D, params.tau), np.asarray(anchor))


class GatedField:
    """Wraps a field so every evaluation sees gate-enhanced suffix features."""

    def __init__(self, field, params: MpgParams, anchor, always_on: bool = False):
        self.field = field
        self.params = params
        self.anchor = np.asarray(anchor, dtype=float)
        self.always_on = always_on
        self.diagnostics: list[GateDiagnostics] = []

    def velocity(self, x, t, ctx: ContextFeatures):
        cond = self.field.condition(x, t, ctx) if hasattr(self.field, "condition") else ctx
        if self.always_on:
            diag = GateDiagnostics(0.0, 1.0, self.anchor)
        else:
            diag = gate_for(cond, self.anchor, self.params)
        self.diagnostics.append(diag)
        enhanced = enhance(cond, diag.g, self.params)
        if hasattr(self.field, "velocity_from_tokens"):
            return self.field.velocity_from_tokens(x, t, enhanced.tokens, ctx.embodiment)
        return self.field.velocity(x, t, enhanced)


@dataclass
class RefineResult:
    chunk: ActionChunk
    rounds: list = field(default_factory=list)  # per round: list[GateDiagnostics] per Euler step
    diverged: bool = False

    @property
    def actions(self) -> np.ndarray:
        return self.chunk.actions

    def diagnostics_json(self) -> list:
        return [[d.to_json() for d in r] for r in self.rounds]


def refine(field, ctx: ContextFeatures, n_ref: int, K: int, params: MpgParams, x0,
           encoder=None, per_step_hook=None, clean_prefix: int = 0, always_on: bool = False) -> RefineResult:
    """Baseline denoising pass, then ``n_ref`` gated rounds anchored on the previous result.

    Every round restarts from the same noise ``x0``.
    """
    if n_ref < 0:
        raise ValueError("n_ref must be >= 0")
    encoder = encoder if encoder is not None else getattr(field, "encoder", None)
    if n_ref > 0 and encoder is None:
        raise ValueError("refinement needs an action encoder for the anchor")
    chunk = euler_denoise(field, x0, K, ctx, per_step_hook, clean_prefix)
    result = RefineResult(chunk)
    for n in range(1, n_ref + 1):
        anchor = action_anchor(encoder.encode(chunk.actions, 0.0))
        gated = GatedField(field, params, anchor, always_on)
        try:
            chunk = euler_denoise(gated, x0, K, ctx, per_step_hook, clean_prefix)
        except DivergenceError as exc:
            warnings.warn(f"refinement round {n} diverged ({exc}); keeping round {n - 1}")
            result.diverged = True
            break
        result.chunk = chunk
        result.rounds.append(gated.diagnostics)
    return result


# ---------------------------------------------------------------- training

def gated_fm_loss(field: VelocityNet, params: MpgParams, target, x0, t: float, ctx: ContextFeatures,
                  anchor, gate_value: float | None = None):
    """Flow-matching loss through the enhanced context.

    Returns ``(loss, grads)`` with entries for ``theta``, ``W``, ``b``,
    ``E_obs``, ``E_act`` and ``tau``. The gate is held constant, so the
    ``E_act`` and ``tau`` entries are exactly zero and ``E_obs`` only gets
    the gradient of the residual path. ``gate_value`` overrides the gate.
    """
    target = np.asarray(target, float)
    x0 = np.asarray(x0, float)
    T = target.shape[0]
    tv = np.full(T, float(t))
    x_t = (1.0 - tv)[:, None] * x0 + tv[:, None] * target
    cond = field.condition(x_t, tv, ctx)
    g = gate_for(cond, anchor, params).g if gate_value is None else float(gate_value)
    enhanced = enhance(cond, g, params)
    inp = field.pack(x_t[None], tv[None], enhanced.tokens.mean(axis=0)[None], ctx.embodiment)
    out, acts = field.forward_batch(inp)
    r = out.reshape(T, -1) - (target - x0)
    loss = float(np.sum(r * r))
    g_theta, g_inp = field.backward_batch(acts, 2.0 * r.reshape(1, -1))
    gp = g_inp[0, field.pooled_slice()]
    S = cond.tokens[cond.suffix()].sum(axis=0)
    n, n_s = cond.n, cond.tokens[cond.suffix()].shape[0]
    lam = params.lam
    grads = {
        "theta": g_theta,
        "W": (lam * g / n) * np.outer(gp, params.E_obs @ S),
        "b": (lam * n_s / n) * gp,
        "E_obs": (lam * g / n) * np.outer(params.W.T @ gp, S),
        "E_act": np.zeros_like(params.E_act),
        "tau": 0.0,
    }
    return loss, grads


def _batch_gates(field: VelocityNet, params: MpgParams, idx, x_t, t, state_rows, action_base, anchors):
    """Gate per sample; suffix = state rows + action base rows with the encoded iterate."""
    enc = field.encoder
    act_rows = action_base[idx] + x_t @ enc.W.T + (1.0 - t)[..., None] * enc.w_sigma  # (B, T, d_model)
    suffix = np.concatenate([state_rows[idx], act_rows], axis=1)
    H_hat = layer_norm(suffix @ params.E_obs.T)
    z_hat = layer_norm(anchors[idx] @ params.E_act.T)  # (B, d_emb)
    th = slice_directions(params.d_emb, params.n_slices, params.slice_seed)
    ph = np.sort(H_hat @ th.T, axis=1)
    pz = (z_hat @ th.T)[:, None, :]
    D = np.mean(np.sum((ph - pz) ** 2, axis=1), axis=1)
    g = np.maximum(np.exp(-D / params.tau), GATE_FLOOR)
    return g, suffix.sum(axis=1), suffix.shape[1]


def train_gated_field(dataset, cfg: TrainConfig, params: MpgParams, field: VelocityNet) -> tuple[VelocityNet, MpgParams]:
    """Joint SGD of the velocity net and ``W``, ``b``, ``E_obs`` through the gated residual.

    The anchor for each sample is the noise-free encoding of its ground-truth chunk.
    All contexts must share one span layout.
    """
    if field.encoder is None:
        raise ValueError("gated training needs a velocity net with an action encoder")
    dataset = list(dataset)
    spans = dataset[0][0].spans
    if any(c.spans != spans for c, _ in dataset):
        raise ValueError("all contexts must share one span layout")
    data = _Batchable.from_dataset(dataset)
    state_rows = np.stack([c.tokens[c.span("state")] for c, _ in dataset])
    action_base = np.stack([c.tokens[c.span("action")] for c, _ in dataset])
    prefix_sum = np.stack([c.tokens[c.span("prefix")].sum(axis=0) for c, _ in dataset])
    anchors = np.stack([action_anchor(field.encoder.encode(a, 0.0)) for _, a in dataset])
    params = params.copy()
    rng = stream(cfg.seed, "train-gated")
    lam = params.lam
    for step in range(cfg.steps):
        idx, x0, t, x_t, mask = sample_training_batch(data, rng, cfg.batch, cfg.delay_model)
        g, S, n_s = _batch_gates(field, params, idx, x_t, t, state_rows, action_base, anchors)
        n = data.n_rows[idx][:, None]
        enhanced_sum = S + lam * g[:, None] * (S @ params.E_obs.T) @ params.W.T + lam * n_s * params.b
        pooled = (prefix_sum[idx] + enhanced_sum) / n
        inp = field.pack(x_t, t, pooled, data.emb[idx])
        out, acts = field.forward_batch(inp)
        r = out.reshape(x_t.shape) - (data.targets[idx] - x0)
        r[~mask] = 0.0
        loss = float(np.sum(r * r) / cfg.batch)
        if not np.isfinite(loss) or loss > cfg.diverge_at:
            raise DivergenceError(f"gated training loss {loss:.3e} at step {step}", step=step)
        g_theta, g_inp = field.backward_batch(acts, (2.0 / cfg.batch) * r.reshape(cfg.batch, -1))
        gp = g_inp[:, field.pooled_slice()] / n  # d loss / d enhanced_sum
        ES = S @ params.E_obs.T
        gW = lam * (gp * g[:, None]).T @ ES
        gb = lam * n_s * gp.sum(axis=0)
        gE = lam * ((gp * g[:, None]) @ params.W).T @ S
        field.theta -= cfg.lr * g_theta
        params.W -= cfg.lr * gW
        params.b -= cfg.lr * gb
        params.E_obs -= cfg.lr * gE
        field.loss_curve.append(loss)
    return field, params


# ------------------------------------------------------------ serialization

def save_params(path, params: MpgParams, seed: int | None = None, extra: dict | None = None) -> None:
    from .flow_policy import write_flat

    header = {"kind": "mpg", "d_model": params.W.shape[0], "d_emb": params.d_emb, "lam": params.lam,
              "tau": params.tau, "n_slices": params.n_slices, "slice_seed": params.slice_seed,
              "seed": seed, **(extra or {})}
    write_flat(path, header, np.concatenate([params.E_obs.ravel(), params.E_act.ravel(), params.W.ravel(), params.b]))


def load_params(path) -> MpgParams:
    from .flow_policy import read_flat

    h, flat = read_flat(path)
    m, e = h["d_model"], h["d_emb"]
    parts = np.split(flat, np.cumsum([e * m, e * m, m * e]))
    return MpgParams(parts[0].reshape(e, m), parts[1].reshape(e, m), parts[2].reshape(m, e), parts[3],
                     lam=h["lam"], tau=h["tau"], n_slices=h["n_slices"], slice_seed=h["slice_seed"])
