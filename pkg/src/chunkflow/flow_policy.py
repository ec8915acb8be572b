"""Rectified-flow action chunks.

A velocity field maps ``(x, t, ctx)`` to a ``T x d`` velocity. Sampling
integrates it with explicit Euler from Gaussian noise; training regresses
the straight-path velocity ``a - x0``. ``VelocityNet`` is a small tanh MLP
whose gradients are written out by hand and checked by finite differences.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from ._rng import stream
from .errors import DivergenceError

log = logging.getLogger(__name__)

SPAN_ORDER = ("prefix", "state", "action")


@dataclass(frozen=True)
class ContextFeatures:
    """Token-level conditioning ``H`` with labelled, contiguous spans.

    Rows are ordered prefix (vision/language stand-in), state, action tokens.
    The state and action rows together form the suffix that MPG acts on.
    """

    tokens: np.ndarray
    spans: dict
    embodiment: int | None = None

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=float)
        if tokens.ndim != 2:
            raise ValueError("context tokens must be a 2-D matrix")
        pos = 0
        spans = {}
        for name in SPAN_ORDER:
            a, b = self.spans.get(name, (pos, pos))
            if a != pos or b < a:
                raise ValueError(f"span {name!r}={a, b} is not contiguous at row {pos}")
            spans[name] = (int(a), int(b))
            pos = b
        if pos != tokens.shape[0]:
            raise ValueError(f"spans cover {pos} rows, tokens have {tokens.shape[0]}")
        extra = set(self.spans) - set(SPAN_ORDER)
        if extra:
            raise ValueError(f"unknown spans {sorted(extra)}")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "spans", spans)

    @classmethod
    def build(cls, prefix=None, state=None, action=None, embodiment=None, d_model=None):
        parts = [prefix, state, action]
        if d_model is None:
            d_model = next(np.asarray(p).shape[1] for p in parts if p is not None and len(p))
        mats = [np.zeros((0, d_model)) if p is None else np.asarray(p, float).reshape(-1, d_model) for p in parts]
        spans, pos = {}, 0
        for name, m in zip(SPAN_ORDER, mats):
            spans[name] = (pos, pos + m.shape[0])
            pos += m.shape[0]
        return cls(np.concatenate(mats, axis=0), spans, embodiment)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d_model(self) -> int:
        return self.tokens.shape[1]

    def span(self, name: str) -> slice:
        a, b = self.spans[name]
        return slice(a, b)

    def suffix(self) -> slice:
        return slice(self.spans["state"][0], self.n)

    def replace_tokens(self, tokens: np.ndarray) -> "ContextFeatures":
        return ContextFeatures(tokens, self.spans, self.embodiment)


@dataclass(frozen=True)
class ActionChunk:
    actions: np.ndarray
    timesteps: np.ndarray
    committed_prefix: int = 0

    def __post_init__(self):
        a = np.asarray(self.actions, dtype=float)
        t = np.asarray(self.timesteps, dtype=float)
        if a.ndim != 2 or a.shape[0] < 1:
            raise ValueError("actions must be a T x d matrix with T >= 1")
        if t.shape != (a.shape[0],):
            raise ValueError("one timestep per chunk row")
        if not np.all(np.isfinite(a)):
            raise ValueError("non-finite action")
        if np.any(t < 0) or np.any(t > 1):
            raise ValueError("timesteps must lie in [0, 1]")
        if not 0 <= self.committed_prefix <= a.shape[0]:
            raise ValueError("committed prefix outside [0, T]")
        object.__setattr__(self, "actions", a)
        object.__setattr__(self, "timesteps", t)

    @property
    def T(self) -> int:
        return self.actions.shape[0]


class VelocityField(Protocol):
    def velocity(self, x: np.ndarray, t: np.ndarray, ctx) -> np.ndarray: ...


# ------------------------------------------------------------ analytic fields

class ConstantField:
    def __init__(self, v):
        self.v = np.asarray(v, dtype=float)

    def velocity(self, x, t, ctx=None):
        return np.broadcast_to(self.v, np.shape(x)).astype(float)


class IdealField:
    """The straight-path velocity ``a - x0`` for one fixed (target, noise) pair."""

    def __init__(self, target, x0):
        self.v = np.asarray(target, float) - np.asarray(x0, float)

    def velocity(self, x, t, ctx=None):
        return self.v.copy()


class GaussianChunkField:
    """Exact straight-path marginal velocity for chunks ``a ~ N(mu, Sigma)``.

    ``Sigma`` is a ``T x T`` covariance over chunk rows shared by every
    action dimension; dimensions are independent. With per-row times
    ``D = diag(t)`` and ``x_t = (I - D) x0 + D a``,
    ``v = mu + (Sigma D - (I - D)) C^-1 (x - D mu)`` where
    ``C = (I - D)^2 + D Sigma D``. Rows at ``t = 1`` act as observed values,
    so the remaining rows follow the Gaussian conditional.
    """

    def __init__(self, mu, Sigma):
        self.mu = np.asarray(mu, dtype=float)
        self.Sigma = np.asarray(Sigma, dtype=float)
        T = self.mu.shape[0]
        if self.Sigma.shape != (T, T):
            raise ValueError("Sigma must be T x T")
        np.linalg.cholesky(self.Sigma)  # raises unless positive definite

    def velocity(self, x, t, ctx=None):
        T = self.mu.shape[0]
        D = np.broadcast_to(np.asarray(t, dtype=float), (T,))
        one = 1.0 - D
        C = np.diag(one * one) + D[:, None] * self.Sigma * D[None, :]
        B = self.Sigma * D[None, :] - np.diag(one)
        return self.mu + B @ np.linalg.solve(C, np.asarray(x, float) - D[:, None] * self.mu)


def se_kernel(T: int, sigma: float, length: float, jitter: float = 1e-4) -> np.ndarray:
    """Squared-exponential covariance over chunk rows plus a white-noise floor."""
    i = np.arange(T, dtype=float)
    K = sigma ** 2 * np.exp(-0.5 * ((i[:, None] - i[None, :]) / length) ** 2)
    return K + jitter * sigma ** 2 * np.eye(T)


class FunctionField:
    def __init__(self, fn: Callable):
        self.fn = fn

    def velocity(self, x, t, ctx=None):
        return np.asarray(self.fn(x, t, ctx), dtype=float)


# --------------------------------------------------------------- the network

class ActionEncoder:
    """Fixed linear embedding of action rows plus a noise-level channel.

    ``Enc(a, sigma) = a @ W.T + sigma * w_sigma``; ``sigma = 0`` is noise-free.
    """

    def __init__(self, d: int, d_model: int, seed: int = 0):
        rng = stream(seed, "action-encoder")
        self.W = rng.standard_normal((d_model, d)) / np.sqrt(d)
        self.w_sigma = rng.standard_normal(d_model) / np.sqrt(d_model)
        self.seed = seed

    def encode(self, actions, sigma=0.0) -> np.ndarray:
        a = np.asarray(actions, dtype=float)
        s = np.broadcast_to(np.asarray(sigma, dtype=float), a.shape[:-1])
        return a @ self.W.T + s[..., None] * self.w_sigma


class VelocityNet:
    """Tanh MLP velocity field with hand-written backpropagation.

    Input row: ``[flatten(x), t (per token), mean-pooled context, embodiment one-hot]``.
    All weights live in the flat vector ``theta``; the per-layer matrices are views.
    """

    def __init__(
        self,
        T: int,
        d: int,
        d_model: int,
        n_embodiments: int = 0,
        hidden: Sequence[int] = (64, 64),
        seed: int = 0,
        encoder: ActionEncoder | None = None,
    ):
        self.T, self.d, self.d_model = T, d, d_model
        self.n_embodiments = n_embodiments
        self.hidden = tuple(int(h) for h in hidden)
        self.encoder = encoder
        self.in_dim = T * d + T + d_model + n_embodiments
        self.sizes = [self.in_dim, *self.hidden, T * d]
        n = sum(o * i + o for i, o in zip(self.sizes[:-1], self.sizes[1:]))
        self.theta = np.zeros(n)
        self._bind()
        rng = stream(seed, "velocity-net-init")
        for li, (W, b) in enumerate(self.layers):
            scale = 1.0 / np.sqrt(W.shape[1])
            if li == len(self.layers) - 1:
                scale *= 0.1
            W[...] = rng.standard_normal(W.shape) * scale
        self.loss_curve: list[float] = []

    def _bind(self):
        self.layers = []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.theta[off:off + o * i].reshape(o, i)
            off += o * i
            b = self.theta[off:off + o]
            off += o
            self.layers.append((W, b))

    @property
    def n_params(self) -> int:
        return self.theta.size

    # -- context -----------------------------------------------------------
    def condition(self, x, t, ctx: ContextFeatures) -> ContextFeatures:
        """Add the encoded current iterate onto the action-token base rows."""
        if self.encoder is None or ctx.spans["action"][0] == ctx.spans["action"][1]:
            return ctx
        tokens = ctx.tokens.copy()
        tokens[ctx.span("action")] += self.encoder.encode(x, 1.0 - np.asarray(t, float))
        return ctx.replace_tokens(tokens)

    def pack(self, x, t, pooled, embodiment) -> np.ndarray:
        """Stack inputs into ``(B, in_dim)``; ``x`` is ``(B, T, d)``."""
        x = np.asarray(x, float)
        B = x.shape[0]
        parts = [x.reshape(B, -1), np.asarray(t, float).reshape(B, self.T), np.asarray(pooled, float).reshape(B, self.d_model)]
        if self.n_embodiments:
            onehot = np.zeros((B, self.n_embodiments))
            emb = np.broadcast_to(np.asarray(-1 if embodiment is None else embodiment), (B,))
            for r, e in enumerate(emb):
                if e >= 0:
                    onehot[r, e] = 1.0
            parts.append(onehot)
        return np.concatenate(parts, axis=1)

    # -- forward / backward ------------------------------------------------
    def forward_batch(self, inp: np.ndarray):
        acts = [inp]
        a = inp
        last = len(self.layers) - 1
        for li, (W, b) in enumerate(self.layers):
            z = a @ W.T + b
            a = z if li == last else np.tanh(z)
            acts.append(a)
        return a, acts

    def backward_batch(self, acts, grad_out: np.ndarray):
        """Return (d theta summed over the batch, d input)."""
        grad = np.zeros_like(self.theta)
        g_layers = []
        off = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            g_layers.append((grad[off:off + o * i].reshape(o, i), grad[off + o * i:off + o * i + o]))
            off += o * i + o
        g = grad_out
        for li in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[li]
            if li != len(self.layers) - 1:
                g = g * (1.0 - acts[li + 1] ** 2)
            gW, gb = g_layers[li]
            gW[...] = g.T @ acts[li]
            gb[...] = g.sum(axis=0)
            g = g @ W
        return grad, g

    def _input(self, x, t, ctx: ContextFeatures):
        x = np.asarray(x, float)
        t = np.broadcast_to(np.asarray(t, float), (self.T,))
        H = self.condition(x, t, ctx)
        return self.pack(x[None], t[None], H.tokens.mean(axis=0)[None], ctx.embodiment)

    def velocity(self, x, t, ctx: ContextFeatures) -> np.ndarray:
        out, _ = self.forward_batch(self._input(x, t, ctx))
        return out.reshape(self.T, self.d)

    def velocity_from_tokens(self, x, t, tokens, embodiment=None) -> np.ndarray:
        """Velocity given an already-conditioned token matrix (no refresh)."""
        x = np.asarray(x, float)
        t = np.broadcast_to(np.asarray(t, float), (self.T,))
        inp = self.pack(x[None], t[None], np.asarray(tokens).mean(axis=0)[None], embodiment)
        out, _ = self.forward_batch(inp)
        return out.reshape(self.T, self.d)

    def param_grad(self, x, t, ctx: ContextFeatures, grad_v) -> np.ndarray:
        _, acts = self.forward_batch(self._input(x, t, ctx))
        g, _ = self.backward_batch(acts, np.asarray(grad_v, float).reshape(1, -1))
        return g

    def pooled_slice(self) -> slice:
        a = self.T * self.d + self.T
        return slice(a, a + self.d_model)

    def copy(self) -> "VelocityNet":
        other = VelocityNet.__new__(VelocityNet)
        other.__dict__.update(self.__dict__)
        other.theta = self.theta.copy()
        other._bind()
        other.loss_curve = list(self.loss_curve)
        return other


# ------------------------------------------------------------- integration

def euler_denoise(
    field: VelocityField,
    x0,
    K: int,
    ctx=None,
    per_step_hook: Callable[[np.ndarray, int], np.ndarray] | None = None,
    clean_prefix: int = 0,
) -> ActionChunk:
    """Integrate ``x <- x + v(x, k/K) / K`` for ``k = 0 .. K-1``.

    ``per_step_hook(x, k)`` runs on the initial state and after every update.
    Rows below ``clean_prefix`` are presented to the field at ``t = 1``.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    x = np.array(x0, dtype=float, copy=True)
    if not np.all(np.isfinite(x)):
        raise ValueError("x0 must be finite")
    T = x.shape[0]
    dt = 1.0 / K
    if per_step_hook is not None:
        x = per_step_hook(x, 0)
    for k in range(K):
        t = np.full(T, k / K)
        t[:clean_prefix] = 1.0
        x = x + dt * field.velocity(x, t, ctx)
        if per_step_hook is not None:
            x = per_step_hook(x, k + 1)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(f"Euler iterate became non-finite at step {k}", step=k)
    return ActionChunk(x, np.ones(T), clean_prefix)


# ------------------------------------------------------------------ losses

def flow_loss(field, target, x0, t, ctx, rows=None, prefix_rows=None):
    """Squared error to the straight-path velocity, summed over ``rows``."""
    target = np.asarray(target, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    T = target.shape[0]
    tv = np.broadcast_to(np.asarray(t, dtype=float), (T,)).copy()
    x_t = (1.0 - tv)[:, None] * x0 + tv[:, None] * target
    if prefix_rows is not None:
        x_t[: len(prefix_rows)] = prefix_rows
    v = field.velocity(x_t, tv, ctx)
    r = v - (target - x0)
    mask = np.zeros(T, dtype=bool)
    mask[np.arange(T) if rows is None else np.asarray(rows, dtype=int)] = True
    r[~mask] = 0.0
    loss = float(np.sum(r * r))
    if hasattr(field, "param_grad"):
        grad = field.param_grad(x_t, tv, ctx, 2.0 * r)
    else:
        grad = np.zeros(0)
    return loss, grad


def fm_loss(field, a_target, x0, t: float, ctx=None, rows=None):
    if not 0.0 <= t <= 1.0:
        raise ValueError("t must lie in [0, 1]")
    return flow_loss(field, a_target, x0, t, ctx, rows=rows)


# ---------------------------------------------------------------- training

@dataclass
class TrainConfig:
    lr: float = 1e-2
    steps: int = 2000
    batch: int = 64
    seed: int = 0
    hidden: tuple[int, ...] = (64, 64)
    delay_model: object = None  # uac.DelayModel: simulate inference delay
    diverge_at: float = 1e6
    log_every: int = 100


@dataclass
class _Batchable:
    targets: np.ndarray  # (N, T, d)
    static_sum: np.ndarray  # (N, d_model) sum of non-action rows
    action_sum: np.ndarray  # (N, d_model) sum of given action rows
    n_rows: np.ndarray  # (N,)
    emb: np.ndarray  # (N,) -1 = none

    @classmethod
    def from_dataset(cls, dataset):
        targets, static, action, n, emb = [], [], [], [], []
        for ctx, a in dataset:
            sl = ctx.span("action")
            targets.append(np.asarray(a, float))
            action.append(ctx.tokens[sl].sum(axis=0))
            static.append(ctx.tokens.sum(axis=0) - action[-1])
            n.append(ctx.n)
            emb.append(-1 if ctx.embodiment is None else ctx.embodiment)
        return cls(np.stack(targets), np.stack(static), np.stack(action), np.asarray(n, float), np.asarray(emb))


def pooled_batch(net: VelocityNet, data: _Batchable, idx, x_t, t) -> np.ndarray:
    if net.encoder is None:
        s = data.static_sum[idx] + data.action_sum[idx]
    else:
        enc = net.encoder
        s = (data.static_sum[idx] + data.action_sum[idx] + x_t.sum(axis=1) @ enc.W.T
             + (1.0 - t).sum(axis=1)[:, None] * enc.w_sigma)
    return s / data.n_rows[idx][:, None]


def sample_training_batch(data: _Batchable, rng, batch: int, delay_model=None):
    """Draw (idx, x0, t, x_t, loss_mask) for one SGD step."""
    N, T, d = data.targets.shape
    idx = rng.integers(N, size=batch)
    A = data.targets[idx]
    x0 = rng.standard_normal((batch, T, d))
    t_base = rng.random(batch)
    t = np.repeat(t_base[:, None], T, axis=1)
    mask = np.ones((batch, T), dtype=bool)
    if delay_model is not None:
        from .uac import sample_delays

        dl = np.minimum(sample_delays(delay_model, rng, batch), T)
        prefix = np.arange(T)[None, :] < dl[:, None]
        t[prefix] = 1.0
        mask = ~prefix
    x_t = (1.0 - t)[..., None] * x0 + t[..., None] * A
    return idx, x0, t, x_t, mask


def train_toy_field(dataset, cfg: TrainConfig, field: VelocityNet | None = None) -> VelocityNet:
    """Plain SGD on the flow-matching loss with fresh noise and t ~ U[0, 1).

    The batch loss is the mean over samples of the per-sample summed loss.
    The loss curve (one entry per step) is stored on ``field.loss_curve``.
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    ctx0, a0 = dataset[0]
    T, d = np.asarray(a0).shape
    if field is None:
        n_emb = 1 + max((c.embodiment for c, _ in dataset if c.embodiment is not None), default=-1)
        field = VelocityNet(T, d, ctx0.d_model, n_embodiments=n_emb, hidden=cfg.hidden, seed=cfg.seed)
    data = _Batchable.from_dataset(dataset)
    rng = stream(cfg.seed, "train-toy")
    for step in range(cfg.steps):
        idx, x0, t, x_t, mask = sample_training_batch(data, rng, cfg.batch, cfg.delay_model)
        pooled = pooled_batch(field, data, idx, x_t, t)
        inp = field.pack(x_t, t, pooled, data.emb[idx])
        out, acts = field.forward_batch(inp)
        r = out.reshape(x_t.shape) - (data.targets[idx] - x0)
        r[~mask] = 0.0
        loss = float(np.sum(r * r) / cfg.batch)
        if not np.isfinite(loss) or loss > cfg.diverge_at:
            raise DivergenceError(
                f"training loss {loss:.3e} at step {step}",
                step=step,
                diagnostics={"loss": loss, "lr": cfg.lr, "recent": field.loss_curve[-10:]},
            )
        grad, _ = field.backward_batch(acts, (2.0 / cfg.batch) * r.reshape(cfg.batch, -1))
        field.theta -= cfg.lr * grad
        field.loss_curve.append(loss)
        if cfg.log_every and step % cfg.log_every == 0:
            log.debug("step %d loss %.5f", step, loss)
    return field


# ------------------------------------------------------- gradient checking

def numeric_gradient(loss_fn: Callable[[], float], theta: np.ndarray, eps: float) -> np.ndarray:
    """Central differences, perturbing ``theta`` in place and restoring it."""
    g = np.zeros_like(theta)
    for j in range(theta.size):
        keep = theta[j]
        theta[j] = keep + eps
        lp = loss_fn()
        theta[j] = keep - eps
        lm = loss_fn()
        theta[j] = keep
        g[j] = (lp - lm) / (2.0 * eps)
    return g


def max_relative_error(analytic, numeric, floor: float = 1e-6) -> float:
    a = np.asarray(analytic, float)
    b = np.asarray(numeric, float)
    if a.size == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def finite_diff_check(field: VelocityNet, ctx: ContextFeatures, eps: float = 1e-5, seed: int = 0) -> float:
    """Worst relative error between backprop and central differences of fm_loss."""
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError("eps must lie in [1e-7, 1e-3]")
    rng = stream(seed, "fd-check")
    a = rng.standard_normal((field.T, field.d))
    x0 = rng.standard_normal((field.T, field.d))
    t = float(rng.random())
    _, analytic = fm_loss(field, a, x0, t, ctx)
    numeric = numeric_gradient(lambda: fm_loss(field, a, x0, t, ctx)[0], field.theta, eps)
    return max_relative_error(analytic, numeric)


# ----------------------------------------------------------- serialization

def write_flat(path, header: dict, array) -> None:
    """``<u64 LE header length><JSON header><float64 LE array>``."""
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f8"))
    head = json.dumps({**header, "n": int(arr.size)}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<Q", len(head)))
        f.write(head)
        f.write(arr.tobytes())


def read_flat(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<Q", raw[:8])
    header = json.loads(raw[8:8 + n].decode("utf-8"))
    arr = np.frombuffer(raw[8 + n:], dtype="<f8").astype(float)
    if arr.size != header["n"]:
        raise ValueError(f"{path}: header says {header['n']} floats, file has {arr.size}")
    return header, arr


def save_field(path, net: VelocityNet, seed: int | None = None, extra: dict | None = None) -> None:
    header = {
        "arch": {"kind": "tanh_mlp", "hidden": list(net.hidden), "n_embodiments": net.n_embodiments,
                 "encoder_seed": None if net.encoder is None else net.encoder.seed},
        "d_model": net.d_model,
        "T": net.T,
        "d": net.d,
        "seed": seed,
        **(extra or {}),
    }
    write_flat(path, header, net.theta)


def load_field(path) -> VelocityNet:
    header, theta = read_flat(path)
    arch = header["arch"]
    enc = None
    if arch.get("encoder_seed") is not None:
        enc = ActionEncoder(header["d"], header["d_model"], arch["encoder_seed"])
    net = VelocityNet(header["T"], header["d"], header["d_model"], arch["n_embodiments"], tuple(arch["hidden"]), encoder=enc)
    if theta.size != net.theta.size:
        raise ValueError("parameter count does not match architecture")
    net.theta[...] = theta
    return net
