"""Mixture-of-Flow stack and slot-wise embodiment adapters.

Both structures keep gradient updates local: a routed expert that was not
selected, or an adapter whose slot group the embodiment does not use,
receives an exactly-zero update, so its weights stay bit-identical.
"""

from __future__ import annotations

from typing import Iterable, Mapping

import numpy as np

from ._rng import stream
from .errors import DivergenceError
from .flow_policy import ContextFeatures, read_flat, write_flat
from .unified_space import EmbodimentSpec, SlotLayout


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - np.max(z))
    return e / e.sum()


def context_summary(ctx: ContextFeatures, n_embodiments: int) -> np.ndarray:
    """Router input: mean-pooled context rows followed by the embodiment one-hot."""
    onehot = np.zeros(n_embodiments)
    if ctx.embodiment is not None:
        onehot[ctx.embodiment] = 1.0
    return np.concatenate([ctx.tokens.mean(axis=0), onehot])


class MoFStack:
    """Shared tanh foundation layers feeding ``E`` routed linear specialists."""

    def __init__(
        self,
        in_dim: int,
        out_dim: int,
        router_dim: int,
        hidden: int = 32,
        foundation_depth: int = 2,
        n_experts: int = 4,
        top_k: int = 2,
        seed: int = 0,
    ):
        if not 1 <= top_k <= n_experts:
            raise ValueError("top_k must lie in [1, n_experts]")
        self.in_dim, self.out_dim, self.router_dim = in_dim, out_dim, router_dim
        self.hidden, self.foundation_depth = hidden, foundation_depth
        self.n_experts, self.top_k = n_experts, top_k
        self._shapes = []
        dims = [in_dim] + [hidden] * foundation_depth
        for i, o in zip(dims[:-1], dims[1:]):
            self._shapes += [("f", (o, i)), ("f", (o,))]
        for _ in range(n_experts):
            self._shapes += [("e", (out_dim, hidden)), ("e", (out_dim,))]
        self._shapes.append(("r", (n_experts, router_dim)))
        self.theta = np.zeros(sum(int(np.prod(s)) for _, s in self._shapes))
        self._bind()
        rng = stream(seed, "mof-init")
        for W, _ in self.foundation:
            W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[1])
        for W, _ in self.experts:
            W[...] = rng.standard_normal(W.shape) / np.sqrt(W.shape[1])
        self.router[...] = rng.standard_normal(self.router.shape) / np.sqrt(router_dim)

    def _bind(self):
        views, off = [], 0
        for _, shape in self._shapes:
            n = int(np.prod(shape))
            views.append(self.theta[off:off + n].reshape(shape))
            off += n
        nf = 2 * self.foundation_depth
        self.foundation = [(views[i], views[i + 1]) for i in range(0, nf, 2)]
        self.experts = [(views[i], views[i + 1]) for i in range(nf, nf + 2 * self.n_experts, 2)]
        self.router = views[-1]

    def _slices(self):
        out, off = [], 0
        for tag, shape in self._shapes:
            n = int(np.prod(shape))
            out.append((tag, slice(off, off + n)))
            off += n
        return out

    def expert_slice(self, e: int) -> slice:
        sl = [s for tag, s in self._slices() if tag == "e"]
        return slice(sl[2 * e].start, sl[2 * e + 1].stop)

    @property
    def foundation_size(self) -> int:
        return sum(W.size + b.size for W, b in self.foundation)

    @property
    def expert_size(self) -> int:
        W, b = self.experts[0]
        return W.size + b.size


def route_topk(stack: MoFStack, ctx_summary) -> tuple[np.ndarray, list[int]]:
    """Softmax over the ``top_k`` largest router logits; lower index wins ties."""
    s = np.asarray(ctx_summary, dtype=float)
    if not np.all(np.isfinite(s)):
        raise ValueError("context summary must be finite")
    logits = stack.router @ s
    order = np.argsort(-logits, kind="stable")
    active = sorted(int(i) for i in order[: stack.top_k])
    w = np.zeros(stack.n_experts)
    w[active] = _softmax(logits[active])
    return w, active


def _foundation(stack: MoFStack, x: np.ndarray):
    acts = [x]
    for W, b in stack.foundation:
        x = np.tanh(W @ x + b)
        acts.append(x)
    return x, acts


def mof_forward(stack: MoFStack, inp, ctx_summary) -> np.ndarray:
    h, _ = _foundation(stack, np.asarray(inp, dtype=float))
    w, active = route_topk(stack, ctx_summary)
    out = np.zeros(stack.out_dim)
    for e in active:
        W, b = stack.experts[e]
        out += w[e] * (W @ h + b)
    if not np.all(np.isfinite(out)):
        raise DivergenceError("non-finite MoF output")
    return out


def mof_loss_and_grad(stack: MoFStack, inp, ctx_summary, target):
    """``||mof_forward - target||^2`` and its gradient over ``stack.theta``.

    Entries belonging to unselected experts (and their router rows) are exactly 0.
    """
    inp = np.asarray(inp, dtype=float)
    s = np.asarray(ctx_summary, dtype=float)
    h, acts = _foundation(stack, inp)
    w, active = route_topk(stack, s)
    ys = {e: stack.experts[e][0] @ h + stack.experts[e][1] for e in active}
    out = sum(w[e] * ys[e] for e in active)
    r = out - np.asarray(target, dtype=float)
    loss = float(r @ r)
    g_out = 2.0 * r

    grad = np.zeros_like(stack.theta)
    g = MoFStack.__new__(MoFStack)
    g.__dict__.update(stack.__dict__)
    g.theta = grad
    g._bind()

    g_h = np.zeros_like(h)
    for e in active:
        W, _ = stack.experts[e]
        gW, gb = g.experts[e]
        gW[...] = w[e] * np.outer(g_out, h)
        gb[...] = w[e] * g_out
        g_h += w[e] * (W.T @ g_out)
    # softmax restricted to the active set
    dots = np.array([g_out @ ys[e] for e in active])
    wa = w[active]
    g_logits = wa * (dots - wa @ dots)
    for j, e in enumerate(active):
        g.router[e] = g_logits[j] * s

    for li in range(len(stack.foundation) - 1, -1, -1):
        W, _ = stack.foundation[li]
        gz = g_h * (1.0 - acts[li + 1] ** 2)
        gW, gb = g.foundation[li]
        gW[...] = np.outer(gz, acts[li])
        gb[...] = gz
        g_h = W.T @ gz
    return loss, grad


def mof_train_step(stack: MoFStack, inp, ctx_summary, target, lr: float) -> float:
    loss, grad = mof_loss_and_grad(stack, inp, ctx_summary, target)
    stack.theta -= lr * grad
    return loss


def active_param_count(stack: MoFStack, bank: "AdapterBank | None" = None, active_groups: Iterable[int] = ()) -> int:
    """Foundation (router included) + ``top_k`` experts + the active adapters."""
    n = stack.foundation_size + stack.router.size + stack.top_k * stack.expert_size
    if bank is not None:
        n += len(set(active_groups)) * bank.adapter_size
    return n


def total_param_count(stack: MoFStack, bank: "AdapterBank | None" = None) -> int:
    return stack.theta.size + (0 if bank is None else bank.W.size + bank.b.size)


# ----------------------------------------------------------------- adapters

class AdapterBank:
    """One ``(d_out x d_in)`` linear adapter plus bias per slot group."""

    def __init__(self, n_slots: int, d_in: int, d_out: int, seed: int = 0, zero: bool = False):
        self.n_slots, self.d_in, self.d_out = n_slots, d_in, d_out
        rng = stream(seed, "esa-init")
        self.W = np.zeros((n_slots, d_out, d_in)) if zero else rng.standard_normal((n_slots, d_out, d_in)) / np.sqrt(d_in)
        self.b = np.zeros((n_slots, d_out)) if zero else 0.01 * rng.standard_normal((n_slots, d_out))
        self.update_counts = np.zeros(n_slots, dtype=int)

    @property
    def adapter_size(self) -> int:
        return self.d_out * self.d_in + self.d_out


def active_groups(emb: EmbodimentSpec, layout: SlotLayout) -> list[int]:
    """Slot groups touched by an embodiment's active slot indices."""
    return sorted({layout.group_of(i) for i in emb.active_slots})


def _check_features(bank: AdapterBank, active, features: Mapping[int, np.ndarray]) -> set[int]:
    active = {int(k) for k in active}
    stray = set(features) - active
    if stray:
        raise ValueError(f"features supplied for inactive slots {sorted(stray)}")
    missing = active - set(features)
    if missing:
        raise ValueError(f"no features for active slots {sorted(missing)}")
    if any(k < 0 or k >= bank.n_slots for k in active):
        raise IndexError("slot index outside the adapter bank")
    return active


def esa_apply(bank: AdapterBank, active, features: Mapping[int, np.ndarray]) -> dict[int, np.ndarray]:
    active = _check_features(bank, active, features)
    return {k: bank.W[k] @ np.asarray(features[k], float) + bank.b[k] for k in sorted(active)}


def esa_train_step(bank: AdapterBank, active, features, targets, lr: float) -> float:
    """One SGD step on ``sum_k ||W_k f_k + b_k - y_k||^2`` over active slots only."""
    out = esa_apply(bank, active, features)
    loss = 0.0
    for k, y in out.items():
        r = y - np.asarray(targets[k], float)
        loss += float(r @ r)
        bank.W[k] -= lr * 2.0 * np.outer(r, features[k])
        bank.b[k] -= lr * 2.0 * r
        bank.update_counts[k] += 1
    return loss


# ------------------------------------------------------------ serialization

def save_stack(path, stack: MoFStack, seed: int | None = None) -> None:
    header = {
        "arch": {"kind": "mof", "in_dim": stack.in_dim, "out_dim": stack.out_dim, "router_dim": stack.router_dim,
                 "hidden": stack.hidden, "foundation_depth": stack.foundation_depth,
                 "n_experts": stack.n_experts, "top_k": stack.top_k},
        "seed": seed,
    }
    write_flat(path, header, stack.theta)


def load_stack(path) -> MoFStack:
    header, theta = read_flat(path)
    a = header["arch"]
    stack = MoFStack(a["in_dim"], a["out_dim"], a["router_dim"], a["hidden"], a["foundation_depth"], a["n_experts"], a["top_k"])
    stack.theta[...] = theta
    return stack


def save_bank(path, bank: AdapterBank, seed: int | None = None) -> None:
    header = {"arch": {"kind": "esa", "n_slots": bank.n_slots, "d_in": bank.d_in, "d_out": bank.d_out}, "seed": seed}
    write_flat(path, header, np.concatenate([bank.W.ravel(), bank.b.ravel()]))


def load_bank(path) -> AdapterBank:
    header, flat = read_flat(path)
    a = header["arch"]
    bank = AdapterBank(a["n_slots"], a["d_in"], a["d_out"], zero=True)
    nW = bank.W.size
    bank.W[...] = flat[:nW].reshape(bank.W.shape)
    bank.b[...] = flat[nW:].reshape(bank.b.shape)
    return bank
