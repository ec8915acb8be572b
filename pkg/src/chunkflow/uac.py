"""Universal async chunking: delay simulation for training and the
commit / lock / stitch rules used at deployment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ProtocolViolation


@dataclass(frozen=True)
class DelayModel:
    """Probability mass over delays ``0 .. d_max - 1`` (in control steps)."""

    pmf: tuple[float, ...]

    def __post_init__(self):
        p = tuple(float(x) for x in self.pmf)
        if not p:
            raise ValueError("delay pmf must have at least one entry")
        if any(x < 0 or not math.isfinite(x) for x in p):
            raise ValueError("delay pmf entries must be finite and >= 0")
        if abs(math.fsum(p) - 1.0) > 1e-12:
            raise ValueError(f"delay pmf sums to {math.fsum(p)!r}, expected 1")
        object.__setattr__(self, "pmf", p)

    @property
    def d_max(self) -> int:
        return len(self.pmf)

    @classmethod
    def uniform(cls, d_max: int) -> "DelayModel":
        if d_max < 1:
            raise ValueError("d_max must be >= 1")
        return cls(tuple([1.0 / d_max] * d_max))

    @classmethod
    def point(cls, d: int) -> "DelayModel":
        p = [0.0] * (d + 1)
        p[d] = 1.0
        return cls(tuple(p))


def commit_delay(t_inference: float, t_control: float, safety: int = 1) -> int:
    """Control steps to lock ahead of an inference call.

    Over-committing only lengthens the locked prefix; under-committing lets
    the robot execute actions the new chunk never conditioned on.
    """
    if t_inference < 0:
        raise ValueError("t_inference must be >= 0")
    if not t_control > 0:
        raise ValueError("t_control must be > 0")
    if safety < 0:
        raise ValueError("safety margin must be >= 0")
    ratio = t_inference / t_control
    steps = math.ceil(ratio)
    # 0.3 / 0.1 lands on 2.9999999999999996; treat near-integers as integers.
    if abs(ratio - round(ratio)) <= 1e-9 * max(1.0, abs(ratio)):
        steps = round(ratio)
    return int(steps) + int(safety)


def default_delay_model(latency_budget: float, control_period: float) -> DelayModel:
    return DelayModel.uniform(commit_delay(latency_budget, control_period, 1) + 1)


def sample_delay(model: DelayModel, rng: np.random.Generator) -> int:
    return int(rng.choice(model.d_max, p=np.asarray(model.pmf)))


def sample_delays(model: DelayModel, rng: np.random.Generator, size: int) -> np.ndarray:
    return rng.choice(model.d_max, size=size, p=np.asarray(model.pmf))


def assign_timesteps(T: int, d: int, t_base: float) -> np.ndarray:
    if not 0 <= d <= T:
        raise ValueError(f"delay {d} outside [0, {T}]")
    if not 0.0 <= t_base <= 1.0:
        raise ValueError("t_base must lie in [0, 1]")
    t = np.full(T, float(t_base))
    t[:d] = 1.0
    return t


def masked_fm_loss(field, chunk_target, x0, d: int, ctx, t_base: float, prefix=None):
    """Flow-matching loss restricted to the postfix rows ``i >= d``.

    Prefix rows of the noised input hold the committed actions at ``t = 1``.
    They come from ``prefix`` when given (the buffered actions at deployment),
    otherwise from ``chunk_target[:d]``. The prefix rows of ``chunk_target``
    never enter the regression target.
    """
    from .flow_policy import flow_loss

    target = np.asarray(chunk_target, dtype=float)
    T = target.shape[0]
    t = assign_timesteps(T, d, t_base)
    x_override = None
    if d > 0:
        pre = target[:d] if prefix is None else np.asarray(prefix, dtype=float)
        if pre.shape != target[:d].shape:
            raise ValueError("prefix rows do not match the chunk shape")
        x_override = pre
    rows = np.arange(d, T)
    return flow_loss(field, target, x0, t, ctx, rows=rows, prefix_rows=x_override)


def lock_prefix(iterate, buffer_actions, d: int) -> np.ndarray:
    """Overwrite rows ``< d`` of a denoising iterate with committed actions."""
    x = np.array(iterate, dtype=float, copy=True)
    if d == 0:
        return x
    B = np.asarray(buffer_actions, dtype=float)
    if B.ndim != 2 or B.shape[0] < d:
        have = 0 if B.ndim != 2 else B.shape[0]
        raise ProtocolViolation(f"lock needs {d} committed rows, buffer holds {have}")
    if d > x.shape[0]:
        raise ValueError(f"d={d} exceeds chunk length {x.shape[0]}")
    x[:d] = B[:d]
    return x


def lock_hook(buffer_actions, d: int) -> Callable[[np.ndarray, int], np.ndarray]:
    """Per-step hook for ``euler_denoise`` enforcing the prefix lock at every k."""
    B = np.array(buffer_actions, dtype=float, copy=True)
    if d > 0 and (B.ndim != 2 or B.shape[0] < d):
        raise ProtocolViolation(f"lock needs {d} committed rows")

    def hook(x: np.ndarray, k: int) -> np.ndarray:
        return lock_prefix(x, B, d)

    return hook


def stitch(prev_exec, new_chunk, d: int) -> np.ndarray:
    prev = np.asarray(prev_exec, dtype=float)
    new = np.asarray(new_chunk, dtype=float)
    if prev.shape != new.shape:
        raise ValueError(f"chunk shapes differ: {prev.shape} vs {new.shape}")
    T = new.shape[0]
    if not 0 <= d <= T:
        raise ValueError(f"delay {d} outside [0, {T}]")
    return np.concatenate([prev[:d], new[d:]], axis=0)

