"""Kinematic stand-ins for real robots, latency injection, reference tasks
and closed-loop metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ._rng import stream
from .unified_space import (
    EmbodimentSpec,
    SlotKind,
    SlotLayout,
    axis_angle_to_matrix,
    default_layout,
    matrix_to_axis_angle,
)

ANGLE_KINDS = (SlotKind.ARM_JOINT_RAD, SlotKind.FINGER_RAD, SlotKind.BASE_HEADING)
WORKSPACE = 1.0


def wrap_angle(q):
    """Map angles into (-pi, pi]; values already inside are returned unchanged."""
    q = np.asarray(q, dtype=float)
    w = np.mod(q + np.pi, 2.0 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return np.where((q > -np.pi) & (q <= np.pi), q, w)


# ----------------------------------------------------------------- embodiment

@dataclass
class SimEmbodiment:
    """Unified-space state of one simulated robot.

    ``integrator``: angle and scalar slots integrate ``q += a * dt``; each
    fully active EEF position group adds ``a`` as a metric delta and each
    rotation group composes ``R <- R exp(a)``.
    ``first_order_lag``: actions are position targets, ``q += alpha (a - q)``.
    """

    spec: EmbodimentSpec
    layout: SlotLayout
    state: np.ndarray = None

    def __post_init__(self):
        self.spec.check_layout(self.layout)
        if self.spec.dynamics not in ("integrator", "first_order_lag"):
            raise ValueError(f"unknown dynamics {self.spec.dynamics!r}")
        if self.state is None:
            self.state = np.zeros(self.layout.d)
        self.state = np.asarray(self.state, dtype=float).copy()
        kinds = self.layout.kinds()
        self._mask = self.spec.mask(self.layout.d)
        self._angle = np.array([k in ANGLE_KINDS for k in kinds]) & self._mask
        self._rot_groups = []
        self._pos_groups = []
        for g, r in zip(self.layout.groups, self.layout.ranges()):
            idx = list(r)
            if not all(self._mask[idx]):
                continue
            if g.kind is SlotKind.EEF_ROT_AXIS_ANGLE:
                self._rot_groups.append(idx)
            elif g.kind is SlotKind.EEF_DELTA_M:
                self._pos_groups.append(idx)

    @property
    def dt(self) -> float:
        return self.spec.control_period

    def active_state(self) -> np.ndarray:
        return self.state[self._mask].copy()


def step_embodiment(sim: SimEmbodiment, action) -> np.ndarray:
    a = np.asarray(action, dtype=float)
    if a.shape != (sim.layout.d,):
        raise ValueError(f"action must have length {sim.layout.d}")
    if not np.all(np.isfinite(a[sim._mask])):
        raise ValueError("non-finite action")
    q = sim.state.copy()
    m = sim._mask
    if sim.spec.dynamics == "first_order_lag":
        q[m] = q[m] + sim.spec.lag_alpha * (a[m] - q[m])
    else:
        special = set()
        for idx in sim._pos_groups:
            q[idx] = q[idx] + a[idx]
            special.update(idx)
        for idx in sim._rot_groups:
            R = axis_angle_to_matrix(q[idx]) @ axis_angle_to_matrix(a[idx])
            q[idx] = matrix_to_axis_angle(R)
            special.update(idx)
        plain = m.copy()
        plain[list(special)] = False
        q[plain] = q[plain] + a[plain] * sim.dt
    q[sim._angle] = wrap_angle(q[sim._angle])
    if not np.all(np.isfinite(q)):
        raise ValueError("state left the finite range")
    sim.state = q
    return q


# -------------------------------------------------------------------- latency

@dataclass(frozen=True)
class LatencyModel:
    """Inference latency in seconds.

    ``constant``: ``value``; ``uniform_jitter``: U[lo, hi];
    ``spike``: ``value``, plus ``magnitude`` with probability ``p``.
    """

    kind: str = "constant"
    value: float = 0.0
    lo: float = 0.0
    hi: float = 0.0
    p: float = 0.0
    magnitude: float = 0.0
    seed: int | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "uniform_jitter", "spike"):
            raise ValueError(f"unknown latency model {self.kind!r}")
        if min(self.value, self.lo, self.hi, self.magnitude) < 0:
            raise ValueError("latencies must be >= 0")
        if self.kind == "uniform_jitter" and self.hi < self.lo:
            raise ValueError("uniform_jitter needs lo <= hi")
        if not 0.0 <= self.p <= 1.0:
            raise ValueError("spike probability must lie in [0, 1]")

    @classmethod
    def constant(cls, value: float, seed=None):
        return cls("constant", value=value, seed=seed)

    @classmethod
    def uniform_jitter(cls, lo: float, hi: float, seed=None):
        return cls("uniform_jitter", lo=lo, hi=hi, seed=seed)

    @classmethod
    def spike(cls, p: float, magnitude: float, base: float = 0.0, seed=None):
        return cls("spike", value=base, p=p, magnitude=magnitude, seed=seed)

    def rng(self, session_seed: int) -> np.random.Generator:
        return stream(session_seed if self.seed is None else self.seed, "latency")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "constant":
            return float(self.value)
        if self.kind == "uniform_jitter":
            return float(rng.uniform(self.lo, self.hi))
        return float(self.value + (self.magnitude if rng.random() < self.p else 0.0))

    def to_json(self) -> dict:
        out = {"kind": self.kind}
        if self.kind == "constant":
            out["value"] = self.value
        elif self.kind == "uniform_jitter":
            out.update(lo=self.lo, hi=self.hi)
        else:
            out.update(value=self.value, p=self.p, magnitude=self.magnitude)
        return out

    @classmethod
    def from_json(cls, obj) -> "LatencyModel":
        return cls(**{k: obj[k] for k in ("kind", "value", "lo", "hi", "p", "magnitude", "seed") if k in obj})


# ---------------------------------------------------------------------- fleet

def default_fleet(layout: SlotLayout | None = None) -> dict[str, EmbodimentSpec]:
    """20 Hz arm + gripper, 50 Hz bimanual dexterous, 10 Hz low-cost arm."""
    layout = layout or default_layout()
    arm_l = list(layout.group_range("left_arm_joints"))
    arm_r = list(layout.group_range("right_arm_joints"))
    fingers_l = list(layout.group_range("left_fingers"))
    fingers_r = list(layout.group_range("right_fingers"))
    grip_l = list(layout.group_range("left_gripper"))
    fleet = [
        EmbodimentSpec("arm_gripper_20hz", tuple(arm_l + grip_l), 0.05, 0.12),
        EmbodimentSpec("bimanual_dex_50hz", tuple(arm_l + fingers_l + arm_r + fingers_r), 0.02, 0.05),
        EmbodimentSpec("lowcost_arm_10hz", tuple(arm_l[:6]), 0.1, 0.15),
    ]
    return {e.id: e for e in fleet}


# ---------------------------------------------------------------------- tasks

def _min_jerk(s):
    s = np.clip(s, 0.0, 1.0)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s * s)


def reference_trajectory(
    task: str,
    T_total: int,
    seed: int,
    emb: EmbodimentSpec,
    layout: SlotLayout,
    *,
    start=None,
    goal=None,
    period: int = 200,
    amplitude: float = 0.3,
) -> np.ndarray:
    """Target positions, one unified vector per control step.

    ``reach``: minimum-jerk move from ``start`` to ``goal`` (seeded if absent).
    ``figure_eight``: a Lissajous 1:2 loop with exact period ``period``.
    ``bimodal_pick``: a reach toward one of two mirrored goals, chosen by seed.
    """
    if T_total < 0:
        raise ValueError("T_total must be >= 0")
    n_act = emb.n_active
    rng = stream(seed, "reference", task)
    s = np.zeros(n_act) if start is None else np.asarray(start, float)
    if s.shape != (n_act,):
        raise ValueError("start must cover the active slots")
    out = np.zeros((T_total, layout.d))
    steps = np.arange(T_total)
    if task in ("reach", "bimodal_pick"):
        if task == "bimodal_pick":
            base = 0.5 * WORKSPACE * np.ones(n_act)
            g = base if rng.random() < 0.5 else -base
        else:
            g = rng.uniform(-0.5 * WORKSPACE, 0.5 * WORKSPACE, n_act) if goal is None else np.asarray(goal, float)
        if np.any(np.abs(g) > WORKSPACE) or np.any(np.abs(s) > WORKSPACE):
            raise ValueError("targets must lie inside the workspace box")
        horizon = max(T_total - 1, 1)
        w = _min_jerk(steps / horizon)
        traj = s + w[:, None] * (g - s)
    elif task == "figure_eight":
        if period < 2:
            raise ValueError("period must be >= 2")
        phase = 2.0 * np.pi * (steps % period) / period
        direction = rng.standard_normal(n_act)
        direction /= np.linalg.norm(direction)
        ortho = rng.standard_normal(n_act)
        ortho -= (ortho @ direction) * direction
        norm = np.linalg.norm(ortho)
        ortho = ortho / norm if norm > 0 else np.zeros(n_act)
        traj = s + amplitude * (np.sin(phase)[:, None] * direction + 0.5 * np.sin(2 * phase)[:, None] * ortho)
    else:
        raise ValueError(f"unknown task {task!r}")
    out[:, list(emb.active_slots)] = traj
    return out


def bimodal_mode(seed: int) -> int:
    """Which mirrored goal ``bimodal_pick`` picks for ``seed`` (0 = positive)."""
    return 0 if stream(seed, "reference", "bimodal_pick").random() < 0.5 else 1


# -------------------------------------------------------------------- metrics

def executed_actions(log) -> np.ndarray:
    if hasattr(log, "actions"):
        return log.actions()
    return np.asarray(log, dtype=float)


def continuity_metrics(log) -> dict:
    """``max_step_jump`` (L-inf), ``mean_jerk`` (L2 of second differences) and ``underflow_rate``."""
    A = executed_actions(log)
    if A.shape[0] == 0:
        raise ValueError("empty log")
    flags = np.asarray(log.underflows() if hasattr(log, "underflows") else np.zeros(A.shape[0], bool))
    jump = float(np.max(np.abs(np.diff(A, axis=0)))) if A.shape[0] > 1 else 0.0
    jerk = float(np.mean(np.linalg.norm(np.diff(A, n=2, axis=0), axis=1))) if A.shape[0] > 2 else 0.0
    return {"max_step_jump": jump, "mean_jerk": jerk, "underflow_rate": float(flags.mean())}


def mwds(pred, gt, wrist_slots: Sequence[Sequence[int]]) -> float:
    """Mean over hands of the cosine between predicted and true net wrist displacement.

    A zero displacement on either side contributes 0.
    """
    P = np.asarray(pred, dtype=float)
    G = np.asarray(gt, dtype=float)
    if P.shape[0] < 2 or G.shape[0] < 2:
        raise ValueError("trajectories need at least two states")
    if not wrist_slots:
        raise ValueError("no wrist slots given")
    cos = []
    for idx in wrist_slots:
        idx = list(idx)
        dp = P[-1, idx] - P[0, idx]
        dg = G[-1, idx] - G[0, idx]
        n = np.linalg.norm(dp) * np.linalg.norm(dg)
        cos.append(0.0 if n == 0 else float(np.clip(dp @ dg / n, -1.0, 1.0)))
    return float(np.mean(cos))


def trajectory_to_csv(path, traj, slots: Sequence[int] | None = None) -> None:
    traj = np.asarray(traj, dtype=float)
    cols = list(range(traj.shape[1])) if slots is None else list(slots)
    with open(Path(path), "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step"] + [f"s{i}" for i in cols])
        for n, row in enumerate(traj):
            w.writerow([n] + [repr(float(row[i])) for i in cols])


def tracking_error(actions, reference) -> float:
    """Mean Euclidean distance between two equally shaped trajectories."""
    a = np.asarray(actions, dtype=float)
    r = np.asarray(reference, dtype=float)
    if a.shape != r.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {r.shape}")
    return float(np.mean(np.linalg.norm(a - r, axis=-1)))


# ------------------------------------------------------------------- policies

@dataclass(frozen=True)
class Observation:
    step: int
    state: np.ndarray


@dataclass
class Plan:
    actions: np.ndarray  # (T, d) unified
    gates: list = field(default_factory=list)  # per refinement round, per Euler step


class TrackingPolicy:
    """Analytic chunk sampler that tracks a reference on the active slots.

    The chunk mean is the reference feed-forward plus a feedback term spread
    over the chunk; rows are correlated by a squared-exponential kernel and
    sampled by Euler-integrating the exact Gaussian flow field. Locked rows
    enter as observed values.
    """

    def __init__(self, sim: SimEmbodiment, reference, T: int = 8, K: int = 10,
                 sigma: float = 0.05, length: float = 3.0, gain: float = 1.0):
        from .flow_policy import se_kernel

        self.emb, self.T, self.K = sim.spec, T, K
        self.dt = sim.dt
        self.lag = sim.spec.dynamics == "first_order_lag"
        self.idx = list(sim.spec.active_slots)
        self.angle = sim._angle[self.idx]
        self.ref = np.asarray(reference, dtype=float)[:, self.idx]
        self.gain = gain
        self.Sigma = se_kernel(T, sigma, length)

    def _ref(self, n):
        return self.ref[np.clip(n, 0, self.ref.shape[0] - 1)]

    def mean(self, obs: Observation) -> np.ndarray:
        n = obs.step + np.arange(self.T)
        if self.lag:
            return self._ref(n + 1)
        ff = (self._ref(n + 1) - self._ref(n)) / self.dt
        err = self._ref(obs.step) - obs.state[self.idx]
        err = np.where(self.angle, wrap_angle(err), err)
        return ff + self.gain * err / (self.T * self.dt)

    def plan(self, obs: Observation, prefix, d: int, rng: np.random.Generator) -> Plan:
        from .flow_policy import GaussianChunkField, euler_denoise
        from .uac import lock_hook

        field_ = GaussianChunkField(self.mean(obs), self.Sigma)
        x0 = rng.standard_normal((self.T, len(self.idx)))
        hook = lock_hook(np.asarray(prefix)[:, self.idx], d) if d else None
        chunk = euler_denoise(field_, x0, self.K, None, hook, d)
        out = np.zeros((self.T, obs.state.size))
        out[:, self.idx] = chunk.actions
        return Plan(out)
