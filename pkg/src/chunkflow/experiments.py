"""Session builders and paired ablations shared by the CLI and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .flow_policy import TrainConfig
from .runtime import SessionConfig, SessionLog, run_session
from .sim import LatencyModel, SimEmbodiment, TrackingPolicy, continuity_metrics, reference_trajectory
from .toys import GatedReach, GatedReachPolicy, default_reach_mpg, mpg_ablation, train_reach
from .unified_space import EmbodimentSpec, SlotLayout


class RecordingPolicy:
    """Pass-through wrapper that keeps every emitted chunk with its start step."""

    def __init__(self, inner):
        self.inner = inner
        self.T = inner.T
        self.chunks: list[tuple[int, np.ndarray]] = []

    def plan(self, obs, prefix, d, rng):
        plan = self.inner.plan(obs, prefix, d, rng)
        self.chunks.append((obs.step, np.array(plan.actions, dtype=float, copy=True)))
        return plan


@dataclass
class ChunkSettings:
    T: int = 8
    K: int = 10
    sigma: float = 0.05
    length: float = 3.0
    gain: float = 1.0

    @classmethod
    def from_json(cls, obj) -> "ChunkSettings":
        return cls(**{k: obj[k] for k in ("T", "K", "sigma", "length", "gain") if k in obj})


@dataclass
class TrackingRun:
    log: SessionLog
    reference: np.ndarray
    chunks: list = field(default_factory=list)

    def metrics(self) -> dict:
        return continuity_metrics(self.log) if self.log.steps else {}


def tracking_session(layout: SlotLayout, emb: EmbodimentSpec, session: SessionConfig, *, task: str = "figure_eight",
                     chunk: ChunkSettings | None = None, period: int = 200, amplitude: float = 0.3,
                     record: bool = False) -> TrackingRun:
    """Closed-loop tracking of a seeded reference on one embodiment."""
    chunk = chunk or ChunkSettings()
    ref = reference_trajectory(task, session.duration + chunk.T + 1, session.seed, emb, layout,
                               period=period, amplitude=amplitude)
    sim = SimEmbodiment(emb, layout)
    policy = TrackingPolicy(sim, ref, chunk.T, chunk.K, chunk.sigma, chunk.length, chunk.gain)
    if record:
        policy = RecordingPolicy(policy)
    log = run_session(policy, sim, session)
    return TrackingRun(log, ref, policy.chunks if record else [])


def uac_pairs(layout: SlotLayout, emb: EmbodimentSpec, latency: LatencyModel, *, n_pairs: int = 50,
              duration: int = 400, seed: int = 0, task: str = "figure_eight",
              chunk: ChunkSettings | None = None, **session_kw) -> list[dict]:
    """Paired sessions (same seed, latency draws and reference) with and without UAC."""
    rows = []
    for i in range(n_pairs):
        s = int(stream(seed, "uac-pairs", i).integers(2**32))
        out = {"pair": i, "seed": s}
        for tag, uac in (("uac", True), ("no_uac", False)):
            cfg = SessionConfig(duration, latency, seed=s, uac=uac, **session_kw)
            run = tracking_session(layout, emb, cfg, task=task, chunk=chunk)
            m = run.metrics()
            out[f"max_step_jump_{tag}"] = m["max_step_jump"]
            out[f"mean_jerk_{tag}"] = m["mean_jerk"]
            out[f"underflow_rate_{tag}"] = m["underflow_rate"]
        rows.append(out)
    return rows


# ---------------------------------------------------------------- MPG toy

def reach_train_config(train: dict, seed: int) -> TrainConfig:
    return TrainConfig(lr=float(train.get("lr", 1e-2)), steps=int(train.get("steps", 6000)),
                       batch=int(train.get("batch", 128)), seed=seed,
                       hidden=tuple(train.get("hidden", (64, 64))))


def train_reach_pair(task: GatedReach, cfg: TrainConfig, mpg: dict | None = None):
    """Fit the MPG-trained field and the plain field used as its ablation."""
    params = default_reach_mpg(task, cfg.seed, **(mpg or {}))
    gated = train_reach(task, cfg, params)
    plain, _ = train_reach(task, cfg)
    return gated, plain


def mpg_pairs(task: GatedReach, gated, plain, *, n_pairs: int = 50, sigma: float = 1.0, K: int = 10,
              n_ref: int = 2, seed: int = 0) -> list[dict]:
    return mpg_ablation(task, gated, plain, n_pairs=n_pairs, sigma=sigma, K=K, n_ref=n_ref, seed=seed)


def planar_embodiment(layout: SlotLayout, control_period: float = 0.05, latency_budget: float = 0.05) -> EmbodimentSpec:
    """Two EEF position slots driven as position targets, for the learned reach policy."""
    slots = tuple(list(layout.group_range("left_eef_pos"))[:2])
    return EmbodimentSpec("planar_reach", slots, control_period, latency_budget,
                          dynamics="first_order_lag", lag_alpha=1.0)


def reach_session(layout: SlotLayout, task: GatedReach, net, params, session: SessionConfig, *, goal=None,
                  K: int = 10, n_ref: int = 2, suffix_noise: float = 0.0, emb: EmbodimentSpec | None = None):
    """Closed-loop reach with the learned field; returns the log and the goal."""
    emb = emb or planar_embodiment(layout)
    if goal is None:
        goal = stream(session.seed, "reach-goal").uniform(-1, 1, task.d)
    sim = SimEmbodiment(emb, layout)
    policy = GatedReachPolicy(task, net, params, emb.active_slots, goal, K=K, n_ref=n_ref, suffix_noise=suffix_noise)
    return run_session(policy, sim, session), np.asarray(goal, dtype=float)
