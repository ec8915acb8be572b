"""Desk-scale tasks used by the CLI and the acceptance suite.

``bimodal``: a two-mode 2-D target with no conditioning.
``GatedReach``: chunks that ramp from a start to a goal. The goal enters
through prefix rows, the start through a small-scale encoded state row, so
the suffix carries weak but necessary information that additive noise can
swamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._rng import stream
from .flow_policy import ActionEncoder, ContextFeatures, TrainConfig, VelocityNet, euler_denoise, train_toy_field
from .mpg import MpgParams, refine, train_gated_field
from .sim import Observation, Plan

BIMODAL_MODES = np.array([[-1.0, -1.0], [1.0, 1.0]])


def bimodal_dataset():
    ctx = ContextFeatures.build(state=np.zeros((1, 1)))
    return [(ctx, m[None, :].copy()) for m in BIMODAL_MODES]


def train_bimodal(cfg: TrainConfig) -> VelocityNet:
    return train_toy_field(bimodal_dataset(), cfg)


def bimodal_report(net: VelocityNet, n: int = 1000, K: int = 8, seed: int = 0, radius: float = 0.3) -> dict:
    ctx = bimodal_dataset()[0][0]
    x0 = stream(seed, "bimodal-eval").standard_normal((n, 1, 2))
    out = np.array([euler_denoise(net, x, K, ctx).actions[0] for x in x0])
    dist = np.linalg.norm(out[:, None, :] - BIMODAL_MODES[None], axis=2)
    nearest = np.argmin(dist, axis=1)
    return {
        "samples": out,
        "within": float(np.mean(dist.min(axis=1) < radius)),
        "mode_freq": float(np.mean(nearest == 1)),
    }


@dataclass
class GatedReach:
    T: int = 4
    d: int = 2
    d_model: int = 12
    state_scale: float = 0.3
    seed: int = 0
    encoder: ActionEncoder = field(init=False)

    def __post_init__(self):
        rng = stream(self.seed, "gated-reach")
        self.goal_proj = rng.standard_normal((2, self.d_model, self.d)) / np.sqrt(self.d)
        self.encoder = ActionEncoder(self.d, self.d_model, seed=self.seed)

    def target(self, goal, start) -> np.ndarray:
        ramp = np.arange(1, self.T + 1)[:, None] / self.T
        return start + ramp * (np.asarray(goal) - start)

    def context(self, goal, start) -> ContextFeatures:
        goal, start = np.asarray(goal, float), np.asarray(start, float)
        return ContextFeatures.build(
            prefix=np.stack([P @ goal for P in self.goal_proj]),
            state=self.state_scale * self.encoder.encode(start)[None],
            action=np.zeros((self.T, self.d_model)),
        )

    def sample(self, rng):
        goal, start = rng.uniform(-1, 1, self.d), rng.uniform(-1, 1, self.d)
        return self.context(goal, start), self.target(goal, start), goal, start

    def dataset(self, n: int, seed: int):
        rng = stream(seed, "gated-reach-data")
        return [self.sample(rng)[:2] for _ in range(n)]

    @staticmethod
    def corrupt(ctx: ContextFeatures, sigma: float, rng) -> ContextFeatures:
        tokens = ctx.tokens.copy()
        sl = ctx.suffix()
        tokens[sl] += sigma * rng.standard_normal(tokens[sl].shape)
        return ctx.replace_tokens(tokens)

    def new_net(self, hidden=(64, 64), seed: int = 0) -> VelocityNet:
        return VelocityNet(self.T, self.d, self.d_model, hidden=hidden, seed=seed, encoder=self.encoder)


def default_reach_mpg(task: GatedReach, seed: int = 0, **kw) -> MpgParams:
    opts = {"d_emb": 8, "lam": 0.5, "tau": 3.0, "n_slices": 32, "tied": True, **kw}
    return MpgParams.init(task.d_model, seed=seed, **opts)


def train_reach(task: GatedReach, cfg: TrainConfig, params: MpgParams | None = None, n_data: int = 2000):
    """Fit a reach field; with ``params`` the MPG residual is trained jointly."""
    data = task.dataset(n_data, cfg.seed)
    net = task.new_net(cfg.hidden, cfg.seed)
    if params is None:
        return train_toy_field(data, cfg, net), None
    return train_gated_field(data, cfg, params, net)


def mpg_ablation(task: GatedReach, gated: tuple, baseline: VelocityNet, n_pairs: int = 50, sigma: float = 1.0,
                 K: int = 10, n_ref: int = 2, seed: int = 0) -> list[dict]:
    """Paired trials on corrupted contexts: MPG-trained field with refinement vs a plain field.

    Each pair shares the goal, start, corruption and initial noise.
    """
    net, params = gated
    rows = []
    for i in range(n_pairs):
        rng = stream(seed, "mpg-ablation", i)
        ctx, target, _, _ = task.sample(rng)
        noisy = task.corrupt(ctx, sigma, rng)
        x0 = rng.standard_normal((task.T, task.d))
        res = refine(net, noisy, n_ref, K, params, x0)
        stage1 = refine(net, noisy, 0, K, params, x0)
        base = euler_denoise(baseline, x0, K, noisy)
        rows.append({
            "pair": i,
            "err_mpg": float(np.linalg.norm(res.actions - target)),
            "err_no_mpg": float(np.linalg.norm(base.actions - target)),
            "err_stage1": float(np.linalg.norm(stage1.actions - target)),
            "gate_last": res.rounds[-1][-1].g if res.rounds else None,
        })
    return rows


class GatedReachPolicy:
    """Closed-loop reach with a learned field; ``n_ref > 0`` turns MPG refinement on."""

    def __init__(self, task: GatedReach, net: VelocityNet, params: MpgParams | None, slots, goal,
                 K: int = 10, n_ref: int = 2, suffix_noise: float = 0.0):
        if n_ref > 0 and params is None:
            raise ValueError("refinement needs MPG parameters")
        self.task, self.net, self.params = task, net, params
        self.T, self.K, self.n_ref = task.T, K, n_ref
        self.idx = list(slots)
        self.goal = np.asarray(goal, dtype=float)
        self.suffix_noise = suffix_noise

    def plan(self, obs: Observation, prefix, d: int, rng) -> Plan:
        from .uac import lock_hook

        ctx = self.task.context(self.goal, obs.state[self.idx])
        if self.suffix_noise > 0:
            ctx = self.task.corrupt(ctx, self.suffix_noise, rng)
        x0 = rng.standard_normal((self.T, self.task.d))
        hook = lock_hook(np.asarray(prefix)[:, self.idx], d) if d else None
        res = refine(self.net, ctx, self.n_ref, self.K, self.params, x0, per_step_hook=hook, clean_prefix=d)
        out = np.zeros((self.T, obs.state.size))
        out[:, self.idx] = res.actions
        return Plan(out, res.rounds)
