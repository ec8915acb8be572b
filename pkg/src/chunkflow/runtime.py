"""Dual-actor execution: a fixed-rate consumer pops actions from a shared
ring buffer while an asynchronous producer writes freshly denoised chunks.

Two clocks are available. ``sim`` interleaves the actors deterministically,
one event sequence per control tick; ``wall`` runs them on real threads.
"""

from __future__ import annotations

import json
import logging
import threading
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from ._rng import stream
from .errors import BackpressureError, ProtocolViolation, SessionAborted
from .sim import LatencyModel, Observation, Plan, SimEmbodiment, step_embodiment
from .uac import commit_delay

log = logging.getLogger(__name__)

FALLBACKS = ("hold_last", "safe_pose")


class ExecutionBuffer:
    """Bounded SPSC ring of actions addressed by absolute control step.

    ``read_cursor`` is the next step the consumer executes; ``write_cursor``
    is one past the last committed step. Both only grow.
    """

    def __init__(self, T: int, capacity: int | None = None, rest=None, width: int | None = None):
        if T < 1:
            raise ValueError("chunk length must be >= 1")
        capacity = 2 * T if capacity is None else int(capacity)
        if capacity < 2 * T:
            raise ValueError(f"capacity {capacity} < 2 x chunk length ({2 * T})")
        self.T, self.capacity = T, capacity
        if rest is None and width is None:
            raise ValueError("need a rest action or an action width")
        self.rest = np.zeros(width) if rest is None else np.asarray(rest, dtype=float).copy()
        self._slots = np.zeros((capacity, self.rest.size))
        self._cycles = np.full(capacity, -1, dtype=int)
        self._padded = np.zeros(capacity, dtype=bool)
        self.read_cursor = 0
        self.write_cursor = 0
        self.last_cycle: int | None = None
        self.last_action: np.ndarray | None = None
        self._lock = threading.Lock()

    @property
    def occupancy(self) -> int:
        return self.write_cursor - self.read_cursor

    def window(self, start: int, n: int) -> np.ndarray:
        """Committed rows for steps ``[start, start + n)`` that are still buffered."""
        with self._lock:
            lo = max(start, self.read_cursor)
            hi = min(start + n, self.write_cursor)
            if lo != start:
                return np.zeros((0, self.rest.size))
            return np.array([self._slots[j % self.capacity] for j in range(lo, hi)]).reshape(-1, self.rest.size)

    def push_postfix(self, chunk, base: int, d: int, cycle: int, padded_rows: int = 0) -> dict:
        """Commit a stitched chunk whose row 0 belongs to step ``base``.

        Rows ``>= d`` overwrite steps ``[base + d, base + T)``. Locked rows
        ``< d`` are only written where the buffer holds nothing yet (the
        padded part of an under-committed prefix). Steps already executed are
        dropped and counted.
        """
        chunk = np.asarray(chunk, dtype=float)
        if chunk.shape != (self.T, self.rest.size):
            raise ValueError(f"chunk must be {self.T} x {self.rest.size}")
        if not 0 <= d <= self.T:
            raise ValueError(f"offset {d} outside [0, {self.T}]")
        if not np.all(np.isfinite(chunk[d:])):
            raise ValueError("non-finite action in postfix")
        with self._lock:
            if self.last_cycle is not None and cycle <= self.last_cycle:
                raise ProtocolViolation(f"cycle {cycle} already pushed (last {self.last_cycle})")
            if base + self.T - self.read_cursor > self.capacity:
                raise BackpressureError(
                    f"write to step {base + self.T - 1} would overrun read cursor {self.read_cursor}"
                )
            written, dropped_post, dropped_pre = [], 0, 0
            for i in range(self.T):
                j = base + i
                if i < d and j < self.write_cursor:
                    continue  # committed prefix: untouched
                if j < self.read_cursor:
                    if i >= d:
                        dropped_post += 1
                    else:
                        dropped_pre += 1
                    continue
                s = j % self.capacity
                self._slots[s] = chunk[i]
                self._cycles[s] = cycle
                self._padded[s] = i < d and i >= d - padded_rows
                written.append(j)
            self.write_cursor = max(self.write_cursor, base + self.T)
            self.last_cycle = cycle
        return {"written": written, "dropped_postfix": dropped_post, "dropped_prefix": dropped_pre}

    def commit_padding(self, rows, base: int) -> int:
        """Append fallback rows for a prefix the buffer cannot supply; returns rows written."""
        rows = np.asarray(rows, dtype=float).reshape(-1, self.rest.size)
        with self._lock:
            n = 0
            for i, row in enumerate(rows):
                j = base + i
                if j < self.write_cursor:
                    continue
                if j != self.write_cursor or j + 1 - self.read_cursor > self.capacity:
                    break
                s = j % self.capacity
                self._slots[s], self._cycles[s], self._padded[s] = row, -1, True
                self.write_cursor += 1
                n += 1
        return n

    def pop_or_fallback(self, fallback: str = "hold_last"):
        """Return ``(action, underflow, cycle, padded)`` for the step at ``read_cursor``."""
        if fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")
        with self._lock:
            if self.read_cursor < self.write_cursor:
                s = self.read_cursor % self.capacity
                action = self._slots[s].copy()
                out = (action, False, int(self._cycles[s]), bool(self._padded[s]))
            else:
                if fallback == "hold_last" and self.last_action is not None:
                    action = self.last_action.copy()
                else:
                    action = self.rest.copy()
                out = (action, True, -1, False)
            self.read_cursor += 1
            self.write_cursor = max(self.write_cursor, self.read_cursor)
            self.last_action = action
        return out


# ------------------------------------------------------------------------ log

@dataclass
class StepRecord:
    step: int
    action: list
    cycle: int
    underflow: bool
    latency: float | None = None
    padded: bool = False


@dataclass
class CycleRecord:
    cycle: int
    start_step: int
    ready_step: int
    d: int
    latency: float
    infer_time: float
    lock_ok: bool
    under_committed: bool = False
    padded_rows: int = 0
    dropped_postfix: int = 0
    violation: bool = False
    pushed_step: int | None = None
    gates: list = field(default_factory=list)


@dataclass
class SessionLog:
    embodiment: str = ""
    steps: list = field(default_factory=list)
    cycles: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def actions(self) -> np.ndarray:
        if not self.steps:
            return np.zeros((0, 0))
        return np.array([s.action for s in self.steps], dtype=float)

    def underflows(self) -> np.ndarray:
        return np.array([s.underflow for s in self.steps], dtype=bool)

    def step_indices(self) -> np.ndarray:
        return np.array([s.step for s in self.steps], dtype=int)

    @property
    def underflow_count(self) -> int:
        return int(self.underflows().sum()) if self.steps else 0

    def write_jsonl(self, path, cycles_path=None, header: dict | None = None) -> None:
        """One JSON object per step; ``header`` becomes a leading ``{"meta": ...}`` line.

        Under the simulated clock the measured ``infer_time`` is written as 0
        so that equal seeds give byte-identical files.
        """
        wall = self.meta.get("clock") == "wall"
        with open(Path(path), "w") as f:
            if header is not None:
                f.write(json.dumps({"meta": header}, sort_keys=True) + "\n")
            for s in self.steps:
                f.write(json.dumps(asdict(s)) + "\n")
        if cycles_path is not None:
            with open(Path(cycles_path), "w") as f:
                if header is not None:
                    f.write(json.dumps({"meta": header}, sort_keys=True) + "\n")
                for c in self.cycles:
                    rec = asdict(c)
                    if not wall:
                        rec["infer_time"] = 0.0
                    f.write(json.dumps(rec) + "\n")

    @classmethod
    def read_jsonl(cls, path, cycles_path=None) -> "SessionLog":
        out = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                obj = json.loads(line)
                if "meta" in obj:
                    out.meta = obj["meta"]
                    continue
                out.steps.append(StepRecord(**obj))
        if cycles_path is not None:
            for line in Path(cycles_path).read_text().splitlines():
                if line.strip():
                    obj = json.loads(line)
                    if "meta" not in obj:
                        out.cycles.append(CycleRecord(**obj))
        return out


# -------------------------------------------------------------------- session

class ChunkPolicy(Protocol):
    T: int

    def plan(self, obs: Observation, prefix: np.ndarray, d: int, rng: np.random.Generator) -> Plan: ...


@dataclass
class SessionConfig:
    duration: int
    latency: LatencyModel = field(default_factory=LatencyModel)
    seed: int = 0
    uac: bool = True
    d: int | None = None  # None: derived from the embodiment's latency budget
    safety: int = 1
    capacity: int | None = None
    fallback: str = "hold_last"
    starvation_limit: int = 200
    clock: str = "sim"

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.clock not in ("sim", "wall"):
            raise ValueError("clock must be 'sim' or 'wall'")
        if self.fallback not in FALLBACKS:
            raise ValueError(f"fallback must be one of {FALLBACKS}")


def committed_delay(cfg: SessionConfig, sim: SimEmbodiment, T: int) -> int:
    if not cfg.uac:
        return 0
    d = commit_delay(sim.spec.latency_budget, sim.dt, cfg.safety) if cfg.d is None else int(cfg.d)
    if not 0 <= d <= T:
        raise ValueError(f"committed delay {d} outside [0, {T}]")
    return d


def _ticks(latency: float, dt: float) -> int:
    """First tick index offset at which a result started at a tick is usable."""
    return commit_delay(latency, dt, 0)


class _Producer:
    """Cycle bookkeeping shared by both clocks."""

    def __init__(self, policy, sim: SimEmbodiment, buf: ExecutionBuffer, cfg: SessionConfig, d: int, out: SessionLog):
        self.policy, self.sim, self.buf, self.cfg, self.d, self.out = policy, sim, buf, cfg, d, out
        self.T = policy.T
        self.lat_rng = cfg.latency.rng(cfg.seed)
        self.pol_rng = stream(cfg.seed, "policy")
        self.cycle = 0

    def prefix_for(self, base: int):
        """Buffered rows for the committed prefix, padded if the buffer runs short."""
        d = self.d
        have = self.buf.window(base, d)
        n_pad = d - have.shape[0]
        if n_pad == 0:
            return have, 0
        if have.shape[0]:
            pad = have[-1]
        elif self.buf.occupancy > 0:
            pad = self.buf.window(self.buf.write_cursor - 1, 1)[0]
        elif self.cfg.fallback == "hold_last" and self.buf.last_action is not None:
            pad = self.buf.last_action
        else:
            pad = self.buf.rest
        return np.vstack([have, np.repeat(pad[None], n_pad, axis=0)]), n_pad

    def start(self, base: int, state: np.ndarray):
        prefix, n_pad = self.prefix_for(base)
        if n_pad:
            self.buf.commit_padding(prefix, base)
        t0 = time.perf_counter()
        plan = self.policy.plan(Observation(base, state), prefix, self.d, self.pol_rng)
        infer = time.perf_counter() - t0
        chunk = np.asarray(plan.actions, dtype=float)
        lat = self.cfg.latency.sample(self.lat_rng)
        rec = CycleRecord(
            cycle=self.cycle, start_step=base, ready_step=base + _ticks(lat, self.sim.dt), d=self.d,
            latency=lat, infer_time=infer, lock_ok=bool(np.array_equal(chunk[: self.d], prefix)),
            under_committed=n_pad > 0, padded_rows=n_pad,
            gates=[[g.to_json() for g in r] for r in plan.gates],
        )
        if not rec.lock_ok:
            raise ProtocolViolation(f"cycle {self.cycle}: chunk prefix differs from the committed rows")
        self.cycle += 1
        return rec, chunk

    def push(self, rec: CycleRecord, chunk, now: int):
        res = self.buf.push_postfix(chunk, rec.start_step, self.d, rec.cycle, rec.padded_rows)
        rec.pushed_step = now
        rec.dropped_postfix = res["dropped_postfix"]
        rec.violation = res["dropped_postfix"] > 0 and self.cfg.uac
        if rec.violation:
            log.info("cycle %d: %d postfix rows arrived after execution", rec.cycle, rec.dropped_postfix)
        self.out.cycles.append(rec)


def run_session(policy: ChunkPolicy, sim: SimEmbodiment, cfg: SessionConfig) -> SessionLog:
    """Run the producer/consumer pair for ``cfg.duration`` control steps."""
    T = policy.T
    d = committed_delay(cfg, sim, T)
    out = SessionLog(sim.spec.id, meta={"d": d, "T": T, "seed": cfg.seed, "uac": cfg.uac,
                                          "clock": cfg.clock, "latency": cfg.latency.to_json()})
    if cfg.duration == 0:
        return out
    buf = ExecutionBuffer(T, cfg.capacity, rest=sim.spec.rest_unified(sim.layout.d))
    prod = _Producer(policy, sim, buf, cfg, d, out)
    if cfg.clock == "sim":
        _run_sim_clock(prod, cfg, out)
    else:
        _run_wall_clock(prod, cfg, out)
    return out


def _consume(prod: _Producer, n: int, out: SessionLog, starve: list, latency_of: dict):
    action, underflow, cycle, padded = prod.buf.pop_or_fallback(prod.cfg.fallback)
    step_embodiment(prod.sim, action)
    out.steps.append(StepRecord(n, action.tolist(), cycle, underflow, latency_of.get(cycle), padded))
    starve[0] = starve[0] + 1 if underflow else 0
    if starve[0] > prod.cfg.starvation_limit:
        raise SessionAborted(
            f"{starve[0]} consecutive underflows at step {n}",
            log=out,
            diagnostics={"step": n, "cycles": prod.cycle, "occupancy": prod.buf.occupancy},
        )


def _run_sim_clock(prod: _Producer, cfg: SessionConfig, out: SessionLog):
    inflight = None
    starve = [0]
    latency_of: dict[int, float] = {}

    def push_if_ready(n):
        nonlocal inflight
        if inflight is not None and inflight[0].ready_step <= n:
            prod.push(*inflight, n)
            inflight = None

    for n in range(cfg.duration):
        push_if_ready(n)
        if inflight is None and prod.buf.occupancy <= prod.T:
            inflight = prod.start(n, prod.sim.state.copy())
            latency_of[inflight[0].cycle] = inflight[0].latency
            push_if_ready(n)
        _consume(prod, n, out, starve, latency_of)


def _run_wall_clock(prod: _Producer, cfg: SessionConfig, out: SessionLog):
    dt = prod.sim.dt
    state_lock = threading.Lock()
    stop = threading.Event()
    errors: list[BaseException] = []
    latency_of: dict[int, float] = {}
    t_origin = time.perf_counter()

    def now_step() -> int:
        return int((time.perf_counter() - t_origin) / dt)

    def producer():
        try:
            while not stop.is_set():
                with state_lock:
                    idle = prod.buf.occupancy <= prod.T
                    base, state = prod.buf.read_cursor, prod.sim.state.copy()
                if not idle:
                    time.sleep(dt / 4)
                    continue
                t0 = time.perf_counter()
                rec, chunk = prod.start(base, state)
                latency_of[rec.cycle] = rec.latency
                remaining = rec.latency - (time.perf_counter() - t0)
                if remaining > 0:
                    stop.wait(remaining)
                if stop.is_set():
                    return
                rec.latency = time.perf_counter() - t0
                prod.push(rec, chunk, now_step())
        except BaseException as exc:  # surfaced by the consumer
            errors.append(exc)
            stop.set()

    thread = threading.Thread(target=producer, name="chunk-producer", daemon=True)
    thread.start()
    starve = [0]
    try:
        for n in range(cfg.duration):
            wait = t_origin + n * dt - time.perf_counter()
            if wait > 0:
                time.sleep(wait)
            if errors:
                raise errors[0]
            with state_lock:
                _consume(prod, n, out, starve, latency_of)
    finally:
        stop.set()
        thread.join(timeout=5.0)
    if errors:
        raise errors[0]


# ---------------------------------------------------------------------- bench

def latency_percentiles(samples) -> dict:
    x = np.asarray(samples, dtype=float)
    if x.size == 0:
        return {"p50": float("nan"), "p95": float("nan"), "p99": float("nan")}
    p50, p95, p99 = np.percentile(x, [50, 95, 99])
    return {"p50": float(p50), "p95": float(p95), "p99": float(p99)}


def session_summary(session: SessionLog) -> dict:
    lat = [c.latency for c in session.cycles]
    flags = session.underflows()
    return {
        "embodiment": session.embodiment,
        "steps": len(session.steps),
        "cycles": len(session.cycles),
        **{f"latency_{k}": v for k, v in latency_percentiles(lat).items()},
        "underflow_rate": float(flags.mean()) if flags.size else 0.0,
        "violations": sum(c.violation for c in session.cycles),
    }
