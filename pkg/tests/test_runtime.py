import numpy as np
import pytest

from chunkflow.errors import BackpressureError, ProtocolViolation, SessionAborted
from chunkflow.experiments import tracking_session
from chunkflow.runtime import (
    ExecutionBuffer, SessionConfig, SessionLog, committed_delay, latency_percentiles, run_session, session_summary,
)
from chunkflow.sim import LatencyModel, Plan, SimEmbodiment
from chunkflow.unified_space import EmbodimentSpec


def chunk(T, w, value):
    return np.full((T, w), float(value))


class TestBuffer:
    def test_first_push_fills_T(self):
        buf = ExecutionBuffer(8, width=2)
        buf.push_postfix(chunk(8, 2, 1), base=0, d=0, cycle=0)
        assert buf.occupancy == 8

    def test_capacity_rule(self):
        with pytest.raises(ValueError):
            ExecutionBuffer(8, capacity=15, width=2)
        assert ExecutionBuffer(8, width=2).capacity == 16
        with pytest.raises(ValueError):
            ExecutionBuffer(8)

    def test_postfix_over_half_consumed_chunk(self):
        buf = ExecutionBuffer(8, width=1)
        first = np.arange(8.0)[:, None]
        buf.push_postfix(first, 0, 0, cycle=0)
        popped = [buf.pop_or_fallback()[0][0] for _ in range(4)]
        assert popped == [0, 1, 2, 3]
        res = buf.push_postfix(chunk(8, 1, 100), base=4, d=3, cycle=1)
        assert res["written"] == [7, 8, 9, 10, 11]
        rest = [buf.pop_or_fallback()[0][0] for _ in range(8)]
        assert rest == [4, 5, 6, 100, 100, 100, 100, 100]

    def test_same_cycle_twice_rejected(self):
        buf = ExecutionBuffer(4, width=1)
        buf.push_postfix(chunk(4, 1, 1), 0, 0, cycle=3)
        with pytest.raises(ProtocolViolation):
            buf.push_postfix(chunk(4, 1, 2), 4, 0, cycle=3)

    def test_backpressure(self):
        buf = ExecutionBuffer(4, width=1)
        buf.push_postfix(chunk(4, 1, 1), 0, 0, cycle=0)
        buf.push_postfix(chunk(4, 1, 2), 4, 0, cycle=1)
        with pytest.raises(BackpressureError):
            buf.push_postfix(chunk(4, 1, 3), 8, 0, cycle=2)
        buf.pop_or_fallback()
        with pytest.raises(BackpressureError):
            buf.push_postfix(chunk(4, 1, 3), 8, 0, cycle=2)
        for _ in range(3):
            buf.pop_or_fallback()
        buf.push_postfix(chunk(4, 1, 3), 8, 0, cycle=2)

    def test_offset_and_finiteness_checks(self):
        buf = ExecutionBuffer(4, width=1)
        with pytest.raises(ValueError):
            buf.push_postfix(chunk(4, 1, 1), 0, 5, cycle=0)
        bad = chunk(4, 1, 1)
        bad[2] = np.inf
        with pytest.raises(ValueError):
            buf.push_postfix(bad, 0, 1, cycle=0)

    def test_pop_paths(self):
        buf = ExecutionBuffer(2, rest=[7.0])
        a, flag, *_ = buf.pop_or_fallback("safe_pose")
        assert a[0] == 7.0 and flag
        buf.push_postfix(np.array([[1.0], [2.0]]), 1, 0, cycle=0)
        assert buf.pop_or_fallback()[:2] == (pytest.approx([1.0]), False)
        buf2 = ExecutionBuffer(1, rest=[0.0])
        buf2.push_postfix(np.array([[5.0]]), 0, 0, cycle=0)
        assert buf2.pop_or_fallback()[0][0] == 5.0
        a, flag, cycle, _ = buf2.pop_or_fallback("hold_last")
        assert a[0] == 5.0 and flag and cycle == -1
        with pytest.raises(ValueError):
            buf2.pop_or_fallback("panic")

    def test_cursor_invariants(self, rng):
        buf = ExecutionBuffer(4, width=1)
        cycle = 0
        for _ in range(200):
            if rng.random() < 0.4 and buf.occupancy <= 4:
                buf.push_postfix(chunk(4, 1, cycle), buf.read_cursor, int(rng.integers(0, 3)), cycle)
                cycle += 1
            else:
                buf.pop_or_fallback()
            assert 0 <= buf.occupancy <= buf.capacity


class ConstantPolicy:
    def __init__(self, T, width, value=0.01):
        self.T, self.width, self.value = T, width, value
        self.calls = 0

    def plan(self, obs, prefix, d, rng):
        self.calls += 1
        out = np.full((self.T, self.width), self.value)
        out[:d] = prefix
        return Plan(out)


@pytest.fixture
def arm(fleet):
    return fleet["arm_gripper_20hz"]


class TestSession:
    def test_zero_duration(self, layout, arm):
        pol = ConstantPolicy(8, layout.d)
        log = run_session(pol, SimEmbodiment(arm, layout), SessionConfig(0))
        assert log.steps == [] and pol.calls == 0

    def test_zero_latency_soak(self, layout, arm):
        run = tracking_session(layout, arm, SessionConfig(10_000, LatencyModel.constant(0.0), seed=1))
        log = run.log
        assert log.underflow_count == 0
        assert np.array_equal(log.step_indices(), np.arange(10_000))
        assert not any(c.violation for c in log.cycles)

    def test_twice_budget_degrades_gracefully(self, layout, arm):
        cfg = SessionConfig(400, LatencyModel.constant(2 * arm.latency_budget), seed=2)
        log = tracking_session(layout, arm, cfg).log
        assert log.underflow_count > 0
        assert np.array_equal(log.step_indices(), np.arange(400))
        A, flags = log.actions(), log.underflows()
        for n in np.flatnonzero(flags):
            if n > 0:
                assert np.array_equal(A[n], A[n - 1])

    def test_deterministic(self, layout, arm):
        cfg = SessionConfig(300, LatencyModel.uniform_jitter(0.0, 0.2), seed=9)
        a = tracking_session(layout, arm, cfg).log
        b = tracking_session(layout, arm, cfg).log
        assert np.array_equal(a.actions(), b.actions())
        assert [c.latency for c in a.cycles] == [c.latency for c in b.cycles]

    def test_starvation_aborts(self, layout, arm):
        pol = ConstantPolicy(8, layout.d)
        cfg = SessionConfig(1000, LatencyModel.constant(1e3), starvation_limit=50)
        with pytest.raises(SessionAborted) as exc:
            run_session(pol, SimEmbodiment(arm, layout), cfg)
        # the first d=4 steps execute the padded committed prefix, then 51 underflows in a row
        assert exc.value.diagnostics["step"] == 4 + 50
        steps = exc.value.log.steps
        assert [s.padded for s in steps[:4]] == [True] * 4
        assert all(s.underflow for s in steps[4:]) and len(steps) == 55

    def test_safe_pose_fallback_uses_rest(self, layout):
        emb = EmbodimentSpec("r", (0, 1), 0.05, 0.05, rest_action=(0.5, -0.5))
        pol = ConstantPolicy(4, layout.d)
        cfg = SessionConfig(3, LatencyModel.constant(1.0), fallback="safe_pose", d=0)
        log = run_session(pol, SimEmbodiment(emb, layout), cfg)
        assert all(s.underflow for s in log.steps)
        assert log.steps[0].action[:2] == [0.5, -0.5]

    def test_wall_clock_smoke(self, layout, fleet):
        emb = fleet["bimanual_dex_50hz"]
        cfg = SessionConfig(25, LatencyModel.constant(0.005), clock="wall")
        log = tracking_session(layout, emb, cfg).log
        assert np.array_equal(log.step_indices(), np.arange(25))
        assert len(log.cycles) >= 1

    def test_committed_delay(self, layout, arm):
        sim = SimEmbodiment(arm, layout)
        assert committed_delay(SessionConfig(1), sim, 8) == 4
        assert committed_delay(SessionConfig(1, uac=False), sim, 8) == 0
        with pytest.raises(ValueError):
            committed_delay(SessionConfig(1, d=9), sim, 8)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SessionConfig(-1)
        with pytest.raises(ValueError):
            SessionConfig(1, clock="gps")


def test_jsonl_round_trip(tmp_path, layout, arm):
    log = tracking_session(layout, arm, SessionConfig(50, LatencyModel.constant(0.05), seed=3)).log
    log.write_jsonl(tmp_path / "s.jsonl", tmp_path / "c.jsonl", header={"seed": 3})
    back = SessionLog.read_jsonl(tmp_path / "s.jsonl", tmp_path / "c.jsonl")
    assert back.meta == {"seed": 3}
    assert np.array_equal(back.actions(), log.actions())
    assert len(back.cycles) == len(log.cycles)


def test_summary_and_percentiles(layout, arm):
    log = tracking_session(layout, arm, SessionConfig(100, LatencyModel.uniform_jitter(0, 0.1), seed=0)).log
    s = session_summary(log)
    assert s["steps"] == 100 and s["latency_p50"] <= s["latency_p95"] <= s["latency_p99"]
    assert np.isnan(latency_percentiles([])["p50"])
