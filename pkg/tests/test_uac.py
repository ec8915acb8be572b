import numpy as np
import pytest

from chunkflow.errors import ProtocolViolation
from chunkflow.flow_policy import ConstantField, VelocityNet, euler_denoise, fm_loss, ContextFeatures
from chunkflow.uac import (
    DelayModel, assign_timesteps, commit_delay, default_delay_model, lock_hook, lock_prefix, masked_fm_loss,
    sample_delay, sample_delays, stitch,
)


def test_sample_delay_examples(rng):
    assert all(sample_delay(DelayModel.point(3), rng) == 3 for _ in range(20))
    assert all(sample_delay(DelayModel.uniform(1), rng) == 0 for _ in range(20))
    draws = sample_delays(DelayModel.uniform(4), rng, 100_000)
    freq = np.bincount(draws, minlength=4) / draws.size
    assert np.all(np.abs(freq - 0.25) <= 0.01)


def test_delay_model_rejects_bad_pmf():
    with pytest.raises(ValueError):
        DelayModel((0.5, 0.4))


def test_default_delay_model():
    assert default_delay_model(0.12, 0.05).d_max == commit_delay(0.12, 0.05, 1) + 1 == 5


def test_assign_timesteps():
    np.testing.assert_array_equal(assign_timesteps(8, 3, 0.4), [1, 1, 1, 0.4, 0.4, 0.4, 0.4, 0.4])
    np.testing.assert_array_equal(assign_timesteps(5, 0, 0.2), np.full(5, 0.2))
    np.testing.assert_array_equal(assign_timesteps(5, 5, 0.2), np.ones(5))
    with pytest.raises(ValueError):
        assign_timesteps(5, 6, 0.2)


def test_commit_delay_examples():
    assert commit_delay(0.120, 0.050, 1) == 4
    assert commit_delay(0.0, 0.05, 0) == 0
    assert commit_delay(0.100, 0.050, 0) == 2
    with pytest.raises(ValueError):
        commit_delay(-0.1, 0.05)


def test_commit_delay_monotone_in_latency():
    lat = np.linspace(0, 1, 201)
    d = [commit_delay(x, 0.02, 1) for x in lat]
    assert all(a <= b for a, b in zip(d, d[1:]))


@pytest.fixture
def net():
    return VelocityNet(8, 2, 4, hidden=(16,), seed=3)


@pytest.fixture
def ctx():
    return ContextFeatures.build(state=np.ones((1, 4)), action=np.zeros((8, 4)))


def test_masked_loss_prefix_locality(net, ctx, rng):
    target, x0 = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
    committed = rng.standard_normal((3, 2))
    base = masked_fm_loss(net, target, x0, 3, ctx, 0.3, prefix=committed)
    pert = target.copy()
    pert[1] += 5.0
    other = masked_fm_loss(net, pert, x0, 3, ctx, 0.3, prefix=committed)
    assert other[0] == base[0] and np.array_equal(other[1], base[1])
    pert = target.copy()
    pert[5] += 5.0
    assert masked_fm_loss(net, pert, x0, 3, ctx, 0.3, prefix=committed)[0] != base[0]


def test_masked_loss_edge_delays(net, ctx, rng):
    target, x0 = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
    assert masked_fm_loss(net, target, x0, 8, ctx, 0.3)[0] == 0.0
    a, b = masked_fm_loss(net, target, x0, 0, ctx, 0.3), fm_loss(net, target, x0, 0.3, ctx)
    assert a[0] == b[0] and np.array_equal(a[1], b[1])


def test_lock_prefix(rng):
    x, B = rng.standard_normal((8, 3)), rng.standard_normal((8, 3))
    assert np.array_equal(lock_prefix(x, B, 0), x)
    assert np.array_equal(lock_prefix(x, B, 8), B)
    out = lock_prefix(x, B, 3)
    assert np.array_equal(out[:3], B[:3]) and np.array_equal(out[3:], x[3:])
    with pytest.raises(ProtocolViolation):
        lock_prefix(x, B[:2], 3)


def test_lock_hook_holds_prefix_every_step(rng):
    B = rng.standard_normal((3, 2))
    seen = []
    hook = lock_hook(B, 3)

    def watch(x, k):
        x = hook(x, k)
        seen.append(x[:3].copy())
        return x

    euler_denoise(ConstantField(np.ones((8, 2))), rng.standard_normal((8, 2)), 6, per_step_hook=watch)
    assert len(seen) == 7
    assert all(np.array_equal(s, B) for s in seen)


def test_stitch(rng):
    prev, new = rng.standard_normal((8, 2)), rng.standard_normal((8, 2))
    assert np.array_equal(stitch(prev, new, 0), new)
    assert np.array_equal(stitch(prev, new, 8), prev)
    out = stitch(prev, new, 3)
    assert np.array_equal(out[:3], prev[:3]) and np.array_equal(out[3:], new[3:])
    with pytest.raises(ValueError):
        stitch(prev, new, 9)
