import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chunkflow.flow_policy import max_relative_error, numeric_gradient
from chunkflow.seqmodel import (
    MASK_ID, Segment, apply_mask, assign_positions, fit_codebook, gate_matrix, joint_loss, load_codebook,
    mask_count, masked_attention, masked_ce_loss, sample_mask, save_codebook, serialize_qa, tokenize,
)

spans3 = st.tuples(st.integers(0, 6), st.integers(0, 6), st.integers(0, 6)).filter(lambda s: sum(s) > 0)


class TestSerialize:
    def test_vqa(self):
        ts = serialize_qa([Segment("vision", 3, "query"), Segment("text", 2, "query"), Segment("text", 4, "answer_text")])
        assert list(ts.omega["text"]) == [7, 8, 9, 10]
        assert ts.omega["fm"].size == 0 and ts.kinds[:5] == ["begin", "content", "content", "content", "end"]

    def test_robot(self):
        ts = serialize_qa([Segment("vision", 2, "query"), Segment("text", 1, "query"), Segment("state", 1, "query"),
                           Segment("action", 3, "answer_fm")])
        assert ts.omega["text"].size == 0
        assert [ts.kinds[i] for i in ts.omega["fm"]] == ["content"] * 3
        assert ts.spans == (8, 5, 0)

    def test_hybrid_partition(self):
        ts = serialize_qa([Segment("vision", 2, "query"), Segment("text", 2, "query"),
                           Segment("action", 3, "answer_fm"), Segment("action", 3, "answer_mask")])
        fm, mk = set(ts.omega["fm"]), set(ts.omega["mask"])
        assert fm and mk and not fm & mk
        assert min(fm | mk) >= ts.spans[0]

    def test_answer_before_query(self):
        with pytest.raises(ValueError):
            serialize_qa([Segment("action", 2, "answer_fm"), Segment("text", 1, "query")])
        with pytest.raises(ValueError):
            serialize_qa([Segment("action", 2, "answer_fm")])

    def test_segment_checks(self):
        with pytest.raises(ValueError):
            Segment("smell", 1, "query")
        with pytest.raises(ValueError):
            Segment("vision", 1, "answer_text")

    def test_json(self):
        ts = serialize_qa([{"modality": "text", "length": 2, "role": "query"},
                           {"modality": "text", "length": 1, "role": "answer_text"}])
        obj = json.loads(ts.dumps())
        assert obj["omega"]["text"] == [2] and obj["spans"] == [2, 1, 0]


class TestGate:
    def test_paper_block_example(self):
        G = gate_matrix((2, 1, 1)).astype(int)
        np.testing.assert_array_equal(G, [[1, 0, 0, 0], [1, 1, 0, 0], [1, 1, 1, 0], [1, 1, 0, 1]])

    def test_empty_mask_is_causal(self):
        np.testing.assert_array_equal(gate_matrix((3, 2, 0)), np.tril(np.ones((5, 5), bool)))

    @settings(max_examples=60, deadline=None)
    @given(spans3, st.integers(0, 2**31))
    def test_mutual_invisibility(self, spans, seed):
        q, fm, mk = spans
        rng = np.random.default_rng(seed)
        N = q + fm + mk
        X = rng.standard_normal((N, 5))
        A = masked_attention(X, rng.standard_normal((5, 4)), rng.standard_normal((5, 4)), gate_matrix(spans))
        Q, F, M = slice(0, q), slice(q, q + fm), slice(q + fm, N)
        assert np.all(A[F, M] == 0) and np.all(A[M, F] == 0)
        assert np.all(A[Q, q:] == 0)
        np.testing.assert_allclose(A.sum(axis=1), 1.0, rtol=1e-12)

    def test_custom_base(self):
        G = gate_matrix((1, 1, 1), base=np.ones((3, 3)))
        assert G[0, 1] == 0 and G[1, 2] == 0 and G[2, 0] == 1
        with pytest.raises(ValueError):
            gate_matrix((1, 1, 1), base=np.ones((2, 2)))


class TestPositions:
    def test_examples(self):
        pe = assign_positions((5, 3, 2))
        np.testing.assert_array_equal(pe, [0, 1, 2, 3, 4, 5, 6, 7, 5, 6])
        assert assign_positions((0, 2, 2)).tolist() == [0, 1, 0, 1]

    @given(spans3)
    def test_alignment(self, spans):
        q, fm, mk = spans
        pe = assign_positions(spans)
        if fm:
            assert pe[q] == q
        if mk:
            assert pe[q + fm] == q


class TestMask:
    def test_counts(self):
        assert mask_count(10, 0.3) == 3
        assert mask_count(1, 0.01) == 1
        assert mask_count(10, 0.25) == 2  # 2.5 rounds down
        with pytest.raises(ValueError):
            mask_count(5, 1.0)

    def test_frequency(self):
        rng = np.random.default_rng(0)
        counts = np.zeros(10)
        n = 100_000
        for _ in range(n):
            counts[sample_mask(10, 0.3, rng)] += 1
        assert np.all(np.abs(counts / n - 0.3) <= 0.01)

    def test_apply_mask(self):
        assert apply_mask([4, 5, 6], [1]).tolist() == [4, MASK_ID, 6]


class TestMaskedCE:
    def test_uniform(self):
        loss, _ = masked_ce_loss(np.zeros((1, 4)), np.array([2]), [0])
        assert loss == pytest.approx(math.log(4), abs=1e-15)

    def test_confident(self):
        L = np.zeros((1, 4))
        L[0, 2] = 800.0
        assert masked_ce_loss(L, np.array([3]), [0])[0] == 0.0

    def test_oracle_and_gradient(self, rng):
        L = rng.standard_normal((6, 5))
        z = rng.integers(1, 6, 6)
        om = np.array([0, 2, 5])
        loss, grad = masked_ce_loss(L, z, om)
        oracle = -sum(L[i, z[i] - 1] - math.log(sum(math.exp(v) for v in L[i])) for i in om)
        assert loss == pytest.approx(oracle, abs=1e-12)
        flat = L.ravel()
        num = numeric_gradient(lambda: masked_ce_loss(flat.reshape(6, 5), z, om)[0], flat, 1e-6).reshape(6, 5)
        assert max_relative_error(grad, num) < 1e-5
        assert not np.any(grad[[1, 3, 4]])

    def test_unmasked_targets_do_not_matter(self, rng):
        L = rng.standard_normal((4, 3))
        a = masked_ce_loss(L, np.array([1, 2, 3, 1]), [1])[0]
        b = masked_ce_loss(L, np.array([3, 2, 1, 3]), [1])[0]
        assert a == b

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            masked_ce_loss(np.zeros((1, 4)), np.array([5]), [0])
        with pytest.raises(ValueError):
            masked_ce_loss(np.zeros((1, 4)), np.array([0]), [0])


class TestJointLoss:
    def test_examples(self):
        assert joint_loss({"fm": 2.0}, {"act": 1.0, "fm": 1.0}) == 2.0
        assert joint_loss({"text": 0.0, "fm": 0.0, "mask": 0.0}) == 0.0
        assert joint_loss({"text": 1.0, "fm": 2.0, "mask": 3.0}, (0.5, 1.0, 1.0, 0.1)) == pytest.approx(2.8, abs=1e-15)

    def test_rejects(self):
        with pytest.raises(ValueError):
            joint_loss({})
        with pytest.raises(ValueError):
            joint_loss({"fm": 1.0}, {"act": -1.0})
        with pytest.raises(ValueError):
            joint_loss({"vision": 1.0})

    def test_parts_route_independently(self):
        base = joint_loss({"text": 1.0, "fm": 2.0, "mask": 3.0})
        bumped = joint_loss({"text": 1.0, "fm": 2.0, "mask": 4.0})
        assert bumped - base == pytest.approx(0.1)


def test_codebook_round_trip(tmp_path, rng):
    X = np.concatenate([rng.normal(c, 0.01, (40, 2)) for c in (-1.0, 0.0, 1.0)])
    C = fit_codebook(X, size=3, seed=0)
    codes = tokenize(C, X)
    assert codes.min() >= 1 and codes.max() <= 3
    assert len(set(codes[:40])) == 1 and len(set(codes)) == 3
    save_codebook(tmp_path / "c.bin", C, seed=0)
    assert np.array_equal(load_codebook(tmp_path / "c.bin"), C)
    with pytest.raises(ValueError):
        fit_codebook(X[:2], size=3)
