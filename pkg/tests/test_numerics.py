import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from memstream.errors import DistributionError, ShapeError, ZeroNormError
from memstream.numerics import (
    cosine_scores,
    cosine_sim,
    mean_pool_rows,
    multihead_attention,
    normalized_entropy,
    paired_cosine,
    scaled_dot_attention,
    softmax_row,
    top_k_desc,
)
from oracles import loop_attention

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False, width=32)


def nonzero_vec(dim):
    return arrays(np.float64, dim, elements=finite).filter(lambda v: np.abs(v).max() > 1e-3)


class TestCosine:
    def test_identical_unit(self):
        assert cosine_sim([1, 0, 0], [1, 0, 0]) == 1.0

    def test_orthogonal(self):
        assert cosine_sim([1, 0], [0, 1]) == 0.0

    def test_diagonal(self):
        assert cosine_sim([1, 1], [1, 0]) == pytest.approx(1 / math.sqrt(2), abs=1e-8)

    def test_zero_norm_raises(self):
        with pytest.raises(ZeroNormError):
            cosine_sim([0, 0], [1, 0])
        with pytest.raises(ZeroNormError):
            cosine_scores([1.0, 0.0], [[1.0, 0.0], [0.0, 0.0]])

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            cosine_sim([1, 0], [1, 0, 0])

    @given(nonzero_vec(5), nonzero_vec(5), st.floats(1e-3, 1e3))
    def test_self_and_scale_invariance(self, a, b, c):
        assert cosine_sim(a, a) == pytest.approx(1.0, abs=1e-6)
        assert cosine_sim(c * a, b) == pytest.approx(cosine_sim(a, b), abs=1e-6)

    def test_identical_rows_exactly_one(self, rng):
        A = rng.standard_normal((50, 7)).astype(np.float32)
        assert np.all(paired_cosine(A, A) == 1.0)
        assert np.all(cosine_scores(A[3], A[[3, 3]]) == 1.0)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(softmax_row([0, 0]), [0.5, 0.5])

    @pytest.mark.parametrize("c", [-1e4, -3.0, 0.0, 7.5, 1e4])
    def test_single(self, c):
        assert softmax_row([c]).tolist() == [1.0]

    def test_ln2(self):
        np.testing.assert_allclose(softmax_row([math.log(2), 0]), [2 / 3, 1 / 3], atol=1e-12)

    def test_large_logits_stable(self):
        p = softmax_row([1000.0, 999.0])
        assert np.all(np.isfinite(p))
        assert p.sum() == pytest.approx(1.0, abs=1e-6)

    def test_empty(self):
        with pytest.raises(ValueError):
            softmax_row([])


class TestAttention:
    def test_single_key(self, rng):
        Q = rng.standard_normal((3, 4))
        K = rng.standard_normal((1, 4))
        V = rng.standard_normal((1, 4))
        O, W = scaled_dot_attention(Q, K, V)
        np.testing.assert_array_equal(W, np.ones((3, 1)))
        np.testing.assert_allclose(O, np.repeat(V, 3, axis=0), atol=1e-12)

    def test_dominant_key(self):
        d = 4
        K = np.eye(3, d) * 1.0
        K[1] *= 12.0  # logit gap (144 - 0) / 2 = 72 > 20
        Q = K[[1]]
        V = np.arange(12, dtype=float).reshape(3, 4)
        O, _ = scaled_dot_attention(Q, K, V)
        np.testing.assert_allclose(O[0], V[1], atol=1e-6)

    def test_matches_loop_oracle(self, rng):
        Q = rng.standard_normal((4, 8))
        K = rng.standard_normal((6, 8))
        V = rng.standard_normal((6, 8))
        O, W = scaled_dot_attention(Q, K, V)
        O_ref, W_ref = loop_attention(Q, K, V)
        np.testing.assert_allclose(O, O_ref, atol=1e-5)
        np.testing.assert_allclose(W, W_ref, atol=1e-5)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            scaled_dot_attention(rng.standard_normal((2, 3)), rng.standard_normal((2, 4)), rng.standard_normal((2, 4)))

    @settings(max_examples=50)
    @given(st.integers(0, 2**32 - 1))
    def test_rows_sum_to_one_and_permutation_equivariant(self, seed):
        rng = np.random.default_rng(seed)
        m, n, d = rng.integers(1, 6, size=3)
        Q = rng.standard_normal((m, d)) * 3
        K = rng.standard_normal((n, d)) * 3
        V = rng.standard_normal((n, d))
        O, W = scaled_dot_attention(Q, K, V)
        assert np.all(W >= 0)
        np.testing.assert_allclose(W.sum(axis=1), 1.0, atol=1e-6)
        perm = rng.permutation(n)
        O2, _ = scaled_dot_attention(Q, K[perm], V[perm])
        np.testing.assert_allclose(O, O2, atol=1e-6)

    def test_multihead_is_per_head(self, rng):
        H, D = 3, 4
        Q = rng.standard_normal((5, H * D))
        K = rng.standard_normal((7, H * D))
        V = rng.standard_normal((7, H * D))
        O, W = multihead_attention(Q, K, V, H)
        assert W.shape == (H, 5, 7)
        for h in range(H):
            cols = slice(h * D, (h + 1) * D)
            O_ref, _ = loop_attention(Q[:, cols], K[:, cols], V[:, cols])
            np.testing.assert_allclose(O[:, cols], O_ref, atol=1e-10)


class TestMeanPool:
    def test_single_row(self):
        np.testing.assert_array_equal(mean_pool_rows([[1, 2, 3]]), [1, 2, 3])

    def test_symmetry(self):
        np.testing.assert_array_equal(mean_pool_rows([[1, 0], [0, 1]]), [0.5, 0.5])

    def test_hand_average(self):
        np.testing.assert_array_equal(mean_pool_rows([[2, 4], [4, 8], [0, 0]]), [2, 4])

    def test_empty(self):
        with pytest.raises(ShapeError):
            mean_pool_rows(np.zeros((0, 3)))


class TestEntropy:
    def test_uniform(self):
        assert normalized_entropy([0.25] * 4) == pytest.approx(1.0, abs=1e-12)

    def test_one_hot(self):
        assert normalized_entropy([0, 1, 0, 0]) == 0.0

    def test_half(self):
        assert normalized_entropy([0.5, 0.5, 0, 0]) == pytest.approx(0.5, abs=1e-12)

    @pytest.mark.parametrize("p", [[1.0], [0.5, 0.6], [-0.1, 1.1]])
    def test_rejects(self, p):
        with pytest.raises(DistributionError):
            normalized_entropy(p)

    @given(st.lists(st.floats(0.01, 1.0), min_size=2, max_size=12), st.randoms())
    def test_permutation_invariant_and_max_only_uniform(self, w, r):
        p = np.array(w) / sum(w)
        q = p.copy()
        r.shuffle(q)
        assert normalized_entropy(p) == pytest.approx(normalized_entropy(q), abs=1e-12)
        if normalized_entropy(p) > 1 - 1e-9:
            np.testing.assert_allclose(p, 1 / len(p), atol=1e-4)


class TestTopK:
    def test_order(self):
        assert top_k_desc([0.9, 0.1, 0.5], 2) == [0, 2]

    def test_ties(self):
        assert top_k_desc([0.4, 0.4, 0.4], 2) == [0, 1]

    def test_clamp(self):
        assert top_k_desc([0.1, 0.3], 10) == [1, 0]

    def test_against_sort_oracle(self, rng):
        s = rng.random(100)
        ref = [i for _, i in sorted(((-v, i) for i, v in enumerate(s)))][:10]
        assert top_k_desc(s, 10) == ref

    def test_rounded_ties_use_index(self, rng):
        s = np.round(rng.random(200), 1)
        ref = [i for _, i in sorted(((-v, i) for i, v in enumerate(s)))][:30]
        assert top_k_desc(s, 30) == ref

    def test_bad_k(self):
        with pytest.raises(ValueError):
            top_k_desc([1.0], 0)
