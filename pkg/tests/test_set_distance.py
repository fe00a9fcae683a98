import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from slideagg.dataset import PatchSet
from slideagg.embedding import SlideEmbedding, pack_bits, unpack_bits
from slideagg.errors import ShapeError
from slideagg.set_distance import hamming, hamming_matrix, median_of_minimums, pairwise_set_distances

from oracles import hamming_bit_loop, median_of_minimums_loop


class TestHamming:
    def test_small_example(self):
        a = pack_bits(np.array([1, 0, 1, 0], dtype=bool))
        b = pack_bits(np.array([0, 1, 1, 0], dtype=bool))
        assert hamming(a, b, 4) == 2

    def test_self(self, rng):
        x = pack_bits(rng.random(100) > 0.5)
        assert hamming(x, x, 100) == 0

    def test_complement_64(self, rng):
        bits = rng.random(64) > 0.5
        assert hamming(pack_bits(bits), pack_bits(~bits), 64) == 64

    def test_tail_bits_ignored(self):
        a = np.array([0], dtype=np.uint64)
        b = np.array([np.uint64(1) << np.uint64(40)], dtype=np.uint64)
        assert hamming(a, b, 10) == 0
        assert hamming(a, b, 64) == 1

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            hamming(np.zeros(1, dtype=np.uint64), np.zeros(2, dtype=np.uint64))

    @given(st.integers(1, 200), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_bit_loop(self, nbits, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.random(nbits) > 0.5, rng.random(nbits) > 0.5
        assert hamming(pack_bits(a), pack_bits(b), nbits) == hamming_bit_loop(a, b)

    def test_matrix(self, rng):
        a, b = rng.random((3, 70)) > 0.5, rng.random((4, 70)) > 0.5
        m = hamming_matrix(pack_bits(a), pack_bits(b), 70)
        for i in range(3):
            for j in range(4):
                assert m[i, j] == hamming_bit_loop(a[i], b[j])


class TestPacking:
    @given(st.integers(1, 150), st.integers(0, 2**32 - 1))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip(self, nbits, seed):
        bits = np.random.default_rng(seed).random(nbits) > 0.5
        np.testing.assert_array_equal(unpack_bits(pack_bits(bits), nbits), bits)

    def test_little_endian_layout(self):
        bits = np.zeros(70, dtype=bool)
        bits[[0, 3, 64]] = True
        np.testing.assert_array_equal(pack_bits(bits), np.array([9, 1], dtype=np.uint64))

    def test_binary_embedding(self):
        e = SlideEmbedding.binary_of([0.5, -1.0, 0.0, 2.0])
        assert e.is_binary and e.dim == 4
        np.testing.assert_array_equal(e.dense(), [1, 0, 0, 1])

    def test_sparse_embedding(self):
        e = SlideEmbedding.sparse_or_dense([0.0, 0.0, 0.0, 2.0])
        assert e.kind == "sparse"
        np.testing.assert_array_equal(e.dense(), [0, 0, 0, 2.0])
        assert SlideEmbedding.sparse_or_dense([1.0, 2.0, 0.0]).kind == "dense"


class TestMedianOfMinimums:
    def test_identical(self, rng):
        a = rng.standard_normal((5, 3))
        assert median_of_minimums(a, a) == 0.0

    def test_example_two(self):
        assert median_of_minimums(np.array([[0.0], [4.0]]), np.array([[1.0]])) == 2.0

    def test_example_zero(self):
        assert median_of_minimums(np.array([[0.0], [2.0], [10.0]]), np.array([[0.0], [10.0]])) == 0.0

    def test_directional(self):
        a, b = np.array([[0.0], [4.0]]), np.array([[1.0]])
        assert median_of_minimums(b, a) == 1.0

    @given(st.integers(1, 7), st.integers(1, 7), st.integers(1, 4), st.integers(0, 2**32 - 1))
    @settings(max_examples=60, deadline=None)
    def test_matches_sort_oracle(self, na, nb, d, seed):
        rng = np.random.default_rng(seed)
        a, b = rng.standard_normal((na, d)), rng.standard_normal((nb, d))
        assert median_of_minimums(a, b) == pytest.approx(median_of_minimums_loop(a, b), rel=1e-12, abs=1e-12)

    def test_hamming_metric(self, rng):
        a, b = rng.random((3, 80)) > 0.5, rng.random((4, 80)) > 0.5
        expected = np.median([min(hamming_bit_loop(x, y) for y in b) for x in a])
        assert median_of_minimums(pack_bits(a), pack_bits(b), "hamming", nbits=80) == expected

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            median_of_minimums(np.zeros((2, 3)), np.zeros((2, 4)))


class TestPairwise:
    def test_single(self, rng):
        out = pairwise_set_distances([PatchSet("a", 0, rng.standard_normal((3, 2)))])
        np.testing.assert_array_equal(out, np.zeros((1, 1)))

    def test_matches_elementwise(self, rng):
        slides = [PatchSet(f"s{i}", 0, rng.standard_normal((int(rng.integers(1, 5)), 3))) for i in range(3)]
        d = pairwise_set_distances(slides)
        assert np.all(np.diag(d) == 0)
        for i in range(3):
            for j in range(3):
                if i != j:
                    assert d[i, j] == median_of_minimums(slides[i], slides[j])
