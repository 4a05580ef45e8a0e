"""Seeded generator, matrix helpers and the text matrix format."""
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fastmax.errors import DimensionError
from fastmax.tensor import (Rng, as_matrix, check_same_shape, format_matrix, mat_close,
                            mat_random, parse_matrix, read_matrix, write_matrix)


class TestRng:
    def test_same_seed_same_stream(self):
        a, b = Rng(5), Rng(5)
        assert np.array_equal(a.normal((4, 3)), b.normal((4, 3)))
        assert np.array_equal(a.uniform(7), b.uniform(7))

    def test_different_seeds_differ(self):
        assert not np.array_equal(Rng(1).normal(8), Rng(2).normal(8))

    def test_uniform_range_and_bits(self):
        u = Rng(3).uniform(10_000)
        assert u.min() >= 0.0 and u.max() < 1.0
        # 53-bit grid
        assert np.all(u * 2.0**53 == np.floor(u * 2.0**53))

    def test_uniform_is_top_bits_of_raw_words(self):
        words = np.random.PCG64(11).random_raw(4)
        expect = (words >> np.uint64(11)).astype(np.float64) * 2.0**-53
        assert np.array_equal(Rng(11).uniform(4), expect)

    def test_normal_is_box_muller_of_uniform_pairs(self):
        u = Rng(4).uniform(4).reshape(2, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        expect = np.column_stack([r * np.cos(2 * np.pi * u[:, 1]), r * np.sin(2 * np.pi * u[:, 1])]).ravel()
        assert np.array_equal(Rng(4).normal(4), expect)

    def test_odd_normal_count(self):
        assert Rng(0).normal(5).shape == (5,)

    def test_integers_in_range(self):
        x = Rng(2).integers(3, 9, 1000)
        assert x.min() >= 3 and x.max() <= 8
        assert set(x.tolist()) == set(range(3, 9))

    def test_permutation(self):
        p = Rng(1).permutation(50)
        assert sorted(p.tolist()) == list(range(50))

    def test_child_is_deterministic(self):
        assert np.array_equal(Rng(9).child().normal(3), Rng(9).child().normal(3))

    def test_negative_seed_rejected(self):
        with pytest.raises(ValueError):
            Rng(-1)


class TestMatRandom:
    def test_zero_scale(self):
        assert mat_random(1, 1, Rng(0), scale=0.0).tolist() == [[0.0]]

    def test_deterministic(self):
        assert np.array_equal(mat_random(3, 2, Rng(7)), mat_random(3, 2, Rng(7)))

    def test_moments(self):
        m = mat_random(64, 16, Rng(1))
        assert abs(m.mean()) < 0.2
        assert abs(m.std() - 1.0) < 0.2

    def test_read_only(self):
        m = mat_random(2, 2, Rng(0))
        with pytest.raises(ValueError):
            m[0, 0] = 1.0

    @pytest.mark.parametrize("n,d", [(0, 3), (3, 0)])
    def test_zero_dimension(self, n, d):
        with pytest.raises(DimensionError):
            mat_random(n, d, Rng(0))


class TestMatClose:
    def test_identity(self):
        a = mat_random(4, 4, Rng(0))
        assert mat_close(a, a, 1e-12, 0)

    def test_beyond_tolerance(self):
        assert not mat_close([[1.0]], [[1.0 + 1e-6]], 1e-7, 0)

    def test_within_tolerance(self):
        assert mat_close([[1.0]], [[1.0 + 1e-9]], 1e-7, 0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            mat_close(np.zeros((2, 2)), np.zeros((2, 3)))


class TestShapes:
    def test_as_matrix_rejects_1d(self):
        with pytest.raises(DimensionError):
            as_matrix(np.zeros(3))

    def test_check_same_shape(self):
        check_same_shape(a=np.zeros((2, 3)), b=np.ones((2, 3)))
        with pytest.raises(DimensionError, match="b="):
            check_same_shape(a=np.zeros((2, 3)), b=np.ones((3, 2)))


class TestTextFormat:
    def test_round_trip_file(self, tmp_path):
        a = mat_random(5, 3, Rng(2))
        path = tmp_path / "m.txt"
        write_matrix(path, a)
        assert np.array_equal(read_matrix(path), a)

    def test_comments_and_blank_lines(self):
        text = "# a comment\n2 2\n1 2\n\n# mid\n3 4\n"
        assert parse_matrix(text).tolist() == [[1.0, 2.0], [3.0, 4.0]]

    @pytest.mark.parametrize("text", ["", "2\n1 2\n", "2 2\n1 2\n", "1 2\n1 2 3\n", "0 2\n"])
    def test_malformed(self, text):
        with pytest.raises(DimensionError):
            parse_matrix(text)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.lists(st.floats(allow_nan=False, allow_infinity=False, width=64),
                             min_size=3, max_size=3), min_size=1, max_size=6))
    def test_round_trip_is_exact(self, rows):
        a = np.array(rows)
        assert np.array_equal(parse_matrix(format_matrix(a)), a)
