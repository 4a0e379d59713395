import numpy as np
import pytest

from blindtrain.tensor import (
    ShapeError,
    as_matrix,
    concat,
    hadamard,
    make_rng,
    matmul,
    max_abs,
    split,
    sum_all,
    transpose,
)


def test_make_rng_is_deterministic():
    a = make_rng(42).integers(0, 1 << 30, size=8)
    b = make_rng(42).integers(0, 1 << 30, size=8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, make_rng(43).integers(0, 1 << 30, size=8))


def test_as_matrix_coerces_and_validates():
    out = as_matrix([[1, 2], [3, 4]])
    assert out.dtype == np.float64 and out.flags["C_CONTIGUOUS"]
    with pytest.raises(ShapeError):
        as_matrix([1.0, 2.0])
    with pytest.raises(ShapeError):
        as_matrix(np.zeros((2, 2, 2)))


def test_matmul_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[5.0, 6.0], [7.0, 8.0]])
    assert np.array_equal(matmul(a, b), [[19.0, 22.0], [43.0, 50.0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(np.zeros((2, 3)), np.zeros((4, 2)))
    assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)


def test_transpose_involution():
    rng = make_rng(0)
    a = rng.standard_normal((5, 3))
    t = transpose(a)
    assert t.shape == (3, 5) and t.flags["C_CONTIGUOUS"]
    assert np.array_equal(transpose(t), a)


def test_hadamard():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[2.0, 0.0], [1.0, 3.0]])
    assert np.array_equal(hadamard(a, b), [[2.0, 0.0], [3.0, 12.0]])
    with pytest.raises(ShapeError):
        hadamard(a, np.zeros((2, 3)))


def test_split_sizes_remainder_to_first_shards():
    a = make_rng(1).standard_normal((5, 4))
    parts = split(a, "rows", 2)
    assert [p.shape[0] for p in parts] == [3, 2]
    parts = split(a, "cols", 3)
    assert [p.shape[1] for p in parts] == [2, 1, 1]


def test_split_concat_roundtrip_bitwise():
    rng = make_rng(2)
    for _ in range(50):
        rows, cols = (int(v) for v in rng.integers(1, 12, size=2))
        a = rng.standard_normal((rows, cols))
        for axis, dim in (("rows", rows), ("cols", cols)):
            n_shards = int(rng.integers(1, dim + 1))
            back = concat(split(a, axis, n_shards), axis)
            assert back.tobytes() == a.tobytes()


def test_split_validation():
    a = np.zeros((3, 2))
    with pytest.raises(ShapeError):
        split(a, "rows", 4)  # more shards than rows
    with pytest.raises(ShapeError):
        split(a, "cols", 0)


def test_concat_off_axis_mismatch():
    with pytest.raises(ShapeError):
        concat([np.zeros((2, 3)), np.zeros((2, 4))], "rows")
    with pytest.raises(ShapeError):
        concat([], "rows")


def test_sum_all_matches_sequential_fold():
    rng = make_rng(3)
    parts = [rng.standard_normal((3, 3)) for _ in range(5)]
    expected = parts[0].copy()
    for p in parts[1:]:
        expected = expected + p
    assert np.array_equal(sum_all(parts), expected)
    with pytest.raises(ShapeError):
        sum_all([np.zeros((2, 2)), np.zeros((3, 2))])


def test_max_abs():
    assert max_abs(np.array([[-3.0, 2.0], [1.0, -0.5]])) == 3.0
