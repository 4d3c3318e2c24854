import math
from decimal import Decimal, localcontext

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from cacseg.gradcheck import op_checks
from cacseg.tensor import (
    DimensionError,
    Tape,
    Tensor,
    add,
    concat_cols,
    detach,
    inv_row_norms,
    l2_normalize_rows,
    log_softmax_rows,
    matmul,
    reduce_mean,
    reduce_sum,
    relu,
    scale,
    softmax_rows,
)

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


def matrices(rows=st.integers(1, 6), cols=st.integers(1, 6)):
    return st.tuples(rows, cols).flatmap(lambda s: arrays(np.float64, s, elements=finite))


def grad_of(fn, *values):
    leaves = [Tensor(v, requires_grad=True) for v in values]
    with Tape() as tape:
        out = fn(*leaves)
    return tape.gradient(out, leaves)


# matmul

def test_matmul_identity():
    out = matmul([[1.0, 0.0], [0.0, 1.0]], [[5.0, 6.0], [7.0, 8.0]])
    assert out.data.tolist() == [[5.0, 6.0], [7.0, 8.0]]


def test_matmul_hand_computed():
    assert matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2))
    naive = np.zeros((4, 2))
    for i in range(4):
        for j in range(2):
            for k in range(3):
                naive[i, j] += a[i, k] * b[k, j]
    np.testing.assert_allclose(matmul(a, b).data, naive, rtol=0, atol=1e-12)


def test_matmul_batched_broadcasts_matrix_operand():
    rng = np.random.default_rng(2)
    a, b = rng.standard_normal((3, 4, 5)), rng.standard_normal((5, 2))
    out = matmul(a, b).data
    for i in range(3):
        np.testing.assert_allclose(out[i], a[i] @ b, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# softmax / log-softmax

def test_softmax_symmetric_row():
    assert softmax_rows([[0.0, 0.0]]).data.tolist() == [[0.5, 0.5]]


def test_softmax_large_equal_inputs_do_not_overflow():
    assert softmax_rows([[1000.0, 1000.0]]).data.tolist() == [[0.5, 0.5]]


def test_softmax_extended_precision():
    with localcontext() as ctx:
        ctx.prec = 50
        e = [Decimal(v).exp() for v in (1, 2, 3)]
        expected = [float(x / sum(e)) for x in e]
    np.testing.assert_allclose(softmax_rows([[1.0, 2.0, 3.0]]).data[0], expected, rtol=0, atol=1e-14)


def test_log_softmax_uniform_pair():
    np.testing.assert_allclose(log_softmax_rows([[0.0, 0.0]]).data, [[-math.log(2)] * 2], atol=1e-15)


def test_log_softmax_keeps_small_entry_finite():
    out = log_softmax_rows([[50.0, 0.0]]).data[0]
    with localcontext() as ctx:
        ctx.prec = 60
        lse = (Decimal(50).exp() + 1).ln()
        expected = [float(50 - lse), float(-lse)]
    assert np.isfinite(out).all()
    np.testing.assert_allclose(out, expected, rtol=1e-15, atol=1e-14)


@given(matrices())
def test_softmax_rows_sum_to_one(a):
    s = softmax_rows(a).data
    assert np.all(s >= 0) and np.all(s <= 1)
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@given(matrices())
def test_exp_log_softmax_equals_softmax(a):
    np.testing.assert_allclose(np.exp(log_softmax_rows(a).data), softmax_rows(a).data, atol=1e-12)


def test_softmax_long_rows_use_same_values():
    rng = np.random.default_rng(3)
    a = rng.standard_normal((5, 40))
    e = np.exp(a - a.max(axis=1, keepdims=True))
    np.testing.assert_allclose(softmax_rows(a).data, e / e.sum(axis=1, keepdims=True), atol=1e-15)


# l2 normalisation

def test_l2_normalize_345():
    np.testing.assert_allclose(l2_normalize_rows([[3.0, 4.0]]).data, [[0.6, 0.8]], atol=1e-15)


def test_l2_normalize_zero_row_stays_zero():
    out = l2_normalize_rows([[0.0, 0.0]], eps=1e-12).data
    assert out.tolist() == [[0.0, 0.0]]
    (g,) = grad_of(lambda a: reduce_sum(l2_normalize_rows(a)), np.zeros((1, 2)))
    assert np.all(g == 0.0)


@given(arrays(np.float64, (1, 5), elements=st.floats(-10, 10)))
def test_l2_normalize_unit_norm(a):
    norm = np.linalg.norm(a)
    out = l2_normalize_rows(a).data
    if norm > 1e-12:
        assert abs(np.linalg.norm(out) - 1.0) < 1e-9
    else:
        assert np.all(out == 0.0)


def test_inv_row_norms_matches_definition():
    a = np.array([[3.0, 4.0], [0.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(inv_row_norms(a).data, [[0.2], [0.0], [1.0]])


# concat

def test_concat_cols_trivial():
    assert concat_cols([[1.0]], [[2.0]]).data.tolist() == [[1.0, 2.0]]


def test_concat_then_slice_round_trip():
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((3, 2)), rng.standard_normal((3, 4))
    out = concat_cols(a, b).data
    assert np.array_equal(out[:, :2], a) and np.array_equal(out[:, 2:], b)


def test_concat_gradient_of_sum_is_ones():
    ga, gb = grad_of(lambda a, b: reduce_sum(concat_cols(a, b)), np.ones((3, 2)), np.ones((3, 4)))
    assert np.array_equal(ga, np.ones((3, 2))) and np.array_equal(gb, np.ones((3, 4)))


def test_concat_row_mismatch():
    with pytest.raises(DimensionError):
        concat_cols(np.ones((2, 1)), np.ones((3, 1)))


# elementwise and reductions

def test_relu_values_and_tie_gradient():
    assert relu([[-1.0, 2.0]]).data.tolist() == [[0.0, 2.0]]
    (g,) = grad_of(lambda a: reduce_sum(relu(a)), np.array([[-1.0, 0.0, 2.0]]))
    assert g.tolist() == [[0.0, 0.0, 1.0]]


def test_scale_by_tau():
    assert scale([[1.0, -1.0]], 15).data.tolist() == [[15.0, -15.0]]


def test_reduce_sum_of_ones():
    assert reduce_sum(np.ones((3, 4))).item() == 12.0


def test_reduce_mean_axis():
    assert reduce_mean(np.arange(6.0).reshape(2, 3), axis=1).data.tolist() == [1.0, 4.0]


def test_add_shape_mismatch():
    with pytest.raises(DimensionError):
        add(np.ones((2, 3)), np.ones((3, 2)))


def test_rank_above_three_rejected():
    with pytest.raises(DimensionError):
        Tensor(np.ones((1, 1, 1, 1)))


def test_tensors_are_read_only():
    t = Tensor(np.ones(3))
    with pytest.raises(ValueError):
        t.data[0] = 2.0


# detach

def test_detach_keeps_values():
    x = np.array([[1.0, -2.0]])
    assert np.array_equal(detach(x).data, x)


def test_detach_blocks_gradient_exactly():
    (g,) = grad_of(lambda x: reduce_sum(detach(x)), np.array([[1.0, 2.0]]))
    assert np.array_equal(g, np.zeros((1, 2)))


def test_detach_side_branch_leaves_ones():
    (g,) = grad_of(lambda x: reduce_sum(add(x, detach(x))), np.array([[1.0, 2.0], [3.0, 4.0]]))
    assert np.array_equal(g, np.ones((2, 2)))


# finite differences over every operation

@pytest.mark.parametrize("seed", [0, 1])
def test_every_op_matches_finite_differences(seed):
    reports = op_checks(seed)
    failed = {name: r.worst for name, r in reports.items() if not r.passed}
    assert not failed


def test_op_checks_cover_public_ops():
    import cacseg.tensor as T

    ops = set(T.__all__) - {"DimensionError", "Tensor", "Tape", "as_tensor", "DetachLog"}
    assert ops <= set(op_checks(0))
