import io
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from dysat import numeric as nm
from dysat.numeric import Tape, Tensor


def _param(rng, *shape, away_from_zero=False):
    x = rng.normal(size=shape)
    if away_from_zero:
        x = np.where(np.abs(x) < 1e-2, 0.5, x)
    return Tensor(x, requires_grad=True)


# matmul ----------------------------------------------------------------------

def test_matmul_identity():
    X = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(nm.matmul(np.eye(2), X).data, X)


def test_matmul_hand_values():
    out = nm.matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_mismatch():
    with pytest.raises(nm.DimensionError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_grad_is_ones_times_bt():
    rng = np.random.default_rng(0)
    A, B = _param(rng, 3, 4), _param(rng, 4, 2)
    with Tape() as tape:
        loss = nm.sum(nm.matmul(A, B))
    tape.backward(loss)
    np.testing.assert_allclose(A.grad, np.ones((3, 2)) @ B.data.T, rtol=0, atol=1e-12)
    report = nm.grad_check(lambda: nm.sum(nm.matmul(A, B)), [A, B])
    assert report.max_rel_error <= 1e-4


def test_batched_matmul_grad():
    rng = np.random.default_rng(1)
    A, B = _param(rng, 2, 3, 4), _param(rng, 4, 5)
    assert nm.grad_check(lambda: nm.sum(nm.mul(nm.matmul(A, B), nm.matmul(A, B))), [A, B]).passed


# masked softmax ---------------------------------------------------------------

def test_masked_softmax_uniform():
    out = nm.masked_softmax(np.zeros(2), np.zeros(2))
    np.testing.assert_allclose(out.data, [0.5, 0.5])


def test_masked_softmax_single_survivor():
    out = nm.masked_softmax(np.array([5.0, 1.0]), np.array([0.0, -np.inf]))
    assert out.data.tolist() == [1.0, 0.0]


def test_masked_softmax_two_of_three():
    out = nm.masked_softmax(np.array([1.0, 2.0, 3.0]), np.array([0.0, 0.0, -np.inf]))
    e = math.e
    np.testing.assert_allclose(out.data, [1 / (1 + e), e / (1 + e), 0.0], rtol=0, atol=1e-15)
    assert out.data[2] == 0.0


def test_masked_softmax_all_masked():
    with pytest.raises(nm.DegenerateRowError):
        nm.masked_softmax(np.array([1.0, 2.0]), np.array([-np.inf, -np.inf]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-50, 50)),
       hnp.arrays(np.bool_, (4, 5)))
def test_masked_softmax_properties(logits, allowed):
    allowed[:, 0] = True
    mask = np.where(allowed, 0.0, -np.inf)
    out = nm.masked_softmax(logits, mask).data
    assert np.all(out >= 0)
    assert np.all(out[~allowed] == 0.0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


def test_masked_softmax_grad():
    rng = np.random.default_rng(2)
    x = _param(rng, 3, 4)
    mask = np.triu(np.full((3, 4), -np.inf), k=1)
    w = rng.normal(size=(3, 4))
    assert nm.grad_check(lambda: nm.sum(nm.mul(nm.masked_softmax(x, mask), w)), [x]).passed


# activations ------------------------------------------------------------------

def test_activation_fixed_points():
    assert nm.leaky_relu(np.array(-1.0), 0.2).data == pytest.approx(-0.2)
    assert nm.elu(np.array(0.0)).data == 0.0
    assert nm.sigmoid(np.array(0.0)).data == 0.5


def test_sigmoid_saturates_without_overflow():
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        hi = nm.sigmoid(np.array([800.0, 40.0])).data
        lo = nm.sigmoid(np.array(-800.0)).data
        ls = nm.log_sigmoid(np.array([-800.0, 800.0])).data
    assert np.all(np.abs(hi - 1.0) <= 1e-12)
    assert lo >= 0.0 and lo < 1e-300
    assert ls[0] == pytest.approx(-800.0) and ls[1] == 0.0


@pytest.mark.parametrize("fn", [
    lambda x: nm.leaky_relu(x, 0.2),
    nm.elu,
    nm.sigmoid,
    nm.log_sigmoid,
    nm.exp,
    lambda x: nm.log(nm.add(nm.mul(x, x), 1.0)),
    lambda x: nm.div(x, nm.add(nm.mul(x, x), 2.0)),
])
def test_elementwise_grads(fn):
    rng = np.random.default_rng(3)
    x = _param(rng, 4, 3, away_from_zero=True)
    w = rng.normal(size=(4, 3))
    assert nm.grad_check(lambda: nm.sum(nm.mul(fn(x), w)), [x]).passed


def test_sigmoid_of_affine_grad():
    rng = np.random.default_rng(4)
    W, x = _param(rng, 5, 4), Tensor(rng.normal(size=(4, 1)))
    report = nm.grad_check(lambda: nm.sum(nm.sigmoid(nm.matmul(W, x))), [W])
    assert report.max_rel_error <= 1e-5


def test_constant_has_zero_grad():
    rng = np.random.default_rng(5)
    W = _param(rng, 2, 2)
    report = nm.grad_check(lambda: nm.add(nm.mul(nm.sum(W), 0.0), 3.0), [W])
    assert report.max_rel_error == 0.0
    assert W.grad is None or np.all(W.grad == 0.0)


def test_grad_check_flags_nonfinite():
    x = Tensor(np.array([0.0]), requires_grad=True)
    with pytest.raises(nm.InstabilityError):
        nm.grad_check(lambda: nm.sum(nm.log(x)), [x])


# structural ops -----------------------------------------------------------------

def test_index_concat_stack_reshape_grads():
    rng = np.random.default_rng(6)
    a, b = _param(rng, 4, 3), _param(rng, 4, 3)
    idx = np.array([0, 2, 2, 3])
    w = rng.normal(size=(2, 4, 6))

    def f():
        g = nm.index(a, idx)
        c = nm.concat([g, b], axis=1)
        s = nm.stack([c, nm.transpose(nm.reshape(c, (6, 4)), (1, 0))], axis=0)
        return nm.sum(nm.mul(s, w))

    assert nm.grad_check(f, [a, b]).passed


def test_segment_ops_grad():
    rng = np.random.default_rng(7)
    x = _param(rng, 6)
    v = _param(rng, 6, 2)
    seg = np.array([0, 0, 1, 2, 2, 2])
    w = rng.normal(size=(3, 2))

    def f():
        alpha = nm.segment_softmax(x, seg, 3)
        return nm.sum(nm.mul(nm.segment_sum(nm.mul(nm.reshape(alpha, (-1, 1)), v), seg, 3), w))

    assert nm.grad_check(f, [x, v]).passed


def test_segment_softmax_rows_sum_to_one():
    seg = np.array([1, 0, 1, 1, 2])
    alpha = nm.segment_softmax(np.array([3.0, -1.0, 0.5, 700.0, 2.0]), seg, 3).data
    np.testing.assert_allclose(np.bincount(seg, weights=alpha), 1.0, rtol=0, atol=1e-12)


def test_broadcast_add_reduces_grad():
    rng = np.random.default_rng(8)
    a, b = _param(rng, 3, 4), _param(rng, 4)
    w = rng.normal(size=(3, 4))
    assert nm.grad_check(lambda: nm.sum(nm.mul(nm.add(a, b), w)), [a, b]).passed


def test_parameter_used_twice_accumulates():
    x = Tensor(np.array(3.0), requires_grad=True)
    with Tape() as tape:
        y = nm.add(nm.mul(x, 2.0), nm.mul(x, 5.0))
    tape.backward(y)
    assert x.grad == 7.0


def test_backward_replay_is_repeatable():
    rng = np.random.default_rng(9)
    W = _param(rng, 3, 3)
    grads = []
    for _ in range(2):
        W.grad = None
        with Tape() as tape:
            loss = nm.sum(nm.elu(nm.matmul(W, W)))
        tape.backward(loss)
        grads.append(W.grad.copy())
    np.testing.assert_array_equal(grads[0], grads[1])


def test_no_recording_outside_tape():
    W = Tensor(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        pass
    nm.matmul(W, W)
    assert len(tape) == 0


def test_dropout_scaling_and_identity():
    x = Tensor(np.ones(10_000))
    assert nm.dropout(x, 0.0, None) is x
    out = nm.dropout(x, 0.5, np.random.default_rng(0)).data
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05


# serialization -------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                  elements=st.floats(allow_nan=False)))
def test_tensor_binary_round_trip(arr):
    buf = io.BytesIO()
    nm.save_tensor(buf, arr)
    buf.seek(0)
    back = nm.load_tensor(buf)
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def test_tensor_binary_layout():
    buf = io.BytesIO()
    nm.save_tensor(buf, np.array([[1.5, -2.0]]))
    raw = buf.getvalue()
    assert raw[:4] == b"TNSR"
    assert int.from_bytes(raw[4:8], "little") == 2
    assert np.frombuffer(raw[8:24], "<u8").tolist() == [1, 2]
    assert np.frombuffer(raw[24:], "<f8").tolist() == [1.5, -2.0]


def test_write_tsv(tmp_path):
    path = tmp_path / "x.tsv"
    nm.write_tsv(path, np.array([[1.0, 0.25], [3.0, 4.0]]), ["a", "b"])
    assert path.read_text() == "a\t1.0\t0.25\nb\t3.0\t4.0\n"
