import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import direct_conv, scipy_conv
from trendseg import tensor as T
from trendseg.gradcheck import check, random_graph, run_suite
from trendseg.tensor import StructuralError, Tape, Tensor, backward


def f64(data, grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad, dtype=np.float64)


# conv2d


def test_conv_identity_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    out = T.conv2d(x, Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x.data)


@pytest.mark.parametrize("seed", range(5))
def test_conv_rate1_matches_scipy(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((2, 3, 7, 5))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(f64(x), f64(k), f64(b), dilation=1)
    np.testing.assert_allclose(out.data, scipy_conv(x, k, b), atol=1e-10)


def test_conv_rate3_matches_direct_sum():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((1, 1, 9, 9))
    k = rng.standard_normal((1, 1, 3, 3))
    out = T.conv2d(f64(x), f64(k), dilation=3)
    np.testing.assert_allclose(out.data, direct_conv(x, k, np.zeros(1), r=3), atol=1e-6)


def test_conv_same_padding_output_shape():
    x = Tensor(np.zeros((2, 3, 20, 4)))
    k = Tensor(np.zeros((5, 3, 3, 3)))
    assert T.conv2d(x, k, stride=(2, 1)).shape == (2, 5, 10, 4)
    assert T.conv2d(Tensor(np.zeros((1, 3, 5, 4))), k, stride=(2, 1)).shape == (1, 5, 3, 4)
    assert T.conv2d(x, k, dilation=3).shape == (2, 5, 20, 4)


def test_conv_errors():
    x = Tensor(np.zeros((1, 2, 4, 4)))
    with pytest.raises(StructuralError):
        T.conv2d(x, Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ValueError):
        T.conv2d(x, Tensor(np.zeros((1, 2, 3, 3))), dilation=0)


# transposed conv


def test_transposed_unit_kernel_scatter():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    out = T.transposed_conv2d(x, Tensor(np.ones((1, 1, 1, 1))), stride=(2, 2))
    expected = np.zeros((1, 1, 4, 4))
    expected[0, 0, ::2, ::2] = [[1, 2], [3, 4]]
    np.testing.assert_array_equal(out.data, expected)


def test_transposed_shape_contract():
    x = Tensor(np.zeros((1, 1, 10, 4)))
    out = T.transposed_conv2d(x, Tensor(np.zeros((1, 6, 3, 3))), stride=(2, 1))
    assert out.shape == (1, 6, 20, 4)


@pytest.mark.parametrize("stride,r", [((2, 1), 1), ((2, 2), 1), ((1, 1), 2), ((3, 2), 1), ((2, 1), 3)])
def test_adjoint_identity(stride, r):
    rng = np.random.default_rng(7)
    k = rng.standard_normal((3, 2, 3, 3))
    x = rng.standard_normal((2, 2, 6 * stride[0], 4 * stride[1]))
    y = rng.standard_normal((2, 3, 6, 4))
    lhs = np.vdot(T.conv2d(f64(x), f64(k), stride=stride, dilation=r).data, y)
    rhs = np.vdot(x, T.transposed_conv2d(f64(y), f64(k), stride=stride, dilation=r).data)
    assert abs(lhs - rhs) <= 1e-6


def test_transposed_channel_mismatch():
    with pytest.raises(StructuralError):
        T.transposed_conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((3, 1, 3, 3))))


# elementwise / structural


def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).data[0] == 0.5


def test_sigmoid_saturates_without_overflow():
    with T.debug_mode():
        out = T.sigmoid(Tensor([-1e4, 1e4]))
    np.testing.assert_array_equal(out.data, [0.0, 1.0])


def test_concat_shapes():
    a, b = Tensor(np.zeros((2, 3, 5, 4))), Tensor(np.zeros((2, 5, 5, 4)))
    assert T.concat([a, b], axis=1).shape == (2, 8, 5, 4)
    with pytest.raises(StructuralError):
        T.concat([a, Tensor(np.zeros((2, 5, 4, 4)))], axis=1)


def test_relu_subgradient():
    x = f64([-1.0, 2.0], grad=True)
    up = f64([1.0, 1.0])
    with Tape() as tape:
        loss = T.sum_(T.mul(T.relu(x), up))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [0.0, 1.0])


def test_relu_gradient_at_zero_is_zero():
    x = f64([0.0], grad=True)
    with Tape() as tape:
        loss = T.sum_(T.relu(x))
    backward(tape, loss)
    assert x.grad[0] == 0.0


def test_max_pool_forward():
    x = Tensor(np.arange(8, dtype=np.float64).reshape(1, 1, 4, 2))
    out = T.max_pool2d(x, (2, 1))
    np.testing.assert_array_equal(out.data[0, 0], [[2, 3], [6, 7]])


def test_matmul_shape_error():
    with pytest.raises(StructuralError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# loss


def test_bce_half_is_ln2():
    pred = Tensor(np.full((3, 4), 0.5))
    target = (np.arange(12).reshape(3, 4) % 2).astype(np.float32)
    assert T.bce_loss(pred, target).item() == pytest.approx(math.log(2), abs=1e-6)


def test_bce_perfect_prediction_near_zero():
    target = np.array([1.0, 0.0, 1.0])
    loss = T.bce_loss(f64(target), target).item()
    assert 0 <= loss <= -math.log(1 - 1e-7) + 1e-15


def test_bce_worked_value():
    # -(ln 0.9 + ln 0.9) / 2
    loss = T.bce_loss(f64([0.9, 0.1]), np.array([1.0, 0.0])).item()
    assert loss == pytest.approx(0.1053605, abs=1e-6)


def test_bce_shape_mismatch():
    with pytest.raises(StructuralError):
        T.bce_loss(Tensor(np.zeros(3)), np.zeros(4))


# backward / tape


def test_backward_sum_gives_ones():
    x = f64(np.random.default_rng(0).standard_normal((2, 3, 4)), grad=True)
    with Tape() as tape:
        loss = T.sum_(x)
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_square():
    x = f64([3.0], grad=True)
    with Tape() as tape:
        loss = T.sum_(T.mul(x, x))
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, [6.0])


def test_fan_out_accumulates():
    x = f64([2.0, -1.0], grad=True)
    with Tape() as tape:
        y = T.add(x, x)
        loss = T.sum_(T.mul(y, x))  # 2x^2
    backward(tape, loss)
    np.testing.assert_allclose(x.grad, [8.0, -4.0])


def test_backward_twice_does_not_accumulate():
    x = f64([1.0, 2.0], grad=True)
    with Tape() as tape:
        loss = T.sum_(T.mul(x, x))
    backward(tape, loss)
    first = x.grad.copy()
    backward(tape, loss)
    np.testing.assert_array_equal(x.grad, first)


def test_backward_rejects_nonscalar():
    x = f64([1.0, 2.0], grad=True)
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ValueError):
        backward(tape, y)


def test_tape_is_topological_and_single_visit():
    x = f64(np.ones((1, 1, 4, 4)), grad=True)
    k = f64(np.ones((2, 1, 3, 3)), grad=True)
    with Tape() as tape:
        T.mean(T.relu(T.conv2d(x, k)))
    seen = set()
    for node in tape.nodes:
        for t in node.inputs:
            assert id(t) in seen or not any(n.output is t for n in tape.nodes)
        seen.add(id(node.output))
    assert len(tape) == 3


def test_no_grad_records_nothing():
    x = f64([1.0], grad=True)
    with Tape() as tape:
        with T.no_grad():
            T.mul(x, x)
    assert len(tape) == 0


def test_debug_mode_flags_non_finite():
    with T.debug_mode(), np.errstate(invalid="ignore"):
        with pytest.raises(FloatingPointError):
            T.mul(Tensor([np.inf]), Tensor([0.0]))


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((2, 2, 8, 4)).astype(np.float32), requires_grad=True)
        k = Tensor(rng.standard_normal((3, 2, 3, 3)).astype(np.float32), requires_grad=True)
        with Tape() as tape:
            loss = T.mean(T.sigmoid(T.conv2d(x, k, dilation=2)))
        backward(tape, loss)
        return loss.data.tobytes() + x.grad.tobytes() + k.grad.tobytes()

    assert run() == run()


# gradients


def test_gradcheck_suite_passes():
    failed = [r for r in run_suite() if not r.passed]
    assert not failed, failed


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_random_graphs_match_finite_differences(seed):
    fn, inputs = random_graph(seed)
    assert check(fn, inputs) <= 1e-4


@settings(max_examples=15, deadline=None)
@given(h=st.integers(3, 8), w=st.integers(2, 5), r=st.integers(1, 3),
       sh=st.integers(1, 2), sw=st.integers(1, 2), seed=st.integers(0, 1000))
def test_conv_gradient_property(h, w, r, sh, sw, seed):
    rng = np.random.default_rng(seed)
    x = f64(rng.standard_normal((1, 2, h, w)), grad=True)
    k = f64(rng.standard_normal((2, 2, 3, 3)), grad=True)
    proj = f64(rng.standard_normal(T.conv2d(x, k, stride=(sh, sw), dilation=r).shape))
    err = check(lambda: T.sum_(T.mul(T.conv2d(x, k, stride=(sh, sw), dilation=r), proj)), [x, k])
    assert err <= 1e-4


# adam


def test_adam_zero_gradient_is_fixed_point():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    state = T.AdamState.for_params([p])
    for _ in range(3):
        T.adam_step([p], [np.zeros(2)], state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert state.t == 3


def test_adam_first_step_is_lr():
    p = Tensor(np.array([0.5]), requires_grad=True, dtype=np.float64)
    state = T.AdamState.for_params([p], lr=0.001)
    T.adam_step([p], [np.array([1.0])], state)
    # m_hat = v_hat = 1 after bias correction
    assert p.data[0] == pytest.approx(0.5 - 0.001 / (1 + 1e-8), abs=1e-15)


def test_adam_identical_gradients_identical_updates():
    a = Tensor(np.array([1.0]), requires_grad=True)
    b = Tensor(np.array([1.0]), requires_grad=True)
    state = T.AdamState.for_params([a, b])
    for g in (0.3, -1.2, 0.7):
        T.adam_step([a, b], [np.array([g]), np.array([g])], state)
    assert a.data.tobytes() == b.data.tobytes()


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(2), requires_grad=True)
    state = T.AdamState.for_params([p])
    with pytest.raises(StructuralError):
        T.adam_step([p], [np.zeros(3)], state)
