import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from codexdg.autodiff import ParamGroup, Tensor, backward, grad_check, ops
from codexdg.exceptions import ContractError, DimensionError, NumericError, ParameterError
from codexdg.verify import primitive_cases


def test_tensor_is_float64_and_contiguous():
    t = Tensor(np.arange(6, dtype=np.int32).reshape(2, 3).T)
    assert t.data.dtype == np.float64
    assert t.data.flags.c_contiguous
    assert t.shape == (3, 2) and t.is_leaf


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        backward(ops.scale(x, 2.0))


def test_gradients_accumulate_across_calls():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    backward(ops.sum(ops.mul(x, x)))
    backward(ops.sum(ops.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_shared_subexpression_sums_both_paths():
    x = Tensor(np.array(3.0), requires_grad=True)
    y = ops.mul(x, x)
    backward(ops.add(y, y))
    assert x.grad == pytest.approx(12.0)


def test_no_grad_on_constants():
    c = Tensor(np.ones(2))
    x = Tensor(np.ones(2), requires_grad=True)
    backward(ops.sum(ops.mul(c, x)))
    assert c.grad is None


def test_stop_gradient_blocks_flow():
    x = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    backward(ops.sum(ops.mul(ops.stop_gradient(x), x)))
    np.testing.assert_array_equal(x.grad, [1.0, -2.0])


def test_broadcast_add_reduces_gradient():
    a = Tensor(np.zeros((3, 4)), requires_grad=True)
    b = Tensor(np.zeros(4), requires_grad=True)
    backward(ops.sum(ops.add(a, b)))
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_incompatible_broadcast_raises():
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.zeros((3, 4))), Tensor(np.zeros(3)))


def test_dense_shape_error_names_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\)"):
        ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(5)))


def test_gather_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.gather(Tensor(np.zeros((3, 4))), np.zeros((2, 1), dtype=int), axis=1)


def test_softmax_examples():
    np.testing.assert_allclose(ops.softmax_temp(Tensor(np.zeros(3)), 1.0).data, np.full(3, 1 / 3), atol=1e-15)
    np.testing.assert_allclose(ops.softmax_temp(Tensor([np.log(2.0), 0.0]), 1.0).data, [2 / 3, 1 / 3],
                               atol=1e-15)
    assert ops.softmax_temp(Tensor([10.0, 0.0]), 0.1).data[0] > 0.999999


@pytest.mark.parametrize("tau", [0.0, -1.0])
def test_softmax_rejects_nonpositive_temperature(tau):
    with pytest.raises(ParameterError):
        ops.softmax_temp(Tensor(np.zeros(2)), tau)


def test_masked_softmax_zeroes_masked_entries():
    mask = ~np.eye(3, dtype=bool)
    out = ops.softmax_temp(Tensor(np.random.default_rng(0).standard_normal((3, 3))), 1.0, axis=1, mask=mask)
    assert np.all(np.diag(out.data) == 0.0)
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-15)


def test_softmax_is_stable_for_large_inputs():
    out = ops.softmax_temp(Tensor([1000.0, 999.0, -1000.0]), 1.0)
    assert np.all(np.isfinite(out.data))


@given(arrays(np.float64, (2, 5), elements=st.floats(-30, 30)), st.floats(0.05, 5.0))
def test_softmax_rows_sum_to_one(v, tau):
    out = ops.softmax_temp(Tensor(v), tau, axis=1).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(out >= 0)


def test_conv_matches_direct_loop(rng):
    x = rng.standard_normal((1, 2, 5, 4))
    K = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    out = ops.conv2d_3x3(Tensor(x), Tensor(K), Tensor(b)).data
    pad = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 4))
    for f in range(3):
        for i in range(5):
            for j in range(4):
                ref[0, f, i, j] = np.sum(pad[0, :, i:i + 3, j:j + 3] * K[f]) + b[f]
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_pool_and_upsample_values():
    x = Tensor(np.arange(16, dtype=float).reshape(1, 1, 4, 4))
    pooled = ops.avgpool2x(x).data
    np.testing.assert_allclose(pooled[0, 0], [[2.5, 4.5], [10.5, 12.5]])
    up = ops.upsample2x(Tensor(pooled)).data
    assert up.shape == (1, 1, 4, 4) and up[0, 0, 1, 1] == 2.5


def test_avgpool_rejects_odd_sizes():
    with pytest.raises(DimensionError):
        ops.avgpool2x(Tensor(np.zeros((1, 1, 3, 4))))


@pytest.mark.parametrize("name", sorted(primitive_cases(np.random.default_rng(0))))
def test_primitive_gradients(name):
    f, params = primitive_cases(np.random.default_rng(7))[name]
    assert grad_check(f, params) < 1e-6


def test_power_zero_exponent_has_zero_grad():
    x = Tensor(np.array([0.5, 2.0]), requires_grad=True)
    backward(ops.sum(ops.power(x, 0.0)))
    np.testing.assert_array_equal(x.grad, [0.0, 0.0])


def test_grad_check_rejects_bad_step():
    x = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ParameterError):
        grad_check(lambda: ops.sum(x), [x], eps=1e-2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_reports_non_finite():
    x = Tensor(np.array([1e-7]), requires_grad=True)
    with pytest.raises(NumericError, match="coordinate 0"):
        grad_check(lambda: ops.sum(ops.log(x)), [x], eps=1e-6)


def test_grad_check_restores_parameters(rng):
    x = Tensor(rng.standard_normal(4), requires_grad=True)
    before = x.data.copy()
    grad_check(lambda: ops.sum(ops.exp(x)), [x])
    np.testing.assert_array_equal(x.data, before)


def test_param_group_bookkeeping():
    g = ParamGroup("g", [Tensor(np.zeros((2, 3))), Tensor(np.zeros(3))])
    assert len(g) == 2 and g.num_parameters() == 9
    assert all(t.requires_grad for t in g)
