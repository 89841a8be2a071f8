import numpy as np
import pytest

from codexdg.autodiff import ParamGroup, Tensor
from codexdg.exceptions import NumericError, ParameterError
from codexdg.optim import Adam, AdamState, OptimConfig, adam_step


def _group(name, value, grad=None, frozen=False):
    t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=f"{name}.w")
    t.grad = None if grad is None else np.array(grad, dtype=np.float64)
    return ParamGroup(name, [t], frozen=frozen)


def test_first_step_is_minus_lr():
    g = _group("p", [0.0], [1.0])
    Adam([g], OptimConfig(lr=1e-3, weight_decay=0.0)).step()
    assert g.tensors[0].data[0] == pytest.approx(-1e-3, rel=1e-7)


def test_decoupled_weight_decay():
    g = _group("p", [2.0], [0.0])
    cfg = OptimConfig(lr=0.1, weight_decay=0.01)
    Adam([g], cfg).step()
    # zero gradient: only the decay term moves the parameter
    assert g.tensors[0].data[0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0, rel=1e-12)


def test_affinity_not_decayed_by_default():
    aff = _group("affinity", [1.0], [0.0])
    Adam([aff], OptimConfig(lr=0.1, weight_decay=0.5)).step()
    assert aff.tensors[0].data[0] == 1.0
    Adam([aff], OptimConfig(lr=0.1, weight_decay=0.5, decay_affinity=True)).step()
    assert aff.tensors[0].data[0] == pytest.approx(0.95)


def test_frozen_and_unreached_tensors_untouched():
    frozen = _group("backbone", [1.0, -1.0], [5.0, 5.0], frozen=True)
    unreached = _group("head0", [3.0])
    live = _group("selector", [0.0], [1.0])
    Adam([frozen, unreached, live], OptimConfig(lr=0.01)).step()
    np.testing.assert_array_equal(frozen.tensors[0].data, [1.0, -1.0])
    np.testing.assert_array_equal(unreached.tensors[0].data, [3.0])
    assert live.tensors[0].data[0] != 0.0


def test_nonfinite_gradient_raises():
    g = _group("p", [0.0], [np.nan])
    with pytest.raises(NumericError):
        Adam([g], OptimConfig()).step()
    assert g.tensors[0].data[0] == 0.0


def test_frozen_nan_is_ignored():
    g = _group("p", [0.0], [np.inf], frozen=True)
    Adam([g], OptimConfig()).step()


def test_functional_step_matches_class(rng):
    grads = rng.standard_normal((5, 3))
    a, b = _group("p", np.zeros(3)), _group("p", np.zeros(3))
    cfg = OptimConfig(lr=0.05)
    opt, state = Adam([a], cfg), AdamState()
    for g in grads:
        a.tensors[0].grad = g
        b.tensors[0].grad = g
        opt.step()
        state = adam_step([b], state, cfg)
    np.testing.assert_array_equal(a.tensors[0].data, b.tensors[0].data)
    assert state.step == 5


def test_bias_correction_counts_per_tensor():
    # A tensor that first receives a gradient late still takes a full-size first step.
    late = _group("late", [0.0])
    early = _group("early", [0.0], [1.0])
    opt = Adam([early, late], OptimConfig(lr=1e-2, weight_decay=0.0))
    opt.step()
    late.tensors[0].grad = np.array([1.0])
    opt.step()
    assert late.tensors[0].data[0] == pytest.approx(-1e-2, rel=1e-6)


@pytest.mark.parametrize("kwargs", [dict(lr=0), dict(beta1=1.0), dict(beta2=-0.1), dict(eps=0),
                                    dict(weight_decay=-1), dict(epochs_stage1=-1), dict(batch_size=0)])
def test_config_validation(kwargs):
    with pytest.raises(ParameterError):
        OptimConfig(**kwargs)
