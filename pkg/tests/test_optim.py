import numpy as np
import pytest

from memo_edge.autodiff import Tensor
from memo_edge.optim import AdamWState, adamw_step


def test_first_step_moves_by_learning_rate():
    # bias correction makes the first update exactly lr * sign(g) (plus decay)
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True, dtype=np.float64)
    state = AdamWState(lr=0.1, weight_decay=0.0, eps=0.0)
    adamw_step({"p": p}, {"p": np.array([0.3, -5.0])}, state)
    np.testing.assert_allclose(p.data, [0.9, -1.9])


def test_decoupled_weight_decay():
    p = Tensor(np.array([2.0]), requires_grad=True, dtype=np.float64)
    state = AdamWState(lr=0.1, weight_decay=0.5)
    adamw_step({"p": p}, {"p": np.array([0.0])}, state)
    np.testing.assert_allclose(p.data, [2.0 * (1 - 0.05)])


def test_matches_reference_recursion():
    rng = np.random.default_rng(0)
    p = Tensor(rng.standard_normal(4), requires_grad=True, dtype=np.float64)
    ref = p.data.copy()
    m = v = np.zeros(4)
    state = AdamWState(lr=0.01, weight_decay=0.1)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        adamw_step({"p": p}, {"p": g}, state)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref * (1 - 0.001) - 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
    np.testing.assert_allclose(p.data, ref, rtol=1e-12)


def test_frozen_parameters_untouched():
    frozen = Tensor(np.ones(3), requires_grad=False)
    before = frozen.data.copy()
    adamw_step({"f": frozen}, {}, AdamWState())
    np.testing.assert_array_equal(frozen.data, before)


def test_missing_gradient_is_an_error():
    with pytest.raises(ValueError, match="missing"):
        adamw_step({"p": Tensor(np.ones(2), requires_grad=True)}, {}, AdamWState())


def test_shape_mismatch_is_an_error():
    with pytest.raises(ValueError, match="shape"):
        adamw_step({"p": Tensor(np.ones(2), requires_grad=True)}, {"p": np.ones(3)}, AdamWState())
