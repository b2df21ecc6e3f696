import numpy as np
import pytest

from scenepde.errors import NetworkError
from scenepde.network import MLPConfig, MLPParams, init_params
from scenepde.optim import AdamState, adam_step


def _filled(params: MLPParams, value: float) -> MLPParams:
    return params.with_arrays([np.full_like(a, value) for a in params.arrays()])


def test_first_step_moves_by_learning_rate(tiny_config: MLPConfig) -> None:
    params = _filled(init_params(tiny_config), 1.0)
    grads = _filled(params, 0.5)
    state = AdamState.create(params, learning_rate=0.1)
    updated, state = adam_step(params, grads, state)
    assert state.step == 1
    for array in updated.arrays():
        np.testing.assert_allclose(array, 0.9, rtol=1e-7)
    for m, v in zip(state.first_moment, state.second_moment):
        np.testing.assert_allclose(m, 0.05)
        np.testing.assert_allclose(v, 0.00025)


def test_zero_gradient_leaves_params_unchanged(tiny_config: MLPConfig) -> None:
    params = init_params(tiny_config)
    state = AdamState.create(params)
    updated, state = adam_step(params, params.zeros_like(), state)
    for before, after in zip(params.arrays(), updated.arrays()):
        np.testing.assert_array_equal(before, after)


def test_inputs_are_not_modified(tiny_config: MLPConfig) -> None:
    params = init_params(tiny_config)
    snapshot = [a.copy() for a in params.arrays()]
    state = AdamState.create(params)
    adam_step(params, _filled(params, 1.0), state)
    assert state.step == 0
    assert all(not np.any(m) for m in state.first_moment)
    for before, after in zip(snapshot, params.arrays()):
        np.testing.assert_array_equal(before, after)


def test_descends_a_quadratic(tiny_config: MLPConfig) -> None:
    params = init_params(tiny_config)
    state = AdamState.create(params, learning_rate=0.01)
    for _ in range(500):
        # gradient of 0.5 * ||theta||^2
        params, state = adam_step(params, params, state)
    assert max(np.abs(a).max() for a in params.arrays()) < 0.05


def test_rejects_mismatched_gradients(tiny_config: MLPConfig) -> None:
    params = init_params(tiny_config)
    other = init_params(tiny_config.copy(update={"hidden_width": 4}))
    with pytest.raises(NetworkError):
        adam_step(params, other, AdamState.create(params))
