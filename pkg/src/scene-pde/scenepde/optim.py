"""Adam optimizer over `MLPParams` values"""
import dataclasses
import typing

import numpy as np

from .autodiff import Array
from .errors import NetworkError
from .network import MLPParams

DEFAULT_LEARNING_RATE = 8e-5


@dataclasses.dataclass(frozen=True, eq=False)
class AdamState:
    """First and second moment accumulators, shaped like the parameters"""

    step: int
    first_moment: typing.Tuple[Array, ...]
    second_moment: typing.Tuple[Array, ...]
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(
        cls, params: MLPParams, learning_rate: float = DEFAULT_LEARNING_RATE
    ) -> "AdamState":
        zeros = tuple(np.zeros_like(a) for a in params.arrays())
        return cls(
            step=0,
            first_moment=zeros,
            second_moment=tuple(np.zeros_like(a) for a in zeros),
            learning_rate=learning_rate,
        )


def adam_step(
    params: MLPParams, grads: MLPParams, state: AdamState
) -> typing.Tuple[MLPParams, AdamState]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    values = params.arrays()
    gradients = grads.arrays()
    if len(values) != len(gradients) or len(values) != len(state.first_moment):
        raise NetworkError("Gradient layout does not match parameters")
    for value, grad, m in zip(values, gradients, state.first_moment):
        if value.shape != grad.shape or value.shape != m.shape:
            raise NetworkError(
                f"Gradient shape {grad.shape} does not match parameter shape {value.shape}"
            )
    step = state.step + 1
    bias_correction1 = 1.0 - state.beta1**step
    bias_correction2 = 1.0 - state.beta2**step
    new_values = []
    first_moment = []
    second_moment = []
    for value, grad, m, v in zip(values, gradients, state.first_moment, state.second_moment):
        m = state.beta1 * m + (1.0 - state.beta1) * grad
        v = state.beta2 * v + (1.0 - state.beta2) * (grad * grad)
        m_hat = m / bias_correction1
        v_hat = v / bias_correction2
        new_values.append(value - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.eps))
        first_moment.append(m)
        second_moment.append(v)
    return params.with_arrays(new_values), dataclasses.replace(
        state,
        step=step,
        first_moment=tuple(first_moment),
        second_moment=tuple(second_moment),
    )
