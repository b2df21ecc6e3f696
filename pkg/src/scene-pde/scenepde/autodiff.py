"""Reverse-mode automatic differentiation over numpy arrays.

A `Tape` records every operation in the order it is executed. Each recorded node
keeps its value and a vector-jacobian product closure; `Tape.gradients` walks the
nodes once, in reverse order, accumulating gradients into their inputs.

Variables (`Var`) are light handles on tape nodes and support the usual
arithmetic operators, so model code reads like plain numpy.
"""
import dataclasses
import typing

import numpy as np
import numpy.typing as npt

from .errors import NetworkError

Array = npt.NDArray[np.float64]
VJP = typing.Callable[[Array], typing.Sequence[typing.Optional[Array]]]
Operand = typing.Union["Var", Array, float]

# Below this magnitude sinc and its derivative switch to their Taylor expansion
SINC_SERIES_THRESHOLD = 1e-3


@dataclasses.dataclass
class Node:
    kind: str
    inputs: typing.Tuple[int, ...]
    value: Array
    vjp: typing.Optional[VJP] = None


class Var:
    """Handle on a node recorded on a tape"""

    __slots__ = ("tape", "id")

    def __init__(self, tape: "Tape", node_id: int) -> None:
        self.tape = tape
        self.id = node_id

    @property
    def value(self) -> Array:
        return self.tape.nodes[self.id].value

    @property
    def shape(self) -> typing.Tuple[int, ...]:
        return self.value.shape  # type: ignore[no-any-return]

    def __float__(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Var(id={self.id}, kind={self.tape.nodes[self.id].kind}, shape={self.shape})"

    def __add__(self, other: Operand) -> "Var":
        return self.tape.add(self, other)

    def __radd__(self, other: Operand) -> "Var":
        return self.tape.add(other, self)

    def __sub__(self, other: Operand) -> "Var":
        return self.tape.sub(self, other)

    def __rsub__(self, other: Operand) -> "Var":
        return self.tape.sub(other, self)

    def __mul__(self, other: Operand) -> "Var":
        return self.tape.mul(self, other)

    def __rmul__(self, other: Operand) -> "Var":
        return self.tape.mul(other, self)

    def __neg__(self) -> "Var":
        return self.tape.mul(self, -1.0)

    def __matmul__(self, other: Operand) -> "Var":
        return self.tape.matmul(self, other)


def _unbroadcast(grad: Array, shape: typing.Tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to the operand shape"""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def sinc(x: Array) -> Array:
    """sin(x)/x with sinc(0) = 1"""
    small = np.abs(x) < SINC_SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(small, 1.0 - x2 / 6.0 + x2 * x2 / 120.0, np.sin(safe) / safe)  # type: ignore[no-any-return]


def sinc_derivative(x: Array) -> Array:
    small = np.abs(x) < SINC_SERIES_THRESHOLD
    safe = np.where(small, 1.0, x)
    x2 = x * x
    return np.where(  # type: ignore[no-any-return]
        small,
        -x / 3.0 + x * x2 / 30.0,
        (safe * np.cos(safe) - np.sin(safe)) / (safe * safe),
    )


def gaussian(x: Array, sigma: float) -> Array:
    return np.exp(-(x * x) / (2.0 * sigma * sigma))  # type: ignore[no-any-return]


class Tape:
    """Append-only record of operations.

    Node ids are positions in `nodes`, so every node's inputs precede it.
    """

    def __init__(self) -> None:
        self.nodes: typing.List[Node] = []
        # Parameter bindings, keyed by id() of the bound object
        self.bindings: typing.Dict[int, typing.Any] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(
        self,
        kind: str,
        inputs: typing.Sequence[Var],
        value: Array,
        vjp: typing.Optional[VJP],
    ) -> Var:
        self.nodes.append(Node(kind, tuple(var.id for var in inputs), value, vjp))
        return Var(self, len(self.nodes) - 1)

    def constant(self, value: typing.Any) -> Var:
        return self._record("constant", (), np.asarray(value, dtype=np.float64), None)

    def variable(self, value: typing.Any) -> Var:
        """Record a differentiable leaf"""
        return self._record("variable", (), np.array(value, dtype=np.float64), None)

    def lift(self, operand: Operand) -> Var:
        if isinstance(operand, Var):
            if operand.tape is not self:
                raise NetworkError("Cannot mix variables from different tapes")
            return operand
        return self.constant(operand)

    # Elementwise arithmetic

    def add(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        sa, sb = a.shape, b.shape
        return self._record(
            "add", (a, b), a.value + b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        )

    def sub(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        sa, sb = a.shape, b.shape
        return self._record(
            "sub", (a, b), a.value - b.value,
            lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        )

    def mul(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        va, vb = a.value, b.value
        return self._record(
            "mul", (a, b), va * vb,
            lambda g: (_unbroadcast(g * vb, va.shape), _unbroadcast(g * va, vb.shape)),
        )

    def matmul(self, a: Operand, b: Operand) -> Var:
        a, b = self.lift(a), self.lift(b)
        va, vb = a.value, b.value
        return self._record(
            "matmul", (a, b), va @ vb, lambda g: (g @ vb.T, va.T @ g)
        )

    def affine(self, x: Var, weight: Var, bias: Var) -> Var:
        """x @ weight + bias, recorded as a single node"""
        vx, vw = x.value, weight.value
        return self._record(
            "affine",
            (x, weight, bias),
            vx @ vw + bias.value,
            lambda g: (g @ vw.T, vx.T @ g, _unbroadcast(g, bias.shape)),
        )

    # Activations

    def relu(self, x: Var) -> Var:
        vx = x.value
        # The subgradient at 0 is taken as 0
        return self._record("relu", (x,), np.maximum(vx, 0.0), lambda g: (g * (vx > 0.0),))

    def sinc(self, x: Var) -> Var:
        vx = x.value
        return self._record("sinc", (x,), sinc(vx), lambda g: (g * sinc_derivative(vx),))

    def gaussian(self, x: Var, sigma: float) -> Var:
        vx = x.value
        value = gaussian(vx, sigma)
        return self._record(
            "gaussian", (x,), value, lambda g: (g * value * (-vx / (sigma * sigma)),)
        )

    # Reductions and reshaping

    def sum(self, x: Var) -> Var:
        shape = x.shape
        return self._record(
            "sum", (x,), np.asarray(x.value.sum()), lambda g: (np.broadcast_to(g, shape).copy(),)
        )

    def mean(self, x: Var) -> Var:
        shape = x.shape
        size = max(int(np.prod(shape)), 1)
        return self._record(
            "mean",
            (x,),
            np.asarray(x.value.sum() / size),
            lambda g: (np.full(shape, float(g) / size),),
        )

    def row_sqnorm(self, x: Var) -> Var:
        """Squared norm of each row of an (N, 3) variable"""
        vx = x.value
        value = vx[:, 0] * vx[:, 0] + vx[:, 1] * vx[:, 1] + vx[:, 2] * vx[:, 2]
        return self._record("row_sqnorm", (x,), value, lambda g: (2.0 * g[:, None] * vx,))

    def row_norm(self, x: Var) -> Var:
        """Euclidean norm of each row, with a zero gradient where the norm is 0"""
        vx = x.value
        value = np.sqrt(vx[:, 0] * vx[:, 0] + vx[:, 1] * vx[:, 1] + vx[:, 2] * vx[:, 2])
        safe = np.where(value > 0.0, value, 1.0)
        scale = np.where(value > 0.0, 1.0 / safe, 0.0)
        return self._record("row_norm", (x,), value, lambda g: ((g * scale)[:, None] * vx,))

    def take(self, x: Var, indices: npt.NDArray[np.int64]) -> Var:
        """Gather rows of x"""
        shape = x.shape

        def vjp(g: Array) -> typing.Sequence[typing.Optional[Array]]:
            grad = np.zeros(shape)
            np.add.at(grad, indices, g)
            return (grad,)

        return self._record("take", (x,), x.value[indices], vjp)

    def concat(self, parts: typing.Sequence[Operand], axis: int = -1) -> Var:
        variables = [self.lift(part) for part in parts]
        sizes = [var.shape[axis] for var in variables]
        splits = np.cumsum(sizes)[:-1]
        return self._record(
            "concat",
            variables,
            np.concatenate([var.value for var in variables], axis=axis),
            lambda g: tuple(np.split(g, splits, axis=axis)),
        )

    # Backward pass

    def gradients(self, loss: Var) -> typing.List[typing.Optional[Array]]:
        """Gradient of a scalar loss with respect to every recorded node.

        Nodes that do not influence the loss get None.
        """
        if loss.tape is not self:
            raise NetworkError("Loss variable belongs to another tape")
        if loss.value.size != 1:
            raise NetworkError("Backward requires a scalar loss")
        grads: typing.List[typing.Optional[Array]] = [None] * (loss.id + 1)
        grads[loss.id] = np.ones_like(loss.value)
        for node_id in range(loss.id, -1, -1):
            grad = grads[node_id]
            node = self.nodes[node_id]
            if grad is None or node.vjp is None:
                continue
            for input_id, input_grad in zip(node.inputs, node.vjp(grad)):
                if input_grad is None:
                    continue
                current = grads[input_id]
                grads[input_id] = input_grad if current is None else current + input_grad
        grads.extend([None] * (len(self.nodes) - len(grads)))
        return grads
