"""The coordinate MLP ("neural prior"), its parameters and checkpoint format."""
import dataclasses
import enum
import pathlib
import struct
import typing

import numpy as np
import pydantic
from structlog import get_logger

from .autodiff import Array, Tape, Var, gaussian, sinc
from .errors import DatasetFormatError, NetworkError

logger = get_logger(__name__)

CHECKPOINT_MAGIC = b"NPRM"
CHECKPOINT_VERSION = 1
# magic, version, input_dim, hidden_width, depth, output_dim, activation, seed, sigma
_HEADER = struct.Struct("<4sIIIIIBQd")
_TIME_RANGE = struct.Struct("<dd")


class Activation(str, enum.Enum):
    relu = "relu"
    sinc = "sinc"
    gaussian = "gaussian"

    @property
    def tag(self) -> int:
        return list(Activation).index(self)

    @classmethod
    def from_tag(cls, tag: int) -> "Activation":
        try:
            return list(cls)[tag]
        except IndexError:
            raise NetworkError(f"Unknown activation tag: {tag}") from None


class MLPConfig(pydantic.BaseModel):
    """Shape and activation of the coordinate network"""

    input_dim: int = 5
    hidden_width: int = 128
    depth: int = pydantic.Field(8, description="Number of hidden layers")
    output_dim: int = 3
    activation: Activation = Activation.relu
    gaussian_sigma: float = 0.1
    seed: int = 0

    @pydantic.validator("input_dim", "hidden_width", "depth", "output_dim")
    def check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @pydantic.validator("gaussian_sigma")
    def check_sigma(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @pydantic.validator("seed")
    def check_seed(cls, v: int) -> int:
        if not 0 <= v < 2**64:
            raise ValueError("must fit in an unsigned 64-bit integer")
        return v

    @property
    def layer_shapes(self) -> typing.List[typing.Tuple[int, int]]:
        """(fan_in, fan_out) of every affine layer, output layer last"""
        widths = [self.input_dim] + [self.hidden_width] * self.depth + [self.output_dim]
        return list(zip(widths[:-1], widths[1:]))

    @property
    def parameter_count(self) -> int:
        return sum(fan_in * fan_out + fan_out for fan_in, fan_out in self.layer_shapes)


@dataclasses.dataclass(frozen=True, eq=False)
class MLPParams:
    """Weights (fan_in, fan_out) and biases (fan_out,) of every layer.

    Instances are treated as immutable values: updates build new instances.
    """

    config: MLPConfig
    weights: typing.Tuple[Array, ...]
    biases: typing.Tuple[Array, ...]

    def __post_init__(self) -> None:
        shapes = self.config.layer_shapes
        if len(self.weights) != len(shapes) or len(self.biases) != len(shapes):
            raise NetworkError("Parameter layer count does not match config")
        for (fan_in, fan_out), weight, bias in zip(shapes, self.weights, self.biases):
            if weight.shape != (fan_in, fan_out) or bias.shape != (fan_out,):
                raise NetworkError(
                    f"Layer shape {weight.shape}/{bias.shape} does not match ({fan_in}, {fan_out})"
                )
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))

    def arrays(self) -> typing.List[Array]:
        """Flat list of arrays in layer order: W0, b0, W1, b1, ..."""
        flat: typing.List[Array] = []
        for weight, bias in zip(self.weights, self.biases):
            flat.extend((weight, bias))
        return flat

    def with_arrays(self, arrays: typing.Sequence[Array]) -> "MLPParams":
        if len(arrays) != 2 * len(self.weights):
            raise NetworkError("Array count does not match parameter layout")
        return MLPParams(
            self.config,
            tuple(np.asarray(a, dtype=np.float64) for a in arrays[0::2]),
            tuple(np.asarray(a, dtype=np.float64) for a in arrays[1::2]),
        )

    def zeros_like(self) -> "MLPParams":
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    @property
    def count(self) -> int:
        return sum(a.size for a in self.arrays())

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for a in self.arrays())


@dataclasses.dataclass(frozen=True)
class BoundParams:
    weights: typing.Tuple[Var, ...]
    biases: typing.Tuple[Var, ...]


def init_params(config: MLPConfig) -> MLPParams:
    """Seeded uniform fan-in initialization with zero biases"""
    rng = np.random.default_rng(config.seed)
    weights = []
    biases = []
    for fan_in, fan_out in config.layer_shapes:
        bound = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(config, tuple(weights), tuple(biases))


def bind(tape: Tape, params: MLPParams) -> BoundParams:
    """Record params as leaves of the tape (once per tape)"""
    bound = tape.bindings.get(id(params))
    if bound is None:
        bound = BoundParams(
            tuple(tape.variable(w) for w in params.weights),
            tuple(tape.variable(b) for b in params.biases),
        )
        tape.bindings[id(params)] = (params, bound)
        return bound
    return typing.cast(BoundParams, bound[1])


def _activate(config: MLPConfig, x: Array) -> Array:
    if config.activation is Activation.relu:
        return np.maximum(x, 0.0)
    if config.activation is Activation.sinc:
        return sinc(x)
    return gaussian(x, config.gaussian_sigma)


def _activate_on_tape(tape: Tape, config: MLPConfig, x: Var) -> Var:
    if config.activation is Activation.relu:
        return tape.relu(x)
    if config.activation is Activation.sinc:
        return tape.sinc(x)
    return tape.gaussian(x, config.gaussian_sigma)


@typing.overload
def forward(params: MLPParams, inputs: Array, tape: None = None) -> Array:
    ...


@typing.overload
def forward(params: MLPParams, inputs: typing.Union[Array, Var], tape: Tape) -> Var:
    ...


def forward(
    params: MLPParams,
    inputs: typing.Union[Array, Var],
    tape: typing.Optional[Tape] = None,
) -> typing.Union[Array, Var]:
    """Evaluate the network on one input vector or a batch of rows.

    Without a tape the evaluation is plain numpy. With a tape every intermediate
    is recorded and a `Var` is returned.
    """
    values = inputs.value if isinstance(inputs, Var) else np.asarray(inputs, dtype=np.float64)
    if values.shape[-1] != params.config.input_dim:
        raise NetworkError(
            f"Expected input dimension {params.config.input_dim}, got {values.shape[-1]}"
        )
    if not np.all(np.isfinite(values)):
        raise NetworkError("Network input must be finite")
    last = len(params.weights) - 1
    if tape is None:
        x = np.atleast_2d(values)
        for layer, (weight, bias) in enumerate(zip(params.weights, params.biases)):
            x = x @ weight + bias
            if layer < last:
                x = _activate(params.config, x)
        return x.reshape(values.shape[:-1] + (params.config.output_dim,))
    bound = bind(tape, params)
    h = tape.lift(inputs if isinstance(inputs, Var) else np.atleast_2d(values))
    for layer, (weight_var, bias_var) in enumerate(zip(bound.weights, bound.biases)):
        h = tape.affine(h, weight_var, bias_var)
        if layer < last:
            h = _activate_on_tape(tape, params.config, h)
    return h


def backward_all(
    tape: Tape, loss: Var, params: typing.Sequence[MLPParams]
) -> typing.List[MLPParams]:
    """Gradients for several parameter sets from a single reverse pass"""
    grads = tape.gradients(loss)
    result = []
    for item in params:
        entry = tape.bindings.get(id(item))
        if entry is None:
            result.append(item.zeros_like())
            continue
        bound = typing.cast(BoundParams, entry[1])
        arrays: typing.List[Array] = []
        for weight_var, bias_var in zip(bound.weights, bound.biases):
            for var in (weight_var, bias_var):
                grad = grads[var.id]
                arrays.append(np.zeros_like(var.value) if grad is None else grad)
        result.append(item.with_arrays(arrays))
    return result


def backward(tape: Tape, loss: Var, params: MLPParams) -> MLPParams:
    """Gradient of a scalar loss with respect to params bound on the tape"""
    return backward_all(tape, loss, [params])[0]


def dump_checkpoint(
    params: MLPParams,
    time_range: typing.Optional[typing.Tuple[float, float]] = None,
) -> bytes:
    """Serialize params: header, little-endian f64 weights and biases, time range"""
    config = params.config
    header = _HEADER.pack(
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        config.input_dim,
        config.hidden_width,
        config.depth,
        config.output_dim,
        config.activation.tag,
        config.seed,
        config.gaussian_sigma,
    )
    body = b"".join(a.astype("<f8").tobytes() for a in params.arrays())
    t_min, t_max = time_range if time_range is not None else (0.0, 0.0)
    return header + body + _TIME_RANGE.pack(t_min, t_max)


def parse_checkpoint(
    data: bytes, path: typing.Union[str, pathlib.Path] = "<memory>"
) -> typing.Tuple[MLPParams, typing.Optional[typing.Tuple[float, float]]]:
    """Inverse of `dump_checkpoint`. The time range is None when unset (0, 0)."""
    if len(data) < _HEADER.size:
        raise DatasetFormatError(path, "header", "file too short")
    magic, version, input_dim, width, depth, output_dim, tag, seed, sigma = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise DatasetFormatError(path, "magic", f"expected {CHECKPOINT_MAGIC!r}, got {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise DatasetFormatError(path, "version", f"unsupported version {version}")
    try:
        config = MLPConfig(
            input_dim=input_dim,
            hidden_width=width,
            depth=depth,
            output_dim=output_dim,
            activation=Activation.from_tag(tag),
            gaussian_sigma=sigma,
            seed=seed,
        )
    except (pydantic.ValidationError, NetworkError) as err:
        raise DatasetFormatError(path, "config", str(err)) from None
    expected = _HEADER.size + 8 * config.parameter_count + _TIME_RANGE.size
    if len(data) != expected:
        raise DatasetFormatError(path, "parameters", f"expected {expected} bytes, got {len(data)}")
    offset = _HEADER.size
    arrays: typing.List[Array] = []
    for fan_in, fan_out in config.layer_shapes:
        for shape in ((fan_in, fan_out), (fan_out,)):
            size = int(np.prod(shape))
            arrays.append(
                np.frombuffer(data, dtype="<f8", count=size, offset=offset)
                .astype(np.float64)
                .reshape(shape)
            )
            offset += 8 * size
    t_min, t_max = _TIME_RANGE.unpack_from(data, offset)
    weights = tuple(arrays[0::2])
    biases = tuple(arrays[1::2])
    time_range = None if t_min == t_max == 0.0 else (t_min, t_max)
    return MLPParams(config, weights, biases), time_range


def save_checkpoint(
    path: typing.Union[str, pathlib.Path],
    params: MLPParams,
    time_range: typing.Optional[typing.Tuple[float, float]] = None,
) -> pathlib.Path:
    path = pathlib.Path(path)
    try:
        path.write_bytes(dump_checkpoint(params, time_range))
    except OSError as err:
        raise DatasetFormatError(path, "file", f"cannot write: {err}") from None
    logger.debug("Wrote checkpoint", path=str(path), parameters=params.count)
    return path


def load_checkpoint(
    path: typing.Union[str, pathlib.Path],
) -> typing.Tuple[MLPParams, typing.Optional[typing.Tuple[float, float]]]:
    path = pathlib.Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise DatasetFormatError(path, "file", f"cannot read: {err}") from None
    return parse_checkpoint(data, path)
