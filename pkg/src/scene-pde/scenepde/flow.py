"""Space-time-direction encoding, flow queries and Euler integration of the motion field.

The network output is a displacement per observation interval: one Euler step
moves a point from one frame to the next, querying the field at the timestamp of
the frame the step starts from.
"""
import dataclasses
import enum
import math
import typing

import numpy as np
import pydantic
from structlog import get_logger

from .autodiff import Array, Tape, Var
from .errors import IntegrationError
from .geometry import PointCloud, PointCloudSequence, as_points
from .network import MLPParams, forward

logger = get_logger(__name__)

TIMESTAMP_TOLERANCE = 1e-9


class Direction(enum.IntEnum):
    FWD = 1
    BWD = -1


class TimeEncodingKind(str, enum.Enum):
    normalized = "normalized"
    sinusoidal = "sinusoidal"


class TimeEncoding(pydantic.BaseModel):
    """How normalized time enters the network input"""

    kind: TimeEncodingKind = TimeEncodingKind.normalized
    num_frequencies: int = pydantic.Field(8, ge=1)

    @property
    def dim(self) -> int:
        if self.kind is TimeEncodingKind.normalized:
            return 1
        return 2 * self.num_frequencies

    @property
    def input_dim(self) -> int:
        """Network input size: position, encoded time, direction"""
        return 3 + self.dim + 1

    @classmethod
    def from_input_dim(cls, input_dim: int) -> "TimeEncoding":
        """Recover the encoding a checkpointed network was trained with"""
        if input_dim == 5:
            return cls()
        if input_dim > 5 and (input_dim - 4) % 2 == 0:
            return cls(kind=TimeEncodingKind.sinusoidal, num_frequencies=(input_dim - 4) // 2)
        raise IntegrationError(f"No time encoding produces input dimension {input_dim}")

    def apply(self, normalized_time: float) -> Array:
        if self.kind is TimeEncodingKind.normalized:
            return np.array([normalized_time])
        frequencies = (2.0 ** np.arange(self.num_frequencies)) * math.pi
        angles = frequencies * normalized_time
        features = np.empty(2 * self.num_frequencies)
        features[0::2] = np.sin(angles)
        features[1::2] = np.cos(angles)
        return features


@dataclasses.dataclass(frozen=True)
class TimeNormalizer:
    """Affine map of sequence time onto [-1, 1].

    Queries are accepted up to one frame interval beyond either end.
    """

    t_min: float
    t_max: float
    interval: float

    def __post_init__(self) -> None:
        if not self.t_max > self.t_min:
            raise IntegrationError("Time range must satisfy t_max > t_min")

    @classmethod
    def from_timestamps(cls, timestamps: typing.Sequence[float]) -> "TimeNormalizer":
        if len(timestamps) < 2:
            raise IntegrationError("At least two timestamps are needed")
        t_min, t_max = float(timestamps[0]), float(timestamps[-1])
        return cls(t_min, t_max, (t_max - t_min) / (len(timestamps) - 1))

    @classmethod
    def from_range(cls, t_min: float, t_max: float, num_frames: int) -> "TimeNormalizer":
        return cls(t_min, t_max, (t_max - t_min) / max(num_frames - 1, 1))

    def normalize(self, t: float) -> float:
        slack = self.interval + TIMESTAMP_TOLERANCE
        if not (self.t_min - slack <= t <= self.t_max + slack):
            raise IntegrationError(
                f"Time {t} outside [{self.t_min - self.interval}, {self.t_max + self.interval}]"
            )
        return (2.0 * t - (self.t_min + self.t_max)) / (self.t_max - self.t_min)


def encode(
    position: typing.Any,
    t: float,
    d: Direction,
    normalizer: TimeNormalizer,
    encoding: TimeEncoding,
) -> Array:
    """Concatenate (x, y, z, encoded time, direction) for one point or a batch"""
    positions = np.asarray(position, dtype=np.float64)
    single = positions.ndim == 1
    positions = as_points(np.atleast_2d(positions))
    suffix = np.concatenate([encoding.apply(normalizer.normalize(t)), [float(Direction(d))]])
    encoded = np.concatenate(
        [positions, np.broadcast_to(suffix, (positions.shape[0], suffix.size))], axis=1
    )
    return encoded[0] if single else encoded


class MotionField(typing.Protocol):
    """Anything that yields per-point displacements for one observation interval"""

    def velocity(self, positions: Array, t: float, d: Direction) -> Array:
        ...

    def velocity_on_tape(self, tape: Tape, positions: Var, t: float, d: Direction) -> Var:
        ...


@dataclasses.dataclass(frozen=True, eq=False)
class NeuralPrior:
    """The motion field represented by a coordinate network over one sequence"""

    params: MLPParams
    normalizer: TimeNormalizer
    encoding: TimeEncoding = dataclasses.field(default_factory=TimeEncoding)

    def __post_init__(self) -> None:
        if self.params.config.input_dim != self.encoding.input_dim:
            raise IntegrationError(
                f"Network input dimension {self.params.config.input_dim} does not match "
                f"encoding dimension {self.encoding.input_dim}"
            )

    @classmethod
    def from_checkpoint(
        cls,
        params: MLPParams,
        time_range: typing.Optional[typing.Tuple[float, float]],
        num_frames: int,
    ) -> "NeuralPrior":
        if time_range is None:
            raise IntegrationError("Checkpoint has no time range; it is not a sequence prior")
        return cls(
            params,
            TimeNormalizer.from_range(time_range[0], time_range[1], num_frames),
            TimeEncoding.from_input_dim(params.config.input_dim),
        )

    @property
    def time_range(self) -> typing.Tuple[float, float]:
        return (self.normalizer.t_min, self.normalizer.t_max)

    def _suffix(self, t: float, d: Direction) -> Array:
        return np.concatenate(
            [self.encoding.apply(self.normalizer.normalize(t)), [float(Direction(d))]]
        )

    def velocity(self, positions: Array, t: float, d: Direction) -> Array:
        return forward(self.params, encode(positions, t, d, self.normalizer, self.encoding))

    def velocity_on_tape(self, tape: Tape, positions: Var, t: float, d: Direction) -> Var:
        suffix = self._suffix(t, d)
        columns = np.broadcast_to(suffix, (positions.shape[0], suffix.size))
        return forward(self.params, tape.concat([positions, np.array(columns)], axis=1), tape)


@dataclasses.dataclass(frozen=True, eq=False)
class FlowField:
    """Per-frame flow vectors F_{t,t+1}, index-aligned with each frame's cloud"""

    vectors: typing.Tuple[Array, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "vectors", tuple(as_points(v) for v in self.vectors))

    def __len__(self) -> int:
        return len(self.vectors)

    def __getitem__(self, index: int) -> Array:
        return self.vectors[index]

    def check_against(self, sequence: PointCloudSequence) -> None:
        """Raise unless there is one vector per point for every interval"""
        if len(self.vectors) != sequence.num_intervals:
            raise IntegrationError(
                f"Flow field has {len(self.vectors)} frames, sequence has {sequence.num_intervals} intervals"
            )
        for index, (vectors, frame) in enumerate(zip(self.vectors, sequence.frames)):
            if vectors.shape[0] != frame.cloud.count:
                raise IntegrationError(
                    f"Frame {index}: {vectors.shape[0]} flow vectors for {frame.cloud.count} points"
                )


@dataclasses.dataclass(frozen=True, eq=False)
class Trajectory:
    """Positions recorded at successive frame timestamps"""

    timestamps: Array
    positions: Array

    def __post_init__(self) -> None:
        timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        positions = as_points(self.positions)
        if len(timestamps) != len(positions):
            raise IntegrationError("Trajectory needs one position per timestamp")
        steps = np.diff(timestamps)
        if len(steps) and not (np.all(steps > 0) or np.all(steps < 0)):
            raise IntegrationError("Trajectory timestamps must be strictly monotone")
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "positions", positions)

    def __len__(self) -> int:
        return len(self.timestamps)


def frame_index(timestamps: typing.Sequence[float], t: float) -> int:
    """Index of the frame observed at time t"""
    stamps = np.asarray(timestamps, dtype=np.float64)
    matches = np.flatnonzero(np.abs(stamps - t) <= TIMESTAMP_TOLERANCE * max(1.0, abs(t)))
    if len(matches) == 0:
        raise IntegrationError(f"Time {t} is not a frame timestamp")
    return int(matches[0])


def _check_steps(num_frames: int, start: int, d: Direction, k: int) -> None:
    if k < 1:
        raise IntegrationError(f"Step count must be at least 1, got {k}")
    end = start + int(d) * k
    if not 0 <= end < num_frames:
        raise IntegrationError(
            f"{k} {Direction(d).name} steps from frame {start} leave the sequence (0..{num_frames - 1})"
        )


def query_flow(field: MotionField, cloud: PointCloud, t: float, d: Direction) -> Array:
    """One displacement vector per point of the cloud"""
    if cloud.count == 0:
        return np.zeros((0, 3))
    return as_points(field.velocity(cloud.points, t, d))


def euler_integrate(
    field: MotionField,
    cloud: PointCloud,
    timestamps: typing.Sequence[float],
    t_start: float,
    d: Direction,
    k: int,
) -> PointCloud:
    """k Euler steps from the frame at t_start; step i queries the field at frame start ± i"""
    start = frame_index(timestamps, t_start)
    _check_steps(len(timestamps), start, d, k)
    positions = cloud.points
    for step in range(k):
        current = start + int(d) * step
        positions = positions + query_flow(field, PointCloud(positions), timestamps[current], d)
    return PointCloud(positions)


def integrate_on_tape(
    field: MotionField,
    tape: Tape,
    positions: Var,
    timestamps: typing.Sequence[float],
    start: int,
    d: Direction,
    k: int,
) -> typing.List[Var]:
    """Recorded Euler rollout; returns the state after each of the k steps"""
    _check_steps(len(timestamps), start, d, k)
    states = []
    for step in range(k):
        current = start + int(d) * step
        positions = positions + field.velocity_on_tape(tape, positions, timestamps[current], d)
        states.append(positions)
    return states


def extract_flow_field(field: MotionField, sequence: PointCloudSequence) -> FlowField:
    """Flow of every frame but the last: one forward step minus the start position"""
    timestamps = sequence.timestamps
    vectors = []
    for frame in sequence.frames[:-1]:
        moved = euler_integrate(field, frame.cloud, timestamps, frame.timestamp, Direction.FWD, 1)
        vectors.append(moved.points - frame.cloud.points)
    return FlowField(tuple(vectors))


def extract_tracks(
    field: MotionField,
    timestamps: typing.Sequence[float],
    starts: Array,
    t_start: float,
    t_end: float,
) -> typing.List[Trajectory]:
    """Integrate many start points frame by frame from t_start to t_end"""
    first = frame_index(timestamps, t_start)
    last = frame_index(timestamps, t_end)
    if first == last:
        raise IntegrationError("Track start and end must be different frames")
    d = Direction.FWD if last > first else Direction.BWD
    positions = as_points(np.atleast_2d(starts))
    history = [positions]
    frames = list(range(first, last, int(d)))
    for current in frames:
        positions = positions + as_points(field.velocity(positions, timestamps[current], d))
        history.append(positions)
    stamps = np.array([timestamps[index] for index in frames + [last]], dtype=np.float64)
    stacked = np.stack(history, axis=1)
    logger.debug("Extracted tracks", count=len(positions), steps=len(frames), direction=d.name)
    return [Trajectory(stamps, track) for track in stacked]


def extract_track(
    field: MotionField,
    timestamps: typing.Sequence[float],
    start: typing.Sequence[float],
    t_start: float,
    t_end: float,
) -> Trajectory:
    """Trajectory of one point from t_start to t_end"""
    return extract_tracks(field, timestamps, np.asarray(start, dtype=np.float64).reshape(1, 3), t_start, t_end)[0]
