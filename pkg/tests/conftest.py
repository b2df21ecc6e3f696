import typing

import numpy as np
import pytest

from scenepde.autodiff import Tape, Var
from scenepde.flow import Direction, NeuralPrior, TimeNormalizer
from scenepde.geometry import Frame, GroundTruth, PointCloud, PointCloudSequence
from scenepde.network import MLPConfig, init_params
from scenepde.synthgen import BackgroundSpec, MoverSpec, SceneSpec


class ConstantField:
    """Stub motion field: +forward in FWD direction, -backward in BWD direction"""

    def __init__(
        self,
        forward: typing.Sequence[float],
        backward: typing.Optional[typing.Sequence[float]] = None,
    ) -> None:
        self.forward = np.asarray(forward, dtype=np.float64)
        self.backward = self.forward if backward is None else np.asarray(backward, dtype=np.float64)

    def _step(self, count: int, d: Direction) -> np.ndarray:
        vector = self.forward if d is Direction.FWD else -self.backward
        return np.tile(vector, (count, 1))

    def velocity(self, positions: np.ndarray, t: float, d: Direction) -> np.ndarray:
        return self._step(len(positions), Direction(d))

    def velocity_on_tape(self, tape: Tape, positions: Var, t: float, d: Direction) -> Var:
        return tape.constant(self._step(positions.shape[0], Direction(d)))


def make_sequence(
    clouds: typing.Sequence[typing.Any],
    interval: float = 0.1,
    gts: typing.Optional[typing.Sequence[GroundTruth]] = None,
) -> PointCloudSequence:
    frames = []
    for index, points in enumerate(clouds):
        frames.append(
            Frame(
                PointCloud(np.asarray(points, dtype=np.float64)),
                index * interval,
                gt=gts[index] if gts is not None else None,
            )
        )
    return PointCloudSequence(tuple(frames), name="test")


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> MLPConfig:
    return MLPConfig(input_dim=5, hidden_width=8, depth=2, seed=3)


@pytest.fixture
def timestamps() -> typing.Tuple[float, ...]:
    return (0.0, 0.1, 0.2, 0.3, 0.4, 0.5)


@pytest.fixture
def zero_prior(tiny_config: MLPConfig, timestamps: typing.Tuple[float, ...]) -> NeuralPrior:
    return NeuralPrior(init_params(tiny_config).zeros_like(), TimeNormalizer.from_timestamps(timestamps))


@pytest.fixture
def random_prior(tiny_config: MLPConfig, timestamps: typing.Tuple[float, ...]) -> NeuralPrior:
    return NeuralPrior(init_params(tiny_config), TimeNormalizer.from_timestamps(timestamps))


@pytest.fixture
def small_scene() -> SceneSpec:
    """A few frames, every point above the default ground height"""
    return SceneSpec(
        name="small",
        num_frames=4,
        background=BackgroundSpec(num_points=60, extent=10.0, ground_fraction=0.0),
        movers=[
            MoverSpec(
                class_id=1,
                size=(1.0, 1.0, 1.0),
                position=(-2.0, 1.0, 1.0),
                linear_velocity=(0.1, 0.0, 0.0),
                points_per_frame=30,
            ),
            MoverSpec(
                class_id=2,
                size=(0.5, 0.5, 1.0),
                position=(2.0, -1.0, 1.0),
                linear_velocity=(0.0, 0.08, 0.0),
                angular_velocity=0.05,
                points_per_frame=20,
            ),
        ],
        seed=5,
    )
