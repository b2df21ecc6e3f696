"""Deterministic synthetic scenes with exact ground truth flow.

A scene is a static background plus rigidly moving boxes, observed by a moving
sensor. Box surfaces are sampled afresh every frame, so consecutive clouds have
no point-to-point correspondence.
"""
import typing

import numpy as np
import pydantic
from structlog import get_logger

from .errors import DataError
from .geometry import (
    Array,
    GroundTruth,
    PointCloud,
    PointCloudSequence,
    RigidPose,
    ego_compensate,
)

logger = get_logger(__name__)

BACKGROUND_CLASS = 0
Vector = typing.Tuple[float, float, float]


class BackgroundSpec(pydantic.BaseModel):
    """Static points: a ground plane at z = 0 plus structures above it"""

    num_points: int = 2000
    extent: float = 40.0
    ground_fraction: float = 0.5
    structure_height: typing.Tuple[float, float] = (0.5, 3.0)

    @pydantic.validator("num_points")
    def check_points(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @pydantic.validator("extent")
    def check_extent(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @pydantic.validator("ground_fraction")
    def check_fraction(cls, v: float) -> float:
        if not 0 <= v <= 1:
            raise ValueError("must lie in [0, 1]")
        return v


class MoverSpec(pydantic.BaseModel):
    """A box moving rigidly: position is the box center at frame 0"""

    class_id: int = 1
    size: Vector = (1.0, 1.0, 1.0)
    position: Vector = (0.0, 0.0, 1.0)
    yaw: float = 0.0
    linear_velocity: Vector = (0.0, 0.0, 0.0)
    angular_velocity: float = 0.0
    points_per_frame: int = 100

    @pydantic.validator("class_id")
    def check_class(cls, v: int) -> int:
        if v == BACKGROUND_CLASS:
            raise ValueError(f"class {BACKGROUND_CLASS} is reserved for the background")
        return v

    @pydantic.validator("size")
    def check_size(cls, v: Vector) -> Vector:
        if not all(side > 0 for side in v):
            raise ValueError("box sides must be positive")
        return v

    @pydantic.validator("points_per_frame")
    def check_points(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    def pose(self, frame: int) -> RigidPose:
        """Body-to-world pose of the box at a frame index"""
        center = np.asarray(self.position) + frame * np.asarray(self.linear_velocity)
        return RigidPose.from_yaw(self.yaw + frame * self.angular_velocity, center)


class EgoSpec(pydantic.BaseModel):
    linear_velocity: Vector = (0.0, 0.0, 0.0)
    yaw_rate: float = 0.0

    def pose(self, frame: int) -> RigidPose:
        return RigidPose.from_yaw(frame * self.yaw_rate, frame * np.asarray(self.linear_velocity))


class SceneSpec(pydantic.BaseModel):
    """Everything needed to reproduce a synthetic sequence"""

    name: str = "synthetic"
    num_frames: int = 20
    frame_interval: float = 0.1
    background: BackgroundSpec = BackgroundSpec()
    movers: typing.List[MoverSpec] = []
    ego: EgoSpec = EgoSpec()
    resample_each_frame: bool = True
    noise_sigma: float = 0.0
    seed: int = 0

    @pydantic.validator("num_frames")
    def check_frames(cls, v: int) -> int:
        if v < 2:
            raise ValueError("a sequence needs at least 2 frames")
        return v

    @pydantic.validator("frame_interval")
    def check_interval(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @pydantic.validator("noise_sigma")
    def check_noise(cls, v: float) -> float:
        if not v >= 0:
            raise ValueError("must be non-negative")
        return v

    @pydantic.validator("seed")
    def check_seed(cls, v: int) -> int:
        if not 0 <= v < 2**64:
            raise ValueError("must fit in an unsigned 64-bit integer")
        return v


def desk_av(seed: int = 0) -> SceneSpec:
    """Small driving scene: a car and a pedestrian passing a slowly moving sensor"""
    return SceneSpec(
        name="desk-av",
        num_frames=20,
        frame_interval=0.1,
        background=BackgroundSpec(num_points=2000, extent=40.0),
        movers=[
            MoverSpec(
                class_id=1,
                size=(4.0, 2.0, 1.5),
                position=(-5.0, 3.0, 1.05),
                linear_velocity=(0.1, 0.0, 0.0),
                points_per_frame=300,
            ),
            MoverSpec(
                class_id=2,
                size=(0.5, 0.5, 1.7),
                position=(2.0, -3.0, 1.15),
                linear_velocity=(0.0, 0.06, 0.0),
                points_per_frame=60,
            ),
        ],
        ego=EgoSpec(linear_velocity=(0.1, 0.0, 0.0)),
        seed=seed,
    )


PRESETS: typing.Dict[str, typing.Callable[[int], SceneSpec]] = {"desk-av": desk_av}


def preset(name: str, seed: int = 0) -> SceneSpec:
    try:
        return PRESETS[name](seed)
    except KeyError:
        raise DataError(f"Unknown scene preset: {name} (known: {', '.join(PRESETS)})") from None


def sample_box_surface(size: Vector, count: int, rng: np.random.Generator) -> Array:
    """Uniform samples over the six faces of a box centered at the origin"""
    half = np.asarray(size, dtype=np.float64) / 2.0
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    axes = rng.choice(3, size=count, p=areas / areas.sum())
    points = rng.uniform(-half, half, size=(count, 3))
    signs = np.where(rng.random(count) < 0.5, -1.0, 1.0)
    rows = np.arange(count)
    points[rows, axes] = signs * half[axes]
    return points  # type: ignore[no-any-return]


def sample_background(spec: BackgroundSpec, rng: np.random.Generator) -> Array:
    half = spec.extent / 2.0
    points = np.empty((spec.num_points, 3))
    points[:, :2] = rng.uniform(-half, half, size=(spec.num_points, 2))
    on_ground = rng.random(spec.num_points) < spec.ground_fraction
    low, high = spec.structure_height
    points[:, 2] = np.where(on_ground, 0.0, rng.uniform(low, high, size=spec.num_points))
    return points


def step_transform(mover: MoverSpec, frame: int) -> RigidPose:
    """World-frame rigid motion of a mover from one frame to the next"""
    return mover.pose(frame + 1).compose(mover.pose(frame).inverse())


def generate(spec: SceneSpec) -> PointCloudSequence:
    """Render the scene into sensor-frame clouds and ego-compensate them"""
    rng = np.random.default_rng(spec.seed)
    background = sample_background(spec.background, rng)
    fixed_bodies = [sample_box_surface(m.size, m.points_per_frame, rng) for m in spec.movers]
    clouds = []
    poses = []
    ground_truths = []
    for frame in range(spec.num_frames):
        points = [background]
        flows = [np.zeros_like(background)]
        class_ids = [np.full(len(background), BACKGROUND_CLASS, dtype=np.int32)]
        for mover, body in zip(spec.movers, fixed_bodies):
            if spec.resample_each_frame:
                body = sample_box_surface(mover.size, mover.points_per_frame, rng)
            world = mover.pose(frame).apply(body)
            points.append(world)
            flows.append(step_transform(mover, frame).apply(world) - world)
            class_ids.append(np.full(len(world), mover.class_id, dtype=np.int32))
        world_points = np.concatenate(points)
        if spec.noise_sigma > 0:
            world_points = world_points + rng.normal(0.0, spec.noise_sigma, size=world_points.shape)
        class_id = np.concatenate(class_ids)
        ground_truths.append(
            GroundTruth(
                flow=np.concatenate(flows),
                class_id=class_id,
                valid=np.ones(len(class_id), dtype=bool),
                is_foreground=class_id != BACKGROUND_CLASS,
            )
        )
        pose = spec.ego.pose(frame)
        poses.append(pose)
        clouds.append(PointCloud(pose.inverse().apply(world_points)))
    timestamps = [frame * spec.frame_interval for frame in range(spec.num_frames)]
    frames = ego_compensate(clouds, poses, timestamps, ground_truths)
    logger.debug(
        "Generated scene",
        scene=spec.name,
        frames=spec.num_frames,
        points=sum(cloud.count for cloud in clouds),
        movers=len(spec.movers),
    )
    return PointCloudSequence(tuple(frames), name=spec.name)
