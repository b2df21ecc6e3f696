"""Point cloud containers, rigid transforms, preprocessing and nearest neighbor search.

Coordinates are held as float64 numpy arrays of shape (N, 3). Every container is
immutable once built: operations return new instances.
"""
import dataclasses
import math
import typing

import numpy as np
import numpy.typing as npt
from scipy.spatial import cKDTree
from structlog import get_logger

from .errors import GeometryError

logger = get_logger(__name__)

Array = npt.NDArray[np.float64]

POSE_TOLERANCE = 1e-6
DEFAULT_GROUND_HEIGHT = 0.2


def as_points(values: typing.Any) -> Array:
    """Convert any (N, 3) array-like into a contiguous float64 array"""
    points = np.ascontiguousarray(values, dtype=np.float64)
    if points.ndim == 1 and points.size == 0:
        points = points.reshape(0, 3)
    if points.ndim != 2 or points.shape[1] != 3:
        raise GeometryError(f"Expected an (N, 3) array, got shape {points.shape}")
    return points


def squared_distances(points: Array, query: Array) -> Array:
    """Squared euclidean distances between rows of points and query (broadcasted)."""
    diff = points - query
    return diff[..., 0] * diff[..., 0] + diff[..., 1] * diff[..., 1] + diff[..., 2] * diff[..., 2]  # type: ignore[no-any-return]


@dataclasses.dataclass(frozen=True, eq=False)
class PointCloud:
    """An ordered set of 3D points. Flow vectors are index-aligned with points."""

    points: Array

    def __post_init__(self) -> None:
        points = as_points(self.points).copy()
        if not np.all(np.isfinite(points)):
            raise GeometryError("Point coordinates must be finite")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    @property
    def count(self) -> int:
        return int(self.points.shape[0])

    def __len__(self) -> int:
        return self.count

    def select(self, mask: npt.NDArray[np.bool_]) -> "PointCloud":
        """Keep points where mask is True, preserving order"""
        return PointCloud(self.points[mask])

    def translated(self, vectors: Array) -> "PointCloud":
        return PointCloud(self.points + vectors)


@dataclasses.dataclass(frozen=True, eq=False)
class RigidPose:
    """Sensor-to-world rigid transform: x_world = R @ x_sensor + t."""

    rotation: Array
    translation: Array

    def __post_init__(self) -> None:
        rotation = np.array(self.rotation, dtype=np.float64)
        translation = np.array(self.translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise GeometryError("Pose needs a 3x3 rotation and a 3-vector translation")
        if not (np.all(np.isfinite(rotation)) and np.all(np.isfinite(translation))):
            raise GeometryError("Pose entries must be finite")
        if not np.allclose(rotation @ rotation.T, np.eye(3), rtol=0, atol=POSE_TOLERANCE):
            raise GeometryError("Pose rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > POSE_TOLERANCE:
            raise GeometryError("Pose rotation determinant must be +1")
        rotation.setflags(write=False)
        translation.setflags(write=False)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    @classmethod
    def identity(cls) -> "RigidPose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(
        cls, yaw: float, translation: typing.Sequence[float] = (0.0, 0.0, 0.0)
    ) -> "RigidPose":
        """Rotation of yaw radians about +z followed by a translation"""
        c, s = math.cos(yaw), math.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, np.asarray(translation, dtype=np.float64))

    @classmethod
    def from_flat(cls, values: typing.Sequence[float]) -> "RigidPose":
        """Build a pose from 12 floats: rotation row-major, then translation"""
        if len(values) != 12:
            raise GeometryError(f"Expected 12 pose values, got {len(values)}")
        flat = np.asarray(values, dtype=np.float64)
        return cls(flat[:9].reshape(3, 3), flat[9:])

    def flat(self) -> typing.List[float]:
        return [float(v) for v in self.rotation.reshape(-1)] + [
            float(v) for v in self.translation
        ]

    def apply(self, points: Array) -> Array:
        return as_points(points) @ self.rotation.T + self.translation  # type: ignore[no-any-return]

    def inverse(self) -> "RigidPose":
        rotation = self.rotation.T
        return RigidPose(rotation, -(rotation @ self.translation))

    def compose(self, other: "RigidPose") -> "RigidPose":
        """Return self ∘ other (other is applied first)"""
        return RigidPose(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def as_matrix(self) -> Array:
        matrix = np.eye(4)
        matrix[:3, :3] = self.rotation
        matrix[:3, 3] = self.translation
        return matrix


@dataclasses.dataclass(frozen=True, eq=False)
class GroundTruth:
    """Per-point annotations, index-aligned with a frame's cloud.

    Flow vectors are world-frame residual displacements over one frame interval.
    """

    flow: Array
    class_id: npt.NDArray[np.int32]
    valid: npt.NDArray[np.bool_]
    is_foreground: npt.NDArray[np.bool_]

    def __post_init__(self) -> None:
        flow = as_points(self.flow).copy()
        class_id = np.array(self.class_id, dtype=np.int32).reshape(-1)
        valid = np.array(self.valid, dtype=bool).reshape(-1)
        is_foreground = np.array(self.is_foreground, dtype=bool).reshape(-1)
        count = flow.shape[0]
        if not (len(class_id) == len(valid) == len(is_foreground) == count):
            raise GeometryError("Ground truth lists must share the same length")
        for array in (flow, class_id, valid, is_foreground):
            array.setflags(write=False)
        object.__setattr__(self, "flow", flow)
        object.__setattr__(self, "class_id", class_id)
        object.__setattr__(self, "valid", valid)
        object.__setattr__(self, "is_foreground", is_foreground)

    @property
    def count(self) -> int:
        return int(self.flow.shape[0])

    def select(self, mask: npt.NDArray[np.bool_]) -> "GroundTruth":
        return GroundTruth(
            self.flow[mask], self.class_id[mask], self.valid[mask], self.is_foreground[mask]
        )


@dataclasses.dataclass(frozen=True, eq=False)
class Frame:
    """A world-frame point cloud observed at a timestamp"""

    cloud: PointCloud
    timestamp: float
    ego_pose: RigidPose = dataclasses.field(default_factory=RigidPose.identity)
    gt: typing.Optional[GroundTruth] = None

    def __post_init__(self) -> None:
        if not math.isfinite(self.timestamp):
            raise GeometryError("Frame timestamp must be finite")
        if self.gt is not None and self.gt.count != self.cloud.count:
            raise GeometryError(
                f"Ground truth has {self.gt.count} entries for {self.cloud.count} points"
            )


@dataclasses.dataclass(frozen=True, eq=False)
class PointCloudSequence:
    """Ordered frames P_0 ... P_N with strictly increasing timestamps"""

    frames: typing.Tuple[Frame, ...]
    name: str = "sequence"

    def __post_init__(self) -> None:
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise GeometryError("A sequence needs at least 2 frames")
        for previous, current in zip(frames, frames[1:]):
            if not current.timestamp > previous.timestamp:
                raise GeometryError("Frame timestamps must be strictly increasing")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def num_intervals(self) -> int:
        return len(self.frames) - 1

    @property
    def timestamps(self) -> typing.Tuple[float, ...]:
        return tuple(frame.timestamp for frame in self.frames)

    @property
    def has_ground_truth(self) -> bool:
        return all(frame.gt is not None for frame in self.frames)

    def truncated(self, length: int) -> "PointCloudSequence":
        """Keep the first `length` frames (clamped to the sequence length)"""
        return PointCloudSequence(self.frames[: max(length, 0)], name=self.name)


def apply_pose(cloud: PointCloud, pose: RigidPose) -> PointCloud:
    """Map each point by the pose rotation then translation"""
    return PointCloud(pose.apply(cloud.points))


def ego_compensate(
    clouds: typing.Sequence[PointCloud],
    poses: typing.Sequence[RigidPose],
    timestamps: typing.Optional[typing.Sequence[float]] = None,
    ground_truths: typing.Optional[typing.Sequence[typing.Optional[GroundTruth]]] = None,
) -> typing.List[Frame]:
    """Express sensor-frame clouds in the shared world frame.

    Timestamps default to the frame index. Ground truth, when given, is already
    expressed in the world frame and is attached unchanged.
    """
    if len(clouds) != len(poses):
        raise GeometryError(f"Got {len(poses)} poses for {len(clouds)} clouds")
    if timestamps is None:
        timestamps = [float(index) for index in range(len(clouds))]
    if len(timestamps) != len(clouds):
        raise GeometryError(f"Got {len(timestamps)} timestamps for {len(clouds)} clouds")
    if ground_truths is None:
        ground_truths = [None] * len(clouds)
    if len(ground_truths) != len(clouds):
        raise GeometryError(
            f"Got {len(ground_truths)} annotations for {len(clouds)} clouds"
        )
    return [
        Frame(cloud=apply_pose(cloud, pose), timestamp=float(t), ego_pose=pose, gt=gt)
        for cloud, pose, t, gt in zip(clouds, poses, timestamps, ground_truths)
    ]


def remove_ground(frame: Frame, ground_height: float = DEFAULT_GROUND_HEIGHT) -> Frame:
    """Drop points with z <= ground_height, filtering ground truth with the same mask"""
    if not math.isfinite(ground_height):
        raise GeometryError("Ground height must be finite")
    mask = frame.cloud.points[:, 2] > ground_height
    return Frame(
        cloud=frame.cloud.select(mask),
        timestamp=frame.timestamp,
        ego_pose=frame.ego_pose,
        gt=frame.gt.select(mask) if frame.gt is not None else None,
    )


def preprocess(
    sequence: PointCloudSequence, ground_height: typing.Optional[float]
) -> PointCloudSequence:
    """Apply ground removal to every frame of an ego-compensated sequence"""
    if ground_height is None:
        return sequence
    frames = tuple(remove_ground(frame, ground_height) for frame in sequence.frames)
    logger.debug(
        "Removed ground points",
        sequence=sequence.name,
        ground_height=ground_height,
        kept=sum(frame.cloud.count for frame in frames),
        total=sum(frame.cloud.count for frame in sequence.frames),
    )
    return PointCloudSequence(frames, name=sequence.name)


class NeighborIndex:
    """Exact nearest neighbor index over a point cloud.

    Results match exhaustive search: the minimum squared distance computed in
    double precision, ties broken by lowest point index. The index is read-only
    after construction.
    """

    def __init__(self, points: Array) -> None:
        self._points = as_points(points).copy()
        self._points.setflags(write=False)
        if self._points.shape[0] == 0:
            raise GeometryError("Cannot index an empty point cloud")
        self._tree = cKDTree(self._points)

    @property
    def points(self) -> Array:
        return self._points

    @property
    def count(self) -> int:
        return int(self._points.shape[0])

    def query(self, queries: Array) -> typing.Tuple[npt.NDArray[np.int64], Array]:
        """Return (indices, squared distances) of the nearest point for every query row"""
        queries = as_points(np.atleast_2d(queries))
        if queries.shape[0] == 0:
            return np.zeros(0, dtype=np.int64), np.zeros(0)
        k = min(2, self.count)
        _, candidates = self._tree.query(queries, k=k)
        candidates = np.asarray(candidates, dtype=np.int64).reshape(len(queries), k)
        sq = squared_distances(self._points[candidates], queries[:, None, :])
        # Lexicographic (distance, index) choice between the two candidates
        order = np.lexsort((candidates, sq), axis=1)[:, 0]
        rows = np.arange(len(queries))
        best = candidates[rows, order]
        best_sq = sq[rows, order]
        if k == 2:
            other_sq = sq[rows, 1 - order]
            suspect = np.flatnonzero(other_sq - best_sq <= 1e-12 * np.maximum(best_sq, 1e-300))
            for row in suspect:
                best[row], best_sq[row] = self._resolve_tie(queries[row], best_sq[row])
        return best, best_sq

    def _resolve_tie(self, query: Array, sq: float) -> typing.Tuple[int, float]:
        radius = math.sqrt(sq) * (1.0 + 1e-9) + 1e-12
        members = np.asarray(self._tree.query_ball_point(query, radius), dtype=np.int64)
        member_sq = squared_distances(self._points[members], query)
        choice = np.lexsort((members, member_sq))[0]
        return int(members[choice]), float(member_sq[choice])


def build_index(cloud: PointCloud) -> NeighborIndex:
    """Build a nearest neighbor index over a non-empty cloud"""
    if cloud.count == 0:
        raise GeometryError("Cannot index an empty point cloud")
    return NeighborIndex(cloud.points)


def nearest(index: NeighborIndex, query: typing.Sequence[float]) -> typing.Tuple[int, float]:
    """Nearest indexed point to a single query: (point index, squared distance)"""
    indices, sq = index.query(np.asarray(query, dtype=np.float64).reshape(1, 3))
    return int(indices[0]), float(sq[0])
