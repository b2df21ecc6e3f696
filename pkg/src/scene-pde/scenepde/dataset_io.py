"""On-disk sequence format, flow exports and trajectory exports.

A dataset directory holds `manifest.txt` and one binary file per frame (plus an
optional ground truth file). All binary values are little-endian; coordinates
are stored as float32 and widened to float64 on load.
"""
import math
import pathlib
import struct
import typing

import numpy as np
from structlog import get_logger

from .errors import DatasetFormatError, GeometryError, IntegrationError
from .flow import FlowField, Trajectory
from .geometry import Array, Frame, GroundTruth, PointCloud, PointCloudSequence, RigidPose

logger = get_logger(__name__)

PathLike = typing.Union[str, pathlib.Path]

MANIFEST = "manifest.txt"
MANIFEST_HEADER = "PCSEQ 1"
POINTS_MAGIC = b"PCSF"
GT_MAGIC = b"FLGT"
FLOW_MAGIC = b"FLOW"

_COUNT = struct.Struct("<4sI")
_POINT_DTYPE = np.dtype("<f4")
_GT_DTYPE = np.dtype(
    [("flow", "<f4", (3,)), ("class_id", "<i4"), ("valid", "u1"), ("is_foreground", "u1")]
)


def _write(path: pathlib.Path, data: bytes) -> None:
    try:
        path.write_bytes(data)
    except OSError as err:
        raise DatasetFormatError(path, "file", f"cannot write: {err}") from None


def _read(path: pathlib.Path) -> bytes:
    try:
        return path.read_bytes()
    except OSError as err:
        raise DatasetFormatError(path, "file", f"cannot read: {err}") from None


def _body(path: pathlib.Path, data: bytes, magic: bytes, itemsize: int) -> typing.Tuple[int, bytes]:
    """Check magic and length of a counted record file, return (count, payload)"""
    if len(data) < _COUNT.size:
        raise DatasetFormatError(path, "header", "file too short")
    found, count = _COUNT.unpack_from(data)
    if found != magic:
        raise DatasetFormatError(path, "magic", f"expected {magic!r}, got {found!r}")
    expected = _COUNT.size + count * itemsize
    if len(data) != expected:
        raise DatasetFormatError(path, "count", f"{count} records need {expected} bytes, file has {len(data)}")
    return count, data[_COUNT.size :]


def dump_points(points: Array) -> bytes:
    return _COUNT.pack(POINTS_MAGIC, len(points)) + np.asarray(points).astype(_POINT_DTYPE).tobytes()


def parse_points(data: bytes, path: PathLike = "<memory>", magic: bytes = POINTS_MAGIC) -> Array:
    path = pathlib.Path(path)
    count, payload = _body(path, data, magic, 3 * _POINT_DTYPE.itemsize)
    points = np.frombuffer(payload, dtype=_POINT_DTYPE).astype(np.float64).reshape(count, 3)
    if not np.all(np.isfinite(points)):
        raise DatasetFormatError(path, "points", "non-finite coordinate")
    return points  # type: ignore[no-any-return]


def dump_ground_truth(gt: GroundTruth) -> bytes:
    records = np.zeros(gt.count, dtype=_GT_DTYPE)
    records["flow"] = gt.flow
    records["class_id"] = gt.class_id
    records["valid"] = gt.valid
    records["is_foreground"] = gt.is_foreground
    return _COUNT.pack(GT_MAGIC, gt.count) + records.tobytes()


def parse_ground_truth(data: bytes, path: PathLike = "<memory>") -> GroundTruth:
    path = pathlib.Path(path)
    count, payload = _body(path, data, GT_MAGIC, _GT_DTYPE.itemsize)
    records = np.frombuffer(payload, dtype=_GT_DTYPE, count=count)
    for flag in ("valid", "is_foreground"):
        if np.any(records[flag] > 1):
            raise DatasetFormatError(path, flag, "flag bytes must be 0 or 1")
    flow = records["flow"].astype(np.float64)
    if not np.all(np.isfinite(flow)):
        raise DatasetFormatError(path, "flow", "non-finite flow vector")
    return GroundTruth(
        flow=flow,
        class_id=records["class_id"].astype(np.int32),
        valid=records["valid"].astype(bool),
        is_foreground=records["is_foreground"].astype(bool),
    )


def points_filename(index: int) -> str:
    return f"frame_{index:06d}.pcsf"


def gt_filename(index: int) -> str:
    return f"frame_{index:06d}.flgt"


def flow_filename(index: int) -> str:
    return f"flow_{index:06d}.flow"


def save_sequence(sequence: PointCloudSequence, directory: PathLike) -> pathlib.Path:
    """Write world-frame clouds, ground truth and manifest into directory"""
    directory = pathlib.Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DatasetFormatError(directory, "directory", f"cannot create: {err}") from None
    lines = [MANIFEST_HEADER]
    for index, frame in enumerate(sequence.frames):
        fields = [str(index), repr(float(frame.timestamp))]
        fields.extend(repr(value) for value in frame.ego_pose.flat())
        fields.append(points_filename(index))
        _write(directory / points_filename(index), dump_points(frame.cloud.points))
        if frame.gt is not None:
            fields.append(gt_filename(index))
            _write(directory / gt_filename(index), dump_ground_truth(frame.gt))
        lines.append(" ".join(fields))
    _write(directory / MANIFEST, ("\n".join(lines) + "\n").encode("utf-8"))
    logger.info("Saved sequence", directory=str(directory), frames=len(sequence))
    return directory


def _parse_float(path: pathlib.Path, field: str, text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DatasetFormatError(path, field, f"not a number: {text!r}") from None
    if not math.isfinite(value):
        raise DatasetFormatError(path, field, f"not finite: {text!r}")
    return value


def load_sequence(directory: PathLike) -> PointCloudSequence:
    """Inverse of `save_sequence`; every inconsistency raises DatasetFormatError"""
    directory = pathlib.Path(directory)
    manifest = directory / MANIFEST
    text = _read(manifest).decode("utf-8", errors="replace")
    lines = [line.strip() for line in text.splitlines() if line.strip()]
    if not lines or lines[0] != MANIFEST_HEADER:
        raise DatasetFormatError(manifest, "header", f"expected {MANIFEST_HEADER!r}")
    frames = []
    previous: typing.Optional[float] = None
    for expected_index, line in enumerate(lines[1:]):
        fields = line.split()
        where = f"frame {expected_index}"
        if len(fields) not in (15, 16):
            raise DatasetFormatError(manifest, where, f"expected 15 or 16 fields, got {len(fields)}")
        if fields[0] != str(expected_index):
            raise DatasetFormatError(manifest, f"{where} index", f"expected {expected_index}, got {fields[0]}")
        timestamp = _parse_float(manifest, f"{where} timestamp", fields[1])
        if previous is not None and not timestamp > previous:
            raise DatasetFormatError(manifest, f"{where} timestamp", "timestamps must be strictly increasing")
        previous = timestamp
        values = [_parse_float(manifest, f"{where} pose", value) for value in fields[2:14]]
        try:
            pose = RigidPose.from_flat(values)
        except GeometryError as err:
            raise DatasetFormatError(manifest, f"{where} pose", str(err)) from None
        points_path = directory / fields[14]
        points = parse_points(_read(points_path), points_path)
        gt = None
        if len(fields) == 16:
            gt_path = directory / fields[15]
            gt = parse_ground_truth(_read(gt_path), gt_path)
            if gt.count != len(points):
                raise DatasetFormatError(gt_path, "count", f"{gt.count} annotations for {len(points)} points")
        frames.append(Frame(PointCloud(points), timestamp, pose, gt))
    try:
        sequence = PointCloudSequence(tuple(frames), name=directory.name)
    except GeometryError as err:
        raise DatasetFormatError(manifest, "frames", str(err)) from None
    logger.debug("Loaded sequence", directory=str(directory), frames=len(sequence))
    return sequence


def save_flow_field(flow_field: FlowField, directory: PathLike) -> typing.List[pathlib.Path]:
    directory = pathlib.Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DatasetFormatError(directory, "directory", f"cannot create: {err}") from None
    paths = []
    for index, vectors in enumerate(flow_field.vectors):
        path = directory / flow_filename(index)
        _write(path, _COUNT.pack(FLOW_MAGIC, len(vectors)) + vectors.astype(_POINT_DTYPE).tobytes())
        paths.append(path)
    logger.info("Saved flow field", directory=str(directory), frames=len(paths))
    return paths


def load_flow_field(directory: PathLike) -> FlowField:
    """Read flow_000000.flow, flow_000001.flow, ... until the first gap"""
    directory = pathlib.Path(directory)
    if not directory.is_dir():
        raise DatasetFormatError(directory, "directory", "not a directory")
    vectors = []
    while (directory / flow_filename(len(vectors))).exists():
        path = directory / flow_filename(len(vectors))
        vectors.append(parse_points(_read(path), path, magic=FLOW_MAGIC))
    if not vectors:
        raise DatasetFormatError(directory, "flow", f"no {flow_filename(0)} found")
    return FlowField(tuple(vectors))


def save_trajectory(trajectory: Trajectory, path: PathLike) -> pathlib.Path:
    path = pathlib.Path(path)
    lines = [
        " ".join(repr(float(v)) for v in (t, *position))
        for t, position in zip(trajectory.timestamps, trajectory.positions)
    ]
    _write(path, ("\n".join(lines) + "\n").encode("utf-8"))
    return path


def load_trajectory(path: PathLike) -> Trajectory:
    path = pathlib.Path(path)
    rows = []
    for number, line in enumerate(_read(path).decode("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 4:
            raise DatasetFormatError(path, f"line {number}", "expected 'timestamp x y z'")
        rows.append([_parse_float(path, f"line {number}", field) for field in fields])
    if not rows:
        raise DatasetFormatError(path, "trajectory", "empty file")
    table = np.asarray(rows)
    try:
        return Trajectory(table[:, 0], table[:, 1:])
    except IntegrationError as err:
        raise DatasetFormatError(path, "trajectory", str(err)) from None
