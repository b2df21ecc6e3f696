import pathlib

import numpy as np
import pytest

from scenepde.dataset_io import (
    MANIFEST,
    dump_ground_truth,
    dump_points,
    flow_filename,
    gt_filename,
    load_flow_field,
    load_sequence,
    load_trajectory,
    parse_ground_truth,
    parse_points,
    points_filename,
    save_flow_field,
    save_sequence,
    save_trajectory,
)
from scenepde.errors import DatasetFormatError
from scenepde.flow import FlowField, Trajectory
from scenepde.geometry import Frame, PointCloud, PointCloudSequence, RigidPose
from scenepde.synthgen import EgoSpec, SceneSpec, generate


@pytest.fixture
def scene(small_scene: SceneSpec) -> PointCloudSequence:
    return generate(small_scene.copy(update={"ego": EgoSpec(linear_velocity=(0.3, 0.0, 0.0), yaw_rate=0.02)}))


@pytest.fixture
def saved(scene: PointCloudSequence, tmp_path: pathlib.Path) -> pathlib.Path:
    return save_sequence(scene, tmp_path / "scene")


def _as_f32(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float32).astype(np.float64)


def test_round_trip(scene: PointCloudSequence, saved: pathlib.Path) -> None:
    loaded = load_sequence(saved)
    assert loaded.name == "scene"
    assert loaded.timestamps == scene.timestamps
    for original, restored in zip(scene.frames, loaded.frames):
        np.testing.assert_array_equal(restored.cloud.points, _as_f32(original.cloud.points))
        np.testing.assert_array_equal(restored.ego_pose.rotation, original.ego_pose.rotation)
        np.testing.assert_array_equal(restored.ego_pose.translation, original.ego_pose.translation)
        np.testing.assert_array_equal(restored.gt.flow, _as_f32(original.gt.flow))
        np.testing.assert_array_equal(restored.gt.class_id, original.gt.class_id)
        np.testing.assert_array_equal(restored.gt.valid, original.gt.valid)
        np.testing.assert_array_equal(restored.gt.is_foreground, original.gt.is_foreground)


def test_save_load_save_is_byte_identical(saved: pathlib.Path, tmp_path: pathlib.Path) -> None:
    again = save_sequence(load_sequence(saved), tmp_path / "again")
    names = sorted(path.name for path in saved.iterdir())
    assert names == sorted(path.name for path in again.iterdir())
    for name in names:
        assert (saved / name).read_bytes() == (again / name).read_bytes()


def test_manifest_layout(saved: pathlib.Path) -> None:
    lines = (saved / MANIFEST).read_text().splitlines()
    assert lines[0] == "PCSEQ 1"
    assert len(lines) == 5
    fields = lines[2].split()
    assert len(fields) == 16
    assert fields[0] == "1"
    assert fields[14:] == [points_filename(1), gt_filename(1)]


def test_frames_without_ground_truth(tmp_path: pathlib.Path) -> None:
    frames = tuple(Frame(PointCloud(np.full((3, 3), float(t))), 0.5 * t, RigidPose.identity()) for t in range(3))
    directory = save_sequence(PointCloudSequence(frames), tmp_path / "bare")
    assert all(len(line.split()) == 15 for line in (directory / MANIFEST).read_text().splitlines()[1:])
    loaded = load_sequence(directory)
    assert not loaded.has_ground_truth
    assert loaded.timestamps == (0.0, 0.5, 1.0)


def test_record_codecs() -> None:
    points = np.array([[1.5, -2.0, 0.25], [0.0, 1.0, 2.0]])
    data = dump_points(points)
    assert data[:4] == b"PCSF"
    assert int.from_bytes(data[4:8], "little") == 2
    assert len(data) == 8 + 2 * 12
    np.testing.assert_array_equal(parse_points(data), points)


def test_ground_truth_record_size(scene: PointCloudSequence) -> None:
    gt = scene.frames[0].gt
    data = dump_ground_truth(gt)
    assert len(data) == 8 + 18 * gt.count
    assert parse_ground_truth(data).count == gt.count


def test_corrupted_magic_names_the_file(saved: pathlib.Path) -> None:
    path = saved / points_filename(2)
    data = path.read_bytes()
    path.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(DatasetFormatError) as excinfo:
        load_sequence(saved)
    assert excinfo.value.path == path
    assert excinfo.value.field == "magic"


def test_truncated_points_file(saved: pathlib.Path) -> None:
    path = saved / points_filename(0)
    path.write_bytes(path.read_bytes()[:-4])
    with pytest.raises(DatasetFormatError) as excinfo:
        load_sequence(saved)
    assert excinfo.value.field == "count"


def test_ground_truth_count_mismatch(saved: pathlib.Path) -> None:
    gt_path = saved / gt_filename(1)
    gt = parse_ground_truth(gt_path.read_bytes())
    gt_path.write_bytes(dump_ground_truth(gt.select(np.arange(gt.count) > 0)))
    with pytest.raises(DatasetFormatError) as excinfo:
        load_sequence(saved)
    assert excinfo.value.path == gt_path


def test_manifest_errors(saved: pathlib.Path) -> None:
    manifest = saved / MANIFEST
    lines = manifest.read_text().splitlines()

    swapped = lines[:2] + [lines[3], lines[2]] + lines[4:]
    manifest.write_text("\n".join(swapped) + "\n")
    with pytest.raises(DatasetFormatError):
        load_sequence(saved)

    fields = lines[2].split()
    fields[1] = lines[1].split()[1]
    manifest.write_text("\n".join(lines[:2] + [" ".join(fields)] + lines[3:]) + "\n")
    with pytest.raises(DatasetFormatError) as excinfo:
        load_sequence(saved)
    assert "timestamp" in excinfo.value.field

    manifest.write_text("PCSEQ 2\n")
    with pytest.raises(DatasetFormatError):
        load_sequence(saved)

    manifest.unlink()
    with pytest.raises(DatasetFormatError):
        load_sequence(saved)


def test_flow_field_round_trip(tmp_path: pathlib.Path) -> None:
    flows = FlowField((np.array([[0.5, 0.25, -1.0]]), np.zeros((0, 3)), np.ones((4, 3))))
    paths = save_flow_field(flows, tmp_path / "flow")
    assert [path.name for path in paths] == [flow_filename(i) for i in range(3)]
    loaded = load_flow_field(tmp_path / "flow")
    assert len(loaded) == 3
    for a, b in zip(flows.vectors, loaded.vectors):
        np.testing.assert_array_equal(a, b)
    with pytest.raises(DatasetFormatError):
        load_flow_field(tmp_path / "missing")
    (tmp_path / "empty").mkdir()
    with pytest.raises(DatasetFormatError):
        load_flow_field(tmp_path / "empty")


def test_trajectory_round_trip(tmp_path: pathlib.Path) -> None:
    trajectory = Trajectory([0.3, 0.2, 0.1], [[1.0, 2.0, 3.0], [1.5, 2.0, 3.0], [2.0, 2.0, 3.0]])
    path = save_trajectory(trajectory, tmp_path / "track.txt")
    assert path.read_text().splitlines()[0] == "0.3 1.0 2.0 3.0"
    loaded = load_trajectory(path)
    np.testing.assert_array_equal(loaded.timestamps, trajectory.timestamps)
    np.testing.assert_array_equal(loaded.positions, trajectory.positions)
    path.write_text("0.1 1 2 3\n0.1 1 2 3\n")
    with pytest.raises(DatasetFormatError):
        load_trajectory(path)
