import numpy as np
import pydantic
import pytest

from scenepde.errors import DataError
from scenepde.geometry import NeighborIndex
from scenepde.synthgen import (
    BACKGROUND_CLASS,
    BackgroundSpec,
    EgoSpec,
    MoverSpec,
    SceneSpec,
    desk_av,
    generate,
    preset,
    sample_box_surface,
)


def _mover_points(sequence, frame: int, class_id: int):
    current = sequence.frames[frame]
    mask = current.gt.class_id == class_id
    return current.cloud.points[mask], current.gt.flow[mask]


def test_static_scene_has_zero_flow() -> None:
    spec = SceneSpec(num_frames=3, background=BackgroundSpec(num_points=50), movers=[MoverSpec(points_per_frame=10)])
    sequence = generate(spec)
    for frame in sequence.frames:
        np.testing.assert_allclose(frame.gt.flow, 0.0, atol=1e-12)


def test_translating_box_flow() -> None:
    spec = SceneSpec(
        num_frames=3,
        background=BackgroundSpec(num_points=20),
        movers=[MoverSpec(class_id=4, linear_velocity=(1.0, 0.0, 0.0), points_per_frame=25)],
    )
    sequence = generate(spec)
    for index in range(3):
        _, flow = _mover_points(sequence, index, 4)
        assert len(flow) == 25
        np.testing.assert_allclose(flow, np.tile([1.0, 0.0, 0.0], (25, 1)), atol=1e-12)


def test_rotating_box_flow_matches_homogeneous_transform() -> None:
    mover = MoverSpec(
        class_id=3, size=(2.0, 1.0, 1.0), position=(4.0, -2.0, 1.0), yaw=0.3,
        linear_velocity=(0.2, 0.1, 0.0), angular_velocity=0.1, points_per_frame=40,
    )
    sequence = generate(SceneSpec(num_frames=4, background=BackgroundSpec(num_points=10), movers=[mover]))
    for index in range(4):
        points, flow = _mover_points(sequence, index, 3)
        step = mover.pose(index + 1).as_matrix() @ np.linalg.inv(mover.pose(index).as_matrix())
        homogeneous = np.concatenate([points, np.ones((len(points), 1))], axis=1)
        expected = (homogeneous @ step.T)[:, :3] - points
        np.testing.assert_allclose(flow, expected, atol=1e-12)


def test_resampled_surfaces_have_no_correspondence() -> None:
    mover = MoverSpec(class_id=1, size=(2.0, 2.0, 1.0), angular_velocity=0.2, points_per_frame=200)
    sequence = generate(SceneSpec(num_frames=2, background=BackgroundSpec(num_points=10), movers=[mover]))
    points, flow = _mover_points(sequence, 0, 1)
    following, _ = _mover_points(sequence, 1, 1)
    indices, _ = NeighborIndex(following).query(points)
    nearest_displacement = following[indices] - points
    assert np.abs(nearest_displacement - flow).mean() > 1e-3


def test_ego_motion_is_compensated() -> None:
    spec = SceneSpec(
        num_frames=4,
        background=BackgroundSpec(num_points=100),
        ego=EgoSpec(linear_velocity=(0.5, 0.2, 0.0), yaw_rate=0.05),
    )
    sequence = generate(spec)
    reference = sequence.frames[0].cloud.points
    for frame in sequence.frames[1:]:
        np.testing.assert_allclose(frame.cloud.points, reference, atol=1e-9)
        assert not np.allclose(frame.ego_pose.translation, 0.0)


def test_generation_is_deterministic(small_scene: SceneSpec) -> None:
    first, second = generate(small_scene), generate(small_scene)
    other = generate(small_scene.copy(update={"seed": 6}))
    for a, b, c in zip(first.frames, second.frames, other.frames):
        np.testing.assert_array_equal(a.cloud.points, b.cloud.points)
        np.testing.assert_array_equal(a.gt.flow, b.gt.flow)
        assert not np.array_equal(a.cloud.points, c.cloud.points)


def test_labels(small_scene: SceneSpec) -> None:
    sequence = generate(small_scene)
    gt = sequence.frames[0].gt
    background = gt.class_id == BACKGROUND_CLASS
    assert np.count_nonzero(background) == 60
    assert not np.any(gt.is_foreground[background])
    assert np.all(gt.is_foreground[~background])
    assert np.all(gt.valid)
    assert sequence.timestamps == pytest.approx((0.0, 0.1, 0.2, 0.3))


def test_noise_leaves_ground_truth_unchanged(small_scene: SceneSpec) -> None:
    clean = generate(small_scene).frames[0]
    noisy = generate(small_scene.copy(update={"noise_sigma": 0.05})).frames[0]
    np.testing.assert_array_equal(clean.gt.flow, noisy.gt.flow)
    assert not np.array_equal(clean.cloud.points, noisy.cloud.points)


def test_box_samples_lie_on_the_surface(rng: np.random.Generator) -> None:
    size = (4.0, 2.0, 1.5)
    points = sample_box_surface(size, 500, rng)
    half = np.array(size) / 2.0
    on_face = np.isclose(np.abs(points), half, rtol=0, atol=1e-12)
    assert np.all(on_face.any(axis=1))
    assert np.all(np.abs(points) <= half + 1e-12)


def test_desk_av_preset() -> None:
    spec = preset("desk-av", seed=3)
    assert spec == desk_av(3)
    assert spec.num_frames == 20
    sequence = generate(spec)
    assert len(sequence) == 20
    assert {frame.cloud.count for frame in sequence.frames} == {2360}
    with pytest.raises(DataError):
        preset("nowhere")


def test_scene_validation() -> None:
    with pytest.raises(pydantic.ValidationError):
        SceneSpec(num_frames=1)
    with pytest.raises(pydantic.ValidationError):
        MoverSpec(class_id=BACKGROUND_CLASS)
    with pytest.raises(pydantic.ValidationError):
        MoverSpec(size=(1.0, 0.0, 1.0))
