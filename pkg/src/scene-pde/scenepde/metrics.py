"""Endpoint error metrics: Average EPE, Threeway EPE and Bucket Normalized EPE."""
import dataclasses
import math
import typing

import numpy as np
import numpy.typing as npt
import pydantic
from structlog import get_logger

from .errors import MetricError
from .flow import FlowField
from .geometry import Array, GroundTruth, PointCloudSequence, as_points

logger = get_logger(__name__)


class BucketSpec(pydantic.BaseModel):
    """Speed thresholds in meters per frame interval"""

    static_threshold: float = 0.05
    speed_bucket_width: float = 0.04
    max_buckets: int = 50

    @pydantic.validator("static_threshold", "speed_bucket_width")
    def check_positive(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @pydantic.validator("max_buckets")
    def check_buckets(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    def bucket_of(self, speeds: Array) -> npt.NDArray[np.int64]:
        """Bucket of each dynamic speed; the last bucket is open-ended"""
        raw = np.floor((speeds - self.static_threshold) / self.speed_bucket_width)
        return np.minimum(np.maximum(raw, 0), self.max_buckets - 1).astype(np.int64)


def _row_norm(vectors: Array) -> Array:
    return np.sqrt(  # type: ignore[no-any-return]
        vectors[:, 0] * vectors[:, 0] + vectors[:, 1] * vectors[:, 1] + vectors[:, 2] * vectors[:, 2]
    )


@dataclasses.dataclass(frozen=True, eq=False)
class EpeSamples:
    """Per-point evaluation samples, stored column-wise"""

    epe: Array
    gt_speed: Array
    class_id: npt.NDArray[np.int32]
    is_foreground: npt.NDArray[np.bool_]
    valid: npt.NDArray[np.bool_]

    def __post_init__(self) -> None:
        epe = np.asarray(self.epe, dtype=np.float64).reshape(-1)
        columns = (
            np.asarray(self.gt_speed, dtype=np.float64).reshape(-1),
            np.asarray(self.class_id, dtype=np.int32).reshape(-1),
            np.asarray(self.is_foreground, dtype=bool).reshape(-1),
            np.asarray(self.valid, dtype=bool).reshape(-1),
        )
        if any(len(column) != len(epe) for column in columns):
            raise MetricError("Sample columns must share the same length")
        if np.any(epe < 0) or not np.all(np.isfinite(epe)):
            raise MetricError("Endpoint errors must be finite and non-negative")
        object.__setattr__(self, "epe", epe)
        for name, column in zip(("gt_speed", "class_id", "is_foreground", "valid"), columns):
            object.__setattr__(self, name, column)

    def __len__(self) -> int:
        return len(self.epe)

    @classmethod
    def from_flows(cls, predicted: Array, gt: GroundTruth) -> "EpeSamples":
        predicted = as_points(predicted)
        if predicted.shape[0] != gt.count:
            raise MetricError(f"{predicted.shape[0]} predictions for {gt.count} ground truth points")
        if not np.all(np.isfinite(predicted)):
            raise MetricError("Predicted flow must be finite")
        return cls(
            epe=_row_norm(predicted - gt.flow),
            gt_speed=_row_norm(gt.flow),
            class_id=gt.class_id,
            is_foreground=gt.is_foreground,
            valid=gt.valid,
        )

    @classmethod
    def concat(cls, parts: typing.Sequence["EpeSamples"]) -> "EpeSamples":
        return cls(
            epe=np.concatenate([p.epe for p in parts]),
            gt_speed=np.concatenate([p.gt_speed for p in parts]),
            class_id=np.concatenate([p.class_id for p in parts]),
            is_foreground=np.concatenate([p.is_foreground for p in parts]),
            valid=np.concatenate([p.valid for p in parts]),
        )

    def select(self, mask: npt.NDArray[np.bool_]) -> "EpeSamples":
        return EpeSamples(
            self.epe[mask], self.gt_speed[mask], self.class_id[mask], self.is_foreground[mask], self.valid[mask]
        )

    def valid_only(self) -> "EpeSamples":
        return self.select(self.valid)


def epe(pred: typing.Sequence[float], gt: typing.Sequence[float]) -> float:
    """Euclidean distance between a predicted and a ground truth flow vector"""
    diff = np.asarray(pred, dtype=np.float64) - np.asarray(gt, dtype=np.float64)
    return math.sqrt(float(diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2]))


def average_epe(samples: EpeSamples) -> float:
    errors = samples.epe[samples.valid]
    if len(errors) == 0:
        raise MetricError("No valid samples to average")
    return float(errors.mean())


@dataclasses.dataclass(frozen=True)
class Threeway:
    """Average EPE per bucket; empty buckets are None and stay out of the mean"""

    fg_dynamic: typing.Optional[float]
    fg_static: typing.Optional[float]
    bg_static: typing.Optional[float]
    mean: typing.Optional[float]


def threeway_epe(samples: EpeSamples, spec: BucketSpec = BucketSpec()) -> Threeway:
    valid = samples.valid_only()
    if len(valid) == 0:
        raise MetricError("No valid samples to average")
    dynamic = valid.gt_speed >= spec.static_threshold
    buckets = {}
    for name, mask in (
        ("fg_dynamic", valid.is_foreground & dynamic),
        ("fg_static", valid.is_foreground & ~dynamic),
        ("bg_static", ~valid.is_foreground & ~dynamic),
    ):
        buckets[name] = float(valid.epe[mask].mean()) if np.any(mask) else None
    present = [value for value in buckets.values() if value is not None]
    # Only moving background: no bucket applies
    mean = sum(present) / len(present) if present else None
    return Threeway(mean=mean, **buckets)


@dataclasses.dataclass(frozen=True)
class ClassScore:
    static_epe: typing.Optional[float]
    dynamic_normalized_epe: typing.Optional[float]
    static_count: int = 0
    dynamic_count: int = 0

    @property
    def described_motion(self) -> typing.Optional[float]:
        """Fraction of the motion described by the prediction, clamped at 0"""
        if self.dynamic_normalized_epe is None:
            return None
        return max(0.0, 1.0 - self.dynamic_normalized_epe)


@dataclasses.dataclass(frozen=True)
class BucketNormalized:
    per_class: typing.Dict[int, ClassScore]
    mean_dynamic_normalized_epe: typing.Optional[float]


def bucket_normalized_epe(samples: EpeSamples, spec: BucketSpec = BucketSpec()) -> BucketNormalized:
    """Per-class static EPE and speed-normalized dynamic EPE.

    Each non-empty speed bucket scores mean EPE over mean ground truth speed; a
    class scores the unweighted mean over its non-empty buckets.
    """
    valid = samples.valid_only()
    if len(valid) == 0:
        raise MetricError("No valid samples to average")
    per_class: typing.Dict[int, ClassScore] = {}
    for class_id in np.unique(valid.class_id):
        members = valid.select(valid.class_id == class_id)
        dynamic = members.gt_speed >= spec.static_threshold
        static_epe = float(members.epe[~dynamic].mean()) if np.any(~dynamic) else None
        normalized = None
        if np.any(dynamic):
            epes = members.epe[dynamic]
            speeds = members.gt_speed[dynamic]
            buckets = spec.bucket_of(speeds)
            ratios = [
                float(epes[buckets == b].mean()) / float(speeds[buckets == b].mean())
                for b in np.unique(buckets)
            ]
            normalized = sum(ratios) / len(ratios)
        per_class[int(class_id)] = ClassScore(
            static_epe, normalized, int(np.count_nonzero(~dynamic)), int(np.count_nonzero(dynamic))
        )
    scored = [s.dynamic_normalized_epe for s in per_class.values() if s.dynamic_normalized_epe is not None]
    mean = sum(scored) / len(scored) if scored else None
    return BucketNormalized(per_class, mean)


def _fmt(value: typing.Optional[float]) -> str:
    return "nan" if value is None else repr(float(value))


@dataclasses.dataclass(frozen=True)
class MetricReport:
    average_epe: float
    threeway: Threeway
    per_class: typing.Dict[int, ClassScore]
    mean_dynamic_normalized_epe: typing.Optional[float]
    num_samples: int = 0

    def key_values(self) -> typing.Dict[str, str]:
        values = {
            "average_epe": _fmt(self.average_epe),
            "threeway.fg_dynamic": _fmt(self.threeway.fg_dynamic),
            "threeway.fg_static": _fmt(self.threeway.fg_static),
            "threeway.bg_static": _fmt(self.threeway.bg_static),
            "threeway.mean": _fmt(self.threeway.mean),
        }
        for class_id, score in sorted(self.per_class.items()):
            values[f"class.{class_id}.static_epe"] = _fmt(score.static_epe)
            values[f"class.{class_id}.dynamic_normalized_epe"] = _fmt(score.dynamic_normalized_epe)
        values["mean_dynamic_normalized_epe"] = _fmt(self.mean_dynamic_normalized_epe)
        values["num_samples"] = str(self.num_samples)
        return values

    def to_key_values(self) -> str:
        return "".join(f"{key}={value}\n" for key, value in self.key_values().items())

    def to_text(self) -> str:
        def cell(value: typing.Optional[float]) -> str:
            return "-" if value is None else f"{value:.6f}"

        lines = [
            f"Average EPE:            {cell(self.average_epe)} m",
            "Threeway EPE:",
            f"  foreground dynamic:   {cell(self.threeway.fg_dynamic)} m",
            f"  foreground static:    {cell(self.threeway.fg_static)} m",
            f"  background static:    {cell(self.threeway.bg_static)} m",
            f"  mean:                 {cell(self.threeway.mean)} m",
            "Bucket normalized EPE:",
            "  class  static EPE (m)  dynamic normalized  described motion",
        ]
        for class_id, score in sorted(self.per_class.items()):
            described = score.described_motion
            lines.append(
                f"  {class_id:>5}  {cell(score.static_epe):>14}  {cell(score.dynamic_normalized_epe):>18}"
                f"  {'-' if described is None else f'{100.0 * described:.1f}%':>16}"
            )
        lines.append(f"Mean dynamic normalized EPE: {cell(self.mean_dynamic_normalized_epe)}")
        lines.append(f"Samples: {self.num_samples}")
        return "\n".join(lines) + "\n"


def report(samples: EpeSamples, spec: BucketSpec = BucketSpec()) -> MetricReport:
    bucketed = bucket_normalized_epe(samples, spec)
    return MetricReport(
        average_epe=average_epe(samples),
        threeway=threeway_epe(samples, spec),
        per_class=bucketed.per_class,
        mean_dynamic_normalized_epe=bucketed.mean_dynamic_normalized_epe,
        num_samples=int(np.count_nonzero(samples.valid)),
    )


def collect_samples(flow_field: FlowField, sequence: PointCloudSequence) -> EpeSamples:
    """Samples of every frame that has a flow, i.e. all frames but the last"""
    if not sequence.has_ground_truth:
        raise MetricError(f"Sequence {sequence.name} has no ground truth")
    if len(flow_field) != sequence.num_intervals:
        raise MetricError(
            f"Flow field has {len(flow_field)} frames, sequence has {sequence.num_intervals} intervals"
        )
    parts = []
    for index, (vectors, frame) in enumerate(zip(flow_field.vectors, sequence.frames)):
        assert frame.gt is not None
        if vectors.shape[0] != frame.gt.count:
            raise MetricError(f"Frame {index}: {vectors.shape[0]} flow vectors for {frame.gt.count} points")
        parts.append(EpeSamples.from_flows(vectors, frame.gt))
    return EpeSamples.concat(parts)


def evaluate(
    flow_field: FlowField, sequence: PointCloudSequence, spec: BucketSpec = BucketSpec()
) -> MetricReport:
    result = report(collect_samples(flow_field, sequence), spec)
    logger.info(
        "Evaluated flow",
        sequence=sequence.name,
        average_epe=result.average_epe,
        threeway_mean=result.threeway.mean,
        mean_dynamic_normalized_epe=result.mean_dynamic_normalized_epe,
    )
    return result


def zero_flow_field(sequence: PointCloudSequence) -> FlowField:
    """The baseline predicting no motion anywhere"""
    return FlowField(tuple(np.zeros((frame.cloud.count, 3)) for frame in sequence.frames[:-1]))


def ground_truth_flow_field(sequence: PointCloudSequence) -> FlowField:
    if not sequence.has_ground_truth:
        raise MetricError(f"Sequence {sequence.name} has no ground truth")
    return FlowField(tuple(frame.gt.flow for frame in sequence.frames[:-1] if frame.gt is not None))
