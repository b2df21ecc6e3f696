"""Training objectives recorded on a tape.

Nearest neighbor correspondences are found on plain values and held constant;
gradients flow through the predicted point positions only.
"""
import dataclasses
import typing

import numpy as np
import pydantic

from .autodiff import Array, Tape, Var
from .errors import LossError
from .flow import Direction, MotionField, integrate_on_tape
from .geometry import NeighborIndex, PointCloudSequence, as_points
from .network import MLPParams, forward


class ChamferConfig(pydantic.BaseModel):
    truncation_radius: float = 2.0
    symmetric: bool = True

    @pydantic.validator("truncation_radius")
    def check_radius(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v


class LossConfig(pydantic.BaseModel):
    """Which terms the sequence objective contains, and their weights"""

    max_k: int = 3
    cycle_weight: float = 0.01
    enable_multistep: bool = True
    enable_cycle: bool = True
    chamfer: ChamferConfig = ChamferConfig()

    @pydantic.validator("max_k")
    def check_max_k(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @pydantic.validator("cycle_weight")
    def check_cycle_weight(cls, v: float) -> float:
        if not v >= 0:
            raise ValueError("must be non-negative")
        return v

    @property
    def horizon(self) -> int:
        return self.max_k if self.enable_multistep else 1


TermKey = typing.Tuple[Direction, int]


@dataclasses.dataclass(frozen=True, eq=False)
class LossBreakdown:
    """Total loss on the tape, with the plain value of every term that went into it"""

    total: Var
    chamfer: typing.Dict[TermKey, float]
    cycle: typing.Optional[float] = None

    @property
    def value(self) -> float:
        return float(self.total)

    def terms(self) -> typing.Dict[str, float]:
        """Flat term names, e.g. fwd_k1, bwd_k2, cycle"""
        named = {f"{d.name.lower()}_k{k}": v for (d, k), v in self.chamfer.items()}
        if self.cycle is not None:
            named["cycle"] = self.cycle
        return named


def _nonempty(points: Array, side: str) -> Array:
    if points.shape[0] == 0:
        raise LossError(f"Chamfer distance of an empty {side} cloud")
    return points


def truncated_chamfer(
    tape: Tape,
    pred: typing.Union[Var, Array],
    target: typing.Any,
    config: ChamferConfig,
    target_index: typing.Optional[NeighborIndex] = None,
) -> Var:
    """Mean squared nearest neighbor distance, zero beyond the truncation radius.

    The symmetric variant adds the same mean taken from the target side, where
    each target point is matched to its nearest predicted point.
    """
    pred = tape.lift(pred)
    predicted = _nonempty(as_points(pred.value), "predicted")
    target = _nonempty(as_points(target), "target")
    if target_index is None:
        target_index = NeighborIndex(target)
    elif target_index.count != target.shape[0]:
        raise LossError("Neighbor index does not match the target cloud")
    radius_sq = config.truncation_radius * config.truncation_radius

    indices, sq = target_index.query(predicted)
    kept = (sq <= radius_sq).astype(np.float64)
    loss = tape.mean(tape.row_sqnorm(pred - target[indices]) * kept)
    if config.symmetric:
        reverse, reverse_sq = NeighborIndex(predicted).query(target)
        reverse_kept = (reverse_sq <= radius_sq).astype(np.float64)
        loss = loss + tape.mean(tape.row_sqnorm(tape.take(pred, reverse) - target) * reverse_kept)
    return loss


def chamfer_value(pred: typing.Any, target: typing.Any, config: ChamferConfig) -> float:
    """Plain value of `truncated_chamfer`"""
    tape = Tape()
    return float(truncated_chamfer(tape, tape.constant(as_points(pred)), target, config))


def sequence_loss(
    field: MotionField,
    sequence: PointCloudSequence,
    t: int,
    config: LossConfig,
    tape: Tape,
    indices: typing.Optional[typing.Sequence[NeighborIndex]] = None,
) -> LossBreakdown:
    """Bidirectional multi-step Chamfer plus one-step cycle consistency at frame t.

    Terms whose target frame lies outside the sequence are left out.
    """
    last = sequence.num_intervals
    if not 0 <= t <= last:
        raise LossError(f"Frame index {t} outside 0..{last}")
    timestamps = sequence.timestamps
    frames = sequence.frames
    start = tape.constant(frames[t].cloud.points)

    def target(index: int) -> typing.Tuple[Array, typing.Optional[NeighborIndex]]:
        return frames[index].cloud.points, indices[index] if indices is not None else None

    terms: typing.List[Var] = []
    chamfer: typing.Dict[TermKey, float] = {}
    forward_states: typing.List[Var] = []
    for d, steps in (
        (Direction.FWD, min(config.horizon, last - t)),
        (Direction.BWD, min(config.horizon, t)),
    ):
        if steps < 1:
            continue
        states = integrate_on_tape(field, tape, start, timestamps, t, d, steps)
        if d is Direction.FWD:
            forward_states = states
        for k, state in enumerate(states, start=1):
            points, index = target(t + int(d) * k)
            term = truncated_chamfer(tape, state, points, config.chamfer, index)
            chamfer[(d, k)] = float(term)
            terms.append(term)

    cycle: typing.Optional[float] = None
    if config.enable_cycle and forward_states:
        hop = forward_states[0]
        back = hop + field.velocity_on_tape(tape, hop, timestamps[t + 1], Direction.BWD)
        term = tape.mean(tape.row_norm(back - start)) * config.cycle_weight
        cycle = float(term)
        terms.append(term)

    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return LossBreakdown(total, chamfer, cycle)


def pairwise_loss(
    fwd_params: MLPParams,
    bwd_params: MLPParams,
    source: typing.Any,
    target: typing.Any,
    config: LossConfig,
    tape: Tape,
    target_index: typing.Optional[NeighborIndex] = None,
) -> LossBreakdown:
    """Two-frame objective: Chamfer of the forward flow plus a forward-backward cycle.

    Both networks take positions only.
    """
    source = _nonempty(as_points(source), "source")
    _nonempty(as_points(target), "target")
    for params in (fwd_params, bwd_params):
        if params.config.input_dim != 3 or params.config.output_dim != 3:
            raise LossError("Two-frame flow networks map 3D positions to 3D flow")
    start = tape.constant(source)
    moved = start + forward(fwd_params, start, tape)
    chamfer = truncated_chamfer(tape, moved, target, config.chamfer, target_index)
    back = moved + forward(bwd_params, moved, tape)
    cycle = tape.mean(tape.row_norm(back - start))
    return LossBreakdown(chamfer + cycle, {(Direction.FWD, 1): float(chamfer)}, float(cycle))
