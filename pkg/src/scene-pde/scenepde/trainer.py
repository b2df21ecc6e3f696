"""Optimization of the motion prior over a whole sequence, and the ablation harness.

Training walks contiguous frame windows in a seeded shuffled order. Each window
sums the sequence loss of its frames and takes one Adam step. Each frame is
recorded on its own tape; gradients are accumulated across the window.
"""
import dataclasses
import enum
import math
import typing

import numpy as np
import pydantic
from structlog import get_logger

from .autodiff import Array, Tape
from .errors import MetricError, TrainingError
from .flow import NeuralPrior, TimeEncoding, TimeEncodingKind, TimeNormalizer, extract_flow_field
from .geometry import NeighborIndex, PointCloudSequence, as_points
from .keyvalue import flatten
from .losses import LossConfig, pairwise_loss, sequence_loss
from .metrics import BucketSpec, MetricReport, evaluate
from .network import Activation, MLPConfig, MLPParams, backward, backward_all, forward, init_params
from .optim import DEFAULT_LEARNING_RATE, AdamState, adam_step

logger = get_logger(__name__)


class TrainConfig(pydantic.BaseSettings, case_sensitive=False, env_prefix="scenepde_train_"):
    epochs: int = 1000
    learning_rate: float = DEFAULT_LEARNING_RATE
    minibatch_frames: int = 5
    early_stop_patience: int = 100
    early_stop_min_delta: float = 1e-4
    seed: int = 0
    subsequence_length: typing.Optional[int] = None
    loss: LossConfig = LossConfig()
    mlp: MLPConfig = MLPConfig()
    time_encoding: TimeEncoding = TimeEncoding()

    @pydantic.validator("epochs", "early_stop_patience")
    def check_positive(cls, v: int) -> int:
        if v < 1:
            raise ValueError("must be at least 1")
        return v

    @pydantic.validator("minibatch_frames")
    def check_window(cls, v: int) -> int:
        if v < 2:
            raise ValueError("must be at least 2")
        return v

    @pydantic.validator("learning_rate")
    def check_learning_rate(cls, v: float) -> float:
        if not v > 0:
            raise ValueError("must be positive")
        return v

    @pydantic.validator("early_stop_min_delta")
    def check_min_delta(cls, v: float) -> float:
        if not v >= 0:
            raise ValueError("must be non-negative")
        return v

    @pydantic.validator("subsequence_length")
    def check_subsequence(cls, v: typing.Optional[int]) -> typing.Optional[int]:
        if v is not None and v < 2:
            raise ValueError("must be at least 2")
        return v

    def network_config(self) -> MLPConfig:
        """The prior's shape, with input size and seed taken from this config"""
        return self.mlp.copy(update={"input_dim": self.time_encoding.input_dim, "seed": self.seed})


def pairwise_config(**overrides: typing.Any) -> TrainConfig:
    """Defaults for two-frame fitting: faster learning rate, one step per epoch"""
    values: typing.Dict[str, typing.Any] = {"learning_rate": 8e-3, "epochs": 1000}
    values.update(overrides)
    return TrainConfig(**values)


class StopReason(str, enum.Enum):
    completed = "completed"
    early_stopped = "early-stopped"


@dataclasses.dataclass
class EarlyStopping:
    """Stops after `patience` epochs without a relative improvement of `min_delta`"""

    patience: int
    min_delta: float
    reference: float = math.inf
    stale: int = 0

    def update(self, loss: float) -> bool:
        if loss < self.reference * (1.0 - self.min_delta) or math.isinf(self.reference):
            self.reference = loss
            self.stale = 0
        else:
            self.stale += 1
        return self.stale >= self.patience


@dataclasses.dataclass
class TrainLog:
    epoch_losses: typing.List[float] = dataclasses.field(default_factory=list)
    term_losses: typing.List[typing.Dict[str, float]] = dataclasses.field(default_factory=list)
    best_epoch: int = 0
    stop_reason: StopReason = StopReason.completed
    header: typing.Dict[str, str] = dataclasses.field(default_factory=dict)

    @property
    def best_loss(self) -> float:
        return self.epoch_losses[self.best_epoch - 1] if self.epoch_losses else math.inf

    def to_text(self) -> str:
        lines = [f"# {key}={value}" for key, value in self.header.items()]
        lines.append("epoch,total_loss")
        lines.extend(f"{epoch},{loss!r}" for epoch, loss in enumerate(self.epoch_losses, start=1))
        lines.append(f"# stop_reason={self.stop_reason.value}")
        lines.append(f"# best_epoch={self.best_epoch}")
        lines.append(f"# best_loss={self.best_loss!r}")
        return "\n".join(lines) + "\n"


def window_starts(num_frames: int, size: int) -> typing.List[int]:
    """First frame of every contiguous window, stride 1"""
    return list(range(max(num_frames - size, 0) + 1))


def _accumulate(total: typing.Optional[MLPParams], grads: MLPParams) -> MLPParams:
    if total is None:
        return grads
    return total.with_arrays([a + b for a, b in zip(total.arrays(), grads.arrays())])


def prepare(sequence: PointCloudSequence, config: TrainConfig) -> PointCloudSequence:
    if config.subsequence_length is not None:
        sequence = sequence.truncated(config.subsequence_length)
    for index, frame in enumerate(sequence.frames):
        if frame.cloud.count == 0:
            raise TrainingError(f"Frame {index} of {sequence.name} has no points")
    return sequence


def fit(sequence: PointCloudSequence, config: TrainConfig) -> typing.Tuple[NeuralPrior, TrainLog]:
    """Fit the motion prior to a sequence; returns the best epoch's prior"""
    sequence = prepare(sequence, config)
    num_frames = len(sequence)
    normalizer = TimeNormalizer.from_timestamps(sequence.timestamps)
    params = init_params(config.network_config())
    state = AdamState.create(params, config.learning_rate)
    indices = [NeighborIndex(frame.cloud.points) for frame in sequence.frames]
    starts = window_starts(num_frames, config.minibatch_frames)
    rng = np.random.default_rng(config.seed)
    stopper = EarlyStopping(config.early_stop_patience, config.early_stop_min_delta)
    log = TrainLog(header=flatten(config.dict()))
    log.header["frames"] = str(num_frames)
    best_params = params
    best_loss = math.inf
    logger.info(
        "Fitting sequence",
        sequence=sequence.name,
        frames=num_frames,
        windows=len(starts),
        parameters=params.count,
    )
    for epoch in range(1, config.epochs + 1):
        epoch_loss = 0.0
        terms: typing.Dict[str, float] = {}
        for position in rng.permutation(len(starts)):
            start = starts[position]
            prior = NeuralPrior(params, normalizer, config.time_encoding)
            grads: typing.Optional[MLPParams] = None
            for t in range(start, min(start + config.minibatch_frames, num_frames)):
                tape = Tape()
                breakdown = sequence_loss(prior, sequence, t, config.loss, tape, indices)
                grads = _accumulate(grads, backward(tape, breakdown.total, params))
                epoch_loss += breakdown.value
                for name, value in breakdown.terms().items():
                    terms[name] = terms.get(name, 0.0) + value
            assert grads is not None
            params, state = adam_step(params, grads, state)
        if not math.isfinite(epoch_loss) or not params.is_finite():
            raise TrainingError(f"Loss diverged at epoch {epoch}")
        log.epoch_losses.append(epoch_loss)
        log.term_losses.append(terms)
        if epoch_loss < best_loss:
            best_loss = epoch_loss
            log.best_epoch = epoch
            best_params = params
        logger.debug("Finished epoch", epoch=epoch, loss=epoch_loss, **terms)
        if stopper.update(epoch_loss):
            log.stop_reason = StopReason.early_stopped
            break
    logger.info(
        "Fit done",
        sequence=sequence.name,
        epochs=len(log.epoch_losses),
        best_epoch=log.best_epoch,
        best_loss=log.best_loss,
        stop_reason=log.stop_reason.value,
    )
    return NeuralPrior(best_params, normalizer, config.time_encoding), log


def fit_pairwise(
    source: typing.Any, target: typing.Any, config: typing.Optional[TrainConfig] = None
) -> Array:
    """Fit forward and backward position-only priors to one frame pair.

    Each epoch is one Adam step on both networks. Returns the forward flow of
    the best epoch, evaluated on the source points.
    """
    config = config or pairwise_config()
    source = as_points(source)
    target = as_points(target)
    if source.shape[0] == 0 or target.shape[0] == 0:
        raise TrainingError("Two-frame fitting needs non-empty clouds")
    base = config.mlp.copy(update={"input_dim": 3, "output_dim": 3})
    fwd = init_params(base.copy(update={"seed": config.seed}))
    bwd = init_params(base.copy(update={"seed": config.seed + 1}))
    fwd_state = AdamState.create(fwd, config.learning_rate)
    bwd_state = AdamState.create(bwd, config.learning_rate)
    index = NeighborIndex(target)
    stopper = EarlyStopping(config.early_stop_patience, config.early_stop_min_delta)
    best_loss = math.inf
    best = fwd
    for epoch in range(1, config.epochs + 1):
        tape = Tape()
        breakdown = pairwise_loss(fwd, bwd, source, target, config.loss, tape, index)
        loss = breakdown.value
        if not math.isfinite(loss):
            raise TrainingError(f"Loss diverged at step {epoch}")
        if loss < best_loss:
            best_loss, best = loss, fwd
        fwd_grads, bwd_grads = backward_all(tape, breakdown.total, [fwd, bwd])
        if stopper.update(loss):
            logger.debug("Two-frame fit stopped early", step=epoch, loss=best_loss)
            break
        fwd, fwd_state = adam_step(fwd, fwd_grads, fwd_state)
        bwd, bwd_state = adam_step(bwd, bwd_grads, bwd_state)
    return forward(best, source)


class VariantKind(str, enum.Enum):
    full = "full"
    no_multistep = "no_multistep"
    no_cycle = "no_cycle"
    subsequence = "subsequence"
    depth = "depth"
    time_encoding = "time_encoding"
    activation = "activation"


_VALUED = {VariantKind.subsequence, VariantKind.depth, VariantKind.time_encoding, VariantKind.activation}


@dataclasses.dataclass(frozen=True)
class AblationVariant:
    """One change to the base training configuration"""

    kind: VariantKind
    value: typing.Optional[str] = None

    def __post_init__(self) -> None:
        if (self.kind in _VALUED) != (self.value is not None):
            raise TrainingError(f"Variant {self.kind.value} takes {'a' if self.kind in _VALUED else 'no'} value")
        if self.kind in (VariantKind.subsequence, VariantKind.depth) and not str(self.value).isdigit():
            raise TrainingError(f"Variant {self.kind.value} needs an integer, got {self.value}")
        if self.kind is VariantKind.time_encoding and self.value not in TimeEncodingKind.__members__:
            raise TrainingError(f"Unknown time encoding: {self.value}")
        if self.kind is VariantKind.activation and self.value not in Activation.__members__:
            raise TrainingError(f"Unknown activation: {self.value}")

    @property
    def name(self) -> str:
        return self.kind.value if self.value is None else f"{self.kind.value}_{self.value}"

    @classmethod
    def parse(cls, name: str) -> "AblationVariant":
        """Inverse of `name`, e.g. "depth_18" or "time_encoding_sinusoidal" """
        for kind in VariantKind:
            if name == kind.value:
                return cls(kind)
            if kind in _VALUED and name.startswith(kind.value + "_"):
                return cls(kind, name[len(kind.value) + 1 :])
        raise TrainingError(f"Unknown ablation variant: {name}")

    def apply(self, base: TrainConfig) -> TrainConfig:
        if self.kind is VariantKind.full:
            return base.copy(deep=True)
        if self.kind is VariantKind.no_multistep:
            return base.copy(update={"loss": base.loss.copy(update={"enable_multistep": False})}, deep=True)
        if self.kind is VariantKind.no_cycle:
            return base.copy(update={"loss": base.loss.copy(update={"enable_cycle": False})}, deep=True)
        if self.kind is VariantKind.subsequence:
            return base.copy(update={"subsequence_length": int(str(self.value))}, deep=True)
        if self.kind is VariantKind.depth:
            return base.copy(update={"mlp": base.mlp.copy(update={"depth": int(str(self.value))})}, deep=True)
        if self.kind is VariantKind.time_encoding:
            encoding = base.time_encoding.copy(update={"kind": TimeEncodingKind(self.value)})
            return base.copy(update={"time_encoding": encoding}, deep=True)
        return base.copy(
            update={"mlp": base.mlp.copy(update={"activation": Activation(self.value)})}, deep=True
        )


def run_ablation(
    sequence: PointCloudSequence,
    base: TrainConfig,
    variant: AblationVariant,
    spec: BucketSpec = BucketSpec(),
) -> MetricReport:
    """Train one variant and evaluate its flow on the frames it was trained on"""
    if not sequence.has_ground_truth:
        raise MetricError(f"Sequence {sequence.name} has no ground truth")
    config = variant.apply(base)
    logger.info("Running ablation variant", variant=variant.name)
    prior, _ = fit(sequence, config)
    trained = prepare(sequence, config)
    return evaluate(extract_flow_field(prior, trained), trained, spec)


def run_ablations(
    sequence: PointCloudSequence,
    base: TrainConfig,
    variants: typing.Sequence[AblationVariant],
    spec: BucketSpec = BucketSpec(),
) -> typing.Dict[str, MetricReport]:
    return {variant.name: run_ablation(sequence, base, variant, spec) for variant in variants}


def summary_table(reports: typing.Mapping[str, MetricReport]) -> str:
    """One row per variant: average EPE, threeway mean, mean dynamic normalized EPE"""
    width = max([len("variant")] + [len(name) for name in reports])

    def cell(value: typing.Optional[float]) -> str:
        return f"{'-' if value is None else f'{value:.6f}':>12}"

    lines = [f"{'variant':<{width}}  {'avg_epe':>12}  {'threeway':>12}  {'mean_dyn_norm':>12}"]
    for name, result in reports.items():
        lines.append(
            f"{name:<{width}}  {cell(result.average_epe)}  {cell(result.threeway.mean)}"
            f"  {cell(result.mean_dynamic_normalized_epe)}"
        )
    return "\n".join(lines) + "\n"
