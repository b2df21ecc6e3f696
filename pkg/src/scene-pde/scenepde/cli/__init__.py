"""Module which defines the Command Line Interface of the application.

Each subcommand gathers the settings explicitly given as flags, merges them over
the configuration file and environment, then runs one library operation.
"""
import argparse
import pathlib
import sys
import typing
from collections import defaultdict

import numpy as np
import pydantic
from structlog import get_logger

from ..dataset_io import (
    load_flow_field,
    load_sequence,
    save_flow_field,
    save_sequence,
    save_trajectory,
)
from ..errors import DataError, SceneFlowError, TrainingError, UsageError
from ..flow import NeuralPrior, extract_flow_field, extract_tracks
from ..geometry import PointCloudSequence, preprocess
from ..keyvalue import load_file
from ..logging import configure_logging
from ..metrics import evaluate, ground_truth_flow_field, zero_flow_field
from ..network import load_checkpoint, save_checkpoint
from ..settings import AppSettings
from ..synthgen import PRESETS, SceneSpec, generate, preset
from ..trainer import AblationVariant, fit, run_ablation, summary_table

logger = get_logger(__name__)


class ArgumentParser(argparse.ArgumentParser):
    """Raise usage errors instead of exiting, so they map to exit code 1"""

    def error(self, message: str) -> typing.NoReturn:
        raise UsageError(f"{self.prog}: {message}")


common_parser = ArgumentParser(add_help=False)
common_parser.add_argument(
    "--config",
    "-c",
    help="Configuration file (key=value, YAML or JSON)",
    default=None,
)
common_parser.add_argument(
    "--log-level",
    "-l",
    help="Logging level",
)
common_parser.add_argument(
    "--log-renderer",
    help="Logging renderer.  Possible choices: [console | json]",
)
common_parser.add_argument(
    "--ground-height",
    help="Drop points at or below this height (m), 'none' keeps every point",
)

main_parser = ArgumentParser(prog="scenepde", add_help=True)
subparsers = main_parser.add_subparsers(dest="command", metavar="command")
subparsers.required = True

synth_parser = subparsers.add_parser(
    "synth", parents=[common_parser], help="Generate a synthetic dataset"
)
synth_source = synth_parser.add_mutually_exclusive_group(required=True)
synth_source.add_argument("--spec", help="Scene spec file")
synth_source.add_argument("--preset", choices=sorted(PRESETS), help="Named scene")
synth_parser.add_argument("--out", required=True, help="Dataset directory to write")
synth_parser.add_argument("--seed", type=int, default=None, help="Override the scene seed")

fit_parser = subparsers.add_parser(
    "fit", parents=[common_parser], help="Fit a motion prior to a dataset"
)
fit_parser.add_argument("--data", required=True, help="Dataset directory")
fit_parser.add_argument("--out", required=True, help="Checkpoint file to write")
fit_parser.add_argument("--log-out", default=None, help="Training log file (default: <out>.trainlog.txt)")
fit_parser.add_argument("--depth", type=int, default=None, help="Number of hidden layers")
fit_parser.add_argument("--subsequence", type=int, default=None, help="Train on the first N frames")
fit_parser.add_argument("--no-multistep", action="store_true", help="Drop k > 1 Euler terms")
fit_parser.add_argument("--no-cycle", action="store_true", help="Drop the cycle consistency term")
fit_parser.add_argument("--time-encoding", choices=["normalized", "sinusoidal"], default=None)
fit_parser.add_argument("--activation", choices=["relu", "sinc", "gaussian"], default=None)
fit_parser.add_argument("--epochs", type=int, default=None, help="Maximum number of epochs")
fit_parser.add_argument("--seed", type=int, default=None, help="Seed for initialization and shuffling")

flow_parser = subparsers.add_parser(
    "flow", parents=[common_parser], help="Export per-frame flow from a checkpoint"
)
flow_parser.add_argument("--data", required=True, help="Dataset directory")
flow_source = flow_parser.add_mutually_exclusive_group(required=True)
flow_source.add_argument("--ckpt", help="Checkpoint file")
flow_source.add_argument("--oracle", action="store_true", help="Export ground truth flow")
flow_parser.add_argument("--out", required=True, help="Flow directory to write")

track_parser = subparsers.add_parser(
    "track", parents=[common_parser], help="Integrate trajectories from start points"
)
track_parser.add_argument("--data", required=True, help="Dataset directory")
track_parser.add_argument("--ckpt", required=True, help="Checkpoint file")
track_parser.add_argument(
    "--start", required=True, action="append", help="Start point 'x y z' (repeatable)"
)
track_parser.add_argument("--t0", type=int, required=True, help="Start frame index")
track_parser.add_argument("--t1", type=int, required=True, help="End frame index")
track_parser.add_argument("--out", required=True, help="Trajectory file to write")

eval_parser = subparsers.add_parser(
    "eval", parents=[common_parser], help="Evaluate a flow directory against ground truth"
)
eval_parser.add_argument("--data", required=True, help="Dataset directory")
eval_source = eval_parser.add_mutually_exclusive_group(required=True)
eval_source.add_argument("--flow", help="Flow directory")
eval_source.add_argument("--zero", action="store_true", help="Evaluate the zero flow baseline")
eval_parser.add_argument("--out", required=True, help="Report file to write")
eval_parser.add_argument("--kv-out", default=None, help="Key-value report (default: <out>.kv)")

ablate_parser = subparsers.add_parser(
    "ablate", parents=[common_parser], help="Train and evaluate every ablation variant"
)
ablate_parser.add_argument("--data", required=True, help="Dataset directory")
ablate_parser.add_argument("--out", required=True, help="Output directory")
ablate_parser.add_argument("--variant", action="append", default=None, help="Variant name (repeatable)")


def _parse_start(text: str) -> typing.List[float]:
    parts = text.replace(",", " ").split()
    try:
        values = [float(part) for part in parts]
    except ValueError:
        values = []
    if len(values) != 3 or not all(np.isfinite(values)):
        raise UsageError(f"--start expects three numbers 'x y z', got {text!r}")
    return values


def _write_text(path: pathlib.Path, text: str) -> None:
    try:
        path.write_text(text, encoding="utf-8")
    except OSError as err:
        raise DataError(f"{path}: cannot write: {err}") from None


def _load(path: str, settings: AppSettings) -> PointCloudSequence:
    return preprocess(load_sequence(path), settings.data.ground_height)


def _prior(sequence: PointCloudSequence, ckpt: str) -> typing.Tuple[NeuralPrior, PointCloudSequence]:
    """Prior of a checkpoint and the frames of the sequence it was fitted on"""
    params, time_range = load_checkpoint(ckpt)
    if time_range is None:
        raise DataError(f"{ckpt}: checkpoint carries no time range")
    t_min, t_max = time_range
    tolerance = 1e-9 * max(1.0, abs(t_min), abs(t_max))
    frames = tuple(f for f in sequence.frames if t_min - tolerance <= f.timestamp <= t_max + tolerance)
    if len(frames) < 2:
        raise DataError(f"{ckpt}: time range [{t_min}, {t_max}] does not match the dataset")
    fitted = PointCloudSequence(frames, name=sequence.name)
    return NeuralPrior.from_checkpoint(params, time_range, len(frames)), fitted


def cmd_synth(ns: argparse.Namespace, settings: AppSettings) -> None:
    if ns.spec:
        raw = load_file(ns.spec)
        if "mover" in raw:
            raw["movers"] = raw.pop("mover")
        spec = SceneSpec.parse_obj(raw)
    else:
        spec = preset(ns.preset)
    if ns.seed is not None:
        spec = SceneSpec.parse_obj({**spec.dict(), "seed": ns.seed})
    sequence = generate(spec)
    save_sequence(sequence, ns.out)
    points = sum(frame.cloud.count for frame in sequence.frames)
    print(f"{len(sequence)} frames, {points} points written to {ns.out}")


def cmd_fit(ns: argparse.Namespace, settings: AppSettings) -> None:
    sequence = _load(ns.data, settings)
    prior, log = fit(sequence, settings.train)
    checkpoint = save_checkpoint(ns.out, prior.params, prior.time_range)
    _write_text(pathlib.Path(ns.log_out or f"{ns.out}.trainlog.txt"), log.to_text())
    print(
        f"checkpoint {checkpoint}: {len(log.epoch_losses)} epochs, best epoch {log.best_epoch}, "
        f"loss {log.best_loss:.6g} ({log.stop_reason.value})"
    )


def cmd_flow(ns: argparse.Namespace, settings: AppSettings) -> None:
    sequence = _load(ns.data, settings)
    if ns.oracle:
        flow_field = ground_truth_flow_field(sequence)
    else:
        prior, fitted = _prior(sequence, ns.ckpt)
        flow_field = extract_flow_field(prior, fitted)
    paths = save_flow_field(flow_field, ns.out)
    print(f"{len(paths)} flow files written to {ns.out}")


def cmd_track(ns: argparse.Namespace, settings: AppSettings) -> None:
    starts = np.array([_parse_start(text) for text in ns.start])
    sequence = _load(ns.data, settings)
    prior, fitted = _prior(sequence, ns.ckpt)
    timestamps = fitted.timestamps
    for index in (ns.t0, ns.t1):
        if not 0 <= index < len(timestamps):
            raise UsageError(f"Frame index {index} outside 0..{len(timestamps) - 1}")
    tracks = extract_tracks(prior, timestamps, starts, timestamps[ns.t0], timestamps[ns.t1])
    out = pathlib.Path(ns.out)
    if len(tracks) == 1:
        paths = [save_trajectory(tracks[0], out)]
    else:
        paths = [
            save_trajectory(track, out.with_name(f"{out.stem}_{index}{out.suffix}"))
            for index, track in enumerate(tracks)
        ]
    print(f"{len(paths)} trajectories of {len(tracks[0])} samples written")


def cmd_eval(ns: argparse.Namespace, settings: AppSettings) -> None:
    sequence = _load(ns.data, settings)
    flow_field = zero_flow_field(sequence) if ns.zero else load_flow_field(ns.flow)
    source = "zero flow" if ns.zero else ns.flow
    if len(flow_field) != sequence.num_intervals:
        raise DataError(
            f"{source}: {len(flow_field)} flow frames for {sequence.num_intervals} dataset intervals"
        )
    for index, (vectors, frame) in enumerate(zip(flow_field.vectors, sequence.frames)):
        if vectors.shape[0] != frame.cloud.count:
            raise DataError(f"{source}: frame {index} has {vectors.shape[0]} vectors for {frame.cloud.count} points")
    result = evaluate(flow_field, sequence, settings.metrics)
    _write_text(pathlib.Path(ns.out), result.to_text())
    _write_text(pathlib.Path(ns.kv_out or f"{ns.out}.kv"), result.to_key_values())
    print(result.to_text(), end="")


def cmd_ablate(ns: argparse.Namespace, settings: AppSettings) -> None:
    try:
        variants = [AblationVariant.parse(name) for name in settings.ablation.variants]
    except TrainingError as err:
        raise UsageError(str(err)) from None
    sequence = _load(ns.data, settings)
    out = pathlib.Path(ns.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"{out}: cannot create: {err}") from None
    reports = {}
    for variant in variants:
        result = run_ablation(sequence, settings.train, variant, settings.metrics)
        _write_text(out / f"{variant.name}.kv", result.to_key_values())
        reports[variant.name] = result
    table = summary_table(reports)
    _write_text(out / "summary.txt", table)
    print(table, end="")


COMMANDS: typing.Dict[str, typing.Callable[[argparse.Namespace, AppSettings], None]] = {
    "synth": cmd_synth,
    "fit": cmd_fit,
    "flow": cmd_flow,
    "track": cmd_track,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def raw_settings_from(ns: argparse.Namespace) -> typing.Dict[str, typing.Any]:
    """Only settings explicitly provided by the user are collected"""
    raw_settings: typing.Dict[str, typing.Any] = defaultdict(dict)
    if ns.log_level:
        raw_settings["logging"]["level"] = ns.log_level.lower()
    if ns.log_renderer:
        raw_settings["logging"]["renderer"] = ns.log_renderer.lower()
    if ns.ground_height is not None:
        value = ns.ground_height
        raw_settings["data"]["ground_height"] = None if value.lower() == "none" else value
    if ns.command == "fit":
        train = raw_settings["train"]
        if ns.depth is not None:
            train.setdefault("mlp", {})["depth"] = ns.depth
        if ns.activation is not None:
            train.setdefault("mlp", {})["activation"] = ns.activation
        if ns.subsequence is not None:
            train["subsequence_length"] = ns.subsequence
        if ns.no_multistep:
            train.setdefault("loss", {})["enable_multistep"] = False
        if ns.no_cycle:
            train.setdefault("loss", {})["enable_cycle"] = False
        if ns.time_encoding is not None:
            train.setdefault("time_encoding", {})["kind"] = ns.time_encoding
        if ns.epochs is not None:
            train["epochs"] = ns.epochs
        if ns.seed is not None:
            train["seed"] = ns.seed
    if ns.command == "ablate" and ns.variant:
        raw_settings["ablation"]["variants"] = ns.variant
    return {key: value for key, value in raw_settings.items() if value}


def main(*args: str) -> int:
    """Run one command and return the process exit code"""
    try:
        ns = main_parser.parse_args(args if args else None)
    except UsageError as err:
        print(str(err), file=sys.stderr)
        return UsageError.code
    try:
        settings = AppSettings.merge(raw_settings_from(ns), config_file=ns.config)
        configure_logging(settings.logging)
    except pydantic.ValidationError as err:
        print(f"Invalid settings: {err}", file=sys.stderr)
        return UsageError.code
    except SceneFlowError as err:
        print(str(err), file=sys.stderr)
        return err.code
    logger.debug("Running command", command=ns.command, **settings.dict())
    try:
        COMMANDS[ns.command](ns, settings)
    except pydantic.ValidationError as err:
        logger.error("Invalid input", command=ns.command, error=str(err))
        return UsageError.code
    except SceneFlowError as err:
        logger.error(err.details, command=ns.command, error=str(err), error_type=type(err).__name__)
        return err.code
    return 0


def run(*args: str) -> None:
    sys.exit(main(*args))
