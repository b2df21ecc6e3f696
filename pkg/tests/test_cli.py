import pathlib
import typing

import pytest
import structlog

from scenepde.cli import main
from scenepde.dataset_io import MANIFEST, flow_filename, load_sequence
from scenepde.network import MLPConfig, init_params, load_checkpoint, save_checkpoint

SCENE = """
name=tiny
num_frames=4
background.num_points=40
background.extent=10
background.ground_fraction=0
mover.0.class_id=1
mover.0.size=1 1 1
mover.0.position=-2 1 1
mover.0.linear_velocity=0.1 0 0
mover.0.points_per_frame=20
seed=2
"""

CONFIG = """
train.epochs=2
train.minibatch_frames=2
train.mlp.depth=2
train.mlp.hidden_width=8
"""


@pytest.fixture(autouse=True)
def reset_logging() -> typing.Iterator[None]:
    yield
    structlog.reset_defaults()


@pytest.fixture
def config(tmp_path: pathlib.Path) -> str:
    path = tmp_path / "scenepde.conf"
    path.write_text(CONFIG)
    return str(path)


@pytest.fixture
def dataset(tmp_path: pathlib.Path) -> str:
    spec = tmp_path / "scene.conf"
    spec.write_text(SCENE)
    out = tmp_path / "data"
    assert main("synth", "--spec", str(spec), "--out", str(out)) == 0
    return str(out)


@pytest.fixture
def checkpoint(dataset: str, config: str, tmp_path: pathlib.Path) -> str:
    out = str(tmp_path / "model.ckpt")
    assert main("fit", "--config", config, "--data", dataset, "--out", out) == 0
    return out


def _key_values(path: pathlib.Path) -> typing.Dict[str, str]:
    return dict(line.split("=", 1) for line in path.read_text().splitlines())


def test_usage_errors(tmp_path: pathlib.Path) -> None:
    assert main("synth", "--preset", "desk-av") == 1
    assert main("synth", "--preset", "nowhere", "--out", str(tmp_path)) == 1
    assert main("bogus") == 1
    assert main("synth", "--preset", "desk-av", "--out", str(tmp_path / "x"), "--log-level", "loud") == 1


def test_synth_preset(tmp_path: pathlib.Path, capsys: pytest.CaptureFixture) -> None:
    assert main("synth", "--preset", "desk-av", "--out", str(tmp_path / "a")) == 0
    assert "20 frames" in capsys.readouterr().out
    assert len((tmp_path / "a" / MANIFEST).read_text().splitlines()) == 21
    assert main("synth", "--preset", "desk-av", "--out", str(tmp_path / "b")) == 0
    for path in (tmp_path / "a").iterdir():
        assert path.read_bytes() == (tmp_path / "b" / path.name).read_bytes()


def test_synth_spec_file(dataset: str) -> None:
    sequence = load_sequence(dataset)
    assert sequence.name == "data"
    assert len(sequence) == 4
    assert {frame.cloud.count for frame in sequence.frames} == {60}


def test_synth_rejects_invalid_spec(tmp_path: pathlib.Path) -> None:
    spec = tmp_path / "bad.conf"
    spec.write_text("num_frames=1\n")
    assert main("synth", "--spec", str(spec), "--out", str(tmp_path / "out")) == 1


def test_fit_writes_checkpoint_and_log(checkpoint: str) -> None:
    params, time_range = load_checkpoint(checkpoint)
    assert params.config.depth == 2
    assert params.config.hidden_width == 8
    assert time_range is not None
    assert time_range[0] == 0.0
    lines = pathlib.Path(f"{checkpoint}.trainlog.txt").read_text().splitlines()
    assert "epoch,total_loss" in lines
    assert "# frames=4" in lines
    assert "# stop_reason=completed" in lines


def test_fit_is_reproducible(checkpoint: str, dataset: str, config: str, tmp_path: pathlib.Path) -> None:
    again = str(tmp_path / "again.ckpt")
    assert main("fit", "--config", config, "--data", dataset, "--out", again) == 0
    assert pathlib.Path(again).read_bytes() == pathlib.Path(checkpoint).read_bytes()
    assert (
        pathlib.Path(f"{again}.trainlog.txt").read_text()
        == pathlib.Path(f"{checkpoint}.trainlog.txt").read_text()
    )


def test_fit_flags(dataset: str, config: str, tmp_path: pathlib.Path) -> None:
    out = tmp_path / "flags.ckpt"
    log = tmp_path / "flags.log"
    args = ["fit", "-c", config, "--data", dataset, "--out", str(out), "--log-out", str(log)]
    flags = ["--depth", "3", "--no-multistep", "--no-cycle", "--epochs", "1", "--activation", "sinc"]
    assert main(*args, *flags) == 0
    params, _ = load_checkpoint(out)
    assert params.config.depth == 3
    lines = log.read_text().splitlines()
    assert "# loss.enable_multistep=False" in lines
    assert "# loss.enable_cycle=False" in lines
    assert "# mlp.activation=sinc" in lines
    assert sum(1 for line in lines if line and line[0].isdigit()) == 1


def test_fit_reads_environment(
    dataset: str, config: str, tmp_path: pathlib.Path, monkeypatch: pytest.MonkeyPatch
) -> None:
    monkeypatch.setenv("SCENEPDE_TRAIN_EPOCHS", "1")
    out = tmp_path / "env.ckpt"
    assert main("fit", "-c", config, "--data", dataset, "--out", str(out)) == 0
    lines = pathlib.Path(f"{out}.trainlog.txt").read_text().splitlines()
    assert "# epochs=1" in lines


def test_fit_missing_dataset(tmp_path: pathlib.Path, config: str) -> None:
    assert main("fit", "-c", config, "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m")) == 2


def test_oracle_flow_scores_zero(dataset: str, tmp_path: pathlib.Path, capsys: pytest.CaptureFixture) -> None:
    flow_dir = tmp_path / "oracle"
    assert main("flow", "--data", dataset, "--oracle", "--out", str(flow_dir)) == 0
    assert sorted(path.name for path in flow_dir.iterdir()) == [flow_filename(i) for i in range(3)]
    report = tmp_path / "oracle.txt"
    assert main("eval", "--data", dataset, "--flow", str(flow_dir), "--out", str(report)) == 0
    assert "described motion" in capsys.readouterr().out
    values = _key_values(tmp_path / "oracle.txt.kv")
    assert values["average_epe"] == "0.0"
    assert values["mean_dynamic_normalized_epe"] == "0.0"
    assert values["class.1.dynamic_normalized_epe"] == "0.0"


def test_zero_baseline(dataset: str, tmp_path: pathlib.Path) -> None:
    kv = tmp_path / "zero.kv"
    assert main("eval", "--data", dataset, "--zero", "--out", str(tmp_path / "zero.txt"), "--kv-out", str(kv)) == 0
    values = _key_values(kv)
    assert values["mean_dynamic_normalized_epe"] == "1.0"
    assert values["threeway.bg_static"] == "0.0"
    assert float(values["average_epe"]) > 0.0


def test_checkpoint_flow_and_eval(dataset: str, checkpoint: str, tmp_path: pathlib.Path) -> None:
    flow_dir = tmp_path / "fitted"
    assert main("flow", "--data", dataset, "--ckpt", checkpoint, "--out", str(flow_dir)) == 0
    assert len(list(flow_dir.iterdir())) == 3
    report = tmp_path / "fitted.txt"
    assert main("eval", "--data", dataset, "--flow", str(flow_dir), "--out", str(report)) == 0
    assert float(_key_values(tmp_path / "fitted.txt.kv")["average_epe"]) >= 0.0


def test_eval_rejects_mismatched_flow(dataset: str, tmp_path: pathlib.Path) -> None:
    flow_dir = tmp_path / "oracle"
    assert main("flow", "--data", dataset, "--oracle", "--out", str(flow_dir)) == 0
    (flow_dir / flow_filename(2)).unlink()
    assert main("eval", "--data", dataset, "--flow", str(flow_dir), "--out", str(tmp_path / "r.txt")) == 2


def test_track_with_zero_field(dataset: str, tmp_path: pathlib.Path) -> None:
    timestamps = load_sequence(dataset).timestamps
    params = init_params(MLPConfig(hidden_width=4, depth=1)).zeros_like()
    ckpt = save_checkpoint(tmp_path / "zero.ckpt", params, (timestamps[0], timestamps[-1]))
    out = tmp_path / "track.txt"
    args = ["track", "--data", dataset, "--ckpt", str(ckpt), "--t0", "0", "--t1", "3"]
    assert main(*args, "--start", "1 2 3", "--out", str(out)) == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 4
    assert all(line.split()[1:] == ["1.0", "2.0", "3.0"] for line in lines)

    assert main(*args, "--start", "1 2 3", "--start", "0 0 1", "--out", str(out)) == 0
    assert (tmp_path / "track_0.txt").exists()
    assert (tmp_path / "track_1.txt").read_text().splitlines()[0].split()[1:] == ["0.0", "0.0", "1.0"]

    assert main(*args, "--start", "1 2", "--out", str(out)) == 1
    bad = ["track", "--data", dataset, "--ckpt", str(ckpt), "--t0", "0", "--t1", "9"]
    assert main(*bad, "--start", "1 2 3", "--out", str(out)) == 1


def test_ablate(dataset: str, config: str, tmp_path: pathlib.Path) -> None:
    out = tmp_path / "ablation"
    args = ["ablate", "-c", config, "--data", dataset, "--out", str(out)]
    assert main(*args, "--variant", "full", "--variant", "no_cycle") == 0
    assert sorted(path.name for path in out.iterdir()) == ["full.kv", "no_cycle.kv", "summary.txt"]
    summary = (out / "summary.txt").read_text().splitlines()
    assert [line.split()[0] for line in summary[1:]] == ["full", "no_cycle"]
    assert main(*args, "--variant", "bogus") == 1


def test_unwritable_outputs_are_data_errors(dataset: str, config: str, tmp_path: pathlib.Path) -> None:
    missing = tmp_path / "missing" / "zero.txt"
    assert main("eval", "--data", dataset, "--zero", "--out", str(missing)) == 2
    out = tmp_path / "ablation"
    (out / "full.kv").mkdir(parents=True)
    assert main("ablate", "-c", config, "--data", dataset, "--out", str(out), "--variant", "full") == 2
