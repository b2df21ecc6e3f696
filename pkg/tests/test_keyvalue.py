import json
import pathlib

import pytest

from scenepde.errors import UsageError
from scenepde.keyvalue import flatten, infer_media_type, load_file, parse_key_values


def test_parse_nested_keys() -> None:
    text = """
    # scene
    name=tiny
    background.num_points=40
    background.structure_height=0.5, 3.0
    mover.0.size=4 2 1.5
    mover.1.class_id=2
    mover.0.class_id=1
    train.subsequence_length=none
    """
    assert parse_key_values(text) == {
        "name": "tiny",
        "background": {"num_points": "40", "structure_height": ["0.5", "3.0"]},
        "mover": [{"size": ["4", "2", "1.5"], "class_id": "1"}, {"class_id": "2"}],
        "train": {"subsequence_length": None},
    }


def test_values_keep_equal_signs() -> None:
    assert parse_key_values("expr=a=b") == {"expr": "a=b"}


@pytest.mark.parametrize(
    "text",
    ["no equal sign", "a..b=1", "a=1\na.b=2", "a.b=1\na=2", "item.0=x\nitem.2=y"],
)
def test_parse_errors(text: str) -> None:
    with pytest.raises(UsageError):
        parse_key_values(text)


def test_media_type_from_suffix() -> None:
    assert infer_media_type(pathlib.Path("a.json")) == "json"
    assert infer_media_type(pathlib.Path("a.yml")) == "yaml"
    assert infer_media_type(pathlib.Path("a.yaml")) == "yaml"
    assert infer_media_type(pathlib.Path("a.conf")) == "keyvalue"
    assert infer_media_type(pathlib.Path("a")) == "keyvalue"


def test_load_every_format(tmp_path: pathlib.Path) -> None:
    expected = {"train": {"epochs": 3}}
    (tmp_path / "c.json").write_text(json.dumps(expected))
    (tmp_path / "c.yaml").write_text("train:\n  epochs: 3\n")
    (tmp_path / "c.txt").write_text("train.epochs=3\n")
    assert load_file(tmp_path / "c.json") == expected
    assert load_file(tmp_path / "c.yaml") == expected
    assert load_file(tmp_path / "c.txt") == {"train": {"epochs": "3"}}
    (tmp_path / "empty.yaml").write_text("")
    assert load_file(tmp_path / "empty.yaml") == {}


def test_load_errors(tmp_path: pathlib.Path) -> None:
    with pytest.raises(UsageError):
        load_file(tmp_path / "missing.txt")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(UsageError):
        load_file(tmp_path / "list.yaml")


def test_flatten_echoes_parsed_values() -> None:
    values = {
        "loss": {"enable_cycle": False, "chamfer": {"truncation_radius": 2.0}},
        "subsequence_length": None,
        "mover": [{"size": (1.0, 2.0, 3.0)}],
    }
    flat = flatten(values)
    assert flat == {
        "loss.enable_cycle": "False",
        "loss.chamfer.truncation_radius": "2.0",
        "subsequence_length": "none",
        "mover.0.size": "1.0 2.0 3.0",
    }
    text = "\n".join(f"{key}={value}" for key, value in flat.items())
    assert parse_key_values(text)["mover"] == [{"size": ["1.0", "2.0", "3.0"]}]
