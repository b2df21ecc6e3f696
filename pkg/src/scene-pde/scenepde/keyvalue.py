"""Configuration file parsing.

The native format is flat `key=value` text:

    # comments start with a hash
    train.epochs=300
    train.loss.enable_cycle=false
    mover.0.size=4.0 2.0 1.5

Dotted keys nest, numeric path segments build lists, `none`/`null` means no
value and whitespace or comma separated values become lists. Values stay
strings otherwise; pydantic models coerce them. JSON and YAML files are also
accepted, the format being inferred from the file suffix.
"""
import json
import pathlib
import typing

import yaml

from .errors import UsageError

MediaType = typing.Literal["json", "yaml", "keyvalue"]


def _convert(value: str) -> typing.Any:
    if value.lower() in ("none", "null"):
        return None
    parts = [part for part in value.replace(",", " ").split() if part]
    if len(parts) > 1:
        return parts
    return value


def _listify(node: typing.Any, key: str) -> typing.Any:
    """Turn dicts keyed 0..n-1 into lists, recursively"""
    if not isinstance(node, dict):
        return node
    converted = {k: _listify(v, f"{key}.{k}" if key else k) for k, v in node.items()}
    if converted and all(k.isdigit() for k in converted):
        indices = sorted(int(k) for k in converted)
        if indices != list(range(len(indices))):
            raise UsageError(f"Indices of {key} must run from 0 without gaps, got {indices}")
        return [converted[str(i)] for i in indices]
    return converted


def parse_key_values(text: str, source: str = "<memory>") -> typing.Dict[str, typing.Any]:
    """Parse flat key=value lines into a nested dictionary"""
    tree: typing.Dict[str, typing.Any] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{number}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        segments = key.split(".")
        if not all(segments):
            raise UsageError(f"{source}:{number}: invalid key {key!r}")
        node = tree
        for segment in segments[:-1]:
            child = node.setdefault(segment, {})
            if not isinstance(child, dict):
                raise UsageError(f"{source}:{number}: {key!r} conflicts with an earlier value")
            node = child
        if isinstance(node.get(segments[-1]), dict):
            raise UsageError(f"{source}:{number}: {key!r} conflicts with an earlier group")
        node[segments[-1]] = _convert(value)
    return typing.cast(typing.Dict[str, typing.Any], _listify(tree, ""))


def infer_media_type(path: pathlib.Path) -> MediaType:
    suffix = path.suffix.lower()
    if "json" in suffix:
        return "json"
    if "yml" in suffix or "yaml" in suffix:
        return "yaml"
    return "keyvalue"


def load_file(
    path: typing.Union[str, pathlib.Path],
    media_type: typing.Optional[MediaType] = None,
) -> typing.Dict[str, typing.Any]:
    """Load a configuration file into a dictionary"""
    filepath = pathlib.Path(path).expanduser()
    if not filepath.exists():
        raise UsageError(f"Configuration file does not exist: {path}")
    if media_type is None:
        media_type = infer_media_type(filepath)
    text = filepath.read_text(encoding="utf-8")
    if media_type == "json":
        content = json.loads(text)
    elif media_type == "yaml":
        content = yaml.safe_load(text)
    else:
        content = parse_key_values(text, str(filepath))
    if content is None:
        return {}
    if not isinstance(content, dict):
        raise UsageError(f"Configuration file must hold a mapping: {path}")
    return content


def flatten(values: typing.Mapping[str, typing.Any], prefix: str = "") -> typing.Dict[str, str]:
    """Inverse view of `parse_key_values`, used to echo configuration"""
    flat: typing.Dict[str, str] = {}
    for key, value in values.items():
        name = f"{prefix}{key}"
        if isinstance(value, typing.Mapping):
            flat.update(flatten(value, f"{name}."))
        elif isinstance(value, (list, tuple)) and value and isinstance(value[0], typing.Mapping):
            for index, item in enumerate(value):
                flat.update(flatten(item, f"{name}.{index}."))
        elif isinstance(value, (list, tuple)):
            flat[name] = " ".join(str(item) for item in value)
        elif value is None:
            flat[name] = "none"
        else:
            flat[name] = str(getattr(value, "value", value))
    return flat
