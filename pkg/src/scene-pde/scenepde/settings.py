"""This module defines the process settings.

Settings are resolved from three sources. Configuration file values are
overridden by environment variables, which are overridden by explicit values
(usually command line flags).
"""
import pathlib
import typing

import pydantic

from .geometry import DEFAULT_GROUND_HEIGHT
from .keyvalue import load_file
from .metrics import BucketSpec
from .trainer import TrainConfig

SettingsT = typing.TypeVar("SettingsT", bound="AppSettings")

DEFAULT_VARIANTS = [
    "full",
    "no_multistep",
    "no_cycle",
    "subsequence_5",
    "subsequence_20",
    "subsequence_50",
    "depth_4",
    "depth_8",
    "depth_12",
    "depth_18",
]


class ConfigFilesSettings(pydantic.BaseSettings, case_sensitive=False, env_prefix="scenepde_config_"):
    """Configuration related to files paths"""

    filepath: typing.Optional[str] = None


class LogSettings(pydantic.BaseSettings, case_sensitive=False, env_prefix="scenepde_logging_"):
    level: str = "info"
    colors: bool = True
    renderer: typing.Literal["console", "json"] = "console"


class DataSettings(pydantic.BaseSettings, case_sensitive=False, env_prefix="scenepde_data_"):
    # Points at or below this height are dropped after ego compensation
    ground_height: typing.Optional[float] = DEFAULT_GROUND_HEIGHT


class AblationSettings(pydantic.BaseSettings, case_sensitive=False, env_prefix="scenepde_ablation_"):
    variants: typing.List[str] = pydantic.Field(default_factory=lambda: list(DEFAULT_VARIANTS))

    @pydantic.validator("variants", pre=True)
    def split_names(cls, v: typing.Any) -> typing.Any:
        if isinstance(v, str):
            return v.replace(",", " ").split()
        return v


class AppSettings(
    pydantic.BaseSettings, case_sensitive=False, env_prefix="scenepde_", extra=pydantic.Extra.forbid
):
    logging: LogSettings = pydantic.Field(default_factory=LogSettings)
    data: DataSettings = pydantic.Field(default_factory=DataSettings)
    train: TrainConfig = pydantic.Field(default_factory=TrainConfig)
    metrics: BucketSpec = pydantic.Field(default_factory=BucketSpec)
    ablation: AblationSettings = pydantic.Field(default_factory=AblationSettings)

    @classmethod
    def from_env(cls) -> typing.Dict[str, typing.Any]:
        """Values explicitly set through environment variables, per section"""
        values: typing.Dict[str, typing.Any] = {}
        for name, field in cls.__fields__.items():
            if isinstance(field.type_, type) and issubclass(field.type_, pydantic.BaseSettings):
                section = field.type_().dict(exclude_unset=True)
                if section:
                    values[name] = section
        return values

    @classmethod
    def merge(
        cls: typing.Type[SettingsT],
        override_settings: typing.Union[SettingsT, typing.Mapping[str, typing.Any], None] = None,
        config_file: typing.Optional[typing.Union[str, pathlib.Path]] = None,
    ) -> SettingsT:
        """Parse settings from file AND environment variables.

        Override settings take precedence over both environment and file settings.
        """
        files_settings = (
            ConfigFilesSettings(filepath=str(config_file)) if config_file else ConfigFilesSettings()
        )
        raw: typing.Dict[str, typing.Any] = {}
        if files_settings.filepath:
            config_file_path = pathlib.Path(files_settings.filepath).expanduser()
            # Validate file content on its own first
            raw = cls.parse_obj(load_file(config_file_path)).dict(exclude_unset=True)
        # Environment variables take precedence over file configuration
        raw = _merge(raw, cls.from_env())
        if isinstance(override_settings, AppSettings):
            raw = _merge(raw, override_settings.dict(exclude_unset=True))
        elif override_settings:
            raw = _merge(raw, _plain(override_settings))
        return cls.parse_obj(raw)


def _plain(values: typing.Mapping[str, typing.Any]) -> typing.Dict[str, typing.Any]:
    return {k: _plain(v) if isinstance(v, typing.Mapping) else v for k, v in values.items()}


def _merge(
    a: typing.Dict[typing.Any, typing.Any],
    b: typing.Dict[typing.Any, typing.Any],
    path: typing.Optional[typing.List[str]] = None,
) -> typing.Dict[typing.Any, typing.Any]:
    """Merge dictionary b into dictionary a"""
    if path is None:
        path = []
    for key in b:
        if key in a and isinstance(a[key], dict) and isinstance(b[key], dict):
            _merge(a[key], b[key], path + [str(key)])
        else:
            a[key] = b[key]
    return a
