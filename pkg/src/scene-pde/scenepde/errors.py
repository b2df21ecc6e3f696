"""Typed errors raised by the library.

Each error class carries the exit code used by the command line interface and a
short description of the failure family.
"""
import pathlib
import typing


class SceneFlowError(Exception):
    code = 3
    details = "Runtime error"


class UsageError(SceneFlowError):
    code = 1
    details = "Invalid usage"


class DataError(SceneFlowError):
    code = 2
    details = "Invalid data"


class DatasetFormatError(DataError):
    details = "Malformed dataset file"

    def __init__(
        self,
        path: typing.Union[str, pathlib.Path],
        field: str,
        reason: str,
    ) -> None:
        self.path = pathlib.Path(path)
        self.field = field
        self.reason = reason
        super().__init__(f"{self.path}: {field}: {reason}")


class GeometryError(SceneFlowError):
    details = "Invalid geometry"


class NetworkError(SceneFlowError):
    details = "Invalid network input or parameters"


class IntegrationError(SceneFlowError):
    details = "Invalid integration request"


class LossError(SceneFlowError):
    details = "Invalid loss input"


class TrainingError(SceneFlowError):
    details = "Training failed"


class MetricError(SceneFlowError):
    details = "Invalid metric input"
