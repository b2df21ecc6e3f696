"""Continuous motion field estimation for point cloud sequences."""
from .errors import SceneFlowError
from .flow import Direction, FlowField, NeuralPrior, Trajectory, extract_flow_field, extract_track
from .geometry import Frame, PointCloud, PointCloudSequence, RigidPose
from .metrics import MetricReport, evaluate
from .network import MLPConfig, MLPParams
from .settings import AppSettings
from .trainer import TrainConfig, TrainLog, fit

__all__ = [
    "AppSettings",
    "Direction",
    "FlowField",
    "Frame",
    "MLPConfig",
    "MLPParams",
    "MetricReport",
    "NeuralPrior",
    "PointCloud",
    "PointCloudSequence",
    "RigidPose",
    "SceneFlowError",
    "TrainConfig",
    "TrainLog",
    "Trajectory",
    "evaluate",
    "extract_flow_field",
    "extract_track",
    "fit",
]
