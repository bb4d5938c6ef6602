"""Sparse-to-dense map-matched trajectory recovery."""

from .config import RunConfig
from .encoder import AdaptedEncoder, OutputHeads, TransformerConfig, predict_slots
from .embedder import SlotFeaturizer
from .errors import (
    AlignmentError,
    ConfigError,
    DataError,
    IntegrityError,
    ParseError,
    TrainingError,
)
from .mapmatch import HmmParams, map_match
from .metrics import EvalReport, evaluate_recovery
from .model import ModelConfig, TrajectoryRecoveryModel, collate
from .prompts import GridMeta, PromptVocab, build_explicit_prompt, compute_flow_grid
from .roadnet import RoadNetwork, load_road_network
from .synth import SynthConfig, generate_network, generate_trajectories
from .trajdata import (
    MapMatchedTrajectory,
    Trajectory,
    TrajectoryRecord,
    UnifiedTrajectory,
    read_trajectories,
    sparsify,
    unify_intervals,
    write_trajectories,
)
from .training import (
    TrainConfig,
    build_examples,
    evaluate,
    finetune,
    load_checkpoint,
    save_checkpoint,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AdaptedEncoder",
    "AlignmentError",
    "ConfigError",
    "DataError",
    "EvalReport",
    "GridMeta",
    "HmmParams",
    "IntegrityError",
    "MapMatchedTrajectory",
    "ModelConfig",
    "OutputHeads",
    "ParseError",
    "PromptVocab",
    "RoadNetwork",
    "RunConfig",
    "SlotFeaturizer",
    "SynthConfig",
    "TrainConfig",
    "TrainingError",
    "Trajectory",
    "TrajectoryRecord",
    "TrajectoryRecoveryModel",
    "TransformerConfig",
    "UnifiedTrajectory",
    "build_examples",
    "build_explicit_prompt",
    "collate",
    "compute_flow_grid",
    "evaluate",
    "evaluate_recovery",
    "finetune",
    "generate_network",
    "generate_trajectories",
    "load_checkpoint",
    "load_road_network",
    "map_match",
    "predict_slots",
    "read_trajectories",
    "save_checkpoint",
    "sparsify",
    "train",
    "unify_intervals",
    "write_trajectories",
]
