from ._version import __version__  # noqa

from .config import ExperimentConfig, load_config
from .env import DoubleIntegrator, LinearMotion, Obstacle, ObstacleAvoidanceEnv, World
from .mpc import CbfMpc, MpcConfig, default_theta
from .nlp import NlpSolver, NlpSpec, SolverConfig, SolveStatus
from .preset_registry import SAFE_MPCRL_PRESETS
from .theta import ThetaVector
from .trainer import QLearningTrainer, TrainerConfig, run_training

__all__ = [
    "CbfMpc",
    "DoubleIntegrator",
    "ExperimentConfig",
    "LinearMotion",
    "MpcConfig",
    "NlpSolver",
    "NlpSpec",
    "Obstacle",
    "ObstacleAvoidanceEnv",
    "QLearningTrainer",
    "SAFE_MPCRL_PRESETS",
    "SolveStatus",
    "SolverConfig",
    "ThetaVector",
    "TrainerConfig",
    "World",
    "__version__",
    "default_theta",
    "load_config",
    "run_training",
]
