"""Conditional IMLE trajectory generation for sampling-based MPC."""

from .costs import CostConfig, cbf_penalty, clf_cost, cost_gradient, deviation_penalty, total_cost
from .diffusion import DiffusionGenerator, NoiseSchedule, linear_schedule, reverse_sample, train_ddpm
from .exceptions import (
    CheckpointError,
    CheckpointVersionError,
    ConfigurationError,
    DatasetFormatError,
    DimensionError,
    ImlePlanError,
    NumericError,
    RawParseError,
    TimerResolutionError,
    TrainingDivergedError,
)
from .generator import GeneratorDims, GeneratorParams, init_params, load_checkpoint, save_checkpoint
from .imle import IMLEGenerator, TrainConfig, exponential_weights, linear_weights, train
from .metrics import collision_rate, goal_error, jerk, sampling_frequency, smoothness
from .planners import (
    GaussianAroundPrevious,
    IMLEProposal,
    MPCPlanner,
    MPPIConfig,
    StraightLine,
    mppi_step,
    mppi_weights,
    receding_horizon_run,
    score_rank_select,
)
from .simdata import Scene, generate_bimodal_dataset, generate_navigation_dataset, make_crossing_scenes
from .trajectory import Context, Dataset, Trajectory, WeightedSample, load_dataset, save_dataset

__version__ = "0.1.0"
