"""Gaussian-process kernel banks for vehicle trajectory prediction and
error-driven model-based communication."""

from .bank import (
    KernelBank,
    KernelBankBuilder,
    ModelSelection,
    RunMetrics,
    Scheme,
    Source,
    build_bank,
    compute_pte,
    integrate_position,
    persistency_stats,
    select_or_create,
)
from .exceptions import (
    CholeskyFailure,
    ConfigError,
    DataError,
    Empty,
    FitDegenerate,
    GapTooLarge,
    InsufficientHistory,
    KernelBankError,
    SchemaError,
    TooShort,
)
from .geo import ChannelExtractor, Trajectory, extract_channels, geodetic_to_enu, rank_trips
from .gp import FitConfig, GPRegressor, KernelSpec, TrainingWindow, fit_hyperparameters, posterior_predict
from .mbcsim import ChannelMetrics, PacketEvent, Receiver, Transmitter, simulate_link, sweep
from .synth import ManeuverScript, generate_corpus, generate_trip

__version__ = "0.1.0"

__all__ = [
    "CholeskyFailure",
    "ChannelExtractor",
    "ChannelMetrics",
    "ConfigError",
    "DataError",
    "Empty",
    "FitConfig",
    "FitDegenerate",
    "GPRegressor",
    "GapTooLarge",
    "InsufficientHistory",
    "KernelBank",
    "KernelBankBuilder",
    "KernelBankError",
    "KernelSpec",
    "ManeuverScript",
    "ModelSelection",
    "PacketEvent",
    "Receiver",
    "RunMetrics",
    "SchemaError",
    "Scheme",
    "Source",
    "TooShort",
    "TrainingWindow",
    "Trajectory",
    "Transmitter",
    "build_bank",
    "compute_pte",
    "extract_channels",
    "fit_hyperparameters",
    "generate_corpus",
    "generate_trip",
    "geodetic_to_enu",
    "integrate_position",
    "persistency_stats",
    "posterior_predict",
    "rank_trips",
    "select_or_create",
    "simulate_link",
    "sweep",
]
