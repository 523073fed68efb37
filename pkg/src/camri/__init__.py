"""Class-sensitive loss functions with a small numpy classifier and experiment harness."""

from camri.errors import (
    CamriError,
    ConfigError,
    ConvergenceError,
    DegenerateNormError,
    FormatError,
    InvalidInputError,
    TrainingDivergenceError,
    UndefinedRecallError,
)
from camri.losses import (
    LOSS_KINDS,
    HeadContext,
    LossOutput,
    PenaltyConfig,
    build_penalty_config,
    loss_eval,
)

__version__ = "0.1.0"

__all__ = [
    "CamriError",
    "ConfigError",
    "ConvergenceError",
    "DegenerateNormError",
    "FormatError",
    "InvalidInputError",
    "TrainingDivergenceError",
    "UndefinedRecallError",
    "LOSS_KINDS",
    "HeadContext",
    "LossOutput",
    "PenaltyConfig",
    "build_penalty_config",
    "loss_eval",
]
