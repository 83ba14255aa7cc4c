"""Distilling autoregressive routing policies into non-autoregressive students.

Modules: ``problem`` (instances, tours, validation, TSPLIB), ``oracle``
(reference solvers), ``diffmath`` (differentiable blocks, Adam, checkpoints),
``teacher`` (autoregressive policy and its training), ``student`` (one-pass
successor scorer), ``distill`` (guided knowledge distillation), ``search``
(masked decoding) and ``harness`` (evaluation, benchmarks, pipeline).
"""

from .errors import (
    ConfigError,
    DegenerateMaskError,
    FeasibilityError,
    InvalidArgument,
    NonFiniteError,
    ParseError,
    SizeLimitError,
    StateError,
    TrainingError,
    UnsupportedFormat,
)
from .problem import Kind, Tour, VrpInstance, generate, make_dataset, parse_tsplib, tour_length, validate_tour

__version__ = "0.1.0"
