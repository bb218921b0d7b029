"""Time-parameterized convolutions for irregularly sampled multivariate time series."""

from .errors import ConfigError, NumericsError, ParseError, ShapeError, UsageError, ValidationError
from .numerics import Rng, finite_diff_grad
from .timefuncs import ActivationId, KernelParams, TimeFunctionId, kernel_value
from .tpc import IrregularBatch, TpcConfig, count_params, tpc_backward, tpc_forward
from .models import ModelConfig, TpcnnModel

__version__ = "0.1.0"
