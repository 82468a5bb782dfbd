"""Mixed-precision compression toolkit for factored feed-forward networks.

Single-threaded BLAS keeps small-matrix results bit-reproducible across
worker pools; set before numpy first loads.
"""

import os as _os

for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, "1")

from .errors import (  # noqa: E402
    CheckpointError,
    ConfigError,
    DataError,
    InfeasibleBudgetError,
    MixprecError,
    NumericError,
    ShapeError,
)
from .model import FactoredLayer, Network, TrainConfig, forward, train  # noqa: E402
from .quant import QuantTable, build_table, optimize_scale, quantize_model  # noqa: E402
from .rng import Rng  # noqa: E402

__all__ = [
    "CheckpointError",
    "ConfigError",
    "DataError",
    "FactoredLayer",
    "InfeasibleBudgetError",
    "MixprecError",
    "Network",
    "NumericError",
    "QuantTable",
    "Rng",
    "ShapeError",
    "TrainConfig",
    "build_table",
    "forward",
    "optimize_scale",
    "quantize_model",
    "train",
]
