"""Low-precision multiplier emulation for maxout network training.

The package separates what hardware would keep narrow (multiplier
operands: parameters, activations, gradients) from what it would keep
wide (accumulators), quantizing the former onto small float or
fixed-point grids while sums run in the float64 carrier.  Dynamic fixed
point gives every tensor family its own scale, adapted from overflow
rates during training.
"""

from .formats import (
    ExactHost,
    FixedPoint,
    FloatEmu,
    GridQuantizer,
    QuantFormat,
    QuantResult,
    decode_ieee_single,
    format_to_str,
    parse_format,
    quantize_array,
    quantize_value,
    representable_bounds,
)
from .network import MaxoutClassifier, MaxoutNetwork, Stager, TrainSettings
from .scaling import ScaleGroup, ScalingPolicy
from .tensor import Rng, qmatmul

__version__ = "0.1.0"

__all__ = [
    "ExactHost",
    "FixedPoint",
    "FloatEmu",
    "QuantFormat",
    "QuantResult",
    "quantize_value",
    "quantize_array",
    "representable_bounds",
    "decode_ieee_single",
    "parse_format",
    "format_to_str",
    "GridQuantizer",
    "ScaleGroup",
    "ScalingPolicy",
    "Rng",
    "qmatmul",
    "MaxoutNetwork",
    "MaxoutClassifier",
    "Stager",
    "TrainSettings",
    "__version__",
]
