"""Number format descriptors and round-to-nearest-even quantizers.

Three format families cover the arithmetic studied here:

* :class:`ExactHost` leaves values untouched (float64 carrier precision).
* :class:`FloatEmu` emulates a small IEEE-like binary float with a given
  exponent and mantissa width, including subnormals.  Out-of-range values
  saturate to the largest finite magnitude instead of producing infinities.
* :class:`FixedPoint` snaps values onto a signed two's-complement grid
  ``m * 2**(int_exp - width + 1)`` with ``m`` in ``[-2**(width-1),
  2**(width-1) - 1]``, saturating at the grid ends.

All quantizers round to nearest with ties to even and count how many input
entries exceeded the representable range (before saturation), both at the
current range and at half of it.  The half-range count is what a scaling
policy needs to decide whether a group could afford a smaller scale.

Values are carried in float64 throughout.  Every representable point of
every admissible format is exactly a float64, so quantization is exact and
idempotent by construction; the constructor limits below guarantee that.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

__all__ = [
    "ExactHost",
    "FloatEmu",
    "FixedPoint",
    "QuantFormat",
    "QuantResult",
    "quantize_value",
    "quantize_array",
    "representable_bounds",
    "decode_ieee_single",
    "parse_format",
    "format_to_str",
    "GridQuantizer",
]

# Carrier limits: float64 has a 53-bit significand, so fixed-point grids
# up to 32 bits and float mantissas up to 23 bits round-trip exactly.
MAX_FIXED_WIDTH = 32
MAX_FLOAT_MAN_BITS = 23
MAX_FLOAT_EXP_BITS = 11


# ---------------------------------------------------------------------------
# format descriptors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ExactHost:
    """Identity format: the float64 carrier itself."""


@dataclass(frozen=True)
class FloatEmu:
    """Binary floating-point format with ``exp_bits`` exponent bits and
    ``man_bits`` stored mantissa bits.

    The exponent bias defaults to ``2**(exp_bits-1) - 1`` as in IEEE 754.
    The top exponent code is reserved (as IEEE reserves it for inf/nan),
    so the largest finite value is ``(2 - 2**-man_bits) * 2**emax`` with
    ``emax = 2**exp_bits - 2 - bias``.  Subnormals fill in below
    ``2**(1 - bias)``.
    """

    exp_bits: int
    man_bits: int
    bias: int | None = None

    def __post_init__(self) -> None:
        if self.exp_bits < 2 or self.man_bits < 1:
            raise ValueError("degenerate format")
        if self.man_bits > MAX_FLOAT_MAN_BITS or self.exp_bits > MAX_FLOAT_EXP_BITS:
            raise ValueError(
                "format exceeds host carrier precision "
                f"(exp_bits <= {MAX_FLOAT_EXP_BITS}, man_bits <= {MAX_FLOAT_MAN_BITS})"
            )

    @property
    def effective_bias(self) -> int:
        return self.bias if self.bias is not None else (1 << (self.exp_bits - 1)) - 1

    @property
    def emin(self) -> int:
        """Exponent of the smallest normal binade."""
        return 1 - self.effective_bias

    @property
    def emax(self) -> int:
        """Exponent of the largest finite binade (top code is reserved)."""
        return (1 << self.exp_bits) - 2 - self.effective_bias

    @property
    def max_finite(self) -> float:
        return (2.0 - 2.0 ** -self.man_bits) * 2.0 ** self.emax

    @property
    def min_subnormal(self) -> float:
        return 2.0 ** (self.emin - self.man_bits)


@dataclass(frozen=True)
class FixedPoint:
    """Fixed-point grid of ``width`` bits including the sign.

    ``int_exp`` places the radix point: the largest representable
    magnitude is just under ``2**int_exp`` and the grid step is
    ``2**(int_exp - width + 1)``.  The grid is the usual asymmetric
    two's-complement range, one more point on the negative side.
    """

    width: int
    int_exp: int

    def __post_init__(self) -> None:
        if self.width < 2:
            raise ValueError("degenerate format")
        if self.width > MAX_FIXED_WIDTH:
            raise ValueError(f"format exceeds host carrier precision (width <= {MAX_FIXED_WIDTH})")

    @property
    def step(self) -> float:
        return 2.0 ** (self.int_exp - self.width + 1)

    @property
    def max_value(self) -> float:
        return ((1 << (self.width - 1)) - 1) * self.step

    @property
    def min_value(self) -> float:
        return -(1 << (self.width - 1)) * self.step


QuantFormat = Union[ExactHost, FloatEmu, FixedPoint]


class QuantResult(NamedTuple):
    """Quantized values plus range diagnostics.

    ``overflow_count`` is the number of input entries outside the
    representable interval; ``double_overflow_count`` counts entries whose
    double falls outside it, i.e. entries that would overflow a format
    with half the range.  Both are computed on the raw inputs, before
    saturation.
    """

    values: np.ndarray
    overflow_count: int
    double_overflow_count: int


# ---------------------------------------------------------------------------
# quantization
# ---------------------------------------------------------------------------

def _quantize_fixed(x: np.ndarray, fmt: FixedPoint) -> QuantResult:
    step = fmt.step
    hi = float((1 << (fmt.width - 1)) - 1)
    lo = -float(1 << (fmt.width - 1))
    hi_val = hi * step
    lo_val = lo * step
    # range test respects the asymmetric negative extreme: lo_val itself
    # is representable and does not count as overflow
    ovf = int(np.count_nonzero((x > hi_val) | (x < lo_val)))
    dbl = int(np.count_nonzero((x > 0.5 * hi_val) | (x < 0.5 * lo_val)))
    # x / step is a power-of-two scaling, hence exact; rint is ties-to-even
    m = np.clip(np.rint(x / step), lo, hi)
    return QuantResult(m * step, ovf, dbl)


def _quantize_float(x: np.ndarray, fmt: FloatEmu) -> QuantResult:
    max_finite = fmt.max_finite
    ax = np.abs(x)
    ovf = int(np.count_nonzero(ax > max_finite))
    dbl = int(np.count_nonzero(ax > 0.5 * max_finite))
    _, p = np.frexp(x)
    # frexp maps x to m * 2**p with m in [0.5, 1); the binade floor at emin
    # turns everything below the normal range into subnormal spacing
    binade = np.maximum(p - 1, fmt.emin)
    quantum = np.ldexp(1.0, binade - fmt.man_bits)
    q = np.rint(x / quantum) * quantum
    return QuantResult(np.clip(q, -max_finite, max_finite), ovf, dbl)


def quantize_array(x: np.ndarray, fmt: QuantFormat) -> QuantResult:
    """Quantize an array onto the grid of ``fmt``.

    Rounds to nearest, ties to even, and saturates out-of-range values at
    the grid ends (never wraps).  Raises ValueError on non-finite input.
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite value")
    if isinstance(fmt, ExactHost):
        return QuantResult(x.copy(), 0, 0)
    if isinstance(fmt, FixedPoint):
        return _quantize_fixed(x, fmt)
    if isinstance(fmt, FloatEmu):
        return _quantize_float(x, fmt)
    raise TypeError(f"not a quantization format: {fmt!r}")


def quantize_value(x: float, fmt: QuantFormat) -> float:
    """Scalar convenience wrapper around :func:`quantize_array`."""
    return float(quantize_array(np.asarray(float(x)), fmt).values)


def representable_bounds(fmt: QuantFormat) -> tuple[float, float, float]:
    """Return ``(lowest, highest, smallest positive)`` for a bounded format.

    ExactHost has no meaningful bounds and raises ValueError.
    """
    if isinstance(fmt, ExactHost):
        raise ValueError("unbounded format")
    if isinstance(fmt, FixedPoint):
        return (fmt.min_value, fmt.max_value, fmt.step)
    if isinstance(fmt, FloatEmu):
        return (-fmt.max_finite, fmt.max_finite, fmt.min_subnormal)
    raise TypeError(f"not a quantization format: {fmt!r}")


def decode_ieee_single(sign: int, exponent: int, mantissa: int) -> float:
    """Decode a normalized IEEE 754 single-precision triple.

    ``exponent`` is the raw biased field (1..254), ``mantissa`` the raw
    23-bit fraction field.  Returns
    ``(-1)**sign * (1 + mantissa / 2**23) * 2**(exponent - 127)``.
    """
    if sign not in (0, 1):
        raise ValueError("sign must be 0 or 1")
    if not 1 <= exponent <= 254:
        raise ValueError("exponent field out of normalized range")
    if not 0 <= mantissa < (1 << 23):
        raise ValueError("mantissa field out of range")
    significand = 1.0 + mantissa * 2.0 ** -23
    value = math.ldexp(significand, exponent - 127)
    return -value if sign else value


# ---------------------------------------------------------------------------
# descriptor grammar
# ---------------------------------------------------------------------------

def parse_format(text: str) -> QuantFormat:
    """Parse a format descriptor string.

    Grammar::

        exact                    carrier precision
        float:<exp>.<man>        e.g. float:5.10 for half precision
        fixed:<width>@<int_exp>  e.g. fixed:20@5 for 20 bits, radix after bit 5
    """
    s = text.strip()
    if s == "exact":
        return ExactHost()
    kind, sep, body = s.partition(":")
    if not sep:
        raise ValueError(f"bad format descriptor: {text!r}")
    try:
        if kind == "float":
            exp_s, _, man_s = body.partition(".")
            return FloatEmu(int(exp_s), int(man_s))
        if kind == "fixed":
            width_s, _, exp_s = body.partition("@")
            return FixedPoint(int(width_s), int(exp_s))
    except ValueError as err:
        raise ValueError(f"bad format descriptor: {text!r} ({err})") from None
    raise ValueError(f"bad format descriptor: {text!r}")


def format_to_str(fmt: QuantFormat) -> str:
    """Inverse of :func:`parse_format`."""
    if isinstance(fmt, ExactHost):
        return "exact"
    if isinstance(fmt, FloatEmu):
        return f"float:{fmt.exp_bits}.{fmt.man_bits}"
    if isinstance(fmt, FixedPoint):
        return f"fixed:{fmt.width}@{fmt.int_exp}"
    raise TypeError(f"not a quantization format: {fmt!r}")


# ---------------------------------------------------------------------------
# sklearn-style transformer
# ---------------------------------------------------------------------------

class GridQuantizer(TransformerMixin, BaseEstimator):
    """Stateless transformer that snaps features onto a number format grid.

    Parameters
    ----------
    fmt : str, default="exact"
        Format descriptor understood by :func:`parse_format`.

    Examples
    --------
    >>> GridQuantizer(fmt="fixed:8@5").fit_transform([[0.7, 100.0]])
    array([[ 0.75, 31.75]])
    """

    def __init__(self, fmt: str = "exact"):
        self.fmt = fmt

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        self.format_ = parse_format(self.fmt)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "format_")
        X = check_array(X, dtype=np.float64, ensure_all_finite=True)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(
                f"X has {X.shape[1]} features, expected {self.n_features_in_}"
            )
        return quantize_array(X, self.format_).values
