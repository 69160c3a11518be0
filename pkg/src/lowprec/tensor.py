"""Deterministic tensor primitives: counter-based RNG and ordered matmul.

Reproducibility here means bit-for-bit: the same seed must give the same
bytes on any platform.  Two things threaten that in practice, BLAS
summation order and global RNG state, and this module removes both.

The multiply-accumulate contract is that ``qmatmul`` accumulates each output
entry over the inner index in ascending order, in float64.  A vectorized
BLAS call is only allowed to replace that loop when it provably cannot
change a single bit: for fixed-point operands every product is an integer
multiple of a common quantum, and as long as ``n * 2**(2*(width-1))`` fits
in float64's 53-bit significand every partial sum is exact, making all
summation orders identical.  Everything else goes through an explicitly
ordered kernel (numba-compiled when available, a numpy rank-1 update loop
otherwise; both are bit-identical to the scalar triple loop).
"""

from __future__ import annotations

import numpy as np

from .formats import (
    ExactHost,
    FixedPoint,
    QuantFormat,
    QuantResult,
    quantize_array,
)
from .scaling import ScaleGroup

try:  # pragma: no cover - absence is exercised via the fallback path
    import numba
except ImportError:  # pragma: no cover
    numba = None

__all__ = [
    "Rng",
    "mix64",
    "qmatmul",
    "matmul_ordered",
    "accumulation_is_exact",
    "add",
    "multiply",
    "maximum",
    "scale",
    "strict_grid_checks",
    "grid_checks_enabled",
]


# ---------------------------------------------------------------------------
# splitmix64 counter-based generator
# ---------------------------------------------------------------------------

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U53 = 2.0 ** -53


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def mix64(value: int) -> int:
    """Scalar splitmix64 finalizer, handy for deriving stream keys."""
    with np.errstate(over="ignore"):
        return int(_mix(np.uint64(value & 0xFFFFFFFFFFFFFFFF)))


class Rng:
    """Counter-mode splitmix64 stream.

    The state is a 64-bit counter advanced by a fixed odd constant; outputs
    are the mixed counter values.  Draws are vectorized and platform
    independent, and ``split`` derives an independent child stream so that
    (for example) weight initialization and dropout never share state.
    """

    def __init__(self, seed: int):
        self._state = np.uint64(seed & 0xFFFFFFFFFFFFFFFF)

    def _raw(self, n: int) -> np.ndarray:
        with np.errstate(over="ignore"):
            idx = np.arange(1, n + 1, dtype=np.uint64)
            block = _mix(self._state + idx * _GOLDEN)
            self._state = self._state + np.uint64(n) * _GOLDEN
        return block

    def state(self) -> int:
        return int(self._state)

    def set_state(self, value: int) -> None:
        self._state = np.uint64(value & 0xFFFFFFFFFFFFFFFF)

    def split(self) -> "Rng":
        """Derive an independent child stream, advancing this one."""
        return Rng(int(self._raw(1)[0]))

    def uniform(self, shape: tuple[int, ...], low: float = 0.0, high: float = 1.0) -> np.ndarray:
        """Uniform draws in [low, high) with 53-bit resolution."""
        if not low < high:
            raise ValueError(f"invalid bounds: low {low!r} must be below high {high!r}")
        n = int(np.prod(shape)) if shape else 1
        u = (self._raw(n) >> np.uint64(11)).astype(np.float64) * _U53
        return (low + (high - low) * u).reshape(shape)

    def bernoulli(self, shape: tuple[int, ...], p: float) -> np.ndarray:
        """0/1 float64 array with P(1) = p."""
        if not 0.0 <= p <= 1.0:
            raise ValueError(f"invalid bounds: p {p!r} must be in [0, 1]")
        return (self.uniform(shape) < p).astype(np.float64)

    def permutation(self, n: int) -> np.ndarray:
        """Deterministic permutation of range(n) via random sort keys."""
        keys = self._raw(n)
        return np.argsort(keys, kind="stable")

    def integers(self, shape: tuple[int, ...], low: int, high: int) -> np.ndarray:
        """Integer draws in [low, high) (by scaled uniform, fine for data
        synthesis; not for cryptography or exact equidistribution)."""
        u = self.uniform(shape)
        return (low + np.floor(u * (high - low))).astype(np.int64)


# ---------------------------------------------------------------------------
# ordered matrix multiplication
# ---------------------------------------------------------------------------

if numba is not None:

    @numba.njit(cache=True, fastmath=False)
    def _mm_kernel(a, b, out):  # pragma: no cover - compiled
        rows, inner = a.shape
        cols = b.shape[1]
        for i in range(rows):
            for j in range(cols):
                acc = 0.0
                for k in range(inner):
                    acc += a[i, k] * b[k, j]
                out[i, j] = acc


def matmul_ordered(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product accumulated in ascending inner-index order.

    Bit-identical to the scalar triple loop regardless of backend.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} x {b.shape}")
    out = np.empty((a.shape[0], b.shape[1]), dtype=np.float64)
    if numba is not None:
        _mm_kernel(a, b, out)
    else:
        out[:] = 0.0
        for k in range(a.shape[1]):
            out += a[:, k, None] * b[None, k, :]
    return out


def accumulation_is_exact(fmt_a: QuantFormat, fmt_b: QuantFormat, inner: int) -> bool:
    """True when every partial sum of a product of grids is exact in float64.

    Fixed-point operands of widths wa, wb have integer mantissas bounded by
    2**(wa-1) and 2**(wb-1); the sum of ``inner`` products then needs at
    most ``wa - 1 + wb - 1 + ceil(log2(inner))`` mantissa bits.  When that
    fits in 53 bits, every summation order gives the identical result and a
    BLAS call is safe.
    """
    if not (isinstance(fmt_a, FixedPoint) and isinstance(fmt_b, FixedPoint)):
        return False
    if inner < 1:
        return True
    need = (fmt_a.width - 1) + (fmt_b.width - 1) + (inner - 1).bit_length()
    return need <= 53


# Optional verification that qmatmul operands really are on their stated
# grids.  Costs a pass per operand, so it is a debug/test switch.
_STRICT_GRID = False


class strict_grid_checks:
    """Context manager enabling operand grid verification in qmatmul."""

    def __enter__(self):
        global _STRICT_GRID
        self._prev = _STRICT_GRID
        _STRICT_GRID = True
        return self

    def __exit__(self, *exc):
        global _STRICT_GRID
        _STRICT_GRID = self._prev
        return False


def grid_checks_enabled() -> bool:
    return _STRICT_GRID


def _check_on_grid(x: np.ndarray, fmt: QuantFormat, name: str) -> None:
    q = quantize_array(x, fmt).values
    if not np.array_equal(q, x):
        raise ValueError(f"{name} operand is not on its stated grid")


def qmatmul(
    a: np.ndarray,
    b: np.ndarray,
    fmt_in: QuantFormat | tuple[QuantFormat, QuantFormat],
    fmt_out: QuantFormat,
    group: ScaleGroup | None = None,
) -> QuantResult:
    """Quantized matrix product: low-precision operands, exact float64
    accumulation in ascending inner order, one output quantization.

    ``fmt_in`` states the operand format (a pair when the two operands sit
    on different grids, as with dynamically scaled activations against
    weights).  Operands must already be quantized; with
    :class:`strict_grid_checks` active this is verified.  Output
    quantization statistics are recorded into ``group`` when given.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"shape mismatch for matmul: {a.shape} x {b.shape}")
    fmt_a, fmt_b = fmt_in if isinstance(fmt_in, tuple) else (fmt_in, fmt_in)
    if _STRICT_GRID:
        _check_on_grid(a, fmt_a, "left")
        _check_on_grid(b, fmt_b, "right")
    if accumulation_is_exact(fmt_a, fmt_b, a.shape[1]):
        acc = a @ b
    else:
        acc = matmul_ordered(a, b)
    if not np.all(np.isfinite(acc)):
        raise FloatingPointError("accumulator overflow")
    result = quantize_array(acc, fmt_out)
    if group is not None:
        group.record(result)
    return result


# ---------------------------------------------------------------------------
# shape-checked elementwise ops
# ---------------------------------------------------------------------------

def _binary(a: np.ndarray, b: np.ndarray, op) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return op(a, b)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise sum; shapes must match exactly (no broadcasting)."""
    return _binary(a, b, np.add)


def multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise (Hadamard) product; shapes must match exactly."""
    return _binary(a, b, np.multiply)


def maximum(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise maximum; shapes must match exactly."""
    return _binary(a, b, np.maximum)


def scale(a: np.ndarray, c: float) -> np.ndarray:
    """Multiply by a scalar."""
    return np.asarray(a, dtype=np.float64) * float(c)
