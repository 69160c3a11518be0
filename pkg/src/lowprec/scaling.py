"""Per-group dynamic range management for fixed-point training.

Each tensor family that shares a fixed-point scale (a layer's weights, its
weighted sums, the gradients of those, ...) is a :class:`ScaleGroup`.  The
group accumulates overflow statistics from every quantization it sees, and
a :class:`ScalingPolicy` periodically turns those statistics into exponent
moves: grow the range when the group overflows too often, shrink it when
even half the range would almost never overflow.

Calibration (picking the initial exponents from an exact-precision trace)
and the plain-text exponent file interchange live here too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .formats import QuantResult

__all__ = [
    "ScaleGroup",
    "ScalingPolicy",
    "apply_policy",
    "policy_step",
    "calibrate_exponent",
    "write_exponent_file",
    "read_exponent_file",
    "load_exponents",
]

# Exponents beyond this magnitude indicate a runaway policy feedback loop;
# the grids themselves stay representable far past it, so this is a guard,
# not a carrier limit.
EXPONENT_LIMIT = 30


@dataclass
class ScaleGroup:
    """A named tensor family with a shared fixed-point exponent.

    ``exponent`` is the ``int_exp`` of the group's grid.  ``element_count``,
    ``overflow_count`` and ``double_overflow_count`` accumulate over the
    current observation window and reset when a policy is applied.
    """

    group_id: str
    exponent: int = 0
    element_count: int = 0
    overflow_count: int = 0
    double_overflow_count: int = 0

    def record(self, result: QuantResult) -> None:
        """Fold one quantization's diagnostics into the running window."""
        self.element_count += int(result.values.size)
        self.overflow_count += result.overflow_count
        self.double_overflow_count += result.double_overflow_count

    def reset_window(self) -> None:
        self.element_count = 0
        self.overflow_count = 0
        self.double_overflow_count = 0

    @property
    def overflow_rate(self) -> float:
        return self.overflow_count / self.element_count if self.element_count else 0.0

    @property
    def double_overflow_rate(self) -> float:
        return (
            self.double_overflow_count / self.element_count
            if self.element_count
            else 0.0
        )


@dataclass(frozen=True)
class ScalingPolicy:
    """Exponent update rule driven by overflow rates.

    ``max_overflow_rate`` is the tolerated fraction of overflowing entries;
    ``period`` is the number of training examples between applications.
    """

    max_overflow_rate: float = 1e-4
    period: int = 10_000

    def __post_init__(self) -> None:
        if self.max_overflow_rate < 0:
            raise ValueError("max_overflow_rate must be non-negative")
        if self.period < 1:
            raise ValueError("period must be positive")


def policy_step(
    overflow_rate: float, double_overflow_rate: float, max_rate: float
) -> int:
    """Exponent increment for one group: +1, -1 or 0.

    Grow the range when the observed overflow rate exceeds the tolerance.
    Otherwise shrink it when even the half-range overflow rate (the rate
    the group would see with the exponent one lower) is within tolerance.
    """
    if overflow_rate > max_rate:
        return 1
    if double_overflow_rate <= max_rate:
        return -1
    return 0


def apply_policy(group: ScaleGroup, policy: ScalingPolicy) -> int:
    """Apply one policy step to ``group`` and reset its window.

    Returns the exponent increment that was applied.  Exponents are
    clamped to ``[-EXPONENT_LIMIT, EXPONENT_LIMIT]``.
    """
    if group.element_count == 0:
        raise ValueError(f"no statistics for scale group {group.group_id!r}")
    step = policy_step(
        group.overflow_rate, group.double_overflow_rate, policy.max_overflow_rate
    )
    new_exp = group.exponent + step
    if new_exp > EXPONENT_LIMIT:
        new_exp = EXPONENT_LIMIT
    elif new_exp < -EXPONENT_LIMIT:
        new_exp = -EXPONENT_LIMIT
    step = new_exp - group.exponent
    group.exponent = new_exp
    group.reset_window()
    return step


def calibrate_exponent(max_abs: float) -> int:
    """Initial exponent for a group whose largest observed magnitude is
    ``max_abs``: one spare bit above the observed range.

    An all-zero trace gives exponent 0.
    """
    if not math.isfinite(max_abs) or max_abs < 0:
        raise ValueError("max_abs must be finite and non-negative")
    if max_abs == 0.0:
        return 0
    exp = math.ceil(math.log2(max_abs)) + 1
    return max(-EXPONENT_LIMIT, min(EXPONENT_LIMIT, exp))


# ---------------------------------------------------------------------------
# exponent file interchange
# ---------------------------------------------------------------------------

def write_exponent_file(path: str | Path, groups: Iterable[ScaleGroup]) -> None:
    """Dump group exponents as tab-separated ``group_id<TAB>exponent`` lines."""
    lines = [f"{g.group_id}\t{g.exponent}\n" for g in groups]
    Path(path).write_text("".join(lines), encoding="ascii")


def read_exponent_file(path: str | Path) -> dict[str, int]:
    """Parse a file written by :func:`write_exponent_file`."""
    table: dict[str, int] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="ascii").splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        name, sep, exp_s = line.partition("\t")
        if not sep or not name:
            raise ValueError(f"{path}: line {lineno}: expected group_id<TAB>exponent")
        try:
            table[name] = int(exp_s)
        except ValueError:
            raise ValueError(f"{path}: line {lineno}: bad exponent {exp_s!r}") from None
    return table


def load_exponents(groups: Mapping[str, ScaleGroup], table: Mapping[str, int]) -> None:
    """Assign exponents from ``table`` onto matching groups.

    Unknown group ids in the table are an error; groups missing from the
    table keep their current exponent.
    """
    for name, exp in table.items():
        if name not in groups:
            raise ValueError(f"unknown scale group: {name}")
        groups[name].exponent = int(exp)
