"""Shift taxonomy and mixing calculus.

A mixer droplet moves one electrode per time-step. Runs of moves are
labelled as shifts:

* ``Z1``/``Z2``/``Z3`` -- one, two or three consecutive straight steps,
* ``X`` -- a single step turning 90 degrees from the last direction,
* ``Y`` -- a single step reversing the last direction,
* ``STALL`` -- holding position for one step.

Each completed shift contributes a fixed mixing gain (percent). At most
three straight steps may follow each other, so a ``Z3`` is always followed by
a turn.
"""

from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Optional

from .exceptions import DegenerateInputError, LegalityError
from .geometry import Direction


class ShiftKind(str, Enum):
    X = "X"
    Y = "Y"
    Z1 = "Z1"
    Z2 = "Z2"
    Z3 = "Z3"
    STALL = "STALL"

    @property
    def gain(self):
        return GAINS[self]

    @property
    def steps(self):
        return STEPS[self]

    @property
    def linear(self):
        return self in LINEAR

    def __str__(self):
        return self.value


GAINS = {
    ShiftKind.X: 0.625,
    ShiftKind.Y: -2.5,
    ShiftKind.Z1: 1.875,
    ShiftKind.Z2: 5.0,
    ShiftKind.Z3: 15.0,
    ShiftKind.STALL: 0.0,
}
STEPS = {
    ShiftKind.X: 1,
    ShiftKind.Y: 1,
    ShiftKind.Z1: 1,
    ShiftKind.Z2: 2,
    ShiftKind.Z3: 3,
    ShiftKind.STALL: 1,
}
LINEAR = frozenset({ShiftKind.Z1, ShiftKind.Z2, ShiftKind.Z3})
Z_BY_LENGTH = {1: ShiftKind.Z1, 2: ShiftKind.Z2, 3: ShiftKind.Z3}
MAX_LINEAR_RUN = 3

# Highest first.
PRECEDENCE = (
    ShiftKind.Z3,
    ShiftKind.Z2,
    ShiftKind.Z1,
    ShiftKind.X,
    ShiftKind.STALL,
    ShiftKind.Y,
)
_RANK = {k: i for i, k in enumerate(PRECEDENCE)}


@dataclass(frozen=True)
class ShiftMove:
    kind: ShiftKind
    dir: Optional[Direction] = None

    def __post_init__(self):
        if (self.kind is ShiftKind.STALL) != (self.dir is None):
            raise ValueError(f"{self.kind} with direction {self.dir}")

    @property
    def steps(self):
        return STEPS[self.kind]

    @property
    def gain(self):
        return GAINS[self.kind]

    def primitive_steps(self):
        """Per-time-step cardinal moves (None for a stall)."""
        return [self.dir] * self.steps

    def __str__(self):
        if self.dir is None:
            return self.kind.value
        return f"{self.kind.value}:{self.dir.name}"


STALL = ShiftMove(ShiftKind.STALL)


@dataclass(frozen=True)
class ModuleSpec:
    rows: int
    cols: int
    active_cells: int
    padding_cells: int
    mix_seconds: float


# Mixing modules available to module-based synthesis, fastest last.
MODULE_LIBRARY = {
    "1x4": ModuleSpec(1, 4, 4, 14, 4.6),
    "2x2": ModuleSpec(2, 2, 4, 12, 9.95),
    "2x3": ModuleSpec(2, 3, 6, 14, 6.1),
    "2x4": ModuleSpec(2, 4, 8, 16, 2.9),
}


def shift_gain(kind):
    return GAINS[ShiftKind(kind)]


def check_legal(seq):
    """Raise LegalityError at the first shift that makes the straight run exceed 3."""
    run = 0
    for i, s in enumerate(seq):
        kind = s.kind if isinstance(s, ShiftMove) else ShiftKind(s)
        if kind in LINEAR:
            run += STEPS[kind]
            if run > MAX_LINEAR_RUN:
                raise LegalityError(
                    f"shift {i} ({kind}) extends a straight run to {run} steps", i
                )
        elif kind is not ShiftKind.STALL:
            run = 0


def sequence_gain(seq, cap=100.0):
    """Total gain (clamped to ``cap``) and time-steps of a legal shift sequence."""
    check_legal(seq)
    total = 0.0
    steps = 0
    for s in seq:
        kind = s.kind if isinstance(s, ShiftMove) else ShiftKind(s)
        total += GAINS[kind]
        steps += STEPS[kind]
    return min(total, cap), steps


def precedence(a, b):
    """-1 if ``a`` is preferred over ``b``, 1 if ``b`` is preferred, 0 if equal."""
    ra, rb = _RANK[ShiftKind(a)], _RANK[ShiftKind(b)]
    return (ra > rb) - (ra < rb)


def efficiency(kind):
    kind = ShiftKind(kind)
    return GAINS[kind] / STEPS[kind]


def lagrange_quadratic(points):
    """Exact coefficients ``(a, b, c)`` of the quadratic through three points."""
    pts = [(Fraction(x), Fraction(y)) for x, y in points]
    if len(pts) != 3:
        raise DegenerateInputError("exactly three points are required")
    xs = [p[0] for p in pts]
    if len(set(xs)) != 3:
        raise DegenerateInputError(f"duplicate x values in {xs}")
    a = b = c = Fraction(0)
    for i, (xi, yi) in enumerate(pts):
        others = [xs[j] for j in range(3) if j != i]
        denom = (xi - others[0]) * (xi - others[1])
        w = yi / denom
        a += w
        b -= w * (others[0] + others[1])
        c += w * others[0] * others[1]
    return a, b, c


def evaluate_quadratic(coeffs, x):
    a, b, c = coeffs
    x = Fraction(x)
    return a * x * x + b * x + c


# Rounded module completion times keyed by module length (2xN modules).
MODULE_TIME_POINTS = ((2, 10), (3, 6), (4, 3))


def max_feasible_module_length(points=MODULE_TIME_POINTS):
    """Largest module length whose extrapolated mixing time stays positive."""
    coeffs = lagrange_quadratic(points)
    n = max(p[0] for p in points)
    while evaluate_quadratic(coeffs, n + 1) > 0:
        n += 1
    return n


def _transitions(run, gains):
    # (steps, gain, next_run) for every shift legal from straight-run state `run`.
    out = []
    for k in (1, 2, 3):
        if run + k <= MAX_LINEAR_RUN:
            kind = Z_BY_LENGTH[k]
            out.append((STEPS[kind], gains[kind], run + k))
    out.append((1, gains[ShiftKind.X], 0))
    out.append((1, gains[ShiftKind.Y], 0))
    out.append((1, gains[ShiftKind.STALL], run))
    return out


def min_completion_steps(freq_hz=16.0, gains=None, target=100.0, limit=1000):
    """Fewest time-steps in which a legal shift sequence reaches ``target`` percent.

    Dynamic programme over (elapsed steps, straight-run length) keeping the best
    attainable gain. Gains are per shift, so ``freq_hz`` only rescales seconds;
    multiply the result by ``1 / freq_hz`` for a duration.
    """
    if freq_hz <= 0:
        raise ValueError("frequency must be positive")
    gains = dict(GAINS if gains is None else gains)
    key = tuple(sorted((k.value, v) for k, v in gains.items()))
    return _min_steps(key, float(target), limit)


@lru_cache(maxsize=64)
def _min_steps(gain_key, target, limit):
    gains = {ShiftKind(k): v for k, v in gain_key}
    neg = float("-inf")
    best = [[neg] * (MAX_LINEAR_RUN + 1) for _ in range(limit + 1)]
    best[0][0] = 0.0
    for s in range(limit + 1):
        for run in range(MAX_LINEAR_RUN + 1):
            g = best[s][run]
            if g == neg:
                continue
            if g >= target - 1e-9:
                return s
            for dt, dg, nrun in _transitions(run, gains):
                if s + dt <= limit and g + dg > best[s + dt][nrun]:
                    best[s + dt][nrun] = g + dg
    raise ValueError(f"target {target}% unreachable within {limit} steps")
