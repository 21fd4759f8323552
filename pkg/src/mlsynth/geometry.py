"""Cells and cardinal directions on a 1-based electrode grid."""

from enum import Enum
from typing import NamedTuple


class Cell(NamedTuple):
    x: int
    y: int

    def step(self, d):
        return Cell(self.x + d.dx, self.y + d.dy)

    def __str__(self):
        return f"({self.x},{self.y})"


class Direction(Enum):
    DOWN = (0, -1)
    LEFT = (-1, 0)
    RIGHT = (1, 0)
    UP = (0, 1)

    @property
    def dx(self):
        return self.value[0]

    @property
    def dy(self):
        return self.value[1]

    @property
    def opposite(self):
        return _OPPOSITE[self]

    @property
    def horizontal(self):
        return self.dy == 0

    def perpendicular(self):
        if self.horizontal:
            return (Direction.DOWN, Direction.UP)
        return (Direction.LEFT, Direction.RIGHT)

    @classmethod
    def between(cls, a, b):
        """Direction of a unit step from ``a`` to ``b``, or None if not a unit step."""
        return _BY_DELTA.get((b[0] - a[0], b[1] - a[1]))


_OPPOSITE = {
    Direction.DOWN: Direction.UP,
    Direction.UP: Direction.DOWN,
    Direction.LEFT: Direction.RIGHT,
    Direction.RIGHT: Direction.LEFT,
}
_BY_DELTA = {d.value: d for d in Direction}

# Lexicographic order by name; used as the last tie-break everywhere.
DIRECTIONS = tuple(sorted(Direction, key=lambda d: d.name))


def chebyshev(a, b):
    return max(abs(a[0] - b[0]), abs(a[1] - b[1]))


def manhattan(a, b):
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def neighbors4(c, width, height):
    out = []
    for d in DIRECTIONS:
        n = c.step(d)
        if 1 <= n.x <= width and 1 <= n.y <= height:
            out.append(n)
    return out


def halo(cells, width, height):
    """Cells within Chebyshev distance 1 of any cell in ``cells``, clipped to the grid."""
    out = set()
    for c in cells:
        for dx in (-1, 0, 1):
            for dy in (-1, 0, 1):
                x, y = c[0] + dx, c[1] + dy
                if 1 <= x <= width and 1 <= y <= height:
                    out.add(Cell(x, y))
    return out
