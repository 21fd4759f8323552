"""Where fresh droplets are dispensed onto the chip."""

from .exceptions import InfeasibleConfigError
from .geometry import Cell, chebyshev

SEED_SPACING = 3


def _boundary(w, h):
    return [Cell(x, y) for x in range(1, w + 1) for y in range(1, h + 1)
            if x in (1, w) or y in (1, h)]


def _anchors(w, h):
    corners = [Cell(1, 1), Cell(w, 1), Cell(1, h), Cell(w, h)]
    mx, my = (w + 1) // 2, (h + 1) // 2
    mids = [Cell(mx, 1), Cell(mx, h), Cell(1, my), Cell(w, my)]
    out = []
    for c in corners + mids:
        if c not in out:
            out.append(c)
    return out


def _farthest(candidates, chosen, spacing):
    best, best_d = None, -1
    for c in candidates:
        d = min((chebyshev(c, o) for o in chosen), default=10**6)
        if d >= spacing and d > best_d:
            best, best_d = c, d
    return best


def seed_cells(w, h, n, occupied=(), spacing=SEED_SPACING):
    """``n`` dispense cells: corners, then edge midpoints, then spread along the
    boundary and finally the interior, all at least ``spacing`` apart.

    Raises InfeasibleConfigError when the chip cannot host ``n`` spaced droplets.
    """
    chosen = []
    taken = list(occupied)
    for c in _anchors(w, h):
        if len(chosen) == n:
            return chosen
        if all(chebyshev(c, o) >= spacing for o in taken + chosen):
            chosen.append(c)
    edge = _boundary(w, h)
    inner = [Cell(x, y) for x in range(2, w) for y in range(2, h)]
    for pool in (edge, inner):
        while len(chosen) < n:
            c = _farthest(pool, taken + chosen, spacing)
            if c is None:
                break
            chosen.append(c)
    if len(chosen) < n:
        raise InfeasibleConfigError(
            f"a {w}x{h} chip holds only {len(chosen)} droplets spaced {spacing} apart, need {n}"
        )
    return chosen


def free_cell(w, h, occupied, spacing=2, prefer=None):
    """A cell at least ``spacing`` from every occupied cell, farthest from them
    (closest to ``prefer`` when given); None if there is none."""
    best, best_key = None, None
    for x in range(1, w + 1):
        for y in range(1, h + 1):
            c = Cell(x, y)
            d = min((chebyshev(c, o) for o in occupied), default=10**6)
            if d < spacing:
                continue
            if prefer is not None:
                key = (abs(x - prefer[0]) + abs(y - prefer[1]), -d, x, y)
            else:
                key = (-d, x, y)
            if best_key is None or key < best_key:
                best, best_key = c, key
    return best
