"""Mixing loops: 5x5 square circuits shared by up to four mixers.

A mixer that enters a loop one cell past a corner runs three cells to the
next corner (Z3), turns (X) and runs the next side (Z3), and so on: the
fastest legal mixing pattern there is. Four mixers spaced a side apart can
circle the same loop in lockstep without ever coming closer than three
cells. Loops one cell apart never interfere either.

Which loops to open and which mixer takes which seat is a small
satisfiability problem solved here.
"""

from ..exceptions import SolverTimeout
from ..geometry import Cell, Direction, chebyshev, manhattan
from .cnf import CnfProblem
from .solver import solve

SIDE = 5
# counter-clockwise headings of the four sides: bottom, right, top, left
_CYCLE = (Direction.RIGHT, Direction.UP, Direction.LEFT, Direction.DOWN)


class Loop:
    def __init__(self, x0, y0):
        self.x0, self.y0 = x0, y0
        x1, y1 = x0 + SIDE - 1, y0 + SIDE - 1
        self.cells = frozenset(
            Cell(x, y) for x in range(x0, x1 + 1) for y in range(y0, y1 + 1)
            if x in (x0, x1) or y in (y0, y1)
        )
        # seat: (cell one past a corner, heading of that side)
        self.seats = (
            (Cell(x0 + 1, y0), Direction.RIGHT),
            (Cell(x1, y0 + 1), Direction.UP),
            (Cell(x1 - 1, y1), Direction.LEFT),
            (Cell(x0, y1 - 1), Direction.DOWN),
        )

    @property
    def key(self):
        return (self.x0, self.y0)

    def clashes(self, other):
        return not (self.x0 + SIDE < other.x0 or other.x0 + SIDE < self.x0
                    or self.y0 + SIDE < other.y0 or other.y0 + SIDE < self.y0)

    def __repr__(self):
        return f"Loop{self.key}"


def circuit(heading, steps):
    """Moves of a mixer leaving its seat along ``heading`` for ``steps`` steps."""
    out = []
    k = _CYCLE.index(heading)
    run = 3
    while len(out) < steps:
        out.extend([_CYCLE[k]] * run)
        k = (k + 1) % 4
        run = 4
    return out[:steps]


def candidate_loops(chip, obstacles=()):
    """Every loop on the chip whose cells keep clear of ``obstacles`` and chain cells."""
    out = []
    for x0 in range(1, chip.width - SIDE + 2):
        for y0 in range(1, chip.height - SIDE + 2):
            loop = Loop(x0, y0)
            if any(c in chip.blocked for c in loop.cells):
                continue
            if any(chebyshev(c, o) < 2 for c in loop.cells for o in obstacles):
                continue
            out.append(loop)
    return out


def assign_seats(loops, starts, reach=None, conflict_limit=20000):
    """Seat for as many mixers as possible: ``{droplet id: (loop, cell, heading)}``.

    ``starts`` maps droplet ids to their cells; a seat farther than ``reach``
    (Manhattan) is not considered. Mixers are dropped one at a time, last id
    first among those in the unsatisfiable core, until the rest fit.
    """
    ids = list(starts)
    while ids:
        p = CnfProblem(objective="feasibility")
        open_ = {lp.key: p.var(("U",) + lp.key) for lp in loops}
        seat_vars = {}
        chosen = {}
        for i in ids:
            sel = p.var(("want", i))
            opts = []
            for lp in loops:
                for k, (cell, heading) in enumerate(lp.seats):
                    if reach is not None and manhattan(starts[i], cell) > reach:
                        continue
                    v = p.var(("A", i) + lp.key + (k,))
                    seat_vars.setdefault((lp.key, k), []).append(v)
                    opts.append(v)
                    chosen[v] = (i, lp, cell, heading)
                    p.add(-v, open_[lp.key])
            p.add(-sel, *opts)
            p.at_most_one(opts)
        for vs in seat_vars.values():
            p.at_most_one(vs)
        for a in range(len(loops)):
            for b in range(a + 1, len(loops)):
                if loops[a].clashes(loops[b]):
                    p.add(-open_[loops[a].key], -open_[loops[b].key])
        # a seat that is taken must not sit next to another mixer's start
        for v, (i, lp, cell, _h) in chosen.items():
            for j in ids:
                if j != i and chebyshev(starts[j], cell) < 2:
                    p.add(-v)
        wants = [p.lookup(("want", i)) for i in ids]
        try:
            r = solve(p, assumptions=wants, conflict_limit=conflict_limit)
        except SolverTimeout:
            return {}
        if r.sat:
            out = {}
            for v, (i, lp, cell, heading) in chosen.items():
                if r.value(v):
                    out[i] = (lp, cell, heading)
            return out
        core = [i for i, w in zip(ids, wants) if w in r.core] or ids
        ids.remove(core[-1])
    return {}
