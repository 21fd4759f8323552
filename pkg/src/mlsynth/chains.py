"""Chained mixing: a mixer locks itself into a 2x5 ring and cycles Z3-X-X.

While a chain is active the ring plus its one-cell halo is reserved for the
owner, so nobody else can come close enough to contaminate it and the owner
never has to check for neighbours. Chained mixes need no washing.
"""

from dataclasses import dataclass, field

from .exceptions import IntegrityError
from .geometry import Cell, chebyshev, halo
from .shifts import ShiftKind, ShiftMove

CHAIN_TTL = 32
RING_LENGTH = 5
# Extra clearance (cells) between a reserved ring and any other droplet.
CHAIN_MARGIN = 1
MIX_KINDS = {"X", "Y", "Z1", "Z2", "Z3", "STALL"}


@dataclass
class Chain:
    owner: str
    footprint: frozenset
    orientation: str
    cycle: tuple
    expiry: int
    pattern_phase: int = 0
    reserved: frozenset = field(default=frozenset())

    def next_move(self):
        return self.cycle[self.pattern_phase % len(self.cycle)]

    def advance(self):
        self.pattern_phase += 1


def _row(start, d, n):
    out = [start]
    for _ in range(n - 1):
        out.append(out[-1].step(d))
    return out


def _candidates(pos, z, width, height):
    """(footprint cells, cycle) options for a droplet at ``pos`` that just ran Z3 along ``z``.

    The ring either extends back over the Z3 segment plus the cell behind it,
    or forward from the current cell. Each may lie on either side.
    """
    sides = sorted(
        z.perpendicular(),
        key=lambda s: (-_room(pos, s, width, height), s.name),
    )
    back = z.opposite
    out = []
    for ahead in (False, True):
        row = _row(pos, z if ahead else back, RING_LENGTH)
        for s in sides:
            cells = row + [c.step(s) for c in row]
            if ahead:
                cycle = (ShiftMove(ShiftKind.X, s), ShiftMove(ShiftKind.X, z), ShiftMove(ShiftKind.Z3, z),
                         ShiftMove(ShiftKind.X, s.opposite), ShiftMove(ShiftKind.X, back),
                         ShiftMove(ShiftKind.Z3, back))
            else:
                cycle = (ShiftMove(ShiftKind.X, s), ShiftMove(ShiftKind.X, back), ShiftMove(ShiftKind.Z3, back),
                         ShiftMove(ShiftKind.X, s.opposite), ShiftMove(ShiftKind.X, z),
                         ShiftMove(ShiftKind.Z3, z))
            out.append((cells, cycle))
    return out


def _room(pos, d, width, height):
    if d.dx > 0:
        return width - pos.x
    if d.dx < 0:
        return pos.x - 1
    if d.dy > 0:
        return height - pos.y
    return pos.y - 1


def try_form_chain(chip, d, reservations=None, now=None):
    """Chain for droplet ``d`` right after its opening Z3, or None if no ring fits.

    ``reservations`` maps other droplet ids to their committed future cells;
    a ring is only taken when its halo is clear of all of them and of other
    chains' reserved cells.
    """
    hist = d.history
    if len(hist) != 1 or hist[0].kind is not ShiftKind.Z3:
        return None
    now = chip.t if now is None else now
    w, h = chip.width, chip.height
    others = []
    for oid, o in chip.droplets.items():
        if oid != d.id:
            others.append(o.pos)
    for oid, traj in (reservations or {}).items():
        if oid != d.id:
            others.extend(traj)
    for cells, cycle in _candidates(d.pos, hist[0].dir, w, h):
        if not all(chip.in_bounds(c) for c in cells):
            continue
        if any(chip.blocked.get(c, d.id) != d.id for c in cells):
            continue
        zone = halo(cells, w, h)
        if any(chebyshev(o, z) <= CHAIN_MARGIN for o in others for z in zone):
            continue
        orient = "horizontal" if hist[0].dir.horizontal else "vertical"
        return Chain(d.id, frozenset(cells), orient, cycle, now + CHAIN_TTL, 0, frozenset(zone))
    return None


def chain_step(chain, d):
    """Next move of the fixed cycle; the droplet must be inside its ring."""
    if d.pos not in chain.footprint:
        raise IntegrityError(f"{d.id} at {d.pos} left its chain footprint")
    move = chain.next_move()
    end = d.pos
    for _ in range(move.steps):
        end = end.step(move.dir)
        if end not in chain.footprint:
            raise IntegrityError(f"{d.id}: {move} from {d.pos} would leave the chain")
    return move


def wash_stats(trace):
    """(w_path, m_path, ratio) from trace records.

    m_path counts every cell moved into by a mixing droplet. w_path counts, per
    unchained mix, the distinct cells it touched while mixing; chained mixes
    leave no residue outside their ring and contribute nothing.
    """
    chained = set()
    visited = {}
    m_path = 0
    last = {}
    for rec in trace:
        chained.update(rec.get("chains", ()))
        for did, x, y, kind, _pct in rec["droplets"]:
            cell = (x, y)
            if kind in MIX_KINDS:
                cells = visited.setdefault(did, set())
                if not cells and did in last:
                    cells.add(last[did])
                cells.add(cell)
                if kind != "STALL" and last.get(did) != cell:
                    m_path += 1
            last[did] = cell
    w_path = sum(len(c) for did, c in visited.items() if did not in chained)
    ratio = w_path / m_path if m_path else 0.0
    return w_path, m_path, ratio
