"""Electrode grid, droplets and the fluidic spacing rules.

Two droplets that are not merging must keep a Chebyshev distance of at least
two, both between their positions after a step (static rule) and between one
droplet's new position and the other's old position (dynamic rule). Cells
reserved by a chain may only be entered by the chain's owner.
"""

from dataclasses import dataclass, field
from itertools import combinations
from typing import Optional

from .exceptions import BoundsError, ConstraintViolation, InvalidConfigError
from .geometry import Cell, Direction, chebyshev, manhattan
from .shifts import ShiftMove

MAX_SIDE = 64
MERGE_RADIUS = 2


@dataclass
class Droplet:
    id: str
    pos: Cell
    mix_pct: float = 0.0
    last_dir: Optional[Direction] = None
    linear_run: int = 0
    stall_count: int = 0
    history: list = field(default_factory=list)


@dataclass
class Chip:
    width: int
    height: int
    freq_hz: float = 16.0
    droplets: dict = field(default_factory=dict)
    # cell -> id of the chain owner allowed to enter it
    blocked: dict = field(default_factory=dict)
    # droplet id -> (group key, merge target)
    merge_groups: dict = field(default_factory=dict)
    t: int = 0

    @property
    def step_seconds(self):
        return 1.0 / self.freq_hz

    @property
    def occupancy(self):
        return {d.pos: d.id for d in self.droplets.values()}

    def in_bounds(self, c):
        return 1 <= c[0] <= self.width and 1 <= c[1] <= self.height

    def cells(self):
        return [Cell(x, y) for x in range(1, self.width + 1) for y in range(1, self.height + 1)]

    def add_droplet(self, droplet):
        if not self.in_bounds(droplet.pos):
            raise BoundsError(f"{droplet.id} at {droplet.pos} is off the chip")
        if droplet.id in self.droplets:
            raise InvalidConfigError(f"duplicate droplet id {droplet.id}")
        self.droplets[droplet.id] = droplet
        return droplet

    def remove_droplet(self, droplet_id):
        self.merge_groups.pop(droplet_id, None)
        return self.droplets.pop(droplet_id)

    def snapshot(self):
        """Hashable summary of positions, blocked cells and time (for equality checks)."""
        return (
            self.t,
            tuple(sorted((d.id, d.pos, d.mix_pct) for d in self.droplets.values())),
            tuple(sorted(self.blocked.items())),
        )


def new_chip(width, height, freq_hz=16.0):
    if not (isinstance(width, int) and isinstance(height, int)):
        raise InvalidConfigError("chip dimensions must be integers")
    if width < 1 or height < 1 or width > MAX_SIDE or height > MAX_SIDE:
        raise InvalidConfigError(f"chip {width}x{height} outside 1..{MAX_SIDE}")
    if not freq_hz > 0:
        raise InvalidConfigError(f"frequency must be positive, got {freq_hz}")
    return Chip(width, height, float(freq_hz))


def exempt(chip, a, b, pa, pb):
    """True if droplets ``a`` and ``b`` are co-merging and both sit near their target."""
    ga = chip.merge_groups.get(a)
    gb = chip.merge_groups.get(b)
    if ga is None or gb is None or ga[0] != gb[0]:
        return False
    target = ga[1]
    return manhattan(pa, target) <= MERGE_RADIUS and manhattan(pb, target) <= MERGE_RADIUS


def violations(chip, targets):
    """List of (id_a, id_b, rule) for every broken constraint under ``targets``."""
    pre = {i: d.pos for i, d in chip.droplets.items()}
    post = dict(pre)
    for i, c in targets.items():
        if i not in pre:
            raise LookupError(f"unknown droplet {i}")
        c = Cell(*c)
        if not chip.in_bounds(c):
            raise BoundsError(f"{i} target {c} is off the chip")
        if chebyshev(c, pre[i]) > 1 or (c.x != pre[i].x and c.y != pre[i].y):
            raise ValueError(f"{i} cannot reach {c} from {pre[i]} in one step")
        post[i] = c
    out = []
    for i, c in post.items():
        owner = chip.blocked.get(c)
        if owner is not None and owner != i:
            out.append((i, owner, "blocked"))
    for a, b in combinations(sorted(post), 2):
        if chebyshev(post[a], post[b]) < 2 and not exempt(chip, a, b, post[a], post[b]):
            out.append((a, b, "static"))
            continue
        if chebyshev(post[a], pre[b]) < 2 and not exempt(chip, a, b, post[a], pre[b]):
            out.append((a, b, "dynamic"))
            continue
        if chebyshev(pre[a], post[b]) < 2 and not exempt(chip, a, b, pre[a], post[b]):
            out.append((a, b, "dynamic"))
    return out


def fluidic_ok(chip, moves):
    """True iff moving droplets to ``moves`` (id -> target cell) keeps every rule."""
    return not violations(chip, moves)


def _target(droplet, move):
    if move is None:
        return droplet.pos
    if isinstance(move, ShiftMove):
        if move.steps != 1 and move.dir is not None:
            raise ValueError(f"{move} spans {move.steps} steps; decompose it first")
        move = move.dir
        if move is None:
            return droplet.pos
    return droplet.pos.step(move)


def apply_moves(chip, moves):
    """Advance the chip one time-step, moving droplets atomically.

    ``moves`` maps droplet id to a Direction, a single-step ShiftMove, or None
    for a stall. Droplets not mentioned hold position. On any violation the
    chip is left untouched and ConstraintViolation is raised.
    """
    targets = {}
    for i, m in moves.items():
        if i not in chip.droplets:
            raise LookupError(f"unknown droplet {i}")
        targets[i] = _target(chip.droplets[i], m)
    bad = violations(chip, targets)
    if bad:
        raise ConstraintViolation(f"t={chip.t}: {bad}", bad)
    for i, c in targets.items():
        chip.droplets[i].pos = c
    chip.t += 1
    return chip
